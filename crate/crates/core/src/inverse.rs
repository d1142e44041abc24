//! Variational inverse model `r(x | y)`.
//!
//! Latent prior `r(z | y)`, decoder `r(x | z, y)` and recognition
//! `q(z | x, y)`. Training conditions can come from a trained forward model
//! (the proposed scheme), from stored pairs, from the low-fidelity process,
//! or from a mix; the architecture and optimizer are the same in every case.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    elbo_values, stack_rows, train_latent, BatchSampler, LatentNets, Layout, NetConfig, Trace,
    TrainConfig,
};
use crate::data::PairedDataset;
use crate::degrade::{apply_lowfid, output_shape, DegradationSpec};
use crate::error::{ensure, Error, Result};
use crate::forward::ForwardModel;
use crate::image::{Image, Measurement, MeasurementShape};
use crate::nn::rng::tag;
use crate::nn::{Checkpoint, Real, RngStream};

pub const CHECKPOINT_KIND: &str = "inverse_model";
const SALT: u64 = 2;

pub fn inverse_layout() -> Layout {
    Layout {
        blocks: vec!["x".into(), "y".into()],
        prior: vec![1],
        recognition: vec![0, 1],
        decoder_before: vec![],
        decoder_after: vec![1],
        target: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseMeta {
    pub x_shape: (usize, usize),
    pub y_shape: MeasurementShape,
    pub latent_dim: usize,
    /// Where training measurements came from.
    pub source: String,
    pub layout: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InverseModel<F> {
    pub nets: LatentNets<F>,
    pub x_shape: (usize, usize),
    pub y_shape: MeasurementShape,
}

/// Posterior draws for one measurement with their per-pixel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub samples: Vec<Image>,
    pub measurement: Measurement,
    pub mean: Image,
    /// Population standard deviation over `samples`.
    pub std: Image,
}

impl PosteriorSamples {
    pub fn from_samples(samples: Vec<Image>, measurement: Measurement) -> Result<Self> {
        ensure!(!samples.is_empty(), InvalidInput, "no posterior samples");
        let (h, w) = (samples[0].height(), samples[0].width());
        let n = samples.len() as f64;
        let mut mean = vec![0.0; h * w];
        for s in &samples {
            ensure!(
                s.same_shape(&samples[0]),
                InvalidInput,
                "samples differ in shape"
            );
            for (m, v) in mean.iter_mut().zip(s.data()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; h * w];
        for s in &samples {
            for ((a, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
                *a += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|a| (a / n).sqrt()).collect();
        Ok(PosteriorSamples {
            mean: Image::new(h, w, mean)?,
            std: Image::new(h, w, std)?,
            samples,
            measurement,
        })
    }

    pub fn mean_std(&self) -> f64 {
        self.std.data().iter().sum::<f64>() / self.std.len() as f64
    }
}

impl<F: Real> InverseModel<F> {
    pub fn init(
        cfg: &NetConfig,
        x_shape: (usize, usize),
        y_shape: MeasurementShape,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let widths = [x_shape.0 * x_shape.1, y_shape.len()];
        Ok(InverseModel {
            nets: LatentNets::init(cfg, &inverse_layout(), &widths, rng)?,
            x_shape,
            y_shape,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.nets.latent_dim
    }

    fn check_y(&self, y: &Measurement) -> Result<()> {
        ensure!(
            y.shape() == self.y_shape,
            InvalidInput,
            "measurement has shape {:?}, model expects {:?}",
            y.shape(),
            self.y_shape
        );
        Ok(())
    }

    pub fn y_block(&self, ys: &[&Measurement]) -> Result<Array2<F>> {
        for y in ys {
            self.check_y(y)?;
        }
        let rows: Vec<&[f64]> = ys.iter().map(|y| y.data()).collect();
        stack_rows(&rows)
    }

    pub fn x_block(&self, xs: &[&Image]) -> Result<Array2<F>> {
        for x in xs {
            ensure!(
                (x.height(), x.width()) == self.x_shape,
                InvalidInput,
                "target is {}x{}, model expects {:?}",
                x.height(),
                x.width(),
                self.x_shape
            );
        }
        let rows: Vec<&[f64]> = xs.iter().map(|x| x.data()).collect();
        stack_rows(&rows)
    }

    /// Single-sample ELBO with `z` drawn from the recognition network using
    /// noise from `rng`.
    pub fn vici_elbo(&self, x: &Image, y: &Measurement, rng: &mut RngStream) -> Result<f64> {
        let eps = rng.normals(self.latent_dim());
        Ok(self.vici_elbo_parts(x, y, &eps)?.0)
    }

    /// `(elbo, kl, loglik)` for a given latent noise vector.
    pub fn vici_elbo_parts(
        &self,
        x: &Image,
        y: &Measurement,
        eps: &[f64],
    ) -> Result<(f64, f64, f64)> {
        Ok(self.elbo_batch(&[x], &[y], &[eps])?[0])
    }

    /// Per-example `(elbo, kl, loglik)` with one noise vector per example.
    pub fn elbo_batch(
        &self,
        xs: &[&Image],
        ys: &[&Measurement],
        eps: &[&[f64]],
    ) -> Result<Vec<(f64, f64, f64)>> {
        ensure!(
            xs.len() == ys.len() && ys.len() == eps.len(),
            InvalidInput,
            "batch of {} targets, {} measurements, {} noise vectors",
            xs.len(),
            ys.len(),
            eps.len()
        );
        ensure!(
            eps.iter().all(|e| e.len() == self.latent_dim()),
            InvalidInput,
            "noise length does not match latent dimension {}",
            self.latent_dim()
        );
        let blocks = vec![self.x_block(xs)?, self.y_block(ys)?];
        elbo_values(&self.nets, &inverse_layout(), &blocks, stack_rows(eps)?)
    }

    /// Prior mean of `z`, then decoder mean of `x`.
    pub fn pseudo_max(&self, y: &Measurement) -> Result<Image> {
        Ok(self.pseudo_max_batch(&[y])?.remove(0))
    }

    pub fn pseudo_max_batch(&self, ys: &[&Measurement]) -> Result<Vec<Image>> {
        let yb = self.y_block(ys)?;
        let views = [yb.view(), yb.view()];
        let layout = inverse_layout();
        let (mz, _) = self.nets.prior_moments(&layout, &views)?;
        let (mx, _) = self.nets.decode(&layout, &views, mz.view())?;
        self.rows_to_images(&mx)
    }

    fn rows_to_images(&self, rows: &Array2<F>) -> Result<Vec<Image>> {
        rows.rows()
            .into_iter()
            .map(|r| {
                Image::new(
                    self.x_shape.0,
                    self.x_shape.1,
                    r.iter().map(|v| v.as_f64()).collect(),
                )
            })
            .collect()
    }

    /// `n` two-step draws: `z` from the prior, then `x` from the decoder.
    pub fn posterior_sample(
        &self,
        y: &Measurement,
        n: usize,
        rng: &mut RngStream,
    ) -> Result<PosteriorSamples> {
        ensure!(n >= 1, InvalidInput, "need at least one posterior sample");
        let yb = self.y_block(&[y])?;
        let rep = Array2::from_shape_fn((n, yb.ncols()), |(_, j)| yb[[0, j]]);
        let views = [rep.view(), rep.view()];
        let layout = inverse_layout();
        let (mz, lz) = self.nets.prior_moments(&layout, &views)?;
        let z = draw_shared(&mz, &lz, rng);
        let (mx, lx) = self.nets.decode(&layout, &views, z.view())?;
        let x = draw_shared(&mx, &lx, rng);
        PosteriorSamples::from_samples(self.rows_to_images(&x)?, y.clone())
    }

    pub fn meta(&self, source: &str) -> InverseMeta {
        InverseMeta {
            x_shape: self.x_shape,
            y_shape: self.y_shape,
            latent_dim: self.latent_dim(),
            source: source.to_string(),
            layout: inverse_layout().describe(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, source: &str) -> Result<Checkpoint<F>> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            seed,
            serde_json::to_value(self.meta(source))?,
            self.nets.networks(),
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<(Self, InverseMeta)> {
        ensure!(
            ck.manifest.kind == CHECKPOINT_KIND,
            InvalidInput,
            "checkpoint kind {:?} is not an inverse model",
            ck.manifest.kind
        );
        let meta: InverseMeta = serde_json::from_value(ck.manifest.meta.clone())?;
        let model = InverseModel {
            nets: LatentNets::from_networks(&ck.networks)?,
            x_shape: meta.x_shape,
            y_shape: meta.y_shape,
        };
        model.nets.check_blocks(
            &inverse_layout(),
            &[meta.x_shape.0 * meta.x_shape.1, meta.y_shape.len()],
        )?;
        Ok((model, meta))
    }
}

/// Row-major draw with all noise from one stream.
fn draw_shared<F: Real>(mean: &Array2<F>, log_var: &Array2<F>, rng: &mut RngStream) -> Array2<F> {
    let half = F::from_f64_lossy(0.5);
    let mut out = mean.clone();
    for (o, &lv) in out.iter_mut().zip(log_var.iter()) {
        *o += (lv * half).exp() * F::from_f64_lossy(rng.normal());
    }
    out
}

/// How often a mixed batch draws from the paired set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MixRatio {
    /// In proportion to the paired and unpaired set sizes.
    #[default]
    Proportional,
    /// Half of each batch from each source.
    Even,
}

/// Where the conditioning measurement of each training target comes from.
#[derive(Debug, Clone, Copy)]
pub enum ConditionSource<'a, F> {
    /// Draws from a trained forward model on unpaired targets.
    ForwardModel {
        unpaired: &'a [Image],
        model: &'a ForwardModel<F>,
        lowfid: &'a DegradationSpec,
    },
    /// Stored measurements of the paired set.
    Paired(&'a PairedDataset),
    /// The low-fidelity process applied to unpaired targets.
    Simulated {
        unpaired: &'a [Image],
        lowfid: &'a DegradationSpec,
    },
    /// Stored pairs together with simulated unpaired targets.
    Mixed {
        paired: &'a PairedDataset,
        unpaired: &'a [Image],
        lowfid: &'a DegradationSpec,
        mix: MixRatio,
    },
}

impl<'a, F: Real> ConditionSource<'a, F> {
    pub fn name(&self) -> &'static str {
        match self {
            ConditionSource::ForwardModel { .. } => "forward_model",
            ConditionSource::Paired(_) => "paired_only",
            ConditionSource::Simulated { .. } => "simulated_only",
            ConditionSource::Mixed { .. } => "paired_plus_simulated",
        }
    }

    fn shapes(&self) -> Result<((usize, usize), MeasurementShape)> {
        let first = |xs: &[Image]| -> Result<(usize, usize)> {
            xs.first()
                .map(|x| (x.height(), x.width()))
                .ok_or_else(|| Error::Config("no training targets".into()))
        };
        match self {
            ConditionSource::ForwardModel {
                unpaired, model, ..
            } => {
                let xs = first(unpaired)?;
                ensure!(
                    xs == model.x_shape,
                    Config,
                    "unpaired targets are {xs:?}, forward model expects {:?}",
                    model.x_shape
                );
                Ok((xs, model.y_shape))
            }
            ConditionSource::Paired(p) => Ok((first(&p.x)?, p.y[0].shape())),
            ConditionSource::Simulated { unpaired, lowfid } => {
                let xs = first(unpaired)?;
                Ok((xs, output_shape(lowfid, xs.0, xs.1)?))
            }
            ConditionSource::Mixed {
                paired,
                unpaired,
                lowfid,
                ..
            } => {
                let xs = first(&paired.x)?;
                ensure!(!unpaired.is_empty(), Config, "no unpaired targets");
                let sim = output_shape(lowfid, xs.0, xs.1)?;
                ensure!(
                    sim == paired.y[0].shape(),
                    Config,
                    "simulated measurements {sim:?} do not match stored ones {:?}",
                    paired.y[0].shape()
                );
                Ok((xs, sim))
            }
        }
    }

    fn pool_len(&self) -> usize {
        match self {
            ConditionSource::ForwardModel { unpaired, .. }
            | ConditionSource::Simulated { unpaired, .. } => unpaired.len(),
            ConditionSource::Paired(p) => p.len(),
            ConditionSource::Mixed {
                paired, unpaired, ..
            } => paired.len() + unpaired.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseTrainConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
}

/// Trains an inverse model with conditions from `source`. A fresh
/// measurement is drawn for every visit of a target; the draw for batch slot
/// `b` of iteration `i` uses the stream `(seed, MEASURE, i, b)`.
pub fn train_conditional<F: Real>(
    source: &ConditionSource<'_, F>,
    cfg: &InverseTrainConfig,
    seed: u64,
) -> Result<(InverseModel<F>, Trace)> {
    cfg.train.validate()?;
    let (x_shape, y_shape) = source.shapes()?;
    if let ConditionSource::Paired(p) = source {
        ensure!(
            p.len() >= cfg.train.batch_size,
            Config,
            "{} paired examples is fewer than the batch size {}",
            p.len(),
            cfg.train.batch_size
        );
    }
    let mut rng = RngStream::derive(seed, &[tag::INIT, SALT]);
    let mut model = InverseModel::<F>::init(&cfg.net, x_shape, y_shape, &mut rng)?;
    let shell = model.clone();
    let bs = cfg.train.batch_size;
    let mut sampler = BatchSampler::new(source.pool_len(), seed, SALT);
    let mut even = match source {
        ConditionSource::Mixed {
            paired,
            unpaired,
            mix: MixRatio::Even,
            ..
        } => Some((
            BatchSampler::new(paired.len(), seed, SALT + 100),
            BatchSampler::new(unpaired.len(), seed, SALT + 200),
        )),
        _ => None,
    };
    let trace = train_latent(
        &mut model.nets,
        &inverse_layout(),
        &cfg.train,
        seed,
        SALT,
        "train-inverse",
        |it| {
            let mut rngs: Vec<RngStream> = (0..bs)
                .map(|b| RngStream::derive(seed, &[tag::MEASURE, it as u64, b as u64]))
                .collect();
            let (xs, yb): (Vec<&Image>, Array2<F>) = match source {
                ConditionSource::ForwardModel {
                    unpaired,
                    model,
                    lowfid,
                } => {
                    let xs: Vec<&Image> = sampler
                        .batch(it, bs)
                        .into_iter()
                        .map(|i| &unpaired[i])
                        .collect();
                    let yb = model.sample_rows(lowfid, &xs, &mut rngs)?;
                    (xs, yb)
                }
                ConditionSource::Paired(p) => {
                    let idx = sampler.batch(it, bs);
                    let ys: Vec<&Measurement> = idx.iter().map(|&i| &p.y[i]).collect();
                    (idx.iter().map(|&i| &p.x[i]).collect(), shell.y_block(&ys)?)
                }
                ConditionSource::Simulated { unpaired, lowfid } => {
                    let xs: Vec<&Image> = sampler
                        .batch(it, bs)
                        .into_iter()
                        .map(|i| &unpaired[i])
                        .collect();
                    let ys = simulate(lowfid, &xs, &mut rngs)?;
                    let refs: Vec<&Measurement> = ys.iter().collect();
                    (xs, shell.y_block(&refs)?)
                }
                ConditionSource::Mixed {
                    paired,
                    unpaired,
                    lowfid,
                    ..
                } => {
                    // Slots index the concatenation paired ‖ unpaired.
                    let slots: Vec<usize> = match even.as_mut() {
                        Some((ps, us)) => {
                            let half = bs / 2;
                            let mut s = ps.batch(it, half);
                            s.extend(
                                us.batch(it, bs - half)
                                    .into_iter()
                                    .map(|i| i + paired.len()),
                            );
                            s
                        }
                        None => sampler.batch(it, bs),
                    };
                    let mut xs = Vec::with_capacity(bs);
                    let mut ys = Vec::with_capacity(bs);
                    for (&s, r) in slots.iter().zip(rngs.iter_mut()) {
                        if s < paired.len() {
                            xs.push(&paired.x[s]);
                            ys.push(paired.y[s].clone());
                        } else {
                            let x = &unpaired[s - paired.len()];
                            xs.push(x);
                            ys.push(apply_lowfid(lowfid, x, r)?);
                        }
                    }
                    let refs: Vec<&Measurement> = ys.iter().collect();
                    (xs, shell.y_block(&refs)?)
                }
            };
            Ok(vec![shell.x_block(&xs)?, yb])
        },
    )?;
    Ok((model, trace))
}

fn simulate(
    lowfid: &DegradationSpec,
    xs: &[&Image],
    rngs: &mut [RngStream],
) -> Result<Vec<Measurement>> {
    xs.iter()
        .zip(rngs.iter_mut())
        .map(|(x, r)| apply_lowfid(lowfid, x, r))
        .collect()
}

/// The proposed scheme: unpaired targets with measurements drawn from a
/// trained forward model.
pub fn train_inverse<F: Real>(
    unpaired: &[Image],
    forward: &ForwardModel<F>,
    lowfid: &DegradationSpec,
    cfg: &InverseTrainConfig,
    seed: u64,
) -> Result<(InverseModel<F>, Trace)> {
    ensure!(!unpaired.is_empty(), Config, "no unpaired targets");
    train_conditional(
        &ConditionSource::ForwardModel {
            unpaired,
            model: forward,
            lowfid,
        },
        cfg,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, AdamConfig};

    fn small(j: usize) -> NetConfig {
        NetConfig {
            hidden: vec![5],
            activation: Activation::Tanh,
            latent_dim: j,
        }
    }

    fn model() -> InverseModel<f64> {
        InverseModel::init(
            &small(2),
            (2, 2),
            MeasurementShape::image(2, 2),
            &mut RngStream::new(8, 0),
        )
        .unwrap()
    }

    fn meas(v: f64) -> Measurement {
        Image::new(2, 2, vec![v, 0.5, 0.25, 0.0])
            .unwrap()
            .to_measurement()
    }

    /// Decoder output depends only on its bias.
    fn z_free(mut m: InverseModel<f64>, mean: &[f64], log_var: f64) -> InverseModel<f64> {
        m.nets
            .decoder
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let last = m.nets.decoder.spec().num_layers() - 1;
        let b = m.nets.decoder.bias_mut(last);
        b[..4].copy_from_slice(mean);
        b[4..].iter_mut().for_each(|v| *v = log_var);
        m
    }

    #[test]
    fn perfect_decoder_gives_gaussian_constant() {
        let x = [0.1, 0.9, 0.4, 0.0];
        let mut m = z_free(model(), &x, 0.0);
        m.nets
            .prior
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        m.nets
            .recognition
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let xi = Image::new(2, 2, x.to_vec()).unwrap();
        let (e, kl, _) = m.vici_elbo_parts(&xi, &meas(0.3), &[1.0, -0.5]).unwrap();
        assert_eq!(kl, 0.0);
        assert!((e + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        let a = m
            .vici_elbo(&xi, &meas(0.3), &mut RngStream::new(2, 2))
            .unwrap();
        assert_eq!(
            a,
            m.vici_elbo(&xi, &meas(0.3), &mut RngStream::new(2, 2))
                .unwrap()
        );
    }

    #[test]
    fn pseudo_max_of_z_free_decoder_is_its_mean() {
        let m = z_free(model(), &[0.1, 0.2, 0.3, 0.4], -3.0);
        let p = m.pseudo_max(&meas(0.7)).unwrap();
        assert_eq!(p.data(), &[0.1, 0.2, 0.3, 0.4]);
        let q = model();
        assert_eq!(
            q.pseudo_max(&meas(0.7)).unwrap(),
            q.pseudo_max(&meas(0.7)).unwrap()
        );
        assert!(q.pseudo_max(&Image::zeros(3, 3).to_measurement()).is_err());
    }

    #[test]
    fn posterior_statistics() {
        let m = model();
        let one = m
            .posterior_sample(&meas(0.2), 1, &mut RngStream::new(0, 0))
            .unwrap();
        assert!(one.std.data().iter().all(|&s| s == 0.0));
        assert_eq!(one.mean, one.samples[0]);
        let tight = z_free(model(), &[0.1, 0.2, 0.3, 0.4], -10.0);
        let ps = tight
            .posterior_sample(&meas(0.2), 50, &mut RngStream::new(0, 1))
            .unwrap();
        for s in &ps.samples {
            for (v, m) in s.data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
                assert!((v - m).abs() < 3.0 * (-5.0f64).exp() * 3.0);
            }
        }
        assert!(ps.std.data().iter().all(|&s| (0.0..0.02).contains(&s)));
        assert!(m
            .posterior_sample(&meas(0.2), 0, &mut RngStream::new(0, 0))
            .is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = model();
        let ck = m.to_checkpoint(4, "forward_model").unwrap();
        let (back, meta) = InverseModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta.source, "forward_model");
        assert_eq!(
            meta.layout["decoder_input"],
            serde_json::json!(["latent", "y"])
        );
    }

    fn cfg(iterations: usize, batch_size: usize) -> InverseTrainConfig {
        InverseTrainConfig {
            net: small(2),
            train: TrainConfig {
                iterations,
                batch_size,
                adam: AdamConfig::default(),
            },
        }
    }

    #[test]
    fn zero_iterations_and_small_paired_sets() {
        let xs: Vec<Image> = (0..3)
            .map(|i| Image::filled(2, 2, i as f64 / 3.0))
            .collect();
        let ys = xs.iter().map(|x| x.to_measurement()).collect();
        let p = PairedDataset::new(xs.clone(), ys).unwrap();
        let (m, t) = train_conditional::<f64>(&ConditionSource::Paired(&p), &cfg(0, 2), 1).unwrap();
        assert!(t.rows.is_empty());
        let init = InverseModel::<f64>::init(
            &small(2),
            (2, 2),
            MeasurementShape::image(2, 2),
            &mut RngStream::derive(1, &[tag::INIT, SALT]),
        )
        .unwrap();
        assert_eq!(m, init);
        let r = train_conditional::<f64>(&ConditionSource::Paired(&p), &cfg(1, 4), 1);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn every_source_trains_a_step() {
        let xs: Vec<Image> = (0..6)
            .map(|i| Image::filled(2, 2, i as f64 / 6.0))
            .collect();
        let lowfid = DegradationSpec::blur(0.6, Some(20.0));
        let ys = xs.iter().map(|x| x.to_measurement()).collect();
        let p = PairedDataset::new(xs.clone(), ys).unwrap();
        let fm = ForwardModel::<f64>::init(
            &small(1),
            (2, 2),
            MeasurementShape::image(2, 2),
            MeasurementShape::image(2, 2),
            &mut RngStream::new(0, 0),
        )
        .unwrap();
        let sources = [
            ConditionSource::ForwardModel {
                unpaired: &xs,
                model: &fm,
                lowfid: &lowfid,
            },
            ConditionSource::Paired(&p),
            ConditionSource::Simulated {
                unpaired: &xs,
                lowfid: &lowfid,
            },
            ConditionSource::Mixed {
                paired: &p,
                unpaired: &xs,
                lowfid: &lowfid,
                mix: MixRatio::Even,
            },
        ];
        for s in &sources {
            let (a, t) = train_conditional(s, &cfg(3, 4), 5).unwrap();
            assert_eq!(t.rows.len(), 3);
            let (b, _) = train_conditional(s, &cfg(3, 4), 5).unwrap();
            assert_eq!(a, b, "{}", s.name());
        }
    }
}
