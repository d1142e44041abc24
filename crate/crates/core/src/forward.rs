//! Multi-fidelity forward model `p(y | x, ỹ)`.
//!
//! The model refines a low-fidelity prediction `ỹ` of the measurement into a
//! distribution over high-fidelity measurements `y`, through a latent `w`:
//! prior `p(w | x, ỹ)`, decoder `p(y | x, ỹ, w)` and recognition
//! `q(w | x, y, ỹ)`. Inputs are concatenated as `x ‖ ỹ`, `x ‖ ỹ ‖ w` and
//! `x ‖ y ‖ ỹ`; the order is recorded in checkpoint manifests.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::cvae::{
    elbo_values, stack_rows, train_latent, BatchSampler, LatentNets, Layout, NetConfig, Trace,
    TrainConfig,
};
use crate::data::PairedDataset;
use crate::degrade::{apply_lowfid, output_shape, DegradationSpec};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Measurement, MeasurementShape};
use crate::nn::rng::tag;
use crate::nn::{Checkpoint, DiagGaussian, Real, RngStream};

pub const CHECKPOINT_KIND: &str = "forward_model";
const SALT: u64 = 1;

pub fn forward_layout() -> Layout {
    Layout {
        blocks: vec!["x".into(), "y".into(), "ytilde".into()],
        prior: vec![0, 2],
        recognition: vec![0, 1, 2],
        decoder_before: vec![0, 2],
        decoder_after: vec![],
        target: 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardMeta {
    pub x_shape: (usize, usize),
    pub y_shape: MeasurementShape,
    pub ytilde_shape: MeasurementShape,
    pub latent_dim: usize,
    pub lowfid: DegradationSpec,
    pub layout: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardModel<F> {
    pub nets: LatentNets<F>,
    pub x_shape: (usize, usize),
    pub y_shape: MeasurementShape,
    pub ytilde_shape: MeasurementShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrainConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Low-fidelity draws per target and step.
    #[serde(default = "one")]
    pub lowfid_samples: usize,
}

fn one() -> usize {
    1
}

impl<F: Real> ForwardModel<F> {
    pub fn init(
        cfg: &NetConfig,
        x_shape: (usize, usize),
        y_shape: MeasurementShape,
        ytilde_shape: MeasurementShape,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let widths = [x_shape.0 * x_shape.1, y_shape.len(), ytilde_shape.len()];
        Ok(ForwardModel {
            nets: LatentNets::init(cfg, &forward_layout(), &widths, rng)?,
            x_shape,
            y_shape,
            ytilde_shape,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.nets.latent_dim
    }

    fn check_x(&self, x: &Image) -> Result<()> {
        ensure!(
            (x.height(), x.width()) == self.x_shape,
            InvalidInput,
            "target is {}x{}, model expects {:?}",
            x.height(),
            x.width(),
            self.x_shape
        );
        Ok(())
    }

    fn check_m(&self, m: &Measurement, want: MeasurementShape, what: &str) -> Result<()> {
        ensure!(
            m.shape() == want,
            InvalidInput,
            "{what} has shape {:?}, model expects {want:?}",
            m.shape()
        );
        Ok(())
    }

    /// Data blocks `[x, y, ytilde]` for a batch.
    pub fn blocks(
        &self,
        xs: &[&Image],
        ys: &[&Measurement],
        yts: &[&Measurement],
    ) -> Result<Vec<Array2<F>>> {
        for x in xs {
            self.check_x(x)?;
        }
        for y in ys {
            self.check_m(y, self.y_shape, "measurement")?;
        }
        for yt in yts {
            self.check_m(yt, self.ytilde_shape, "low-fidelity measurement")?;
        }
        let xr: Vec<&[f64]> = xs.iter().map(|x| x.data()).collect();
        let yr: Vec<&[f64]> = ys.iter().map(|y| y.data()).collect();
        let tr: Vec<&[f64]> = yts.iter().map(|y| y.data()).collect();
        Ok(vec![stack_rows(&xr)?, stack_rows(&yr)?, stack_rows(&tr)?])
    }

    /// Single-sample ELBO with `w` drawn from the recognition network using
    /// standard-normal noise from `rng`.
    pub fn mf_elbo(
        &self,
        x: &Image,
        y: &Measurement,
        ytilde: &Measurement,
        rng: &mut RngStream,
    ) -> Result<f64> {
        let eps = rng.normals(self.latent_dim());
        Ok(self.mf_elbo_parts(x, y, ytilde, &eps)?.0)
    }

    /// `(elbo, kl, loglik)` for a given latent noise vector.
    pub fn mf_elbo_parts(
        &self,
        x: &Image,
        y: &Measurement,
        ytilde: &Measurement,
        eps: &[f64],
    ) -> Result<(f64, f64, f64)> {
        ensure!(
            eps.len() == self.latent_dim(),
            InvalidInput,
            "noise of length {} for latent dimension {}",
            eps.len(),
            self.latent_dim()
        );
        let blocks = self.blocks(&[x], &[y], &[ytilde])?;
        Ok(elbo_values(&self.nets, &forward_layout(), &blocks, stack_rows(&[eps])?)?[0])
    }

    /// Prior over `w` given `(x, ỹ)`.
    pub fn prior_head(&self, x: &Image, ytilde: &Measurement) -> Result<DiagGaussian<f64>> {
        let b = self.blocks(&[x], &[], &[ytilde])?;
        let views = [b[0].view(), b[0].view(), b[2].view()];
        let (m, lv) = self.nets.prior_moments(&forward_layout(), &views)?;
        row_gaussian(&m, &lv, 0)
    }

    /// Decoder density over `y` given `(x, ỹ, w)`.
    pub fn decoder_head(
        &self,
        x: &Image,
        ytilde: &Measurement,
        w: &[f64],
    ) -> Result<DiagGaussian<f64>> {
        let b = self.blocks(&[x], &[], &[ytilde])?;
        let views = [b[0].view(), b[0].view(), b[2].view()];
        let w = stack_rows::<F>(&[w])?;
        let (m, lv) = self.nets.decode(&forward_layout(), &views, w.view())?;
        row_gaussian(&m, &lv, 0)
    }

    /// Decoder mean at the prior mean of `w`.
    pub fn mean_prediction(&self, x: &Image, ytilde: &Measurement) -> Result<Measurement> {
        let p = self.prior_head(x, ytilde)?;
        let d = self.decoder_head(x, ytilde, p.mean())?;
        Measurement::new(self.y_shape, d.mean().to_vec())
    }

    /// Three-step draw: `ỹ` from the low-fidelity process, `w` from the
    /// prior, `y` from the decoder. All randomness comes from `rng`, in that
    /// order.
    pub fn sample_measurement(
        &self,
        lowfid: &DegradationSpec,
        x: &Image,
        rng: &mut RngStream,
    ) -> Result<Measurement> {
        let rows = self.sample_rows(lowfid, &[x], std::slice::from_mut(rng))?;
        Measurement::new(
            self.y_shape,
            rows.row(0).iter().map(|v| v.as_f64()).collect(),
        )
    }

    /// Batched [`ForwardModel::sample_measurement`]: row `i` uses `rngs[i]`
    /// exactly as the single-example sampler would.
    pub fn sample_rows(
        &self,
        lowfid: &DegradationSpec,
        xs: &[&Image],
        rngs: &mut [RngStream],
    ) -> Result<Array2<F>> {
        ensure!(
            xs.len() == rngs.len(),
            InvalidInput,
            "{} targets for {} random streams",
            xs.len(),
            rngs.len()
        );
        let yts = xs
            .iter()
            .zip(rngs.iter_mut())
            .map(|(x, r)| apply_lowfid(lowfid, x, r))
            .collect::<Result<Vec<_>>>()?;
        let yt_refs: Vec<&Measurement> = yts.iter().collect();
        let b = self.blocks(xs, &[], &yt_refs)?;
        let views = [b[0].view(), b[0].view(), b[2].view()];
        let layout = forward_layout();
        let (mw, lw) = self.nets.prior_moments(&layout, &views)?;
        let w = draw_rows(&mw, &lw, rngs);
        let (my, ly) = self.nets.decode(&layout, &views, w.view())?;
        Ok(draw_rows(&my, &ly, rngs))
    }

    pub fn meta(&self, lowfid: &DegradationSpec) -> ForwardMeta {
        ForwardMeta {
            x_shape: self.x_shape,
            y_shape: self.y_shape,
            ytilde_shape: self.ytilde_shape,
            latent_dim: self.latent_dim(),
            lowfid: lowfid.clone(),
            layout: forward_layout().describe(),
        }
    }

    pub fn to_checkpoint(&self, seed: u64, lowfid: &DegradationSpec) -> Result<Checkpoint<F>> {
        Ok(Checkpoint::new(
            CHECKPOINT_KIND,
            seed,
            serde_json::to_value(self.meta(lowfid))?,
            self.nets.networks(),
        ))
    }

    /// Restores a model and the low-fidelity process it was trained with.
    pub fn from_checkpoint(ck: &Checkpoint<F>) -> Result<(Self, DegradationSpec)> {
        ensure!(
            ck.manifest.kind == CHECKPOINT_KIND,
            InvalidInput,
            "checkpoint kind {:?} is not a forward model",
            ck.manifest.kind
        );
        let meta: ForwardMeta = serde_json::from_value(ck.manifest.meta.clone())?;
        let model = ForwardModel {
            nets: LatentNets::from_networks(&ck.networks)?,
            x_shape: meta.x_shape,
            y_shape: meta.y_shape,
            ytilde_shape: meta.ytilde_shape,
        };
        let widths = [
            meta.x_shape.0 * meta.x_shape.1,
            meta.y_shape.len(),
            meta.ytilde_shape.len(),
        ];
        model.nets.check_blocks(&forward_layout(), &widths)?;
        Ok((model, meta.lowfid))
    }
}

fn row_gaussian<F: Real>(m: &Array2<F>, lv: &Array2<F>, r: usize) -> Result<DiagGaussian<f64>> {
    DiagGaussian::new(
        m.row(r).iter().map(|v| v.as_f64()).collect(),
        lv.row(r).iter().map(|v| v.as_f64()).collect(),
    )
}

/// `mean + exp(log_var / 2) * eps`, row `i` drawing its noise from `rngs[i]`.
pub(crate) fn draw_rows<F: Real>(
    mean: &Array2<F>,
    log_var: &Array2<F>,
    rngs: &mut [RngStream],
) -> Array2<F> {
    let half = F::from_f64_lossy(0.5);
    let mut out = mean.clone();
    for (i, r) in rngs.iter_mut().enumerate() {
        for j in 0..out.ncols() {
            let e = F::from_f64_lossy(r.normal());
            out[[i, j]] += (log_var[[i, j]] * half).exp() * e;
        }
    }
    out
}

/// Trains the forward model on paired data, drawing a fresh `ỹ` for each
/// target at every step. The draw for batch slot `b` of iteration `i` uses
/// the stream `(seed, LOWFID, i, b)`.
pub fn train_forward<F: Real>(
    data: &PairedDataset,
    lowfid: &DegradationSpec,
    cfg: &ForwardTrainConfig,
    seed: u64,
) -> Result<(ForwardModel<F>, Trace)> {
    cfg.train.validate()?;
    ensure!(
        cfg.lowfid_samples >= 1,
        Config,
        "lowfid_samples must be >= 1"
    );
    ensure!(
        !data.is_empty(),
        Config,
        "forward training needs paired data"
    );
    ensure!(
        data.len() >= cfg.train.batch_size,
        Config,
        "{} paired examples is fewer than the batch size {}",
        data.len(),
        cfg.train.batch_size
    );
    let x0 = &data.x[0];
    let x_shape = (x0.height(), x0.width());
    let yt_shape = output_shape(lowfid, x_shape.0, x_shape.1)?;
    let mut rng = RngStream::derive(seed, &[tag::INIT, SALT]);
    let mut model =
        ForwardModel::<F>::init(&cfg.net, x_shape, data.y[0].shape(), yt_shape, &mut rng)?;
    let mut sampler = BatchSampler::new(data.len(), seed, SALT);
    let v = cfg.lowfid_samples;
    let layout = forward_layout();
    let shell = model.clone();
    let trace = train_latent(
        &mut model.nets,
        &layout,
        &cfg.train,
        seed,
        SALT,
        "train-forward",
        |it| {
            let idx = sampler.batch(it, cfg.train.batch_size);
            let mut xs = Vec::with_capacity(idx.len() * v);
            let mut ys = Vec::with_capacity(idx.len() * v);
            let mut yts = Vec::with_capacity(idx.len() * v);
            for (b, &i) in idx.iter().enumerate() {
                for s in 0..v {
                    let mut r =
                        RngStream::derive(seed, &[tag::LOWFID, it as u64, (b * v + s) as u64]);
                    xs.push(&data.x[i]);
                    ys.push(&data.y[i]);
                    yts.push(apply_lowfid(lowfid, &data.x[i], &mut r)?);
                }
            }
            let yt_refs: Vec<&Measurement> = yts.iter().collect();
            shell.blocks(&xs, &ys, &yt_refs)
        },
    )?;
    Ok((model, trace))
}

/// Mean single-sample ELBO over a paired set, with `ỹ` and the latent noise
/// for example `i` drawn from `rng.fork([i])`.
pub fn mean_mf_elbo<F: Real>(
    model: &ForwardModel<F>,
    data: &PairedDataset,
    lowfid: &DegradationSpec,
    rng: &RngStream,
) -> Result<f64> {
    ensure!(!data.is_empty(), InvalidInput, "empty evaluation set");
    let mut xs = Vec::new();
    let mut yts = Vec::new();
    let mut eps = Vec::new();
    for (i, x) in data.x.iter().enumerate() {
        let mut r = rng.fork(&[i as u64]);
        yts.push(apply_lowfid(lowfid, x, &mut r)?);
        eps.push(r.normals(model.latent_dim()));
        xs.push(x);
    }
    let ys: Vec<&Measurement> = data.y.iter().collect();
    let yt_refs: Vec<&Measurement> = yts.iter().collect();
    let blocks = model.blocks(&xs, &ys, &yt_refs)?;
    let eps_refs: Vec<&[f64]> = eps.iter().map(|e| e.as_slice()).collect();
    let vals = elbo_values(
        &model.nets,
        &forward_layout(),
        &blocks,
        stack_rows(&eps_refs)?,
    )?;
    let mean = vals.iter().map(|v| v.0).sum::<f64>() / vals.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Numerical {
            context: "forward ELBO".into(),
            step: 0,
            detail: format!("non-finite mean ELBO {mean}"),
        });
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::TrainConfig;
    use crate::nn::{Activation, AdamConfig};

    fn small(j: usize) -> NetConfig {
        NetConfig {
            hidden: vec![6],
            activation: Activation::Tanh,
            latent_dim: j,
        }
    }

    fn toy_model() -> ForwardModel<f64> {
        let s = MeasurementShape::image(2, 2);
        ForwardModel::init(&small(2), (2, 2), s, s, &mut RngStream::new(3, 0)).unwrap()
    }

    fn img(v: f64) -> Image {
        Image::new(2, 2, vec![v, 0.2, 0.7, 1.0]).unwrap()
    }

    #[test]
    fn mf_elbo_is_deterministic_and_checks_shapes() {
        let m = toy_model();
        let x = img(0.1);
        let y = img(0.3).to_measurement();
        let a = m.mf_elbo(&x, &y, &y, &mut RngStream::new(1, 1)).unwrap();
        let b = m.mf_elbo(&x, &y, &y, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(a, b);
        let bad = Image::zeros(3, 2).to_measurement();
        assert!(matches!(
            m.mf_elbo(&x, &bad, &y, &mut RngStream::new(1, 1)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn perfect_decoder_gives_gaussian_constant() {
        // Decoder: zero weights, bias equal to y, log-variance 0. Prior and
        // recognition are both all-zero networks so KL vanishes.
        let mut m = toy_model();
        let y = [0.25, -0.5, 1.0, 2.0];
        for p in [
            &mut m.nets.prior,
            &mut m.nets.recognition,
            &mut m.nets.decoder,
        ] {
            p.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let last = m.nets.decoder.spec().num_layers() - 1;
        m.nets.decoder.bias_mut(last)[..4].copy_from_slice(&y);
        let x = img(0.4);
        let ym = Measurement::new(MeasurementShape::image(2, 2), y.to_vec()).unwrap();
        let (e, kl, _) = m.mf_elbo_parts(&x, &ym, &ym, &[0.3, -1.2]).unwrap();
        assert_eq!(kl, 0.0);
        assert!((e + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_decoder_sampler() {
        let mut m = toy_model();
        m.nets
            .decoder
            .as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let last = m.nets.decoder.spec().num_layers() - 1;
        let b = m.nets.decoder.bias_mut(last);
        b[..4].copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        b[4..].iter_mut().for_each(|v| *v = -10.0);
        let spec = DegradationSpec::blur(0.5, None);
        let y = m
            .sample_measurement(&spec, &img(0.5), &mut RngStream::new(0, 9))
            .unwrap();
        for (v, want) in y.data().iter().zip([0.1, 0.2, 0.3, 0.4]) {
            assert!((v - want).abs() < 5.0 * (-5.0f64).exp());
        }
        let again = m
            .sample_measurement(&spec, &img(0.5), &mut RngStream::new(0, 9))
            .unwrap();
        assert_eq!(y, again);
    }

    #[test]
    fn batched_sampler_matches_single() {
        let m = toy_model();
        let spec = DegradationSpec::blur(0.7, Some(20.0));
        let (a, b) = (img(0.1), img(0.9));
        let mut rngs = vec![RngStream::new(4, 1), RngStream::new(4, 2)];
        let rows = m.sample_rows(&spec, &[&a, &b], &mut rngs).unwrap();
        let single = m
            .sample_measurement(&spec, &b, &mut RngStream::new(4, 2))
            .unwrap();
        for (u, v) in rows.row(1).iter().zip(single.data()) {
            assert_eq!(u, v);
        }
    }

    #[test]
    fn zero_iterations_return_initialization_and_checkpoint_roundtrips() {
        let xs: Vec<Image> = (0..4).map(|i| img(i as f64 / 4.0)).collect();
        let ys = xs.iter().map(|x| x.to_measurement()).collect();
        let data = PairedDataset::new(xs, ys).unwrap();
        let spec = DegradationSpec::blur(0.5, None);
        let cfg = ForwardTrainConfig {
            net: small(2),
            train: TrainConfig {
                iterations: 0,
                batch_size: 2,
                adam: AdamConfig::default(),
            },
            lowfid_samples: 1,
        };
        let (m, trace) = train_forward::<f64>(&data, &spec, &cfg, 11).unwrap();
        assert!(trace.rows.is_empty());
        let init = ForwardModel::<f64>::init(
            &cfg.net,
            (2, 2),
            MeasurementShape::image(2, 2),
            MeasurementShape::image(2, 2),
            &mut RngStream::derive(11, &[tag::INIT, SALT]),
        )
        .unwrap();
        assert_eq!(m, init);
        let ck = m.to_checkpoint(11, &spec).unwrap();
        assert_eq!(
            ck.manifest.meta["layout"]["prior_input"],
            serde_json::json!(["x", "ytilde"])
        );
        let (back, lf) = ForwardModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back, m);
        assert_eq!(lf, spec);
    }

    #[test]
    fn batch_larger_than_data_is_rejected() {
        let data = PairedDataset::new(vec![img(0.0)], vec![img(0.0).to_measurement()]).unwrap();
        let cfg = ForwardTrainConfig {
            net: small(1),
            train: TrainConfig {
                iterations: 1,
                batch_size: 2,
                adam: AdamConfig::default(),
            },
            lowfid_samples: 1,
        };
        let r = train_forward::<f64>(&data, &DegradationSpec::blur(0.5, None), &cfg, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
