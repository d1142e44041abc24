//! Conditional latent-variable Gaussian models shared by the forward model,
//! the inverse model and the CVAE baselines.
//!
//! A model has three networks with Gaussian heads: a conditional prior over
//! the latent, a decoder over the target and a recognition network used
//! while training. Which data blocks feed which network, and in what order,
//! is described by a [`Layout`].

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::rng::tag;
use crate::nn::{
    split_head, split_head_var, Activation, Adam, AdamConfig, Gradients, MlpParams, MlpSpec,
    MlpVars, NamedNetwork, Real, RngStream, Tape, Var,
};

/// Which named data blocks are concatenated into each network input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<String>,
    pub prior: Vec<usize>,
    pub recognition: Vec<usize>,
    /// Decoder input is `decoder_before ‖ latent ‖ decoder_after`.
    pub decoder_before: Vec<usize>,
    pub decoder_after: Vec<usize>,
    pub target: usize,
}

impl Layout {
    /// Human-readable concatenation orders for manifests.
    pub fn describe(&self) -> serde_json::Value {
        let names =
            |ix: &[usize]| -> Vec<&str> { ix.iter().map(|&i| self.blocks[i].as_str()).collect() };
        let mut dec = names(&self.decoder_before);
        dec.push("latent");
        dec.extend(names(&self.decoder_after));
        serde_json::json!({
            "prior_input": names(&self.prior),
            "decoder_input": dec,
            "recognition_input": names(&self.recognition),
            "decoder_output": self.blocks[self.target],
        })
    }

    fn width(&self, ix: &[usize], widths: &[usize]) -> usize {
        ix.iter().map(|&i| widths[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub latent_dim: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.latent_dim >= 1, Config, "latent_dim must be >= 1");
        ensure!(
            self.hidden.iter().all(|&h| h >= 1),
            Config,
            "hidden widths must be >= 1"
        );
        Ok(())
    }
}

/// The three networks of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNets<F> {
    pub prior: MlpParams<F>,
    pub decoder: MlpParams<F>,
    pub recognition: MlpParams<F>,
    pub latent_dim: usize,
}

pub const NET_NAMES: [&str; 3] = ["prior", "decoder", "recognition"];

impl<F: Real> LatentNets<F> {
    /// Glorot-initialized networks for blocks of the given widths.
    pub fn init(
        cfg: &NetConfig,
        layout: &Layout,
        widths: &[usize],
        rng: &mut RngStream,
    ) -> Result<Self> {
        cfg.validate()?;
        ensure!(
            widths.len() == layout.blocks.len(),
            InvalidInput,
            "{} block widths for {} blocks",
            widths.len(),
            layout.blocks.len()
        );
        let j = cfg.latent_dim;
        let spec = |input: usize, out: usize| {
            MlpSpec::with_hidden(input, &cfg.hidden, out, cfg.activation)
        };
        let prior = spec(layout.width(&layout.prior, widths), 2 * j)?;
        let dec_in = layout.width(&layout.decoder_before, widths)
            + j
            + layout.width(&layout.decoder_after, widths);
        let decoder = spec(dec_in, 2 * widths[layout.target])?;
        let recognition = spec(layout.width(&layout.recognition, widths), 2 * j)?;
        Ok(LatentNets {
            prior: MlpParams::init(prior, rng)?,
            decoder: MlpParams::init(decoder, rng)?,
            recognition: MlpParams::init(recognition, rng)?,
            latent_dim: j,
        })
    }

    pub fn networks(&self) -> Vec<NamedNetwork<F>> {
        [&self.prior, &self.decoder, &self.recognition]
            .iter()
            .zip(NET_NAMES)
            .map(|(p, n)| NamedNetwork {
                name: n.to_string(),
                params: (*p).clone(),
            })
            .collect()
    }

    pub fn from_networks(nets: &[NamedNetwork<F>]) -> Result<Self> {
        let find = |name: &str| {
            nets.iter()
                .find(|n| n.name == name)
                .map(|n| n.params.clone())
                .ok_or_else(|| Error::InvalidInput(format!("missing network {name:?}")))
        };
        let prior = find("prior")?;
        let latent_dim = prior.spec().output_width() / 2;
        Ok(LatentNets {
            prior,
            decoder: find("decoder")?,
            recognition: find("recognition")?,
            latent_dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.prior.len() + self.decoder.len() + self.recognition.len()
    }

    pub fn on_tape<'t>(&self, tape: &'t Tape<F>) -> LatentVars<'t, F> {
        LatentVars {
            prior: self.prior.on_tape(tape),
            decoder: self.decoder.on_tape(tape),
            recognition: self.recognition.on_tape(tape),
        }
    }

    /// Checks block widths against the network input widths.
    pub fn check_blocks(&self, layout: &Layout, widths: &[usize]) -> Result<()> {
        let j = self.latent_dim;
        let dec_in = layout.width(&layout.decoder_before, widths)
            + j
            + layout.width(&layout.decoder_after, widths);
        ensure!(
            self.prior.spec().input_width() == layout.width(&layout.prior, widths)
                && self.recognition.spec().input_width()
                    == layout.width(&layout.recognition, widths)
                && self.decoder.spec().input_width() == dec_in
                && self.decoder.spec().output_width() == 2 * widths[layout.target],
            InvalidInput,
            "data blocks {widths:?} do not fit the networks"
        );
        Ok(())
    }

    /// Batched prior moments for the given data blocks.
    pub fn prior_moments(
        &self,
        layout: &Layout,
        blocks: &[ArrayView2<'_, F>],
    ) -> Result<(Array2<F>, Array2<F>)> {
        let input = gather(&layout.prior, blocks)?;
        split_head(self.prior.forward_batch(input.view())?)
    }

    /// Batched decoder moments at the given latent values.
    pub fn decode<'a>(
        &self,
        layout: &Layout,
        blocks: &[ArrayView2<'a, F>],
        latent: ArrayView2<'a, F>,
    ) -> Result<(Array2<F>, Array2<F>)> {
        let mut parts: Vec<ArrayView2<'a, F>> =
            layout.decoder_before.iter().map(|&i| blocks[i]).collect();
        parts.push(latent);
        parts.extend(layout.decoder_after.iter().map(|&i| blocks[i]));
        let input = concatenate(Axis(1), &parts).map_err(shape_err)?;
        split_head(self.decoder.forward_batch(input.view())?)
    }
}

fn shape_err(e: ndarray::ShapeError) -> Error {
    Error::InvalidInput(format!("block shapes do not concatenate: {e}"))
}

fn gather<F: Real>(ix: &[usize], blocks: &[ArrayView2<'_, F>]) -> Result<Array2<F>> {
    let parts: Vec<ArrayView2<'_, F>> = ix.iter().map(|&i| blocks[i]).collect();
    concatenate(Axis(1), &parts).map_err(shape_err)
}

pub struct LatentVars<'t, F: Real> {
    pub prior: MlpVars<'t, F>,
    pub decoder: MlpVars<'t, F>,
    pub recognition: MlpVars<'t, F>,
}

impl<'t, F: Real> LatentVars<'t, F> {
    pub fn gradients(&self, grads: &Gradients<F>) -> [Vec<F>; 3] {
        [
            self.prior.gradient(grads),
            self.decoder.gradient(grads),
            self.recognition.gradient(grads),
        ]
    }
}

/// Per-row ELBO pieces, each `rows x 1`.
pub struct ElboTerms<'t, F: Real> {
    pub elbo: Var<'t, F>,
    pub kl: Var<'t, F>,
    pub loglik: Var<'t, F>,
}

/// Single-sample ELBO `log p(target | latent, ...) - KL(q || prior)` with
/// the latent drawn from the recognition network using the fixed noise `eps`.
pub fn latent_elbo<'t, F: Real>(
    tape: &'t Tape<F>,
    vars: &LatentVars<'t, F>,
    layout: &Layout,
    blocks: &[Array2<F>],
    eps: Array2<F>,
) -> Result<ElboTerms<'t, F>> {
    ensure!(
        blocks.len() == layout.blocks.len(),
        InvalidInput,
        "{} data blocks for layout {:?}",
        blocks.len(),
        layout.blocks
    );
    let rows = blocks[0].nrows();
    ensure!(
        blocks.iter().all(|b| b.nrows() == rows),
        InvalidInput,
        "data blocks have different row counts"
    );
    let consts: Vec<Var<'t, F>> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
    let pick = |ix: &[usize]| -> Vec<Var<'t, F>> { ix.iter().map(|&i| consts[i]).collect() };
    let prior_in = Var::concat(&pick(&layout.prior))?;
    let rec_in = Var::concat(&pick(&layout.recognition))?;
    let (mp, lp) = split_head_var(&vars.prior.forward(&prior_in)?)?;
    let (mq, lq) = split_head_var(&vars.recognition.forward(&rec_in)?)?;
    let latent = Var::reparam(&mq, &lq, eps)?;
    let mut dec_parts = pick(&layout.decoder_before);
    dec_parts.push(latent);
    dec_parts.extend(pick(&layout.decoder_after));
    let (mx, lx) = split_head_var(&vars.decoder.forward(&Var::concat(&dec_parts)?)?)?;
    let loglik = Var::gaussian_log_lik(&mx, &lx, blocks[layout.target].clone())?;
    let kl = Var::kl_diag(&mq, &lq, &mp, &lp)?;
    let elbo = loglik.sub(&kl)?;
    Ok(ElboTerms { elbo, kl, loglik })
}

/// Standard-normal noise matrix drawn from `rng`.
pub fn normal_matrix<F: Real>(rows: usize, cols: usize, rng: &mut RngStream) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::from_f64_lossy(rng.normal()))
}

/// Per-example ELBO values (and their KL / log-likelihood parts) without
/// recording gradients.
pub fn elbo_values<F: Real>(
    nets: &LatentNets<F>,
    layout: &Layout,
    blocks: &[Array2<F>],
    eps: Array2<F>,
) -> Result<Vec<(f64, f64, f64)>> {
    let tape = Tape::new();
    let vars = nets.constants_on(&tape);
    let t = latent_elbo(&tape, &vars, layout, blocks, eps)?;
    let (e, k, l) = (t.elbo.value(), t.kl.value(), t.loglik.value());
    Ok((0..e.nrows())
        .map(|r| (e[[r, 0]].as_f64(), k[[r, 0]].as_f64(), l[[r, 0]].as_f64()))
        .collect())
}

impl<F: Real> LatentNets<F> {
    fn constants_on<'t>(&self, tape: &'t Tape<F>) -> LatentVars<'t, F> {
        LatentVars {
            prior: self.prior.constants_on(tape),
            decoder: self.decoder.constants_on(tape),
            recognition: self.recognition.constants_on(tape),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Config, "batch_size must be >= 1");
        ensure!(
            self.adam.learning_rate > 0.0,
            Config,
            "learning_rate must be > 0"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub elbo: f64,
    pub kl: f64,
    pub recon_loglik: f64,
}

/// Batch-mean training statistics, one row per iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,elbo,kl,recon_loglik\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.iteration, r.elbo, r.kl, r.recon_loglik
            )
            .unwrap();
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean ELBO over a window of rows starting at `start`.
    pub fn window_mean(&self, start: usize, len: usize) -> Option<f64> {
        let rows = self.rows.get(start..(start + len).min(self.rows.len()))?;
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|r| r.elbo).sum::<f64>() / rows.len() as f64)
    }
}

/// Deterministic epoch-shuffled minibatch indices.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    n: usize,
    seed: u64,
    salt: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64, salt: u64) -> Self {
        BatchSampler {
            n,
            seed,
            salt,
            epoch: None,
        }
    }

    /// Indices of batch `iteration`; every example is visited once per epoch.
    pub fn batch(&mut self, iteration: usize, size: usize) -> Vec<usize> {
        (0..size)
            .map(|b| {
                let pos = iteration * size + b;
                let (epoch, offset) = (pos / self.n, pos % self.n);
                if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
                    let mut rng =
                        RngStream::derive(self.seed, &[tag::BATCH, self.salt, epoch as u64]);
                    self.epoch = Some((epoch, rng.permutation(self.n)));
                }
                self.epoch.as_ref().unwrap().1[offset]
            })
            .collect()
    }
}

/// Maximizes the batch-mean ELBO with Adam. `batch` returns the data blocks
/// of iteration `i`; latent noise for iteration `i` comes from the stream
/// `(seed, LATENT, salt, i)`.
pub fn train_latent<F: Real, B>(
    nets: &mut LatentNets<F>,
    layout: &Layout,
    cfg: &TrainConfig,
    seed: u64,
    salt: u64,
    context: &str,
    mut batch: B,
) -> Result<Trace>
where
    B: FnMut(usize) -> Result<Vec<Array2<F>>>,
{
    cfg.validate()?;
    let mut opt = [
        Adam::new(cfg.adam, nets.prior.len()),
        Adam::new(cfg.adam, nets.decoder.len()),
        Adam::new(cfg.adam, nets.recognition.len()),
    ];
    let mut trace = Trace::default();
    for it in 0..cfg.iterations {
        let blocks = batch(it)?;
        let rows = blocks.first().map_or(0, |b| b.nrows());
        let mut rng = RngStream::derive(seed, &[tag::LATENT, salt, it as u64]);
        let eps = normal_matrix(rows, nets.latent_dim, &mut rng);
        let (row, g) = batch_gradient(nets, layout, &blocks, eps)?;
        let row = TraceRow {
            iteration: it,
            ..row
        };
        if !row.elbo.is_finite() {
            return Err(Error::Numerical {
                context: context.to_string(),
                step: it,
                detail: format!(
                    "non-finite ELBO {} (kl {}, loglik {})",
                    row.elbo, row.kl, row.recon_loglik
                ),
            });
        }
        trace.rows.push(row);
        let params = [
            nets.prior.as_mut_slice(),
            nets.decoder.as_mut_slice(),
            nets.recognition.as_mut_slice(),
        ];
        for ((o, p), g) in opt.iter_mut().zip(params).zip(&g) {
            o.step(p, g).map_err(|e| match e {
                Error::Numerical { detail, .. } => Error::Numerical {
                    context: context.to_string(),
                    step: it,
                    detail,
                },
                other => other,
            })?;
        }
    }
    Ok(trace)
}

/// Batch-mean ELBO statistics and the gradient of the negative batch-mean
/// ELBO with respect to the prior, decoder and recognition parameters.
pub fn batch_gradient<F: Real>(
    nets: &LatentNets<F>,
    layout: &Layout,
    blocks: &[Array2<F>],
    eps: Array2<F>,
) -> Result<(TraceRow, [Vec<F>; 3])> {
    let tape = Tape::new();
    let vars = nets.on_tape(&tape);
    let terms = latent_elbo(&tape, &vars, layout, blocks, eps)?;
    let loss = terms.elbo.mean().scale(-F::one());
    let row = TraceRow {
        iteration: 0,
        elbo: -loss.scalar().as_f64(),
        kl: terms.kl.mean().scalar().as_f64(),
        recon_loglik: terms.loglik.mean().scalar().as_f64(),
    };
    let grads = tape.backward(loss)?;
    Ok((row, vars.gradients(&grads)))
}

/// Stacks equal-length rows into a matrix of `F`.
pub fn stack_rows<F: Real>(rows: &[&[f64]]) -> Result<Array2<F>> {
    let cols = rows.first().map_or(0, |r| r.len());
    ensure!(
        rows.iter().all(|r| r.len() == cols),
        InvalidInput,
        "rows of different lengths"
    );
    let mut out = Array2::zeros((rows.len(), cols));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            out[[i, j]] = F::from_f64_lossy(v);
        }
    }
    Ok(out)
}
