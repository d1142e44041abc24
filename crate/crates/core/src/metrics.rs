//! Reconstruction quality, held-out ELBO and report tables.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PairedDataset;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::inverse::InverseModel;
use crate::nn::{Real, RngStream};

pub const PSNR_CAP_DB: f64 = 99.0;

/// `10 log10(1 / MSE)` for images with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr(x: &Image, xhat: &Image) -> Result<f64> {
    ensure!(
        x.same_shape(xhat),
        InvalidInput,
        "psnr of {}x{} and {}x{} images",
        x.height(),
        x.width(),
        xhat.height(),
        xhat.width()
    );
    let n = x.len().max(1) as f64;
    let mse = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-example ELBO on true-process test pairs. Example `i` draws its
/// latent noise from `rng.fork([i])`; with `samples > 1` the single-sample
/// estimates are averaged.
pub fn test_elbo_values<F: Real>(
    model: &InverseModel<F>,
    test: &PairedDataset,
    rng: &RngStream,
    samples: usize,
) -> Result<Vec<f64>> {
    ensure!(!test.is_empty(), InvalidInput, "empty test set");
    ensure!(samples >= 1, Config, "ELBO samples must be >= 1");
    let xs: Vec<&Image> = test.x.iter().collect();
    let ys: Vec<_> = test.y.iter().collect();
    let mut streams: Vec<RngStream> = (0..test.len()).map(|i| rng.fork(&[i as u64])).collect();
    let mut acc = vec![0.0; test.len()];
    for _ in 0..samples {
        let eps: Vec<Vec<f64>> = streams
            .iter_mut()
            .map(|r| r.normals(model.latent_dim()))
            .collect();
        let refs: Vec<&[f64]> = eps.iter().map(|e| e.as_slice()).collect();
        // Chunked to bound memory on large test sets.
        for start in (0..xs.len()).step_by(256) {
            let end = (start + 256).min(xs.len());
            let v = model.elbo_batch(&xs[start..end], &ys[start..end], &refs[start..end])?;
            for (a, t) in acc[start..end].iter_mut().zip(v) {
                *a += t.0;
            }
        }
    }
    let out: Vec<f64> = acc.into_iter().map(|a| a / samples as f64).collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            context: "test ELBO".into(),
            step: i,
            detail: format!("non-finite ELBO for test example {i}"),
        });
    }
    Ok(out)
}

/// Mean held-out ELBO of one model.
pub fn test_elbo<F: Real>(
    model: &InverseModel<F>,
    test: &PairedDataset,
    rng: &RngStream,
) -> Result<f64> {
    Ok(mean(&test_elbo_values(model, test, rng, 1)?))
}

/// Mean and spread of held-out ELBO across several checkpoints (seeds).
pub fn test_elbo_across<F: Real>(
    models: &[&InverseModel<F>],
    test: &PairedDataset,
    rng: &RngStream,
) -> Result<(f64, f64)> {
    ensure!(!models.is_empty(), InvalidInput, "no models");
    let means = models
        .iter()
        .map(|m| test_elbo(m, test, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok((mean(&means), std_dev(&means)))
}

/// Pseudo-max reconstructions and their PSNR against the test targets.
pub fn pseudo_max_psnr<F: Real>(
    model: &InverseModel<F>,
    test: &PairedDataset,
) -> Result<(Vec<Image>, Vec<f64>)> {
    ensure!(!test.is_empty(), InvalidInput, "empty test set");
    let ys: Vec<_> = test.y.iter().collect();
    let mut recon = Vec::with_capacity(ys.len());
    for chunk in ys.chunks(256) {
        recon.extend(model.pseudo_max_batch(chunk)?);
    }
    let p = recon
        .iter()
        .zip(&test.x)
        .map(|(r, x)| psnr(x, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((recon, p))
}

/// One evaluated (method, task, K, severity, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub task: String,
    pub k: usize,
    pub severity: f64,
    /// `None` for rows aggregated across seeds.
    pub seed: Option<u64>,
    pub psnr: Vec<f64>,
    pub psnr_mean: f64,
    pub elbo_mean: f64,
    /// Across test examples for single-seed rows, across seeds for
    /// aggregated rows.
    pub elbo_std: f64,
    pub wall_time_s: f64,
}

impl EvalRow {
    pub fn new(
        method: &str,
        task: &str,
        k: usize,
        severity: f64,
        seed: u64,
        psnr: Vec<f64>,
        elbos: &[f64],
        wall_time_s: f64,
    ) -> Self {
        EvalRow {
            method: method.to_string(),
            task: task.to_string(),
            k,
            severity,
            seed: Some(seed),
            psnr_mean: mean(&psnr),
            psnr,
            elbo_mean: mean(elbos),
            elbo_std: std_dev(elbos),
            wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EvalReport {
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
}

pub const CSV_HEADER: &str = "method,task,K,severity,seed,psnr_mean,elbo_mean,elbo_std,wall_time_s";

impl EvalReport {
    /// Rows in a canonical order so reports do not depend on the order in
    /// which cells finished.
    pub fn sorted(mut self) -> Self {
        self.rows.sort_by(|a, b| {
            (&a.method, &a.task, a.k, a.seed)
                .cmp(&(&b.method, &b.task, b.k, b.seed))
                .then(a.severity.total_cmp(&b.severity))
        });
        self
    }

    /// One extra row per (method, task, K, severity) with the mean PSNR and
    /// ELBO over seeds and the across-seed ELBO standard deviation.
    pub fn aggregate(&self) -> Vec<EvalRow> {
        let mut out: Vec<EvalRow> = Vec::new();
        for r in self.rows.iter().filter(|r| r.seed.is_some()) {
            let key = |o: &EvalRow| {
                o.method == r.method && o.task == r.task && o.k == r.k && o.severity == r.severity
            };
            if out.iter().any(key) {
                continue;
            }
            let group: Vec<&EvalRow> = self
                .rows
                .iter()
                .filter(|o| o.seed.is_some() && key(o))
                .collect();
            let pm: Vec<f64> = group.iter().map(|g| g.psnr_mean).collect();
            let em: Vec<f64> = group.iter().map(|g| g.elbo_mean).collect();
            out.push(EvalRow {
                method: r.method.clone(),
                task: r.task.clone(),
                k: r.k,
                severity: r.severity,
                seed: None,
                psnr: Vec::new(),
                psnr_mean: mean(&pm),
                elbo_mean: mean(&em),
                elbo_std: std_dev(&em),
                wall_time_s: group.iter().map(|g| g.wall_time_s).sum(),
            });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(&self.aggregate()) {
            let seed = r.seed.map_or("all".to_string(), |s| s.to_string());
            writeln!(
                s,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.3}",
                r.method,
                r.task,
                r.k,
                r.severity,
                seed,
                r.psnr_mean,
                r.elbo_mean,
                r.elbo_std,
                r.wall_time_s
            )
            .unwrap();
        }
        s
    }

    /// Fixed-width text table of the across-seed summary.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:<12} {:>6} {:>9} {:>10} {:>14} {:>12}\n",
            "method", "task", "K", "severity", "psnr_dB", "elbo_mean", "elbo_std"
        );
        for r in self.aggregate() {
            writeln!(
                s,
                "{:<24} {:<12} {:>6} {:>9.3} {:>10.3} {:>14.2} {:>12.2}",
                r.method, r.task, r.k, r.severity, r.psnr_mean, r.elbo_mean, r.elbo_std
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Normalized cross-correlation (Pearson) of two equally shaped images.
pub fn correlation(a: &Image, b: &Image) -> Result<f64> {
    ensure!(
        a.same_shape(b),
        InvalidInput,
        "correlation of differently shaped images"
    );
    let (ma, mb) = (mean(a.data()), mean(b.data()));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        ab += (x - ma) * (y - mb);
        aa += (x - ma) * (x - ma);
        bb += (y - mb) * (y - mb);
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok(ab / (aa * bb).sqrt())
}

/// Best alignment of `estimate` to `truth` over circular shifts and the
/// 180-degree rotation, the ambiguities of Fourier-modulus data. Returns the
/// correlation and the aligned estimate.
pub fn align_up_to_ambiguity(truth: &Image, estimate: &Image) -> Result<(f64, Image)> {
    ensure!(
        truth.same_shape(estimate),
        InvalidInput,
        "alignment of differently shaped images"
    );
    let mut best = (f64::NEG_INFINITY, estimate.clone());
    for cand in [estimate.clone(), estimate.flip()] {
        for dr in 0..truth.height() as isize {
            for dc in 0..truth.width() as isize {
                let shifted = cand.roll(dr, dc);
                let c = correlation(truth, &shifted)?;
                if c > best.0 {
                    best = (c, shifted);
                }
            }
        }
    }
    Ok(best)
}
