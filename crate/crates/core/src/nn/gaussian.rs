//! Diagonal Gaussian densities produced by network heads.

use std::f64::consts::PI;

use ndarray::Array2;

use super::mlp::MlpParams;
use super::real::Real;
use super::rng::RngStream;
use super::tape::Var;
use crate::error::{ensure, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

/// Mean and log-variance of a diagonal Gaussian. Log-variances are kept in
/// `[LOG_VAR_MIN, LOG_VAR_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<F> {
    mean: Vec<F>,
    log_var: Vec<F>,
}

impl<F: Real> DiagGaussian<F> {
    /// Builds the density, clipping `log_var` into range.
    pub fn new(mean: Vec<F>, log_var: Vec<F>) -> Result<Self> {
        ensure!(
            mean.len() == log_var.len(),
            InvalidInput,
            "mean has {} entries, log_var {}",
            mean.len(),
            log_var.len()
        );
        ensure!(
            mean.iter().chain(&log_var).all(|v| v.is_finite()),
            InvalidInput,
            "non-finite Gaussian moments"
        );
        let (lo, hi) = (
            F::from_f64_lossy(LOG_VAR_MIN),
            F::from_f64_lossy(LOG_VAR_MAX),
        );
        let log_var = log_var.into_iter().map(|v| v.max(lo).min(hi)).collect();
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![F::zero(); dim],
            log_var: vec![F::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[F] {
        &self.mean
    }

    pub fn log_var(&self) -> &[F] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<F> {
        let h = F::from_f64_lossy(0.5);
        self.log_var.iter().map(|&lv| (lv * h).exp()).collect()
    }

    /// `mean + exp(log_var / 2) * eps` for a given noise vector.
    pub fn sample_with_noise(&self, eps: &[F]) -> Result<Vec<F>> {
        ensure!(
            eps.len() == self.dim(),
            InvalidInput,
            "noise has {} entries, density {}",
            eps.len(),
            self.dim()
        );
        let h = F::from_f64_lossy(0.5);
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((&m, &lv), &e)| m + (lv * h).exp() * e)
            .collect())
    }
}

/// Splits a network output of width `2d` into mean and clipped log-variance.
pub fn gaussian_head<F: Real>(params: &MlpParams<F>, input: &[F]) -> Result<DiagGaussian<F>> {
    let out_width = params.spec().output_width();
    ensure!(
        out_width.is_multiple_of(2),
        Config,
        "a Gaussian head needs an even output width, got {out_width}"
    );
    let out = params.forward(input)?;
    let d = out_width / 2;
    DiagGaussian::new(out[..d].to_vec(), out[d..].to_vec())
}

/// Batched head split: rows of `out` become `(means, clipped log-variances)`.
pub fn split_head<F: Real>(out: Array2<F>) -> Result<(Array2<F>, Array2<F>)> {
    ensure!(
        out.ncols().is_multiple_of(2),
        Config,
        "a Gaussian head needs an even output width, got {}",
        out.ncols()
    );
    let d = out.ncols() / 2;
    let mean = out.slice(ndarray::s![.., ..d]).to_owned();
    let (lo, hi) = (
        F::from_f64_lossy(LOG_VAR_MIN),
        F::from_f64_lossy(LOG_VAR_MAX),
    );
    let log_var = out.slice(ndarray::s![.., d..]).mapv(|v| v.max(lo).min(hi));
    Ok((mean, log_var))
}

/// Tape version of [`split_head`].
pub fn split_head_var<'t, F: Real>(out: &Var<'t, F>) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let w = out.shape().1;
    ensure!(
        w.is_multiple_of(2),
        Config,
        "a Gaussian head needs an even output width, got {w}"
    );
    let d = w / 2;
    let mean = out.slice_cols(0, d)?;
    let log_var = out.slice_cols(d, w)?.clamp(
        F::from_f64_lossy(LOG_VAR_MIN),
        F::from_f64_lossy(LOG_VAR_MAX),
    );
    Ok((mean, log_var))
}

/// Reparameterized draw with standard-normal noise from `rng`.
pub fn reparam_sample<F: Real>(g: &DiagGaussian<F>, rng: &mut RngStream) -> Vec<F> {
    let eps: Vec<F> = (0..g.dim())
        .map(|_| F::from_f64_lossy(rng.normal()))
        .collect();
    g.sample_with_noise(&eps).expect("noise sized to density")
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussians<F: Real>(q: &DiagGaussian<F>, p: &DiagGaussian<F>) -> Result<F> {
    ensure!(
        q.dim() == p.dim(),
        InvalidInput,
        "KL between dimensions {} and {}",
        q.dim(),
        p.dim()
    );
    let mut sum = 0.0;
    for j in 0..q.dim() {
        let (mq, lq) = (q.mean[j].as_f64(), q.log_var[j].as_f64());
        let (mp, lp) = (p.mean[j].as_f64(), p.log_var[j].as_f64());
        let d = mq - mp;
        sum += lp - lq + (lq - lp).exp() + d * d * (-lp).exp() - 1.0;
    }
    Ok(F::from_f64_lossy((0.5 * sum).max(0.0)))
}

/// Exact diagonal Gaussian log-density of `x`, normalization included.
pub fn gaussian_log_likelihood<F: Real>(g: &DiagGaussian<F>, x: &[F]) -> Result<F> {
    ensure!(
        x.len() == g.dim(),
        InvalidInput,
        "point has {} entries, density {}",
        x.len(),
        g.dim()
    );
    let ln2pi = (2.0 * PI).ln();
    let mut sum = 0.0;
    for j in 0..g.dim() {
        let lv = g.log_var[j].as_f64();
        let r = x[j].as_f64() - g.mean[j].as_f64();
        sum += lv + ln2pi + r * r * (-lv).exp();
    }
    Ok(F::from_f64_lossy(-0.5 * sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::mlp::{Activation, MlpSpec};

    #[test]
    fn log_var_is_clipped() {
        let g = DiagGaussian::new(vec![0.0, 0.0], vec![-50.0, 50.0]).unwrap();
        assert_eq!(g.log_var(), &[-10.0, 10.0]);
    }

    #[test]
    fn mismatched_moments_are_rejected() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn zero_head_is_standard_normal() {
        let spec = MlpSpec::new(vec![3, 4, 6], Activation::Relu).unwrap();
        let p = MlpParams::<f64>::zeros(spec).unwrap();
        let g = gaussian_head(&p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, DiagGaussian::standard(3));
    }

    #[test]
    fn head_bias_below_clip_is_clipped() {
        let spec = MlpSpec::new(vec![2, 4], Activation::Relu).unwrap();
        let mut p = MlpParams::<f64>::zeros(spec).unwrap();
        p.bias_mut(0)[2] = -50.0;
        p.bias_mut(0)[3] = -50.0;
        let g = gaussian_head(&p, &[0.3, 0.1]).unwrap();
        assert_eq!(g.log_var(), &[-10.0, -10.0]);
    }

    #[test]
    fn odd_head_width_is_a_config_error() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu).unwrap();
        let p = MlpParams::<f64>::zeros(spec).unwrap();
        assert!(matches!(
            gaussian_head(&p, &[0.0, 0.0]),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn head_splits_forward_output() {
        let spec = MlpSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap();
        let p = MlpParams::<f64>::init(spec, &mut RngStream::new(4, 4)).unwrap();
        let x = [0.2, -0.4, 0.9];
        let out = p.forward(&x).unwrap();
        let g = gaussian_head(&p, &x).unwrap();
        assert_eq!(g.mean(), &out[..2]);
        assert_eq!(g.log_var(), &out[2..]);
    }

    #[test]
    fn zero_noise_returns_mean() {
        let g = DiagGaussian::new(vec![1.5, -2.0], vec![0.3, -1.0]).unwrap();
        assert_eq!(g.sample_with_noise(&[0.0, 0.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn kl_known_values() {
        let std1 = DiagGaussian::<f64>::standard(1);
        assert_eq!(kl_diag_gaussians(&std1, &std1).unwrap(), 0.0);
        let shifted = DiagGaussian::new(vec![1.0], vec![0.0]).unwrap();
        assert!((kl_diag_gaussians(&shifted, &std1).unwrap() - 0.5).abs() < 1e-15);
        let wide = DiagGaussian::new(vec![0.0], vec![4f64.ln()]).unwrap();
        // 0.5 * (4 - 1 - ln 4)
        let expected = 0.5 * (3.0 - 4f64.ln());
        assert!((kl_diag_gaussians(&wide, &std1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.806_852_8).abs() < 1e-7);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = DiagGaussian::<f64>::standard(2);
        let b = DiagGaussian::<f64>::standard(3);
        assert!(kl_diag_gaussians(&a, &b).is_err());
    }

    #[test]
    fn log_likelihood_known_values() {
        let g = DiagGaussian::<f64>::standard(1);
        let v = gaussian_log_likelihood(&g, &[0.0]).unwrap();
        assert!((v + 0.918_938_5).abs() < 1e-7);
        let g = DiagGaussian::new(vec![0.5, -1.0, 2.0], vec![0.1, -2.0, 1.5]).unwrap();
        let at_mean = gaussian_log_likelihood(&g, &[0.5, -1.0, 2.0]).unwrap();
        let expected = -0.5 * (0.1 - 2.0 + 1.5 + 3.0 * (2.0 * PI).ln());
        assert!((at_mean - expected).abs() < 1e-12);
        assert!(gaussian_log_likelihood(&g, &[0.0]).is_err());
    }
}
