//! Comparison systems: CVAEs trained on other conditioning data, and
//! hybrid input-output (HIO) phase retrieval.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::cvae::Trace;
use crate::data::PairedDataset;
use crate::degrade::DegradationSpec;
use crate::error::{ensure, Result};
use crate::fourier::{ifftshift, Fft2};
use crate::image::{Image, Measurement};
use crate::inverse::{
    train_conditional, ConditionSource, InverseModel, InverseTrainConfig, MixRatio,
};
use crate::nn::{Real, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PairedOnly,
    SimulatedOnly,
    PairedPlusSimulated,
    Hio,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::PairedOnly,
        BaselineKind::SimulatedOnly,
        BaselineKind::PairedPlusSimulated,
        BaselineKind::Hio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::PairedOnly => "paired_only",
            BaselineKind::SimulatedOnly => "simulated_only",
            BaselineKind::PairedPlusSimulated => "paired_plus_simulated",
            BaselineKind::Hio => "hio",
        }
    }
}

/// Trains the inverse-model architecture on the conditioning data of `kind`.
#[allow(clippy::too_many_arguments)]
pub fn train_baseline_cvae<F: Real>(
    kind: BaselineKind,
    paired: &PairedDataset,
    unpaired: &[Image],
    lowfid: &DegradationSpec,
    mix: MixRatio,
    cfg: &InverseTrainConfig,
    seed: u64,
) -> Result<(InverseModel<F>, Trace)> {
    let source = match kind {
        BaselineKind::PairedOnly => {
            ensure!(!paired.is_empty(), Config, "paired_only needs paired data");
            ConditionSource::Paired(paired)
        }
        BaselineKind::SimulatedOnly => {
            ensure!(
                !unpaired.is_empty(),
                Config,
                "simulated_only needs unpaired targets"
            );
            ConditionSource::Simulated { unpaired, lowfid }
        }
        BaselineKind::PairedPlusSimulated => {
            ensure!(
                !paired.is_empty() && !unpaired.is_empty(),
                Config,
                "paired_plus_simulated needs paired data and unpaired targets"
            );
            ConditionSource::Mixed {
                paired,
                unpaired,
                lowfid,
                mix,
            }
        }
        BaselineKind::Hio => {
            return Err(crate::Error::Config("hio is not a CVAE baseline".into()));
        }
    };
    train_conditional(&source, cfg, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HioConfig {
    pub beta: f64,
    pub n_iter: usize,
    /// Central `(rows, cols)` region of the object plane that may be
    /// nonzero.
    pub support: (usize, usize),
    /// Enforce a constant phase across the support.
    #[serde(default = "yes")]
    pub uniform_phase: bool,
    /// The measurement holds squared modulus (intensity) rather than modulus.
    #[serde(default = "yes")]
    pub intensity: bool,
    #[serde(default = "ten")]
    pub restarts: usize,
}

fn yes() -> bool {
    true
}

fn ten() -> usize {
    10
}

impl HioConfig {
    pub fn new(support: (usize, usize)) -> Self {
        HioConfig {
            beta: 0.9,
            n_iter: 500,
            support,
            uniform_phase: true,
            intensity: true,
            restarts: 10,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        ensure!(
            self.beta > 0.0 && self.beta <= 1.0,
            Config,
            "HIO beta must be in (0, 1], got {}",
            self.beta
        );
        ensure!(
            self.support.0 >= 1
                && self.support.1 >= 1
                && self.support.0 <= n
                && self.support.1 <= n,
            Config,
            "support {:?} does not fit a {n}x{n} grid",
            self.support
        );
        ensure!(self.restarts >= 1, Config, "HIO needs at least one restart");
        Ok(())
    }
}

/// Fourier-modulus constraint set on an `n x n` grid, DC at index 0.
pub struct HioProblem {
    n: usize,
    modulus: Vec<f64>,
    support: Vec<bool>,
    beta: f64,
    uniform_phase: bool,
    fft: Fft2,
}

impl HioProblem {
    pub fn new(measurement: &Measurement, cfg: &HioConfig) -> Result<Self> {
        let s = measurement.shape();
        ensure!(
            s.frames == 1 && s.height == s.width && s.height > 0,
            InvalidInput,
            "HIO needs a square single-frame measurement, got {s:?}"
        );
        let n = s.height;
        cfg.validate(n)?;
        let centered: Vec<f64> = measurement
            .data()
            .iter()
            .map(|&v| {
                if cfg.intensity {
                    v.max(0.0).sqrt()
                } else {
                    v.max(0.0)
                }
            })
            .collect();
        let (r0, c0) = ((n - cfg.support.0) / 2, (n - cfg.support.1) / 2);
        let mut support = vec![false; n * n];
        for r in r0..r0 + cfg.support.0 {
            for c in c0..c0 + cfg.support.1 {
                support[r * n + c] = true;
            }
        }
        Ok(HioProblem {
            n,
            modulus: ifftshift(&centered, n, n),
            support,
            beta: cfg.beta,
            uniform_phase: cfg.uniform_phase,
            fft: Fft2::new(n, n),
        })
    }

    /// Object estimate from the measured modulus with uniformly random
    /// Fourier phases.
    pub fn random_start(&mut self, rng: &mut RngStream) -> Vec<Complex64> {
        let mut g: Vec<Complex64> = self
            .modulus
            .iter()
            .map(|&m| Complex64::from_polar(m, 2.0 * PI * rng.uniform()))
            .collect();
        self.fft.inverse(&mut g);
        g
    }

    /// Object-plane estimate after imposing the measured modulus on `g`.
    fn project_modulus(&mut self, g: &[Complex64]) -> Vec<Complex64> {
        let mut buf = g.to_vec();
        self.fft.forward(&mut buf);
        for (v, &m) in buf.iter_mut().zip(&self.modulus) {
            let a = v.norm();
            *v = if a > 0.0 {
                *v * (m / a)
            } else {
                Complex64::new(m, 0.0)
            };
        }
        self.fft.inverse(&mut buf);
        buf
    }

    /// One HIO update: inside the support the modulus-consistent estimate
    /// (with its phase made uniform) is kept; outside it the previous
    /// estimate is pushed away from the modulus-consistent one.
    pub fn iterate(&mut self, g: &[Complex64]) -> Vec<Complex64> {
        let gp = self.project_modulus(g);
        gp.iter()
            .zip(g)
            .zip(&self.support)
            .map(|((&p, &old), &inside)| {
                if inside {
                    if self.uniform_phase {
                        Complex64::new(p.norm(), 0.0)
                    } else {
                        p
                    }
                } else {
                    old - p * self.beta
                }
            })
            .collect()
    }

    /// Relative misfit between the modulus of the support-restricted
    /// estimate and the measured modulus.
    pub fn modulus_error(&mut self, g: &[Complex64]) -> f64 {
        let mut buf: Vec<Complex64> = g
            .iter()
            .zip(&self.support)
            .map(|(&v, &s)| if s { v } else { Complex64::default() })
            .collect();
        self.fft.forward(&mut buf);
        let num: f64 = buf
            .iter()
            .zip(&self.modulus)
            .map(|(v, m)| (v.norm() - m).powi(2))
            .sum();
        let den: f64 = self.modulus.iter().map(|m| m * m).sum();
        if den == 0.0 {
            0.0
        } else {
            (num / den).sqrt()
        }
    }

    /// Amplitude over the support window, scaled to `[0, 1]`.
    pub fn extract(&self, g: &[Complex64], support: (usize, usize)) -> Image {
        let n = self.n;
        let (r0, c0) = ((n - support.0) / 2, (n - support.1) / 2);
        let mut data = Vec::with_capacity(support.0 * support.1);
        for r in r0..r0 + support.0 {
            for c in c0..c0 + support.1 {
                data.push(g[r * n + c].norm());
            }
        }
        let max = data.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            data.iter_mut().for_each(|v| *v /= max);
        }
        Image::new(support.0, support.1, data).expect("support-sized buffer")
    }
}

/// One HIO run from a random phase. Returns the reconstruction and its
/// final modulus misfit.
pub fn hio_single(
    measurement: &Measurement,
    cfg: &HioConfig,
    rng: &mut RngStream,
) -> Result<(Image, f64)> {
    let mut p = HioProblem::new(measurement, cfg)?;
    let mut g = p.random_start(rng);
    for _ in 0..cfg.n_iter {
        g = p.iterate(&g);
    }
    let err = p.modulus_error(&g);
    Ok((p.extract(&g, cfg.support), err))
}

/// HIO with `cfg.restarts` random starts; restart `i` uses `rng.fork([i])`.
/// The run with the smallest modulus misfit is returned, so selection uses
/// only the measurement.
pub fn hio_retrieve(measurement: &Measurement, cfg: &HioConfig, rng: &RngStream) -> Result<Image> {
    let mut best: Option<(Image, f64)> = None;
    for i in 0..cfg.restarts {
        let (img, err) = hio_single(measurement, cfg, &mut rng.fork(&[i as u64]))?;
        if best.as_ref().is_none_or(|b| err < b.1) {
            best = Some((img, err));
        }
    }
    Ok(best.expect("at least one restart").0)
}
