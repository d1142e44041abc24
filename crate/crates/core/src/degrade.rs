//! Analytic observation models: blur, noise, down-sampling, occlusion and
//! saturated Fourier intensity.
//!
//! [`apply_lowfid`] is the single entry point used by the training loops. It
//! serves both the cheap low-fidelity model and the "true" process used to
//! synthesize paired data; the two only differ in their [`DegradationSpec`].

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::diffusion::TofSetup;
use crate::error::{ensure, Error, Result};
use crate::fourier::{fftshift, Fft2};
use crate::image::{Image, Measurement};
use crate::nn::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Blur,
    Downsample,
    Occlude,
    FourierIntensity,
    DiffusionLowfid,
    /// Finite-difference diffusion; only meaningful as a "true" process.
    DiffusionFd,
}

impl DegradationKind {
    /// Kinds that may stand in for each other as true/low-fidelity pairs.
    pub fn family(self) -> &'static str {
        match self {
            DegradationKind::DiffusionLowfid | DegradationKind::DiffusionFd => "diffusion",
            DegradationKind::Blur => "blur",
            DegradationKind::Downsample => "downsample",
            DegradationKind::Occlude => "occlude",
            DegradationKind::FourierIntensity => "fourier_intensity",
        }
    }
}

/// Axis-aligned rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Rect {
            row,
            col,
            height,
            width,
        }
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.row + self.height <= height && self.col + self.width <= width
    }
}

/// Parameters of one observation process. Only the fields used by `kind` are
/// read; [`DegradationSpec::validate`] checks they are present and valid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    /// Blur width in pixels. For `downsample` an optional blur applied on
    /// the reduced grid after block averaging.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_psf: Option<f64>,
    /// Additive Gaussian noise level; `None` means noiseless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<Rect>,
    /// Maximum per-example shift of `rect` in each direction.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub jitter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saturation_frac: Option<f64>,
    /// Zero padding added on every side before the DFT.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub pad: usize,
    /// Use |DFT| instead of |DFT|^2.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub modulus: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diffusion: Option<TofSetup>,
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

pub const DEFAULT_SATURATION_FRAC: f64 = 0.4;

impl DegradationSpec {
    fn bare(kind: DegradationKind) -> Self {
        DegradationSpec {
            kind,
            sigma_psf: None,
            snr_db: None,
            factor: None,
            rect: None,
            jitter: 0,
            saturation_frac: None,
            pad: 0,
            modulus: false,
            diffusion: None,
        }
    }

    pub fn blur(sigma_psf: f64, snr_db: Option<f64>) -> Self {
        DegradationSpec {
            sigma_psf: Some(sigma_psf),
            snr_db,
            ..Self::bare(DegradationKind::Blur)
        }
    }

    pub fn downsample(factor: usize, sigma_after: Option<f64>, snr_db: Option<f64>) -> Self {
        DegradationSpec {
            factor: Some(factor),
            sigma_psf: sigma_after,
            snr_db,
            ..Self::bare(DegradationKind::Downsample)
        }
    }

    pub fn occlude(rect: Rect, jitter: usize, snr_db: Option<f64>) -> Self {
        DegradationSpec {
            rect: Some(rect),
            jitter,
            snr_db,
            ..Self::bare(DegradationKind::Occlude)
        }
    }

    pub fn fourier(saturation_frac: f64, pad: usize, snr_db: Option<f64>) -> Self {
        DegradationSpec {
            saturation_frac: Some(saturation_frac),
            pad,
            snr_db,
            ..Self::bare(DegradationKind::FourierIntensity)
        }
    }

    pub fn diffusion(kind: DegradationKind, setup: TofSetup, snr_db: Option<f64>) -> Self {
        DegradationSpec {
            diffusion: Some(setup),
            snr_db,
            ..Self::bare(kind)
        }
    }

    /// Checks the parameters for `kind` against an input of the given size.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if let Some(snr) = self.snr_db {
            ensure!(snr.is_finite(), Config, "snr_db must be finite, got {snr}");
        }
        let need = |name: &str| Error::Config(format!("{:?} requires `{name}`", self.kind));
        match self.kind {
            DegradationKind::Blur => {
                let s = self.sigma_psf.ok_or_else(|| need("sigma_psf"))?;
                ensure!(
                    s > 0.0 && s.is_finite(),
                    Config,
                    "sigma_psf must be > 0, got {s}"
                );
            }
            DegradationKind::Downsample => {
                let f = self.factor.ok_or_else(|| need("factor"))?;
                ensure!(f > 0, Config, "factor must be positive");
                ensure!(
                    height.is_multiple_of(f) && width.is_multiple_of(f),
                    Config,
                    "factor {f} does not divide {height}x{width}"
                );
                if let Some(s) = self.sigma_psf {
                    ensure!(
                        s > 0.0 && s.is_finite(),
                        Config,
                        "sigma_psf must be > 0, got {s}"
                    );
                }
            }
            DegradationKind::Occlude => {
                let r = self.rect.ok_or_else(|| need("rect"))?;
                ensure!(
                    r.fits(height, width),
                    Config,
                    "rect {r:?} exceeds {height}x{width}"
                );
            }
            DegradationKind::FourierIntensity => {
                let s = self
                    .saturation_frac
                    .ok_or_else(|| need("saturation_frac"))?;
                ensure!(
                    s > 0.0 && s <= 1.0,
                    Config,
                    "saturation_frac must lie in (0, 1], got {s}"
                );
            }
            DegradationKind::DiffusionLowfid | DegradationKind::DiffusionFd => {
                let d = self.diffusion.as_ref().ok_or_else(|| need("diffusion"))?;
                d.validate_for(height, width)?;
            }
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps on `[-r, r]` with `r = ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    ensure!(
        sigma > 0.0 && sigma.is_finite(),
        InvalidInput,
        "sigma_psf must be > 0, got {sigma}"
    );
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / sum).collect())
}

/// Separable Gaussian blur with zero padding. The 2-D kernel is the outer
/// product of [`gaussian_kernel_1d`] with itself and sums to one.
pub fn gaussian_blur(x: &Image, sigma_psf: f64) -> Result<Image> {
    let k = gaussian_kernel_1d(sigma_psf)?;
    let r = (k.len() / 2) as isize;
    let (h, w) = (x.height(), x.width());
    let src = x.data();
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                let jj = j as isize + t as isize - r;
                if jj >= 0 && (jj as usize) < w {
                    acc += kv * src[i * w + jj as usize];
                }
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for (t, &kv) in k.iter().enumerate() {
            let ii = i as isize + t as isize - r;
            if ii < 0 || ii as usize >= h {
                continue;
            }
            let (dst, line) = (i * w, ii as usize * w);
            for j in 0..w {
                out[dst + j] += kv * rows[line + j];
            }
        }
    }
    Image::new(h, w, out)
}

/// Adds i.i.d. Gaussian noise with variance `mean(y^2) * 10^(-snr_db / 10)`.
/// `None` returns `y` unchanged.
pub fn add_noise(y: &Measurement, snr_db: Option<f64>, rng: &mut RngStream) -> Measurement {
    let Some(snr) = snr_db else {
        return y.clone();
    };
    let std = noise_std(y.data(), snr);
    let mut out = y.clone();
    if std > 0.0 {
        for v in out.data_mut() {
            *v += std * rng.normal();
        }
    }
    out
}

/// Noise standard deviation implied by `snr_db` for the clean signal `y`.
pub fn noise_std(y: &[f64], snr_db: f64) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let power = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
    (power * 10f64.powf(-snr_db / 10.0)).sqrt()
}

/// Non-overlapping block average.
pub fn downsample(x: &Image, factor: usize) -> Result<Image> {
    let (h, w) = (x.height(), x.width());
    ensure!(
        factor > 0 && h % factor == 0 && w % factor == 0,
        InvalidInput,
        "factor {factor} does not divide {h}x{w}"
    );
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..h {
        for j in 0..w {
            out[(i / factor) * ow + j / factor] += x.data()[i * w + j];
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    Image::new(oh, ow, out)
}

/// Sets the pixels inside `rect` to zero.
pub fn occlude(x: &Image, rect: Rect) -> Result<Image> {
    ensure!(
        rect.fits(x.height(), x.width()),
        InvalidInput,
        "rect {rect:?} exceeds {}x{}",
        x.height(),
        x.width()
    );
    let mut out = x.clone();
    for i in rect.row..rect.row + rect.height {
        for j in rect.col..rect.col + rect.width {
            out.set(i, j, 0.0);
        }
    }
    Ok(out)
}

/// Saturated `|DFT2(x)|^2` with the DC bin at `(H/2, W/2)`: normalized by
/// its maximum, clipped at `saturation_frac` and rescaled so the clip level
/// is 1.
pub fn fourier_intensity(x: &Image, saturation_frac: f64) -> Result<Measurement> {
    fourier_measure(x, saturation_frac, 0, false)
}

/// [`fourier_intensity`] with zero padding and an optional modulus (rather
/// than squared modulus) readout.
pub fn fourier_measure(
    x: &Image,
    saturation_frac: f64,
    pad: usize,
    modulus: bool,
) -> Result<Measurement> {
    ensure!(
        saturation_frac > 0.0 && saturation_frac <= 1.0,
        InvalidInput,
        "saturation_frac must lie in (0, 1], got {saturation_frac}"
    );
    let x = if pad > 0 { x.pad(pad) } else { x.clone() };
    let (h, w) = (x.height(), x.width());
    let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    Fft2::new(h, w).forward(&mut buf);
    let raw: Vec<f64> = buf
        .iter()
        .map(|c| if modulus { c.norm() } else { c.norm_sqr() })
        .collect();
    let mut out = fftshift(&raw, h, w);
    let max = out.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut out {
            *v = (*v / max).min(saturation_frac) / saturation_frac;
        }
    }
    Image::new(h, w, out).map(|i| i.to_measurement())
}

/// Runs the observation process described by `spec` on `x`, adding noise
/// when `spec.snr_db` is set. Randomness (noise, occlusion jitter) comes
/// from `rng` only.
pub fn apply_lowfid(spec: &DegradationSpec, x: &Image, rng: &mut RngStream) -> Result<Measurement> {
    spec.validate(x.height(), x.width())?;
    let clean = match spec.kind {
        DegradationKind::Blur => gaussian_blur(x, spec.sigma_psf.unwrap())?.to_measurement(),
        DegradationKind::Downsample => {
            let d = downsample(x, spec.factor.unwrap())?;
            match spec.sigma_psf {
                Some(s) => gaussian_blur(&d, s)?,
                None => d,
            }
            .to_measurement()
        }
        DegradationKind::Occlude => {
            let rect = jittered(spec.rect.unwrap(), spec.jitter, x.height(), x.width(), rng);
            occlude(x, rect)?.to_measurement()
        }
        DegradationKind::FourierIntensity => {
            fourier_measure(x, spec.saturation_frac.unwrap(), spec.pad, spec.modulus)?
        }
        DegradationKind::DiffusionLowfid => spec.diffusion.as_ref().unwrap().lowfid(x)?,
        DegradationKind::DiffusionFd => spec.diffusion.as_ref().unwrap().highfid(x)?,
    };
    Ok(add_noise(&clean, spec.snr_db, rng))
}

/// Shape of the measurement `spec` produces for an `height x width` input.
pub fn output_shape(
    spec: &DegradationSpec,
    height: usize,
    width: usize,
) -> Result<crate::image::MeasurementShape> {
    use crate::image::MeasurementShape;
    spec.validate(height, width)?;
    Ok(match spec.kind {
        DegradationKind::Blur | DegradationKind::Occlude => MeasurementShape::image(height, width),
        DegradationKind::Downsample => {
            let f = spec.factor.unwrap();
            MeasurementShape::image(height / f, width / f)
        }
        DegradationKind::FourierIntensity => {
            MeasurementShape::image(height + 2 * spec.pad, width + 2 * spec.pad)
        }
        DegradationKind::DiffusionLowfid | DegradationKind::DiffusionFd => {
            spec.diffusion.as_ref().unwrap().video_shape()
        }
    })
}

fn jittered(rect: Rect, jitter: usize, height: usize, width: usize, rng: &mut RngStream) -> Rect {
    if jitter == 0 {
        return rect;
    }
    let span = 2 * jitter + 1;
    let dr = rng.below(span) as isize - jitter as isize;
    let dc = rng.below(span) as isize - jitter as isize;
    let row = (rect.row as isize + dr).clamp(0, (height - rect.height) as isize) as usize;
    let col = (rect.col as isize + dc).clamp(0, (width - rect.width) as isize) as usize;
    Rect { row, col, ..rect }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = RngStream::new(seed, 0);
        Image::new(h, w, (0..h * w).map(|_| rng.uniform()).collect()).unwrap()
    }

    fn naive_blur(x: &Image, sigma: f64) -> Vec<f64> {
        let r = (3.0 * sigma).ceil() as isize;
        let mut kernel = vec![];
        let mut total = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                let v = (-((a * a + b * b) as f64) / (2.0 * sigma * sigma)).exp();
                kernel.push((a, b, v));
                total += v;
            }
        }
        let (h, w) = (x.height() as isize, x.width() as isize);
        let mut out = vec![0.0; (h * w) as usize];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for &(a, b, v) in &kernel {
                    let (ii, jj) = (i + a, j + b);
                    if ii >= 0 && ii < h && jj >= 0 && jj < w {
                        acc += v / total * x.get(ii as usize, jj as usize);
                    }
                }
                out[(i * w + j) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn kernel_sums_to_one() {
        for s in [0.3, 1.0, 1.5, 2.0, 4.0, 6.5] {
            let k = gaussian_kernel_1d(s).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_reproduces_kernel() {
        let mut x = Image::zeros(15, 15);
        x.set(7, 7, 1.0);
        let y = gaussian_blur(&x, 1.0).unwrap();
        let k = gaussian_kernel_1d(1.0).unwrap();
        for a in 0..7 {
            for b in 0..7 {
                assert!((y.get(4 + a, 4 + b) - k[a] * k[b]).abs() < 1e-15);
            }
        }
        assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(y.get(0, 0), 0.0);
    }

    #[test]
    fn constant_interior_unchanged() {
        let x = Image::filled(20, 20, 0.7);
        let y = gaussian_blur(&x, 1.0).unwrap();
        for i in 3..17 {
            for j in 3..17 {
                assert!((y.get(i, j) - 0.7).abs() < 1e-12);
            }
        }
        // zero padding darkens the corner
        assert!(y.get(0, 0) < 0.7);
    }

    #[test]
    fn blur_matches_naive_convolution() {
        let x = random_image(5, 5, 3);
        let y = gaussian_blur(&x, 0.8).unwrap();
        for (a, b) in y.data().iter().zip(naive_blur(&x, 0.8)) {
            assert!((a - b).abs() < 1e-12);
        }
        let x = random_image(9, 12, 4);
        let y = gaussian_blur(&x, 2.0).unwrap();
        for (a, b) in y.data().iter().zip(naive_blur(&x, 2.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let x = Image::zeros(4, 4);
        assert!(gaussian_blur(&x, 0.0).is_err());
        assert!(gaussian_blur(&x, -1.0).is_err());
        assert!(gaussian_blur(&x, f64::NAN).is_err());
    }

    #[test]
    fn noise_none_is_identity() {
        let y = random_image(4, 4, 1).to_measurement();
        let mut rng = RngStream::new(0, 0);
        assert_eq!(add_noise(&y, None, &mut rng), y);
    }

    #[test]
    fn noise_variance_matches_snr() {
        let y = Measurement::new(
            crate::image::MeasurementShape::image(1, 100_000),
            vec![1.0; 100_000],
        )
        .unwrap();
        let mut rng = RngStream::new(5, 1);
        let n = add_noise(&y, Some(20.0), &mut rng);
        let var = n.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / 1e5;
        assert!((var / 0.01 - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn noise_is_deterministic() {
        let y = random_image(6, 6, 2).to_measurement();
        let a = add_noise(&y, Some(10.0), &mut RngStream::new(9, 9));
        let b = add_noise(&y, Some(10.0), &mut RngStream::new(9, 9));
        assert_eq!(a, b);
        assert_ne!(a, y);
    }

    #[test]
    fn downsample_examples() {
        let c = Image::filled(6, 6, 0.3);
        let d = downsample(&c, 3).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
        assert!(d.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let x = Image::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(downsample(&x, 2).unwrap().data(), &[0.5]);

        let x = random_image(4, 4, 6);
        let d = downsample(&x, 2).unwrap();
        for bi in 0..2 {
            for bj in 0..2 {
                let mean = (x.get(2 * bi, 2 * bj)
                    + x.get(2 * bi, 2 * bj + 1)
                    + x.get(2 * bi + 1, 2 * bj)
                    + x.get(2 * bi + 1, 2 * bj + 1))
                    / 4.0;
                assert!((d.get(bi, bj) - mean).abs() < 1e-15);
            }
        }
        assert!(downsample(&x, 3).is_err());
    }

    #[test]
    fn occlude_examples() {
        let x = random_image(8, 8, 7);
        assert_eq!(occlude(&x, Rect::new(3, 3, 0, 0)).unwrap(), x);

        let ones = Image::filled(28, 28, 1.0);
        let o = occlude(&ones, Rect::new(10, 10, 8, 11)).unwrap();
        assert_eq!(o.data().iter().sum::<f64>(), 696.0);

        let rect = Rect::new(2, 1, 3, 4);
        let o = occlude(&x, rect).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let inside = (2..5).contains(&i) && (1..5).contains(&j);
                let mask = if inside { 0.0 } else { 1.0 };
                assert_eq!(o.get(i, j), x.get(i, j) * mask);
            }
        }
        assert!(occlude(&x, Rect::new(6, 6, 3, 1)).is_err());
    }

    #[test]
    fn fourier_zero_and_constant() {
        let z = fourier_intensity(&Image::zeros(8, 8), 0.4).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let c = fourier_intensity(&Image::filled(8, 8, 0.5), 1.0).unwrap();
        assert_eq!(c.data()[4 * 8 + 4], 1.0);
        let others: f64 = c
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != 36)
            .map(|(_, v)| v.abs())
            .sum();
        assert!(others < 1e-20);
    }

    #[test]
    fn fourier_shift_and_flip_invariant() {
        let x = random_image(10, 10, 8);
        let base = fourier_intensity(&x, 0.4).unwrap();
        let shifted = fourier_intensity(&x.roll(3, -2), 0.4).unwrap();
        let flipped = fourier_intensity(&x.flip(), 0.4).unwrap();
        for ((a, b), c) in base.data().iter().zip(shifted.data()).zip(flipped.data()) {
            assert!((a - b).abs() < 1e-9);
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn fourier_saturation_clips_at_one() {
        let x = random_image(12, 12, 10);
        let m = fourier_intensity(&x, 0.4).unwrap();
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let unsat = fourier_intensity(&x, 1.0).unwrap();
        for (s, u) in m.data().iter().zip(unsat.data()) {
            assert!((s - (u.min(0.4) / 0.4)).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_padding_and_modulus() {
        let x = random_image(6, 6, 11);
        let spec = DegradationSpec {
            modulus: true,
            ..DegradationSpec::fourier(1.0, 3, None)
        };
        let m = apply_lowfid(&spec, &x, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(m.shape(), output_shape(&spec, 6, 6).unwrap());
        assert_eq!(m.len(), 144);
        let sq = fourier_measure(&x, 1.0, 3, false).unwrap();
        for (a, b) in m.data().iter().zip(sq.data()) {
            assert!((a * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn apply_lowfid_dispatch() {
        let mut x = Image::zeros(21, 21);
        x.set(10, 10, 1.0);
        let mut rng = RngStream::new(1, 1);
        let y = apply_lowfid(&DegradationSpec::blur(2.0, None), &x, &mut rng).unwrap();
        assert_eq!(y.data(), gaussian_blur(&x, 2.0).unwrap().data());

        let c = Image::filled(8, 8, 0.25);
        let d = apply_lowfid(&DegradationSpec::downsample(2, None, None), &c, &mut rng).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn apply_lowfid_blur_noise_variance() {
        let x = Image::filled(200, 500, 0.5);
        let spec = DegradationSpec::blur(2.0, Some(25.0));
        let y = apply_lowfid(&spec, &x, &mut RngStream::new(3, 3)).unwrap();
        let clean = gaussian_blur(&x, 2.0).unwrap();
        let expected = noise_std(clean.data(), 25.0).powi(2);
        let n = clean.data().len() as f64;
        let var = y
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / n;
        assert!((var / expected - 1.0).abs() < 0.05);
    }

    #[test]
    fn downsample_blurs_after_reduction() {
        let x = random_image(8, 8, 12);
        let spec = DegradationSpec::downsample(2, Some(1.4), None);
        let y = apply_lowfid(&spec, &x, &mut RngStream::new(0, 0)).unwrap();
        let expected = gaussian_blur(&downsample(&x, 2).unwrap(), 1.4).unwrap();
        assert_eq!(y.data(), expected.data());
    }

    #[test]
    fn occlusion_jitter_stays_inside() {
        let x = Image::filled(28, 28, 1.0);
        let spec = DegradationSpec::occlude(Rect::new(20, 0, 5, 15), 3, None);
        let mut rng = RngStream::new(2, 2);
        for _ in 0..50 {
            let y = apply_lowfid(&spec, &x, &mut rng).unwrap();
            assert_eq!(y.data().iter().sum::<f64>(), 784.0 - 75.0);
        }
    }

    #[test]
    fn validation_errors() {
        let mut spec = DegradationSpec::blur(1.0, None);
        spec.sigma_psf = None;
        assert!(matches!(spec.validate(4, 4), Err(Error::Config(_))));
        assert!(DegradationSpec::downsample(3, None, None)
            .validate(4, 4)
            .is_err());
        assert!(DegradationSpec::fourier(0.0, 0, None)
            .validate(4, 4)
            .is_err());
        assert!(DegradationSpec::fourier(1.5, 0, None)
            .validate(4, 4)
            .is_err());
        assert!(DegradationSpec::blur(1.0, Some(f64::INFINITY))
            .validate(4, 4)
            .is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = DegradationSpec::occlude(Rect::new(10, 10, 8, 11), 2, Some(16.0));
        let text = serde_json::to_string(&spec).unwrap();
        assert!(text.contains("\"kind\":\"occlude\""));
        let back: DegradationSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let parsed: DegradationSpec =
            serde_json::from_str(r#"{"kind":"blur","sigma_psf":2.0,"snr_db":16}"#).unwrap();
        assert_eq!(parsed, DegradationSpec::blur(2.0, Some(16.0)));
    }
}
