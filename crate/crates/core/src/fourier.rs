//! 2-D discrete Fourier transforms on row-major complex buffers.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward and inverse transforms for one `height x width` grid.
pub struct Fft2 {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    column: Vec<Complex64>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
            column: vec![Complex64::default(); height],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&mut self, buf: &mut [Complex64]) {
        let (row, col) = (self.row_fwd.clone(), self.col_fwd.clone());
        self.run(buf, &*row, &*col);
    }

    /// Inverse transform in place, scaled by `1 / (height * width)` so that
    /// `inverse(forward(x)) == x`.
    pub fn inverse(&mut self, buf: &mut [Complex64]) {
        let (row, col) = (self.row_inv.clone(), self.col_inv.clone());
        self.run(buf, &*row, &*col);
        let scale = 1.0 / (self.height * self.width) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&mut self, buf: &mut [Complex64], row: &dyn Fft<f64>, col: &dyn Fft<f64>) {
        assert_eq!(buf.len(), self.height * self.width, "buffer size");
        for r in buf.chunks_exact_mut(self.width) {
            row.process(r);
        }
        for c in 0..self.width {
            for r in 0..self.height {
                self.column[r] = buf[r * self.width + c];
            }
            col.process(&mut self.column);
            for r in 0..self.height {
                buf[r * self.width + c] = self.column[r];
            }
        }
    }
}

/// Moves the zero-frequency bin from `(0, 0)` to `(height / 2, width / 2)`.
pub fn fftshift<T: Copy + Default>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for r in 0..height {
        for c in 0..width {
            let (rr, cc) = ((r + height / 2) % height, (c + width / 2) % width);
            out[rr * width + cc] = data[r * width + c];
        }
    }
    out
}

/// Inverse of [`fftshift`].
pub fn ifftshift<T: Copy + Default>(data: &[T], height: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::default(); data.len()];
    for r in 0..height {
        for c in 0..width {
            let (rr, cc) = ((r + height / 2) % height, (c + width / 2) % width);
            out[r * width + c] = data[rr * width + cc];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::default();
                for r in 0..h {
                    for c in 0..w {
                        let phase = -2.0
                            * std::f64::consts::PI
                            * ((u * r) as f64 / h as f64 + (v * c) as f64 / w as f64);
                        acc += x[r * w + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        let (h, w) = (5, 6);
        let x: Vec<Complex64> = (0..h * w)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut buf = x.clone();
        Fft2::new(h, w).forward(&mut buf);
        for (a, b) in buf.iter().zip(naive_dft(&x, h, w)) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn inverse_roundtrip() {
        let (h, w) = (4, 7);
        let x: Vec<Complex64> = (0..h * w).map(|i| Complex64::new(i as f64, -1.0)).collect();
        let mut fft = Fft2::new(h, w);
        let mut buf = x.clone();
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&x) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn shift_roundtrip_odd_and_even() {
        for (h, w) in [(4, 4), (5, 3)] {
            let x: Vec<usize> = (0..h * w).collect();
            let s = fftshift(&x, h, w);
            assert_eq!(s[(h / 2) * w + w / 2], 0);
            assert_eq!(ifftshift(&s, h, w), x);
        }
    }
}
