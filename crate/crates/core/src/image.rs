use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width,
            InvalidInput,
            "image {height}x{width} needs {} values, got {}",
            height * width,
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            InvalidInput,
            "non-finite pixel"
        );
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy with every pixel clamped into `[0, 1]`.
    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Embeds the image at the center of a zero frame `pad` pixels wider on
    /// every side.
    pub fn pad(&self, pad: usize) -> Image {
        let (h, w) = (self.height + 2 * pad, self.width + 2 * pad);
        let mut out = Image::zeros(h, w);
        for r in 0..self.height {
            for c in 0..self.width {
                out.set(r + pad, c + pad, self.get(r, c));
            }
        }
        out
    }

    /// Central `height x width` window.
    pub fn crop_center(&self, height: usize, width: usize) -> Result<Image> {
        ensure!(
            height <= self.height && width <= self.width,
            InvalidInput,
            "crop {height}x{width} larger than {}x{}",
            self.height,
            self.width
        );
        let (r0, c0) = ((self.height - height) / 2, (self.width - width) / 2);
        let mut out = Image::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                out.set(r, c, self.get(r + r0, c + c0));
            }
        }
        Ok(out)
    }

    /// Circular shift by `(dr, dc)`.
    pub fn roll(&self, dr: isize, dc: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut out = Image::zeros(self.height, self.width);
        for r in 0..h {
            for c in 0..w {
                let (rr, cc) = ((r + dr).rem_euclid(h), (c + dc).rem_euclid(w));
                out.set(rr as usize, cc as usize, self.get(r as usize, c as usize));
            }
        }
        out
    }

    /// Rotation by 180 degrees.
    pub fn flip(&self) -> Image {
        let mut data = self.data.clone();
        data.reverse();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn to_measurement(&self) -> Measurement {
        Measurement {
            shape: MeasurementShape {
                frames: 1,
                height: self.height,
                width: self.width,
            },
            data: self.data.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl MeasurementShape {
    pub fn image(height: usize, width: usize) -> Self {
        MeasurementShape {
            frames: 1,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Observation carried flat with its (frames, height, width) shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    shape: MeasurementShape,
    data: Vec<f64>,
}

impl Measurement {
    pub fn new(shape: MeasurementShape, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == shape.len(),
            InvalidInput,
            "measurement of shape {shape:?} needs {} values, got {}",
            shape.len(),
            data.len()
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            InvalidInput,
            "non-finite measurement value"
        );
        Ok(Measurement { shape, data })
    }

    pub fn zeros(shape: MeasurementShape) -> Self {
        Measurement {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> MeasurementShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Views a single-frame measurement as an image.
    pub fn to_image(&self) -> Result<Image> {
        ensure!(
            self.shape.frames == 1,
            InvalidInput,
            "measurement has {} frames",
            self.shape.frames
        );
        Image::new(self.shape.height, self.shape.width, self.data.clone())
    }

    /// Single frame `f` as an image.
    pub fn frame(&self, f: usize) -> Result<Image> {
        ensure!(
            f < self.shape.frames,
            InvalidInput,
            "frame {f} of {}",
            self.shape.frames
        );
        let n = self.shape.height * self.shape.width;
        Image::new(
            self.shape.height,
            self.shape.width,
            self.data[f * n..(f + 1) * n].to_vec(),
        )
    }

    /// Keeps the first `frames` frames.
    pub fn truncate_frames(&self, frames: usize) -> Result<Measurement> {
        ensure!(
            frames <= self.shape.frames,
            InvalidInput,
            "cannot keep {frames} of {} frames",
            self.shape.frames
        );
        let shape = MeasurementShape {
            frames,
            ..self.shape
        };
        Ok(Measurement {
            shape,
            data: self.data[..shape.len()].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_checks_length() {
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Measurement::new(MeasurementShape::image(2, 2), vec![0.0; 5]).is_err());
    }

    #[test]
    fn pad_and_crop_invert() {
        let img = Image::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let padded = img.pad(2);
        assert_eq!((padded.height(), padded.width()), (6, 7));
        assert_eq!(padded.crop_center(2, 3).unwrap(), img);
    }

    #[test]
    fn roll_wraps() {
        let img = Image::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(img.roll(0, 1).data(), &[3.0, 1.0, 2.0]);
        assert_eq!(img.roll(0, -1).data(), &[2.0, 3.0, 1.0]);
    }

    #[test]
    fn frames_and_truncation() {
        let m = Measurement::new(
            MeasurementShape {
                frames: 3,
                height: 1,
                width: 2,
            },
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        )
        .unwrap();
        assert_eq!(m.frame(1).unwrap().data(), &[3.0, 4.0]);
        let t = m.truncate_frames(2).unwrap();
        assert_eq!(t.shape().frames, 2);
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(m.truncate_frames(4).is_err());
    }
}
