//! Binary PGM (P5, maxval 255) output and simple image grids.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::image::Image;

/// Encodes `img` as P5 bytes; values are clamped to `[0, 1]`.
pub fn pgm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, pgm_bytes(img)).map_err(|e| Error::io(path, e))
}

/// Parses P5 data written by [`pgm_bytes`].
pub fn read_pgm(bytes: &[u8]) -> Result<Image> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(pos > start, InvalidInput, "truncated PGM header");
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    ensure!(
        fields[0] == "P5" && fields[3] == "255",
        InvalidInput,
        "not an 8-bit P5 file"
    );
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidInput(format!("bad PGM size {s}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes
        .get(pos + 1..pos + 1 + w * h)
        .ok_or_else(|| Error::InvalidInput("truncated PGM body".into()))?;
    Image::new(h, w, body.iter().map(|&b| b as f64 / 255.0).collect())
}

/// Rescales to `[0, 1]` by the maximum (for standard-deviation maps).
pub fn normalize_max(img: &Image) -> Image {
    let max = img.data().iter().cloned().fold(0.0, f64::max);
    let mut out = img.clone();
    if max > 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v /= max);
    }
    out
}

/// Tiles rows of images with a `gap`-pixel mid-gray border. Each row may
/// have a different number of panels; panels may differ in size.
pub fn grid(rows: &[Vec<Image>], gap: usize) -> Image {
    let widths: Vec<usize> = rows
        .iter()
        .map(|r| r.iter().map(|i| i.width() + gap).sum::<usize>() + gap)
        .collect();
    let heights: Vec<usize> = rows
        .iter()
        .map(|r| r.iter().map(|i| i.height()).max().unwrap_or(0) + gap)
        .collect();
    let (w, h) = (
        widths.iter().copied().max().unwrap_or(0),
        heights.iter().sum::<usize>() + gap,
    );
    let mut out = Image::filled(h.max(1), w.max(1), 0.5);
    let mut y = gap;
    for (row, rh) in rows.iter().zip(&heights) {
        let mut x = gap;
        for img in row {
            for r in 0..img.height() {
                for c in 0..img.width() {
                    out.set(y + r, x + c, img.get(r, c));
                }
            }
            x += img.width() + gap;
        }
        y += rh;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_and_clamp() {
        let img = Image::new(2, 3, vec![0.0, 1.0, 0.5, -1.0, 2.0, 0.25]).unwrap();
        let b = pgm_bytes(&img);
        assert!(b.starts_with(b"P5\n3 2\n255\n"));
        let back = read_pgm(&b).unwrap();
        assert_eq!(back.data()[3], 0.0);
        assert_eq!(back.data()[4], 1.0);
        assert!((back.data()[2] - 0.5).abs() < 1.0 / 255.0);
    }

    #[test]
    fn grid_size() {
        let a = Image::zeros(2, 2);
        let g = grid(&[vec![a.clone(), a.clone()], vec![Image::zeros(3, 1)]], 1);
        assert_eq!((g.height(), g.width()), (1 + 3 + 4, 7));
        assert_eq!(g.get(1, 1), 0.0);
        assert_eq!(g.get(0, 0), 0.5);
    }
}
