//! Datasets: IDX image files, paired/unpaired splits.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::degrade::{apply_lowfid, DegradationSpec};
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Measurement};
use crate::nn::rng::tag;
use crate::nn::RngStream;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

/// Images loaded from one file together with where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub images: Vec<Image>,
    pub path: PathBuf,
    /// Hex SHA-256 of the file bytes.
    pub checksum: String,
}

impl DatasetHandle {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height(), i.width()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an IDX3 unsigned-byte image file; pixel bytes are divided by 255.
pub fn load_idx_dataset(path: &Path) -> Result<DatasetHandle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let images = parse_idx_images(&bytes, path)?;
    Ok(DatasetHandle {
        images,
        path: path.to_path_buf(),
        checksum: sha256_hex(&bytes),
    })
}

/// Encodes same-shape images as IDX3 bytes, rounding `[0, 1]` to `0..=255`.
pub fn idx_bytes(images: &[Image]) -> Result<Vec<u8>> {
    let (h, w) = images.first().map_or((0, 0), |i| (i.height(), i.width()));
    ensure!(
        images.iter().all(|i| (i.height(), i.width()) == (h, w)),
        InvalidInput,
        "images differ in shape"
    );
    let mut b = Vec::with_capacity(16 + images.len() * h * w);
    for v in [IDX_IMAGE_MAGIC, images.len() as u32, h as u32, w as u32] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    for i in images {
        b.extend(
            i.data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(b)
}

pub fn parse_idx_images(bytes: &[u8], origin: &Path) -> Result<Vec<Image>> {
    let fail = |offset: usize, detail: String| Error::Format {
        path: origin.to_path_buf(),
        offset,
        detail,
    };
    let word = |i: usize| -> Result<u32> {
        let off = 4 * i;
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| {
                fail(
                    bytes.len(),
                    format!("header truncated while reading word {i}"),
                )
            })
    };
    let magic = word(0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(fail(
            0,
            format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let (n, rows, cols) = (word(1)? as usize, word(2)? as usize, word(3)? as usize);
    let px = rows * cols;
    let need = 16 + n * px;
    if bytes.len() < need {
        return Err(fail(
            bytes.len(),
            format!(
                "{n} images of {rows}x{cols} need {need} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    bytes[16..need]
        .chunks_exact(px.max(1))
        .take(n)
        .map(|c| Image::new(rows, cols, c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

/// Ground truths with measurements from one observation process.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairedDataset {
    pub x: Vec<Image>,
    pub y: Vec<Measurement>,
}

impl PairedDataset {
    pub fn new(x: Vec<Image>, y: Vec<Measurement>) -> Result<Self> {
        ensure!(
            x.len() == y.len(),
            InvalidInput,
            "{} targets but {} measurements",
            x.len(),
            y.len()
        );
        if let (Some(x0), Some(y0)) = (x.first(), y.first()) {
            ensure!(
                x.iter().all(|i| i.same_shape(x0)) && y.iter().all(|m| m.shape() == y0.shape()),
                InvalidInput,
                "paired examples have inconsistent shapes"
            );
        }
        Ok(PairedDataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Index sets into the source dataset.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitIndices {
    pub paired: Vec<usize>,
    pub unpaired: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for &i in self.paired.iter().chain(&self.unpaired).chain(&self.test) {
            ensure!(seen.insert(i), Config, "index {i} appears in two splits");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub paired: PairedDataset,
    pub unpaired: Vec<Image>,
    pub test: PairedDataset,
    pub indices: SplitIndices,
}

/// Disjoint paired / unpaired / test splits. Paired and test measurements
/// come from `true_spec`; the noise for dataset image `i` is drawn from
/// `rng.fork([MEASURE, i])`, so it does not depend on the split sizes.
pub fn make_splits(
    data: &DatasetHandle,
    k: usize,
    l: usize,
    test_n: usize,
    true_spec: &DegradationSpec,
    rng: &RngStream,
) -> Result<Splits> {
    ensure!(
        k + l + test_n <= data.len(),
        Config,
        "splits of {k} + {l} + {test_n} exceed the {} available images",
        data.len()
    );
    let perm = rng.fork(&[tag::SPLIT]).permutation(data.len());
    let indices = SplitIndices {
        paired: perm[..k].to_vec(),
        unpaired: perm[k..k + l].to_vec(),
        test: perm[k + l..k + l + test_n].to_vec(),
    };
    indices.check_disjoint()?;
    let measure = |ix: &[usize]| -> Result<PairedDataset> {
        let x: Vec<Image> = ix.iter().map(|&i| data.images[i].clone()).collect();
        let y = ix
            .iter()
            .zip(&x)
            .map(|(&i, img)| apply_lowfid(true_spec, img, &mut rng.fork(&[tag::MEASURE, i as u64])))
            .collect::<Result<Vec<_>>>()?;
        PairedDataset::new(x, y)
    };
    Ok(Splits {
        paired: measure(&indices.paired)?,
        unpaired: indices
            .unpaired
            .iter()
            .map(|&i| data.images[i].clone())
            .collect(),
        test: measure(&indices.test)?,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(n: u32, r: u32, c: u32, px: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for w in [IDX_IMAGE_MAGIC, n, r, c] {
            b.extend_from_slice(&w.to_be_bytes());
        }
        b.extend_from_slice(px);
        b
    }

    #[test]
    fn crafted_two_by_two() {
        let imgs =
            parse_idx_images(&idx_bytes(1, 2, 2, &[0, 255, 128, 0]), Path::new("t")).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].data(), &[0.0, 1.0, 128.0 / 255.0, 0.0]);
        assert!((imgs[0].data()[2] - 0.50196).abs() < 1e-5);
    }

    #[test]
    fn empty_and_truncated_files_are_format_errors() {
        let e = parse_idx_images(&[], Path::new("e")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 0, .. }));
        let e = parse_idx_images(&idx_bytes(2, 2, 2, &[1, 2, 3]), Path::new("t")).unwrap_err();
        assert!(matches!(e, Error::Format { offset: 19, .. }));
        let mut bad = idx_bytes(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad, Path::new("m")),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn reload_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.idx");
        std::fs::write(&p, idx_bytes(3, 2, 1, &[1, 2, 3, 4, 5, 6])).unwrap();
        let a = load_idx_dataset(&p).unwrap();
        let b = load_idx_dataset(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum.len(), 64);
        assert_eq!(a.image_shape(), Some((2, 1)));
    }

    fn toy_handle(n: usize) -> DatasetHandle {
        DatasetHandle {
            images: (0..n)
                .map(|i| Image::filled(4, 4, i as f64 / n as f64))
                .collect(),
            path: PathBuf::from("mem"),
            checksum: String::new(),
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let d = toy_handle(30);
        let spec = DegradationSpec::blur(1.0, Some(10.0));
        let rng = RngStream::new(5, 0);
        let s = make_splits(&d, 5, 10, 7, &spec, &rng).unwrap();
        s.indices.check_disjoint().unwrap();
        assert_eq!((s.paired.len(), s.unpaired.len(), s.test.len()), (5, 10, 7));
        assert_eq!(s, make_splits(&d, 5, 10, 7, &spec, &rng).unwrap());
        let empty = make_splits(&d, 0, 10, 7, &spec, &rng).unwrap();
        assert!(empty.paired.is_empty());
        assert!(matches!(
            make_splits(&d, 20, 10, 1, &spec, &rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overlapping_indices_rejected() {
        let s = SplitIndices {
            paired: vec![1, 2],
            unpaired: vec![3],
            test: vec![2],
        };
        assert!(s.check_disjoint().is_err());
    }
}
