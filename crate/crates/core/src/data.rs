//! IDX containers, the MNIST dataset, and deterministic batching.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DcfError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unsigned-byte IDX array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let want: usize = dims.iter().product();
        if dims.is_empty() || dims.len() > 255 || want != data.len() {
            return Err(DcfError::shape(format!(
                "IDX dims {dims:?} do not match {} bytes",
                data.len()
            )));
        }
        Ok(IdxArray { dims, data })
    }

    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    /// Big-endian IDX encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

pub fn parse_idx(buf: &[u8]) -> Result<IdxArray> {
    let word = |off: usize| -> Result<u32> {
        buf.get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| DcfError::format(off, "truncated IDX header"))
    };
    let magic = word(0)?;
    if magic >> 8 != 0x08 {
        return Err(DcfError::format(
            0,
            format!("bad IDX magic 0x{magic:08x}: expected unsigned-byte data (0x000008nn)"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    if ndims == 0 {
        return Err(DcfError::format(3, "IDX array with zero dimensions"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(word(4 + 4 * d)? as usize);
    }
    let start = 4 + 4 * ndims;
    let want = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DcfError::format(4, "IDX dimensions overflow"))?;
    let have = buf.len() - start;
    if have != want {
        return Err(DcfError::format(
            start,
            format!("IDX payload has {have} bytes, dimensions {dims:?} need {want}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: buf[start..].to_vec(),
    })
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&fs::read(path)?)
}

pub fn save_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, array.to_bytes())?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    /// Canonical MNIST file names `(images, labels)`.
    pub fn mnist_files(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

/// Images scaled to `[0, 1]` with their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn from_idx(images: &IdxArray, labels: &IdxArray, split: Split) -> Result<Self> {
        if images.magic() != IDX_IMAGES_MAGIC {
            return Err(DcfError::format(0, "image file is not a 3-D IDX array"));
        }
        if labels.magic() != IDX_LABELS_MAGIC {
            return Err(DcfError::format(0, "label file is not a 1-D IDX array"));
        }
        let n = images.dims[0];
        if n == 0 {
            return Err(DcfError::invalid("empty dataset"));
        }
        if labels.dims[0] != n {
            return Err(DcfError::shape(format!("{n} images but {} labels", labels.dims[0])));
        }
        if let Some(pos) = labels.data.iter().position(|&l| l > 9) {
            return Err(DcfError::format(8 + pos, format!("label {} outside 0..=9", labels.data[pos])));
        }
        Ok(Dataset {
            images: images_to_tensor(images)?,
            labels: labels.data.clone(),
            split,
        })
    }

    /// Reads the canonical MNIST files for `split` from `dir`.
    pub fn load_mnist(dir: &Path, split: Split) -> Result<Self> {
        let (img, lab) = split.mnist_files();
        Dataset::load(&dir.join(img), &dir.join(lab), split)
    }

    pub fn load(images: &Path, labels: &Path, split: Split) -> Result<Self> {
        Dataset::from_idx(&load_idx(images)?, &load_idx(labels)?, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn subset(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            split: self.split,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        (
            self.images.select(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// `N x 1 x H x W` tensor of a 3-D IDX image array, scaled by 1/255.
pub fn images_to_tensor(images: &IdxArray) -> Result<Tensor> {
    if images.magic() != IDX_IMAGES_MAGIC {
        return Err(DcfError::format(0, "image file is not a 3-D IDX array"));
    }
    let (n, h, w) = (images.dims[0], images.dims[1], images.dims[2]);
    let data = images.data.iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::from_vec([n, 1, h, w], data)
}

/// Shuffled index batches for one epoch; the final partial batch is dropped.
///
/// The order depends only on `(seed, epoch)`.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > len {
        return Err(DcfError::invalid(format!(
            "batch size {batch_size} must be in 1..={len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(n: usize) -> (IdxArray, IdxArray) {
        let images = IdxArray::new(vec![n, 28, 28], (0..n * 784).map(|i| (i % 256) as u8).collect()).unwrap();
        let labels = IdxArray::new(vec![n], (0..n).map(|i| (i % 10) as u8).collect()).unwrap();
        (images, labels)
    }

    #[test]
    fn fixture_round_trip() {
        let (images, labels) = fixture(4);
        let bytes = images.to_bytes();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let back = parse_idx(&bytes).unwrap();
        assert_eq!(back.dims, vec![4, 28, 28]);
        assert_eq!(back.to_bytes(), bytes);
        let ds = Dataset::from_idx(&images, &labels, Split::Test).unwrap();
        assert_eq!(ds.images.shape(), [4, 1, 28, 28]);
        assert_eq!(ds.images.get(0, 0, 9, 3), 255.0 / 255.0);
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join(format!("dcf-idx-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let (images, labels) = fixture(3);
        save_idx(&dir.join("i"), &images).unwrap();
        save_idx(&dir.join("l"), &labels).unwrap();
        assert_eq!(fs::read(dir.join("i")).unwrap(), images.to_bytes());
        let ds = Dataset::load(&dir.join("i"), &dir.join("l"), Split::Train).unwrap();
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert!(load_idx(&dir.join("missing")).unwrap_err().is_io());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn malformed_files_name_the_offset() {
        let (images, _) = fixture(2);
        let mut bytes = images.to_bytes();
        bytes[2] = 0x09;
        let err = parse_idx(&bytes).unwrap_err();
        assert!(matches!(err, DcfError::Format { offset: 0, .. }), "{err}");
        assert!(err.to_string().contains("offset 0"));

        let bytes = images.to_bytes();
        let err = parse_idx(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, DcfError::Format { offset: 16, .. }));
        assert!(matches!(parse_idx(&[0, 0, 8]), Err(DcfError::Format { offset: 0, .. })));

        let (images, labels) = fixture(2);
        let short = IdxArray::new(vec![1], vec![0]).unwrap();
        assert!(Dataset::from_idx(&images, &short, Split::Train).is_err());
        assert!(Dataset::from_idx(&labels, &images, Split::Train).is_err());
        let bad = IdxArray::new(vec![2], vec![3, 10]).unwrap();
        assert!(matches!(
            Dataset::from_idx(&images, &bad, Split::Train),
            Err(DcfError::Format { offset: 9, .. })
        ));
    }

    #[test]
    fn batching() {
        let b = batch_iterator(10, 3, 1, 0).unwrap();
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.concat();
        assert_eq!(seen.len(), 9);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(batch_iterator(10, 3, 1, 0).unwrap(), b);
        let e0 = batch_iterator(1000, 100, 5, 0).unwrap().concat();
        let e1 = batch_iterator(1000, 100, 5, 1).unwrap().concat();
        assert_ne!(e0, e1);
        let mut sorted = e1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..1000).collect::<Vec<_>>());
        assert!(batch_iterator(3, 4, 0, 0).is_err());
        assert!(batch_iterator(3, 0, 0, 0).is_err());
    }

    #[test]
    fn official_train_file_when_present() {
        let dir = std::env::var_os("DCF_MNIST_DIR")
            .map(std::path::PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        let path = dir.join(Split::Train.mnist_files().1);
        if !path.exists() {
            eprintln!("SKIP: MNIST not found at {}", dir.display());
            return;
        }
        let labels = load_idx(&path).unwrap();
        assert_eq!(labels.dims, vec![60_000]);
    }
}
