//! MNIST IDX and CIFAR-100 binary containers.

use std::path::{Path, PathBuf};

use crate::datasets::LabeledImage;
use crate::error::{MkorError, Result};
use crate::tensor::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            MkorError::DatasetUnavailable(path.display().to_string())
        } else {
            MkorError::io(path, e)
        }
    })
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| MkorError::format(path, "truncated header"))
}

/// Parse an IDX image file into (count, rows, cols, pixel bytes).
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(MkorError::format(path, format!("bad image magic {:#010x}", magic)));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() < n * rows * cols {
        return Err(MkorError::format(path, "truncated image data"));
    }
    Ok((n, rows, cols, body[..n * rows * cols].to_vec()))
}

/// Parse an IDX label file into raw 0-based labels.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(MkorError::format(path, format!("bad label magic {:#010x}", magic)));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(MkorError::format(path, "truncated label data"));
    }
    Ok(body[..n].to_vec())
}

/// Load an MNIST image/label file pair; labels are shifted to 1..=10.
pub fn load_mnist(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let (n, rows, cols, pixels) = parse_idx_images(&read(ip)?, ip)?;
    let raw_labels = parse_idx_labels(&read(lp)?, lp)?;
    if raw_labels.len() != n {
        return Err(MkorError::format(
            lp,
            format!("{} labels for {} images", raw_labels.len(), n),
        ));
    }
    let size = rows * cols;
    pixels
        .chunks_exact(size)
        .zip(raw_labels)
        .map(|(px, label)| {
            let data = px.iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                image: Tensor::new(vec![rows, cols, 1], data)?,
                label: label as usize + 1,
            })
        })
        .collect()
}

/// `$MKOR_MNIST_DIR`, else `data/mnist` at the workspace root.
pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("MKOR_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// The 60k training split (`train: true`) or the 10k test split from an MNIST directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>, train: bool) -> Result<Vec<LabeledImage>> {
    let prefix = if train { "train" } else { "t10k" };
    let dir = dir.as_ref();
    load_mnist(
        dir.join(format!("{}-images-idx3-ubyte", prefix)),
        dir.join(format!("{}-labels-idx1-ubyte", prefix)),
    )
}

/// `$MKOR_CIFAR100_DIR`, else `data/cifar-100-binary` at the workspace root.
pub fn cifar100_dir() -> PathBuf {
    match std::env::var_os("MKOR_CIFAR100_DIR") {
        Some(d) => PathBuf::from(d),
        None => Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/cifar-100-binary"),
    }
}

const CIFAR_RECORD: usize = 2 + 3072;

/// Decode CIFAR-100 binary records (coarse byte, fine byte, planar RGB) using fine labels.
pub fn parse_cifar100(bytes: &[u8], path: &Path) -> Result<Vec<LabeledImage>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(MkorError::format(
            path,
            format!("size {} is not a multiple of {}", bytes.len(), CIFAR_RECORD),
        ));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .map(|rec| {
            let fine = rec[1] as usize;
            if fine >= 100 {
                return Err(MkorError::format(path, format!("fine label {} out of range", fine)));
            }
            let planes = &rec[2..];
            let mut data = vec![0.0f32; 3072];
            for p in 0..1024 {
                for c in 0..3 {
                    data[p * 3 + c] = planes[c * 1024 + p] as f32 / 255.0;
                }
            }
            Ok(LabeledImage {
                image: Tensor::new(vec![32, 32, 3], data)?,
                label: fine + 1,
            })
        })
        .collect()
}

pub fn load_cifar100(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    parse_cifar100(&read(path)?, path)
}
