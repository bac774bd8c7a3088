//! Binary PGM (P5) and PPM (P6) images with maxval 255.

use std::path::Path;

use crate::error::{MkorError, Result};
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode an (H, W, 1) or (H, W, 3) image with values in [0,1].
pub fn encode(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => {
            return Err(MkorError::ShapeMismatch(format!(
                "netpbm needs 1 or 3 channels, got {}",
                c
            )))
        }
    };
    let mut out = format!("{}\n{} {}\n255\n", magic, w, h).into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decode a P5/P6 image into [0,1] values.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos).as_deref() {
        Some("P5") => 1,
        Some("P6") => 3,
        other => return Err(MkorError::format(path, format!("unsupported magic {:?}", other))),
    };
    let mut num = |what: &str| -> Result<usize> {
        next_token(bytes, &mut pos)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MkorError::format(path, format!("bad {}", what)))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(MkorError::format(
            path,
            format!("maxval {} (only 255 supported)", maxval),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = h * w * channels;
    if bytes.len() < start + n {
        return Err(MkorError::format(path, "truncated raster"));
    }
    let data = bytes[start..start + n].iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w, channels], data)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(image)?).map_err(|e| MkorError::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| MkorError::io(path, e))?;
    decode(&bytes, path)
}

/// File extension matching an image's channel count.
pub fn extension(image: &Tensor<f32>) -> &'static str {
    if image.shape().get(2) == Some(&3) {
        "ppm"
    } else {
        "pgm"
    }
}
