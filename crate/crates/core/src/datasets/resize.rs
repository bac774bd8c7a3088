//! Bilinear upscaling, its least-squares inverse, and nearest resizing.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MkorError, Result};
use crate::tensor::Tensor;

/// Interpolation taps for one axis (half-pixel centers, clamped at the borders).
fn axis_taps(input: usize, output: usize) -> Vec<[(usize, f64); 2]> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            let t = src - i0 as f64;
            [(i0, 1.0 - t), (i1, t)]
        })
        .collect()
}

/// Standard bilinear interpolation of an (H, W, C) image.
pub fn upscale_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(MkorError::ShapeMismatch("empty resize".into()));
    }
    let rows = axis_taps(h, out_h);
    let cols = axis_taps(w, out_w);
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, rx) in cols.iter().enumerate() {
            for ch in 0..c {
                let mut v = 0.0f64;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        v += wy * wx * image.at(iy, ix, ch) as f64;
                    }
                }
                out.set(oy, ox, ch, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbour resize, used to bring coarse reconstructions to ground-truth size.
pub fn resize_nearest(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (h, w, c) = image.hwc()?;
    let mut out = Tensor::zeros(vec![out_h, out_w, c]);
    for oy in 0..out_h {
        let iy = (oy * h) / out_h;
        for ox in 0..out_w {
            let ix = (ox * w) / out_w;
            for ch in 0..c {
                out.set(oy, ox, ch, image.at(iy, ix, ch));
            }
        }
    }
    Ok(out)
}

/// Weighted least-squares inverse of [`upscale_bilinear`]: finds the small image
/// whose upscale best matches the observed pixels (weight 0 = unobserved).
pub struct UpscaleInverse {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    weights: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl UpscaleInverse {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != out_h * out_w {
            return Err(MkorError::ShapeMismatch(format!(
                "{} weights for a {}x{} grid",
                weights.len(),
                out_h,
                out_w
            )));
        }
        let n = in_h * in_w;
        let rows = axis_taps(in_h, out_h);
        let cols = axis_taps(in_w, out_w);
        let mut normal = DMatrix::<f64>::zeros(n, n);
        for (oy, ry) in rows.iter().enumerate() {
            for (ox, rx) in cols.iter().enumerate() {
                let wp = weights[oy * out_w + ox];
                if wp == 0.0 {
                    continue;
                }
                let taps: Vec<(usize, f64)> = ry
                    .iter()
                    .flat_map(|&(iy, wy)| rx.iter().map(move |&(ix, wx)| (iy * in_w + ix, wy * wx)))
                    .collect();
                for &(a, wa) in &taps {
                    for &(b, wb) in &taps {
                        normal[(a, b)] += wp * wa * wb;
                    }
                }
            }
        }
        let mean_diag = (0..n).map(|i| normal[(i, i)]).sum::<f64>() / n as f64;
        let ridge = 1e-10 * mean_diag.max(1e-12);
        for i in 0..n {
            normal[(i, i)] += ridge;
        }
        let chol =
            Cholesky::new(normal).ok_or_else(|| MkorError::InvalidConfig("upscale inverse is singular".into()))?;
        Ok(UpscaleInverse {
            in_h,
            in_w,
            out_h,
            out_w,
            weights: weights.to_vec(),
            chol,
        })
    }

    pub fn solve(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (h, w, c) = image.hwc()?;
        if (h, w) != (self.out_h, self.out_w) {
            return Err(MkorError::ShapeMismatch(format!(
                "inverse built for {}x{}, got {}x{}",
                self.out_h, self.out_w, h, w
            )));
        }
        let rows = axis_taps(self.in_h, self.out_h);
        let cols = axis_taps(self.in_w, self.out_w);
        let mut out = Tensor::zeros(vec![self.in_h, self.in_w, c]);
        for ch in 0..c {
            let mut rhs = DVector::<f64>::zeros(self.in_h * self.in_w);
            for (oy, ry) in rows.iter().enumerate() {
                for (ox, rx) in cols.iter().enumerate() {
                    let wp = self.weights[oy * self.out_w + ox];
                    if wp == 0.0 {
                        continue;
                    }
                    let y = image.at(oy, ox, ch) as f64;
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            rhs[iy * self.in_w + ix] += wp * wy * wx * y;
                        }
                    }
                }
            }
            let x = self.chol.solve(&rhs);
            for iy in 0..self.in_h {
                for ix in 0..self.in_w {
                    out.set(iy, ix, ch, x[iy * self.in_w + ix].clamp(0.0, 1.0) as f32);
                }
            }
        }
        Ok(out)
    }
}
