//! Forward and backward passes. Convolutions go through im2col and a GEMM
//! kernel; FC dot products accumulate in `f64`.

use crate::error::{MkorError, Result};
use crate::nn::model::{Activation, Layer, ModelSpec, PoolKind};
use crate::nn::params::{GradientUpdate, ParamRole, ParamSet};
use crate::real::{gemm, Mat, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], layer: &Layer) -> Self {
        let Layer::Conv {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        } = *layer
        else {
            unreachable!()
        };
        let (h, w) = (in_shape[0], in_shape[1]);
        ConvGeom {
            h,
            w,
            ci: in_ch,
            co: out_ch,
            k: kernel,
            s: stride,
            p: padding,
            ho: (h + 2 * padding - kernel) / stride + 1,
            wo: (w + 2 * padding - kernel) / stride + 1,
        }
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.ci
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.positions() * patch];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.s + ky) as isize - g.p as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.s + kx) as isize - g.p as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.w + ix as usize) * g.ci;
                    let dst = (ky * g.k + kx) * g.ci;
                    row[dst..dst + g.ci].copy_from_slice(&x[src..src + g.ci]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.h * g.w * g.ci];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * patch..][..patch];
            for ky in 0..g.k {
                let iy = (oy * g.s + ky) as isize - g.p as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.s + kx) as isize - g.p as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.w + ix as usize) * g.ci;
                    let src = (ky * g.k + kx) * g.ci;
                    for c in 0..g.ci {
                        dx[dst + c] = dx[dst + c] + row[src + c];
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward<T: Real>(x: &[T], g: &ConvGeom, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let cols = im2col(x, g);
    let (m, kk) = (g.positions(), g.patch());
    let mut out = vec![T::zero(); m * g.co];
    if let Some(b) = bias {
        for row in out.chunks_mut(g.co) {
            row.copy_from_slice(b);
        }
    }
    gemm(
        T::one(),
        &cols,
        Mat::row_major(m, kk),
        weight,
        Mat::transposed(kk, g.co),
        T::one(),
        &mut out,
        Mat::row_major(m, g.co),
    );
    out
}

/// Dot product with eight independent `f64` lanes and a fixed reduction order.
pub(crate) fn dot_f64<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        for l in 0..8 {
            acc[l] += a[i * 8 + l].f64() * b[i * 8 + l].f64();
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i].f64() * b[i].f64();
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

fn fc_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, out_features: usize) -> Vec<T> {
    let n = x.len();
    (0..out_features)
        .map(|o| {
            let b = bias.map(|b| b[o].f64()).unwrap_or(0.0);
            T::of(dot_f64(&weight[o * n..(o + 1) * n], x) + b)
        })
        .collect()
}

fn pool_forward<T: Real>(x: &[T], shape: &[usize], kind: PoolKind) -> Vec<T> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let v = |dy: usize, dx: usize| x[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                let window = [v(0, 0), v(0, 1), v(1, 0), v(1, 1)];
                out[(oy * wo + ox) * c + ch] = match kind {
                    PoolKind::Max => window.iter().copied().fold(T::neg_infinity(), T::max),
                    PoolKind::Avg => T::of(window.iter().map(|v| v.f64()).sum::<f64>() * 0.25),
                };
            }
        }
    }
    out
}

fn pool_backward<T: Real>(x: &[T], shape: &[usize], kind: PoolKind, dy: &[T]) -> Vec<T> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![T::zero(); h * w * c];
    let quarter = T::of(0.25);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let g = dy[(oy * wo + ox) * c + ch];
                let idx = |k: usize| ((2 * oy + k / 2) * w + 2 * ox + k % 2) * c + ch;
                match kind {
                    PoolKind::Max => {
                        // first maximum in row-major window order
                        let mut best = 0;
                        for k in 1..4 {
                            if x[idx(k)] > x[idx(best)] {
                                best = k;
                            }
                        }
                        dx[idx(best)] = dx[idx(best)] + g;
                    }
                    PoolKind::Avg => {
                        for k in 0..4 {
                            dx[idx(k)] = dx[idx(k)] + g * quarter;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn check_input<T: Real>(spec: &ModelSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<()> {
    params.check_layout(spec)?;
    if x.shape() != spec.input_shape {
        return Err(MkorError::ShapeMismatch(format!(
            "model {} expects input {:?}, got {:?}",
            spec.name,
            spec.input_shape,
            x.shape()
        )));
    }
    Ok(())
}

/// Outputs of every layer for one sample; the last entry holds the logits.
pub fn forward<T: Real>(spec: &ModelSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    check_input(spec, params, x)?;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(spec.layers.len());
    for (i, layer) in spec.layers.iter().enumerate() {
        let input = if i == 0 { x } else { &outputs[i - 1] };
        let data = match *layer {
            Layer::Conv { .. } => {
                let g = ConvGeom::new(input.shape(), layer);
                conv_forward(input.data(), &g, params.weight(i)?, params.bias(i))
            }
            Layer::Act(Activation::Relu) => input.data().iter().map(|&v| v.max(T::zero())).collect(),
            Layer::Act(Activation::Sigmoid) => input.data().iter().map(|&v| T::of(sigmoid(v.f64()))).collect(),
            Layer::Pool(kind) => pool_forward(input.data(), input.shape(), kind),
            Layer::Flatten => input.data().to_vec(),
            Layer::Fc { out_features, .. } => fc_forward(input.data(), params.weight(i)?, params.bias(i), out_features),
        };
        outputs.push(Tensor::new(spec.shapes[i].clone(), data)?);
    }
    Ok(outputs)
}

pub fn logits<T: Real>(spec: &ModelSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Vec<T>> {
    Ok(forward(spec, params, x)?
        .pop()
        .map(|t| t.into_data())
        .unwrap_or_default())
}

/// Cross-entropy of softmax(logits) against a 1-based label, with its logit gradient.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> Result<(f64, Vec<T>)> {
    if label == 0 || label > logits.len() {
        return Err(MkorError::InvalidLabel {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = total.ln() + max - logits[label - 1].f64();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(n, e)| {
            let p = e / total;
            T::of(if n + 1 == label { p - 1.0 } else { p })
        })
        .collect();
    Ok((loss, grad))
}

/// Back-propagate `dlogits` and add the parameter gradient into `grads`.
pub fn backward<T: Real>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    outputs: &[Tensor<T>],
    dlogits: &[T],
    grads: &mut ParamSet<T>,
) -> Result<()> {
    check_input(spec, params, x)?;
    grads.check_layout(spec)?;
    if outputs.len() != spec.layers.len() || dlogits.len() != spec.num_classes() {
        return Err(MkorError::ShapeMismatch("backward trace does not match model".into()));
    }
    let mut dy: Vec<T> = dlogits.to_vec();
    for i in (0..spec.layers.len()).rev() {
        let input = if i == 0 { x } else { &outputs[i - 1] };
        let need_dx = i > 0;
        dy = match spec.layers[i] {
            Layer::Act(Activation::Relu) => outputs[i]
                .data()
                .iter()
                .zip(&dy)
                .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
                .collect(),
            Layer::Act(Activation::Sigmoid) => outputs[i]
                .data()
                .iter()
                .zip(&dy)
                .map(|(&o, &g)| g * o * (T::one() - o))
                .collect(),
            Layer::Pool(kind) => pool_backward(input.data(), input.shape(), kind, &dy),
            Layer::Flatten => dy,
            Layer::Fc { in_features, .. } => {
                let xin = input.data();
                {
                    let dw = grads.weight_mut(i)?;
                    for (o, &g) in dy.iter().enumerate() {
                        if g == T::zero() {
                            continue;
                        }
                        for (d, &v) in dw[o * in_features..(o + 1) * in_features].iter_mut().zip(xin) {
                            *d = *d + g * v;
                        }
                    }
                }
                if let Some(db) = grads.bias_mut(i) {
                    for (d, &g) in db.iter_mut().zip(&dy) {
                        *d = *d + g;
                    }
                }
                if need_dx {
                    let w = params.weight(i)?;
                    let mut acc = vec![0.0f64; in_features];
                    for (o, &g) in dy.iter().enumerate() {
                        if g == T::zero() {
                            continue;
                        }
                        let g = g.f64();
                        for (a, &wv) in acc.iter_mut().zip(&w[o * in_features..(o + 1) * in_features]) {
                            *a += g * wv.f64();
                        }
                    }
                    acc.into_iter().map(T::of).collect()
                } else {
                    Vec::new()
                }
            }
            Layer::Conv { .. } => {
                let g = ConvGeom::new(input.shape(), &spec.layers[i]);
                let cols = im2col(input.data(), &g);
                let (m, kk) = (g.positions(), g.patch());
                {
                    let (dw, db) = grads.weight_bias_mut(i)?;
                    gemm(
                        T::one(),
                        &dy,
                        Mat::transposed(g.co, m),
                        &cols,
                        Mat::row_major(m, kk),
                        T::one(),
                        dw,
                        Mat::row_major(g.co, kk),
                    );
                    if let Some(db) = db {
                        let mut sums = vec![0.0f64; g.co];
                        for row in dy.chunks(g.co) {
                            for (s, &v) in sums.iter_mut().zip(row) {
                                *s += v.f64();
                            }
                        }
                        for (d, s) in db.iter_mut().zip(sums) {
                            *d = *d + T::of(s);
                        }
                    }
                }
                if need_dx {
                    drop(cols);
                    let mut dcols = vec![T::zero(); m * kk];
                    gemm(
                        T::one(),
                        &dy,
                        Mat::row_major(m, g.co),
                        params.weight(i)?,
                        Mat::row_major(g.co, kk),
                        T::zero(),
                        &mut dcols,
                        Mat::row_major(m, kk),
                    );
                    col2im(&dcols, &g)
                } else {
                    Vec::new()
                }
            }
        };
    }
    Ok(())
}

/// Loss of one labelled sample; its gradient is added into `grads`.
pub fn accumulate_gradient<T: Real>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    label: usize,
    grads: &mut ParamSet<T>,
) -> Result<f64> {
    let outputs = forward(spec, params, x)?;
    let logits = outputs.last().expect("non-empty model").data();
    let (loss, dlogits) = softmax_cross_entropy(logits, label)?;
    backward(spec, params, x, &outputs, &dlogits, grads)?;
    Ok(loss)
}

/// Loss and parameter gradient of one labelled sample.
pub fn loss_and_gradient<T: Real>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    x: &Tensor<T>,
    label: usize,
) -> Result<(f64, ParamSet<T>)> {
    let mut grads = ParamSet::zeros(&spec.layout);
    let loss = accumulate_gradient(spec, params, x, label, &mut grads)?;
    Ok((loss, grads))
}

/// Element-wise sum of per-sample gradients in index order.
pub fn sum_gradients<T: Real>(grads: &[ParamSet<T>]) -> Result<GradientUpdate<T>> {
    let first = grads
        .first()
        .ok_or_else(|| MkorError::InvalidConfig("cannot sum an empty gradient list".into()))?;
    let mut total = ParamSet::zeros(&first.layout);
    for g in grads {
        if !g.layout.same_shape(&first.layout) {
            return Err(MkorError::LayoutMismatch("gradients with different layouts".into()));
        }
        total.add_assign(g)?;
    }
    Ok(GradientUpdate {
        grads: total,
        batch_size: grads.len(),
    })
}

/// Which parameter blocks exist for a layer.
pub fn layer_roles(spec: &ModelSpec, layer: usize) -> Vec<ParamRole> {
    spec.layout
        .entries
        .iter()
        .filter(|e| e.layer == layer)
        .map(|e| e.role)
        .collect()
}
