use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Operation kind plus its attributes. Shapes follow the standard
/// definitions; images are NCHW, kernels OIHW.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// (m,k) x (k,n) -> (m,n)
    MatMul,
    /// (n,m) + (m,) broadcast over rows
    AddBias,
    Add,
    Sub,
    Mul,
    AddScalar(f64),
    MulScalar(f64),
    Relu,
    Sigmoid,
    /// row-wise softmax on a 2-D tensor
    Softmax,
    Conv2d { stride: usize, padding: usize },
    AvgPool2d { k: usize, stride: usize },
    MaxPool2d { k: usize, stride: usize },
    /// (n,c,h,w) -> (n,c)
    GlobalAvgPool,
    /// inputs [x, gamma, beta] in training mode,
    /// [x, gamma, beta, mean, var] in eval mode
    BatchNorm { training: bool, eps: f64 },
    /// inverted scaling: eval mode is the identity
    Dropout { rate: f64, seed: u64, training: bool },
    /// column-wise concatenation of 2-D tensors
    Concat,
    Reshape(Vec<usize>),
    /// nearest-neighbour 2x spatial upsampling
    Upsample2x,
    Sum,
    Mean,
    /// inputs [prediction, target]
    Mse,
    /// inputs [prediction, target]; predictions must lie in (0,1)
    Bce,
    /// input [logits (n,c)]; integer class targets carried in attrs
    Ce { targets: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::AddBias => "add_bias",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::MulScalar(_) => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::AvgPool2d { .. } => "avg_pool2d",
            OpKind::MaxPool2d { .. } => "max_pool2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::BatchNorm { .. } => "batch_norm",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Concat => "concat",
            OpKind::Reshape(_) => "reshape",
            OpKind::Upsample2x => "upsample2x",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
            OpKind::Bce => "bce",
            OpKind::Ce { .. } => "ce",
        }
    }
}

fn arity_check(op: &OpKind, inputs: &[Tensor], want: usize) -> Result<()> {
    if inputs.len() != want {
        return Err(TensorError::shape(
            op.name(),
            format!("expected {want} inputs, got {}", inputs.len()),
        ));
    }
    Ok(())
}

/// Apply an operation, recording the graph node when any input tracks
/// gradients. This is the single dispatch point; the methods on
/// [`Tensor`] are thin wrappers around it.
pub fn forward(kind: OpKind, inputs: &[Tensor]) -> Result<Tensor> {
    let (values, shape) = compute_forward(&kind, inputs)?;
    Ok(Tensor::from_op(values, shape, kind, inputs.to_vec()))
}

fn compute_forward(op: &OpKind, inputs: &[Tensor]) -> Result<(Vec<f64>, Vec<usize>)> {
    match op {
        OpKind::MatMul => {
            arity_check(op, inputs, 2)?;
            let (a, b) = (&inputs[0], &inputs[1]);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::shape(
                    "matmul",
                    format!("{sa:?} x {sb:?}"),
                ));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let av = a.to_vec();
            let bv = b.to_vec();
            Ok((matmul(&av, &bv, m, k, n), vec![m, n]))
        }
        OpKind::AddBias => {
            arity_check(op, inputs, 2)?;
            let (x, b) = (&inputs[0], &inputs[1]);
            let sx = x.shape();
            if sx.len() != 2 || b.shape() != [sx[1]] {
                return Err(TensorError::shape(
                    "add_bias",
                    format!("{:?} + {:?}", sx, b.shape()),
                ));
            }
            let cols = sx[1];
            let bv = b.to_vec();
            let mut out = x.to_vec();
            for row in out.chunks_mut(cols) {
                for (o, bi) in row.iter_mut().zip(&bv) {
                    *o += bi;
                }
            }
            Ok((out, sx.to_vec()))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            arity_check(op, inputs, 2)?;
            inputs[0].check_same_shape(&inputs[1], op.name())?;
            let a = inputs[0].to_vec();
            let bv = inputs[1].to_vec();
            let out: Vec<f64> = match op {
                OpKind::Add => a.iter().zip(&bv).map(|(x, y)| x + y).collect(),
                OpKind::Sub => a.iter().zip(&bv).map(|(x, y)| x - y).collect(),
                _ => a.iter().zip(&bv).map(|(x, y)| x * y).collect(),
            };
            Ok((out, inputs[0].shape().to_vec()))
        }
        OpKind::AddScalar(c) => {
            arity_check(op, inputs, 1)?;
            Ok((
                inputs[0].to_vec().iter().map(|x| x + c).collect(),
                inputs[0].shape().to_vec(),
            ))
        }
        OpKind::MulScalar(c) => {
            arity_check(op, inputs, 1)?;
            Ok((
                inputs[0].to_vec().iter().map(|x| x * c).collect(),
                inputs[0].shape().to_vec(),
            ))
        }
        OpKind::Relu => {
            arity_check(op, inputs, 1)?;
            Ok((
                inputs[0].to_vec().iter().map(|x| x.max(0.0)).collect(),
                inputs[0].shape().to_vec(),
            ))
        }
        OpKind::Sigmoid => {
            arity_check(op, inputs, 1)?;
            Ok((
                inputs[0].to_vec().iter().map(|x| sigmoid(*x)).collect(),
                inputs[0].shape().to_vec(),
            ))
        }
        OpKind::Softmax => {
            arity_check(op, inputs, 1)?;
            let s = inputs[0].shape();
            if s.len() != 2 {
                return Err(TensorError::shape("softmax", format!("{s:?} is not 2-D")));
            }
            let cols = s[1];
            let mut out = inputs[0].to_vec();
            for row in out.chunks_mut(cols) {
                softmax_row(row);
            }
            Ok((out, s.to_vec()))
        }
        OpKind::Conv2d { stride, padding } => {
            arity_check(op, inputs, 2)?;
            conv2d_forward(&inputs[0], &inputs[1], *stride, *padding)
        }
        OpKind::AvgPool2d { k, stride } | OpKind::MaxPool2d { k, stride } => {
            arity_check(op, inputs, 1)?;
            pool_forward(op, &inputs[0], *k, *stride)
        }
        OpKind::GlobalAvgPool => {
            arity_check(op, inputs, 1)?;
            let s = inputs[0].shape();
            if s.len() != 4 {
                return Err(TensorError::shape("global_avg_pool", format!("{s:?} is not 4-D")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let x = inputs[0].to_vec();
            let hw = h * w;
            let mut out = vec![0.0; n * c];
            for i in 0..n * c {
                out[i] = x[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
            }
            Ok((out, vec![n, c]))
        }
        OpKind::BatchNorm { training, eps } => batch_norm_forward(inputs, *training, *eps),
        OpKind::Dropout { rate, seed, training } => {
            arity_check(op, inputs, 1)?;
            let x = inputs[0].to_vec();
            if !training || *rate == 0.0 {
                return Ok((x, inputs[0].shape().to_vec()));
            }
            let keep = 1.0 - rate;
            let mask = dropout_mask(x.len(), *rate, *seed);
            let out = x
                .iter()
                .zip(&mask)
                .map(|(v, m)| if *m { v / keep } else { 0.0 })
                .collect();
            Ok((out, inputs[0].shape().to_vec()))
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::shape("concat", "no inputs".into()));
            }
            let rows = inputs[0].shape().first().copied().unwrap_or(0);
            let mut total_cols = 0;
            for t in inputs {
                let s = t.shape();
                if s.len() != 2 || s[0] != rows {
                    return Err(TensorError::shape(
                        "concat",
                        format!("expected 2-D with {rows} rows, got {s:?}"),
                    ));
                }
                total_cols += s[1];
            }
            let mut out = vec![0.0; rows * total_cols];
            let mut col_off = 0;
            for t in inputs {
                let cols = t.shape()[1];
                t.with_values(|v| {
                    for r in 0..rows {
                        out[r * total_cols + col_off..r * total_cols + col_off + cols]
                            .copy_from_slice(&v[r * cols..(r + 1) * cols]);
                    }
                });
                col_off += cols;
            }
            Ok((out, vec![rows, total_cols]))
        }
        OpKind::Reshape(target) => {
            arity_check(op, inputs, 1)?;
            let numel: usize = target.iter().product();
            if numel != inputs[0].numel() {
                return Err(TensorError::shape(
                    "reshape",
                    format!("{:?} -> {:?}", inputs[0].shape(), target),
                ));
            }
            Ok((inputs[0].to_vec(), target.clone()))
        }
        OpKind::Upsample2x => {
            arity_check(op, inputs, 1)?;
            let s = inputs[0].shape();
            if s.len() != 4 {
                return Err(TensorError::shape("upsample2x", format!("{s:?} is not 4-D")));
            }
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let x = inputs[0].to_vec();
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![0.0; n * c * oh * ow];
            for img in 0..n * c {
                let src = &x[img * h * w..(img + 1) * h * w];
                let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
                for y in 0..oh {
                    for xcol in 0..ow {
                        dst[y * ow + xcol] = src[(y / 2) * w + xcol / 2];
                    }
                }
            }
            Ok((out, vec![n, c, oh, ow]))
        }
        OpKind::Sum => {
            arity_check(op, inputs, 1)?;
            Ok((vec![inputs[0].to_vec().iter().sum()], vec![1]))
        }
        OpKind::Mean => {
            arity_check(op, inputs, 1)?;
            let v = inputs[0].to_vec();
            Ok((vec![v.iter().sum::<f64>() / v.len() as f64], vec![1]))
        }
        OpKind::Mse => {
            arity_check(op, inputs, 2)?;
            inputs[0].check_same_shape(&inputs[1], "mse")?;
            let p = inputs[0].to_vec();
            let t = inputs[1].to_vec();
            let n = p.len() as f64;
            let loss = p.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
            Ok((vec![loss], vec![1]))
        }
        OpKind::Bce => {
            arity_check(op, inputs, 2)?;
            inputs[0].check_same_shape(&inputs[1], "bce")?;
            let p = inputs[0].to_vec();
            let t = inputs[1].to_vec();
            let n = p.len() as f64;
            let mut loss = 0.0;
            for (pi, ti) in p.iter().zip(&t) {
                if *pi < -BCE_TOL || *pi > 1.0 + BCE_TOL {
                    return Err(TensorError::BceRange(*pi));
                }
                let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                loss -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
            }
            Ok((vec![loss / n], vec![1]))
        }
        OpKind::Ce { targets } => {
            arity_check(op, inputs, 1)?;
            let s = inputs[0].shape();
            if s.len() != 2 || s[0] != targets.len() {
                return Err(TensorError::shape(
                    "ce",
                    format!("logits {s:?} vs {} targets", targets.len()),
                ));
            }
            let (n, c) = (s[0], s[1]);
            let logits = inputs[0].to_vec();
            let mut loss = 0.0;
            for (i, &t) in targets.iter().enumerate() {
                if t >= c {
                    return Err(TensorError::ClassOutOfRange { index: t, classes: c });
                }
                let row = &logits[i * c..(i + 1) * c];
                loss += log_sum_exp(row) - row[t];
            }
            Ok((vec![loss / n as f64], vec![1]))
        }
    }
}

const BCE_EPS: f64 = 1e-12;
const BCE_TOL: f64 = 1e-9;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn dropout_mask(len: usize, rate: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen::<f64>() >= rate).collect()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
    c
}

fn conv_out_dim(input: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(k).map(|d| d / stride + 1)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
        return Err(TensorError::shape(
            "conv2d",
            format!("input {sx:?} (NCHW) vs kernel {sw:?} (OIHW)"),
        ));
    }
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    let (oh, ow) = match (conv_out_dim(h, kh, stride, padding), conv_out_dim(wd, kw, stride, padding)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{wd}+{padding}"),
            ))
        }
    };
    let xv = x.to_vec();
    let wv = w.to_vec();
    let mut out = vec![0.0; n * o * oh * ow];

    out.par_chunks_mut(o * oh * ow)
        .enumerate()
        .for_each(|(img, out_img)| {
            let x_img = &xv[img * c * h * wd..(img + 1) * c * h * wd];
            for oc in 0..o {
                let out_ch = &mut out_img[oc * oh * ow..(oc + 1) * oh * ow];
                for ic in 0..c {
                    let x_ch = &x_img[ic * h * wd..(ic + 1) * h * wd];
                    let w_base = ((oc * c) + ic) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv_k = wv[w_base + ky * kw + kx];
                            if wv_k == 0.0 {
                                continue;
                            }
                            accumulate_conv_rows(
                                out_ch, x_ch, wv_k, oh, ow, h, wd, stride, padding, ky, kx, false,
                            );
                        }
                    }
                }
            }
        });
    Ok((out, vec![n, o, oh, ow]))
}

/// Shared inner loop for conv2d forward (`transpose = false`, reads x writes
/// out) and its input-gradient pass (`transpose = true`, reads out writes x).
#[allow(clippy::too_many_arguments)]
fn accumulate_conv_rows(
    out_ch: &mut [f64],
    x_ch: &[f64],
    weight: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
    _transpose: bool,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
        let out_row = &mut out_ch[oy * ow..(oy + 1) * ow];
        // valid ox range: 0 <= ox*stride + kx - padding < w
        let lo = ox_lower(kx, padding, stride);
        let hi = ox_upper(kx, padding, stride, w, ow);
        let mut ix = (lo * stride + kx) as isize - padding as isize;
        for out_v in out_row.iter_mut().take(hi).skip(lo) {
            *out_v += weight * x_row[ix as usize];
            ix += stride as isize;
        }
    }
}

fn ox_lower(kx: usize, padding: usize, stride: usize) -> usize {
    if kx >= padding {
        0
    } else {
        (padding - kx).div_ceil(stride)
    }
}

fn ox_upper(kx: usize, padding: usize, stride: usize, w: usize, ow: usize) -> usize {
    // largest ox with ox*stride + kx - padding <= w-1, exclusive bound
    let max_i = w - 1 + padding;
    if kx > max_i {
        return 0;
    }
    (((max_i - kx) / stride) + 1).min(ow)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (sx, sw) = (x.shape(), w.shape());
    let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
    let (o, kh, kw) = (sw[0], sw[2], sw[3]);
    let oh = conv_out_dim(h, kh, stride, padding).unwrap();
    let ow = conv_out_dim(wd, kw, stride, padding).unwrap();
    let xv = x.to_vec();
    let wv = w.to_vec();

    let dx = need_dx.then(|| {
        let mut dx = vec![0.0; n * c * h * wd];
        dx.par_chunks_mut(c * h * wd)
            .enumerate()
            .for_each(|(img, dx_img)| {
                let g_img = &grad_out[img * o * oh * ow..(img + 1) * o * oh * ow];
                for oc in 0..o {
                    let g_ch = &g_img[oc * oh * ow..(oc + 1) * oh * ow];
                    for ic in 0..c {
                        let dx_ch = &mut dx_img[ic * h * wd..(ic + 1) * h * wd];
                        let w_base = ((oc * c) + ic) * kh * kw;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wk = wv[w_base + ky * kw + kx];
                                if wk == 0.0 {
                                    continue;
                                }
                                scatter_conv_rows(dx_ch, g_ch, wk, oh, ow, h, wd, stride, padding, ky, kx);
                            }
                        }
                    }
                }
            });
        dx
    });

    let dw = need_dw.then(|| {
        let mut dw = vec![0.0; o * c * kh * kw];
        dw.par_chunks_mut(c * kh * kw)
            .enumerate()
            .for_each(|(oc, dw_oc)| {
                for img in 0..n {
                    let g_ch = &grad_out[(img * o + oc) * oh * ow..(img * o + oc + 1) * oh * ow];
                    for ic in 0..c {
                        let x_ch = &xv[(img * c + ic) * h * wd..(img * c + ic + 1) * h * wd];
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let mut acc = 0.0;
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x_ch[iy as usize * wd..(iy as usize + 1) * wd];
                                    let g_row = &g_ch[oy * ow..(oy + 1) * ow];
                                    let lo = ox_lower(kx, padding, stride);
                                    let hi = ox_upper(kx, padding, stride, wd, ow);
                                    let mut ix = (lo * stride + kx) as isize - padding as isize;
                                    for g in g_row.iter().take(hi).skip(lo) {
                                        acc += g * x_row[ix as usize];
                                        ix += stride as isize;
                                    }
                                }
                                dw_oc[ic * kh * kw + ky * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
        dw
    });

    (dx, dw)
}

/// dx[iy, ix] += weight * g[oy, ox] over the valid output range.
#[allow(clippy::too_many_arguments)]
fn scatter_conv_rows(
    dx_ch: &mut [f64],
    g_ch: &[f64],
    weight: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) {
    for oy in 0..oh {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let dx_row = &mut dx_ch[iy as usize * w..(iy as usize + 1) * w];
        let g_row = &g_ch[oy * ow..(oy + 1) * ow];
        let lo = ox_lower(kx, padding, stride);
        let hi = ox_upper(kx, padding, stride, w, ow);
        let mut ix = (lo * stride + kx) as isize - padding as isize;
        for g in g_row.iter().take(hi).skip(lo) {
            dx_row[ix as usize] += weight * g;
            ix += stride as isize;
        }
    }
}

fn pool_forward(op: &OpKind, x: &Tensor, k: usize, stride: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::shape(op.name(), format!("{s:?} is not 4-D")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h < k || w < k {
        return Err(TensorError::shape(
            op.name(),
            format!("window {k} larger than input {h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let xv = x.to_vec();
    let is_max = matches!(op, OpKind::MaxPool2d { .. });
    let mut out = vec![0.0; n * c * oh * ow];
    for img in 0..n * c {
        let src = &xv[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = if is_max { f64::NEG_INFINITY } else { 0.0 };
                for ky in 0..k {
                    for kx in 0..k {
                        let v = src[(oy * stride + ky) * w + ox * stride + kx];
                        if is_max {
                            acc = acc.max(v);
                        } else {
                            acc += v;
                        }
                    }
                }
                dst[oy * ow + ox] = if is_max { acc } else { acc / (k * k) as f64 };
            }
        }
    }
    Ok((out, vec![n, c, oh, ow]))
}

fn batch_norm_forward(inputs: &[Tensor], training: bool, eps: f64) -> Result<(Vec<f64>, Vec<usize>)> {
    let want = if training { 3 } else { 5 };
    if inputs.len() != want {
        return Err(TensorError::shape(
            "batch_norm",
            format!("expected {want} inputs, got {}", inputs.len()),
        ));
    }
    let x = &inputs[0];
    let channels = bn_channels(x)?;
    for (i, name) in [(1, "gamma"), (2, "beta")] {
        if inputs[i].shape() != [channels] {
            return Err(TensorError::shape(
                "batch_norm",
                format!("{name} shape {:?}, want [{channels}]", inputs[i].shape()),
            ));
        }
    }
    let (mean, var) = if training {
        bn_batch_stats(x, channels)
    } else {
        (inputs[3].to_vec(), inputs[4].to_vec())
    };
    let gamma = inputs[1].to_vec();
    let beta = inputs[2].to_vec();
    let xv = x.to_vec();
    let mut out = vec![0.0; xv.len()];
    bn_for_each_channel(x.shape(), channels, |ch, idx| {
        let inv = 1.0 / (var[ch] + eps).sqrt();
        out[idx] = (xv[idx] - mean[ch]) * inv * gamma[ch] + beta[ch];
    });
    Ok((out, x.shape().to_vec()))
}

fn bn_channels(x: &Tensor) -> Result<usize> {
    match x.shape() {
        [_, f] => Ok(*f),
        [_, c, _, _] => Ok(*c),
        s => Err(TensorError::shape(
            "batch_norm",
            format!("{s:?} is neither 2-D nor 4-D"),
        )),
    }
}

/// Population (biased) statistics per channel, the ones used to normalize.
pub(crate) fn bn_batch_stats(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let xv = x.to_vec();
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    let mut count = vec![0usize; channels];
    bn_for_each_channel(x.shape(), channels, |ch, idx| {
        mean[ch] += xv[idx];
        count[ch] += 1;
    });
    for ch in 0..channels {
        mean[ch] /= count[ch] as f64;
    }
    bn_for_each_channel(x.shape(), channels, |ch, idx| {
        let d = xv[idx] - mean[ch];
        var[ch] += d * d;
    });
    for ch in 0..channels {
        var[ch] /= count[ch] as f64;
    }
    (mean, var)
}

fn bn_for_each_channel(shape: &[usize], channels: usize, mut f: impl FnMut(usize, usize)) {
    match shape {
        [n, feat] => {
            debug_assert_eq!(*feat, channels);
            for i in 0..*n {
                for ch in 0..channels {
                    f(ch, i * channels + ch);
                }
            }
        }
        [n, c, h, w] => {
            debug_assert_eq!(*c, channels);
            let hw = h * w;
            for i in 0..*n {
                for ch in 0..*c {
                    let base = (i * c + ch) * hw;
                    for p in 0..hw {
                        f(ch, base + p);
                    }
                }
            }
        }
        _ => unreachable!(),
    }
}

/// Gradients of each input, given the output tensor and its gradient.
/// Entries are `None` for inputs that do not require a gradient.
pub(crate) fn compute_backward(
    op: &OpKind,
    inputs: &[Tensor],
    output: &Tensor,
    grad_out: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let need: Vec<bool> = inputs.iter().map(|t| t.requires()).collect();
    match op {
        OpKind::MatMul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let da = need[0].then(|| {
                // dA = dC . B^T
                let bv = b.to_vec();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let g_row = &grad_out[i * n..(i + 1) * n];
                    let da_row = &mut da[i * k..(i + 1) * k];
                    for (p, da_v) in da_row.iter_mut().enumerate() {
                        let b_row = &bv[p * n..(p + 1) * n];
                        *da_v = g_row.iter().zip(b_row).map(|(g, bb)| g * bb).sum();
                    }
                }
                da
            });
            let db = need[1].then(|| {
                // dB = A^T . dC
                let av = a.to_vec();
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let g_row = &grad_out[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let db_row = &mut db[p * n..(p + 1) * n];
                        for (d, g) in db_row.iter_mut().zip(g_row) {
                            *d += aip * g;
                        }
                    }
                }
                db
            });
            vec![da, db]
        }
        OpKind::AddBias => {
            let cols = inputs[1].numel();
            let dx = need[0].then(|| grad_out.to_vec());
            let db = need[1].then(|| {
                let mut db = vec![0.0; cols];
                for row in grad_out.chunks(cols) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                db
            });
            vec![dx, db]
        }
        OpKind::Add => vec![
            need[0].then(|| grad_out.to_vec()),
            need[1].then(|| grad_out.to_vec()),
        ],
        OpKind::Sub => vec![
            need[0].then(|| grad_out.to_vec()),
            need[1].then(|| grad_out.iter().map(|g| -g).collect()),
        ],
        OpKind::Mul => {
            let da = need[0].then(|| {
                inputs[1].with_values(|y| grad_out.iter().zip(y).map(|(g, v)| g * v).collect())
            });
            let db = need[1].then(|| {
                inputs[0].with_values(|x| grad_out.iter().zip(x).map(|(g, v)| g * v).collect())
            });
            vec![da, db]
        }
        OpKind::AddScalar(_) => vec![need[0].then(|| grad_out.to_vec())],
        OpKind::MulScalar(c) => vec![need[0].then(|| grad_out.iter().map(|g| g * c).collect())],
        OpKind::Relu => vec![need[0].then(|| {
            inputs[0].with_values(|x| {
                grad_out
                    .iter()
                    .zip(x)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect()
            })
        })],
        OpKind::Sigmoid => vec![need[0].then(|| {
            output.with_values(|s| grad_out.iter().zip(s).map(|(g, v)| g * v * (1.0 - v)).collect())
        })],
        OpKind::Softmax => vec![need[0].then(|| {
            let cols = output.shape()[1];
            output.with_values(|s| {
                let mut dx = vec![0.0; s.len()];
                for r in 0..s.len() / cols {
                    let srow = &s[r * cols..(r + 1) * cols];
                    let grow = &grad_out[r * cols..(r + 1) * cols];
                    let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        dx[r * cols + j] = srow[j] * (grow[j] - dot);
                    }
                }
                dx
            })
        })],
        OpKind::Conv2d { stride, padding } => {
            let (dx, dw) = conv2d_backward(
                &inputs[0], &inputs[1], grad_out, *stride, *padding, need[0], need[1],
            );
            vec![dx, dw]
        }
        OpKind::AvgPool2d { k, stride } => vec![need[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let inv = 1.0 / (k * k) as f64;
            let mut dx = vec![0.0; n * c * h * w];
            for img in 0..n * c {
                let g = &grad_out[img * oh * ow..(img + 1) * oh * ow];
                let d = &mut dx[img * h * w..(img + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[oy * ow + ox] * inv;
                        for ky in 0..*k {
                            for kx in 0..*k {
                                d[(oy * stride + ky) * w + ox * stride + kx] += gv;
                            }
                        }
                    }
                }
            }
            dx
        })],
        OpKind::MaxPool2d { k, stride } => vec![need[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
            let xv = inputs[0].to_vec();
            let mut dx = vec![0.0; n * c * h * w];
            for img in 0..n * c {
                let src = &xv[img * h * w..(img + 1) * h * w];
                let g = &grad_out[img * oh * ow..(img + 1) * oh * ow];
                let d = &mut dx[img * h * w..(img + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        // first maximum in scan order receives the gradient
                        let (mut best_idx, mut best) = (0usize, f64::NEG_INFINITY);
                        for ky in 0..*k {
                            for kx in 0..*k {
                                let idx = (oy * stride + ky) * w + ox * stride + kx;
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        d[best_idx] += g[oy * ow + ox];
                    }
                }
            }
            dx
        })],
        OpKind::GlobalAvgPool => vec![need[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let hw = h * w;
            let inv = 1.0 / hw as f64;
            let mut dx = vec![0.0; n * c * hw];
            for img in 0..n * c {
                let gv = grad_out[img] * inv;
                for p in 0..hw {
                    dx[img * hw + p] = gv;
                }
            }
            dx
        })],
        OpKind::BatchNorm { training, eps } => bn_backward(inputs, grad_out, *training, *eps, &need),
        OpKind::Dropout { rate, seed, training } => vec![need[0].then(|| {
            if !training || *rate == 0.0 {
                return grad_out.to_vec();
            }
            let keep = 1.0 - rate;
            let mask = dropout_mask(grad_out.len(), *rate, *seed);
            grad_out
                .iter()
                .zip(&mask)
                .map(|(g, m)| if *m { g / keep } else { 0.0 })
                .collect()
        })],
        OpKind::Concat => {
            let rows = output.shape()[0];
            let total = output.shape()[1];
            let mut col_off = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (i, t) in inputs.iter().enumerate() {
                let cols = t.shape()[1];
                grads.push(need[i].then(|| {
                    let mut d = vec![0.0; rows * cols];
                    for r in 0..rows {
                        d[r * cols..(r + 1) * cols].copy_from_slice(
                            &grad_out[r * total + col_off..r * total + col_off + cols],
                        );
                    }
                    d
                }));
                col_off += cols;
            }
            grads
        }
        OpKind::Reshape(_) => vec![need[0].then(|| grad_out.to_vec())],
        OpKind::Upsample2x => vec![need[0].then(|| {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (2 * h, 2 * w);
            let mut dx = vec![0.0; n * c * h * w];
            for img in 0..n * c {
                let g = &grad_out[img * oh * ow..(img + 1) * oh * ow];
                let d = &mut dx[img * h * w..(img + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        d[(y / 2) * w + x / 2] += g[y * ow + x];
                    }
                }
            }
            dx
        })],
        OpKind::Sum => vec![need[0].then(|| vec![grad_out[0]; inputs[0].numel()])],
        OpKind::Mean => vec![need[0].then(|| {
            let n = inputs[0].numel();
            vec![grad_out[0] / n as f64; n]
        })],
        OpKind::Mse => {
            let n = inputs[0].numel() as f64;
            let scale = 2.0 * grad_out[0] / n;
            let diff: Vec<f64> = inputs[0].with_values(|p| {
                inputs[1].with_values(|t| p.iter().zip(t).map(|(a, b)| a - b).collect())
            });
            vec![
                need[0].then(|| diff.iter().map(|d| scale * d).collect()),
                need[1].then(|| diff.iter().map(|d| -scale * d).collect()),
            ]
        }
        OpKind::Bce => {
            let n = inputs[0].numel() as f64;
            let scale = grad_out[0] / n;
            let p = inputs[0].to_vec();
            let t = inputs[1].to_vec();
            vec![
                need[0].then(|| {
                    p.iter()
                        .zip(&t)
                        .map(|(pi, ti)| {
                            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            scale * (pc - ti) / (pc * (1.0 - pc))
                        })
                        .collect()
                }),
                need[1].then(|| {
                    p.iter()
                        .map(|pi| {
                            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            scale * ((1.0 - pc).ln() - pc.ln())
                        })
                        .collect()
                }),
            ]
        }
        OpKind::Ce { targets } => vec![need[0].then(|| {
            let (n, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let scale = grad_out[0] / n as f64;
            let logits = inputs[0].to_vec();
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                let row = &logits[i * c..(i + 1) * c];
                let lse = log_sum_exp(row);
                for j in 0..c {
                    let soft = (row[j] - lse).exp();
                    dx[i * c + j] = scale * (soft - if j == targets[i] { 1.0 } else { 0.0 });
                }
            }
            dx
        })],
    }
}

impl Tensor {
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        forward(OpKind::MatMul, &[self.clone(), other.clone()])
    }
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        forward(OpKind::AddBias, &[self.clone(), bias.clone()])
    }
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        forward(OpKind::Add, &[self.clone(), other.clone()])
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        forward(OpKind::Sub, &[self.clone(), other.clone()])
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        forward(OpKind::Mul, &[self.clone(), other.clone()])
    }
    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        forward(OpKind::AddScalar(c), &[self.clone()])
    }
    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        forward(OpKind::MulScalar(c), &[self.clone()])
    }
    pub fn relu(&self) -> Result<Tensor> {
        forward(OpKind::Relu, &[self.clone()])
    }
    pub fn sigmoid(&self) -> Result<Tensor> {
        forward(OpKind::Sigmoid, &[self.clone()])
    }
    pub fn softmax(&self) -> Result<Tensor> {
        forward(OpKind::Softmax, &[self.clone()])
    }
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        forward(OpKind::Conv2d { stride, padding }, &[self.clone(), kernel.clone()])
    }
    pub fn avg_pool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        forward(OpKind::AvgPool2d { k, stride }, &[self.clone()])
    }
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Result<Tensor> {
        forward(OpKind::MaxPool2d { k, stride }, &[self.clone()])
    }
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        forward(OpKind::GlobalAvgPool, &[self.clone()])
    }
    pub fn batch_norm_train(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        forward(
            OpKind::BatchNorm { training: true, eps },
            &[self.clone(), gamma.clone(), beta.clone()],
        )
    }
    pub fn batch_norm_eval(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        mean: &Tensor,
        var: &Tensor,
        eps: f64,
    ) -> Result<Tensor> {
        forward(
            OpKind::BatchNorm { training: false, eps },
            &[self.clone(), gamma.clone(), beta.clone(), mean.clone(), var.clone()],
        )
    }
    pub fn dropout(&self, rate: f64, seed: u64, training: bool) -> Result<Tensor> {
        forward(OpKind::Dropout { rate, seed, training }, &[self.clone()])
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        forward(OpKind::Reshape(shape.to_vec()), &[self.clone()])
    }
    /// (n,c,h,w) -> (n, c*h*w)
    pub fn flatten(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(TensorError::shape("reshape", format!("flatten of {s:?}")));
        }
        let rows = s[0];
        let cols = self.numel() / rows;
        self.reshape(&[rows, cols])
    }
    pub fn upsample2x(&self) -> Result<Tensor> {
        forward(OpKind::Upsample2x, &[self.clone()])
    }
    pub fn sum(&self) -> Result<Tensor> {
        forward(OpKind::Sum, &[self.clone()])
    }
    pub fn mean(&self) -> Result<Tensor> {
        forward(OpKind::Mean, &[self.clone()])
    }
}

/// Column-wise concatenation of 2-D tensors.
pub fn concat(inputs: &[Tensor]) -> Result<Tensor> {
    forward(OpKind::Concat, inputs)
}

fn bn_backward(
    inputs: &[Tensor],
    grad_out: &[f64],
    training: bool,
    eps: f64,
    need: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let x = &inputs[0];
    let channels = bn_channels(x).expect("validated in forward");
    let (mean, var) = if training {
        bn_batch_stats(x, channels)
    } else {
        (inputs[3].to_vec(), inputs[4].to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gamma = inputs[1].to_vec();
    let xv = x.to_vec();

    // per-channel reductions
    let mut sum_g = vec![0.0; channels];
    let mut sum_gx = vec![0.0; channels]; // sum of grad * xhat
    let mut count = vec![0usize; channels];
    bn_for_each_channel(x.shape(), channels, |ch, idx| {
        let xhat = (xv[idx] - mean[ch]) * inv_std[ch];
        sum_g[ch] += grad_out[idx];
        sum_gx[ch] += grad_out[idx] * xhat;
        count[ch] += 1;
    });

    let dx = need[0].then(|| {
        let mut dx = vec![0.0; xv.len()];
        if training {
            bn_for_each_channel(x.shape(), channels, |ch, idx| {
                let m = count[ch] as f64;
                let xhat = (xv[idx] - mean[ch]) * inv_std[ch];
                dx[idx] = gamma[ch] * inv_std[ch] / m
                    * (m * grad_out[idx] - sum_g[ch] - xhat * sum_gx[ch]);
            });
        } else {
            bn_for_each_channel(x.shape(), channels, |ch, idx| {
                dx[idx] = grad_out[idx] * gamma[ch] * inv_std[ch];
            });
        }
        dx
    });
    let dgamma = need[1].then(|| sum_gx.clone());
    let dbeta = need[2].then(|| sum_g.clone());

    let mut grads = vec![dx, dgamma, dbeta];
    if !training {
        grads.push(None); // running mean
        grads.push(None); // running var
    }
    grads
}
