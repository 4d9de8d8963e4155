//! Forward and backward kernels for the layer set the network uses.
//!
//! Every kernel is a pure function of its inputs. Convolutions lower to a
//! single-threaded sgemm per batch item (im2col for spatial kernels), so the
//! reduction order of each output element is fixed for a given build and
//! results are bit-reproducible. Batch items run in parallel; per-item
//! parameter gradients are summed afterwards in item order.

use rayon::prelude::*;

use super::{AutodiffError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding that preserves spatial dims (extra row/column goes to
    /// the bottom/right for even kernels).
    Same,
    Valid,
}

impl Padding {
    fn amounts(self, k: usize) -> (usize, usize) {
        match self {
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
            Padding::Valid => (0, 0),
        }
    }
}

/// `c = a * b + beta * c` for row/column-strided f32 matrices.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad_top: usize,
    pad_left: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, pad: Padding) -> Result<Self, AutodiffError> {
        let (before, after) = pad.amounts(k);
        if h + before + after < k || w + before + after < k {
            return Err(AutodiffError::shape(format!("{h}x{w} input too small for {k}x{k} kernel")));
        }
        Ok(Self {
            cin,
            h,
            w,
            k,
            pad_top: before,
            pad_left: before,
            ho: h + before + after - k + 1,
            wo: w + before + after - k + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.ho == self.h && self.wo == self.w
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    // valid output columns: 0 <= ox + kx - pad_left < w
                    let ox_lo = self.pad_left.saturating_sub(kx).min(wo);
                    let ox_hi = (self.w + self.pad_left).saturating_sub(kx).min(wo).max(ox_lo);
                    for oy in 0..ho {
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        let iy = (oy + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..ox_lo].fill(0.0);
                        if ox_hi > ox_lo {
                            let ix0 = ox_lo + kx - self.pad_left;
                            out[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                        }
                        out[ox_hi..].fill(0.0);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (k, ho, wo) = (self.k, self.ho, self.wo);
        for c in 0..self.cin {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    let ox_lo = self.pad_left.saturating_sub(kx).min(wo);
                    let ox_hi = (self.w + self.pad_left).saturating_sub(kx).min(wo).max(ox_lo);
                    for oy in 0..ho {
                        let iy = (oy + ky) as isize - self.pad_top as isize;
                        if iy < 0 || iy >= self.h as isize || ox_hi == ox_lo {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let ix0 = ox_lo + kx - self.pad_left;
                        let g = &src[oy * wo + ox_lo..oy * wo + ox_hi];
                        for (d, s) in dst[ix0..ix0 + g.len()].iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(x: &Tensor, k: &Tensor, b: Option<&Tensor>) -> Result<([usize; 4], [usize; 4]), AutodiffError> {
    let xs = x.shape4()?;
    let ks = k.shape4()?;
    if ks[1] != xs[1] {
        return Err(AutodiffError::shape(format!(
            "conv kernel {:?} expects {} input channels, input has {}",
            k.dims(),
            ks[1],
            xs[1]
        )));
    }
    if ks[2] != ks[3] || !(1..=3).contains(&ks[2]) {
        return Err(AutodiffError::shape(format!("unsupported kernel size {:?}", k.dims())));
    }
    if let Some(b) = b {
        if b.len() != ks[0] {
            return Err(AutodiffError::shape(format!("bias {:?} for {} outputs", b.dims(), ks[0])));
        }
    }
    Ok((xs, ks))
}

/// Cross-correlation with stride 1. Kernel layout `[cout, cin, k, k]`.
pub fn conv2d(x: &Tensor, k: &Tensor, b: Option<&Tensor>, pad: Padding) -> Result<Tensor, AutodiffError> {
    let ([n, cin, h, w], [cout, _, ks, _]) = check_conv(x, k, b)?;
    let g = ConvGeom::new(cin, h, w, ks, pad)?;
    let hw = g.ho * g.wo;
    let mut out = Tensor::zeros(&[n, cout, g.ho, g.wo]);
    out.data_mut()
        .par_chunks_mut(cout * hw)
        .zip(x.data().par_chunks(cin * h * w))
        .for_each(|(y, xi)| {
            if let Some(b) = b {
                for (co, plane) in y.chunks_mut(hw).enumerate() {
                    plane.fill(b.data()[co]);
                }
            }
            let beta = if b.is_some() { 1.0 } else { 0.0 };
            if g.is_pointwise() {
                gemm(cout, cin, hw, k.data(), (cin, 1), xi, (hw, 1), beta, y, hw);
            } else {
                let mut cols = vec![0.0; g.rows() * hw];
                g.im2col(xi, &mut cols);
                gemm(cout, g.rows(), hw, k.data(), (g.rows(), 1), &cols, (hw, 1), beta, y, hw);
            }
        });
    Ok(out)
}

pub struct ConvGrads {
    pub dx: Tensor,
    pub dk: Tensor,
    pub db: Tensor,
}

pub fn conv2d_backward(x: &Tensor, k: &Tensor, pad: Padding, dy: &Tensor) -> Result<ConvGrads, AutodiffError> {
    let ([n, cin, h, w], [cout, _, ks, _]) = check_conv(x, k, None)?;
    let g = ConvGeom::new(cin, h, w, ks, pad)?;
    let hw = g.ho * g.wo;
    if dy.dims() != [n, cout, g.ho, g.wo] {
        return Err(AutodiffError::shape(format!("conv output grad {:?}", dy.dims())));
    }
    let rows = g.rows();
    let mut dx = Tensor::zeros(x.dims());
    let per_item: Vec<Vec<f32>> = dx
        .data_mut()
        .par_chunks_mut(cin * h * w)
        .zip(x.data().par_chunks(cin * h * w))
        .zip(dy.data().par_chunks(cout * hw))
        .map(|((dxi, xi), dyi)| {
            let mut dk = vec![0.0; cout * rows];
            if g.is_pointwise() {
                // dk = dy * x^T ; dx = k^T * dy
                gemm(cout, hw, cin, dyi, (hw, 1), xi, (1, hw), 0.0, &mut dk, cin);
                gemm(cin, cout, hw, k.data(), (1, cin), dyi, (hw, 1), 0.0, dxi, hw);
            } else {
                let mut cols = vec![0.0; rows * hw];
                g.im2col(xi, &mut cols);
                gemm(cout, hw, rows, dyi, (hw, 1), &cols, (1, hw), 0.0, &mut dk, rows);
                gemm(rows, cout, hw, k.data(), (1, rows), dyi, (hw, 1), 0.0, &mut cols, hw);
                g.col2im(&cols, dxi);
            }
            dk
        })
        .collect();
    let mut dk = Tensor::zeros(k.dims());
    for item in &per_item {
        for (a, b) in dk.data_mut().iter_mut().zip(item) {
            *a += b;
        }
    }
    let mut db = Tensor::zeros(&[cout]);
    for dyi in dy.data().chunks(cout * hw) {
        for (co, plane) in dyi.chunks(hw).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f32>();
        }
    }
    Ok(ConvGrads { dx, dk, db })
}

fn check_upconv(x: &Tensor, k: &Tensor, b: Option<&Tensor>) -> Result<([usize; 4], usize), AutodiffError> {
    let xs = x.shape4()?;
    let ks = k.shape4()?;
    if ks[0] != xs[1] || ks[2] != 2 || ks[3] != 2 {
        return Err(AutodiffError::shape(format!(
            "transposed conv kernel {:?} for input {:?}",
            k.dims(),
            x.dims()
        )));
    }
    if let Some(b) = b {
        if b.len() != ks[1] {
            return Err(AutodiffError::shape(format!("bias {:?} for {} outputs", b.dims(), ks[1])));
        }
    }
    Ok((xs, ks[1]))
}

/// 2×2 stride-2 transposed convolution. Kernel layout `[cin, cout, 2, 2]`;
/// each input pixel scatters a weighted 2×2 block.
pub fn transposed_conv2x2(x: &Tensor, k: &Tensor, b: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
    let ([n, cin, h, w], cout) = check_upconv(x, k, b)?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, cout, 2 * h, 2 * w]);
    out.data_mut()
        .par_chunks_mut(cout * 4 * hw)
        .zip(x.data().par_chunks(cin * hw))
        .for_each(|(y, xi)| {
            let mut blocks = vec![0.0; cout * 4 * hw];
            gemm(cout * 4, cin, hw, k.data(), (1, cout * 4), xi, (hw, 1), 0.0, &mut blocks, hw);
            for co in 0..cout {
                let bias = b.map_or(0.0, |b| b.data()[co]);
                let plane = &mut y[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (dy, dx) = (tap / 2, tap % 2);
                    let src = &blocks[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for iy in 0..h {
                        let row = &mut plane[(2 * iy + dy) * 2 * w..(2 * iy + dy + 1) * 2 * w];
                        for ix in 0..w {
                            row[2 * ix + dx] = src[iy * w + ix] + bias;
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn transposed_conv2x2_backward(x: &Tensor, k: &Tensor, dy: &Tensor) -> Result<ConvGrads, AutodiffError> {
    let ([n, cin, h, w], cout) = check_upconv(x, k, None)?;
    let hw = h * w;
    if dy.dims() != [n, cout, 2 * h, 2 * w] {
        return Err(AutodiffError::shape(format!("transposed conv output grad {:?}", dy.dims())));
    }
    let mut dx = Tensor::zeros(x.dims());
    let per_item: Vec<Vec<f32>> = dx
        .data_mut()
        .par_chunks_mut(cin * hw)
        .zip(x.data().par_chunks(cin * hw))
        .zip(dy.data().par_chunks(cout * 4 * hw))
        .map(|((dxi, xi), dyi)| {
            let mut blocks = vec![0.0; cout * 4 * hw];
            for co in 0..cout {
                let plane = &dyi[co * 4 * hw..(co + 1) * 4 * hw];
                for tap in 0..4 {
                    let (ty, tx) = (tap / 2, tap % 2);
                    let dst = &mut blocks[(co * 4 + tap) * hw..(co * 4 + tap + 1) * hw];
                    for iy in 0..h {
                        let row = &plane[(2 * iy + ty) * 2 * w..(2 * iy + ty + 1) * 2 * w];
                        for ix in 0..w {
                            dst[iy * w + ix] = row[2 * ix + tx];
                        }
                    }
                }
            }
            gemm(cin, cout * 4, hw, k.data(), (cout * 4, 1), &blocks, (hw, 1), 0.0, dxi, hw);
            let mut dk = vec![0.0; cin * cout * 4];
            gemm(cin, hw, cout * 4, xi, (hw, 1), &blocks, (1, hw), 0.0, &mut dk, cout * 4);
            dk
        })
        .collect();
    let mut dk = Tensor::zeros(k.dims());
    for item in &per_item {
        for (a, b) in dk.data_mut().iter_mut().zip(item) {
            *a += b;
        }
    }
    let mut db = Tensor::zeros(&[cout]);
    for dyi in dy.data().chunks(cout * 4 * hw) {
        for (co, plane) in dyi.chunks(4 * hw).enumerate() {
            db.data_mut()[co] += plane.iter().sum::<f32>();
        }
    }
    Ok(ConvGrads { dx, dk, db })
}

/// 2×2 stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of the first maximal element of its block.
pub fn maxpool2x2(x: &Tensor) -> Result<(Tensor, Vec<u32>), AutodiffError> {
    let [n, c, h, w] = x.shape4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(AutodiffError::OddSpatialDims { height: h, width: w });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u32; n * c * ho * wo];
    let src = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = src[best];
                argmax[o] = best as u32;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2x2_backward(input_dims: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(input_dims);
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dx.data_mut()[i as usize] += g;
    }
    dx
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(0.0);
    }
    y
}

/// Gradient of relu given its output (positive output ⇔ positive input).
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let data = y.data().iter().zip(dy.data()).map(|(&y, &g)| if y > 0.0 { g } else { 0.0 }).collect();
    Tensor::from_vec(y.dims(), data).expect("same shape")
}

pub const BN_EPS: f32 = 1e-5;

/// Saved activations of a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f32>,
}

pub struct BnTrainOutput {
    pub y: Tensor,
    pub cache: BnCache,
    pub batch_mean: Vec<f32>,
    /// Biased (population) batch variance.
    pub batch_var: Vec<f32>,
}

fn check_bn(x: &Tensor, params: &[&Tensor]) -> Result<[usize; 4], AutodiffError> {
    let s = x.shape4()?;
    for p in params {
        if p.len() != s[1] {
            return Err(AutodiffError::shape(format!("batch-norm parameter {:?} for {} channels", p.dims(), s[1])));
        }
    }
    Ok(s)
}

pub fn batchnorm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<BnTrainOutput, AutodiffError> {
    let [n, c, h, w] = check_bn(x, &[gamma, beta])?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let planes = (0..n).map(|i| &x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
        let s: f64 = planes.clone().flatten().map(|&v| v as f64).sum();
        let m = s / count;
        let v = planes.flatten().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / count;
        mean[ch] = m as f32;
        var[ch] = v as f32;
        inv_std[ch] = (1.0 / (v + BN_EPS as f64).sqrt()) as f32;
    }
    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    for i in 0..n {
        for ch in 0..c {
            let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
            for j in r {
                let xh = (x.data()[j] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[j] = xh;
                y.data_mut()[j] = gamma.data()[ch] * xh + beta.data()[ch];
            }
        }
    }
    Ok(BnTrainOutput { y, cache: BnCache { xhat, inv_std }, batch_mean: mean, batch_var: var })
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward(cache: &BnCache, gamma: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor), AutodiffError> {
    let [n, c, h, w] = dy.shape4()?;
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dx = Tensor::zeros(dy.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |i| (i * c + ch) * hw..(i * c + ch + 1) * hw);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for j in idx() {
            sum_dy += dy.data()[j] as f64;
            sum_dy_xhat += (dy.data()[j] * cache.xhat.data()[j]) as f64;
        }
        dgamma.data_mut()[ch] = sum_dy_xhat as f32;
        dbeta.data_mut()[ch] = sum_dy as f32;
        let g = gamma.data()[ch] as f64;
        let scale = g * cache.inv_std[ch] as f64 / m;
        for j in idx() {
            let v = m * dy.data()[j] as f64 - sum_dy - cache.xhat.data()[j] as f64 * sum_dy_xhat;
            dx.data_mut()[j] = (scale * v) as f32;
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn batchnorm_infer(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &Tensor, var: &Tensor) -> Result<Tensor, AutodiffError> {
    let [n, c, h, w] = check_bn(x, &[gamma, beta, mean, var])?;
    let hw = h * w;
    let mut y = x.clone();
    for ch in 0..c {
        let scale = gamma.data()[ch] / (var.data()[ch] + BN_EPS).sqrt();
        let shift = beta.data()[ch] - mean.data()[ch] * scale;
        for i in 0..n {
            for v in &mut y.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dgamma, dbeta)` for the inference-mode affine transform.
pub fn batchnorm_infer_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor), AutodiffError> {
    let [n, c, h, w] = check_bn(x, &[gamma, mean, var])?;
    let hw = h * w;
    let mut dx = dy.clone();
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let inv = 1.0 / (var.data()[ch] + BN_EPS).sqrt();
        for i in 0..n {
            for j in (i * c + ch) * hw..(i * c + ch + 1) * hw {
                let g = dy.data()[j];
                dgamma.data_mut()[ch] += g * (x.data()[j] - mean.data()[ch]) * inv;
                dbeta.data_mut()[ch] += g;
                dx.data_mut()[j] = g * gamma.data()[ch] * inv;
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Stacks channels in argument order.
pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    let first = xs.first().ok_or_else(|| AutodiffError::shape("concat of nothing"))?.shape4()?;
    let [n, _, h, w] = first;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let [xn, xc, xh, xw] = x.shape4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(AutodiffError::shape(format!("concat {:?} with {:?}", x.dims(), xs[0].dims())));
        }
        channels.push(xc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for i in 0..n {
        for (x, &c) in xs.iter().zip(&channels) {
            data.extend_from_slice(&x.data()[i * c * hw..(i + 1) * c * hw]);
        }
    }
    Tensor::from_vec(&[n, total, h, w], data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels(x: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>, AutodiffError> {
    let [n, c, h, w] = x.shape4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(AutodiffError::shape(format!("split {c} channels into {channels:?}")));
    }
    let hw = h * w;
    let mut parts: Vec<Vec<f32>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * hw)).collect();
    for i in 0..n {
        let mut offset = i * c * hw;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&x.data()[offset..offset + ci * hw]);
            offset += ci * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &ci)| Tensor::from_vec(&[n, ci, h, w], d))
        .collect()
}

/// Extends the bottom and right edges by replication.
pub fn pad_replicate(x: &Tensor, pad_h: usize, pad_w: usize) -> Result<Tensor, AutodiffError> {
    let [n, c, h, w] = x.shape4()?;
    if pad_h == 0 && pad_w == 0 {
        return Ok(x.clone());
    }
    let (ph, pw) = (h + pad_h, w + pad_w);
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * ph * pw..(plane + 1) * ph * pw];
        for y in 0..ph {
            let sy = y.min(h - 1);
            let row = &mut dst[y * pw..(y + 1) * pw];
            row[..w].copy_from_slice(&src[sy * w..(sy + 1) * w]);
            row[w..].fill(src[sy * w + w - 1]);
        }
    }
    Ok(out)
}

pub fn pad_replicate_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor, AutodiffError> {
    let [n, c, ph, pw] = dy.shape4()?;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        let src = &dy.data()[plane * ph * pw..(plane + 1) * ph * pw];
        let dst = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                dst[sy * w + x.min(w - 1)] += src[y * pw + x];
            }
        }
    }
    Ok(dx)
}

/// Keeps the top-left `h × w` window.
pub fn crop(x: &Tensor, h: usize, w: usize) -> Result<Tensor, AutodiffError> {
    let [n, c, xh, xw] = x.shape4()?;
    if h > xh || w > xw {
        return Err(AutodiffError::shape(format!("crop {h}x{w} from {xh}x{xw}")));
    }
    if (h, w) == (xh, xw) {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let start = (plane * xh + y) * xw;
            data.extend_from_slice(&x.data()[start..start + w]);
        }
    }
    Tensor::from_vec(&[n, c, h, w], data)
}

pub fn crop_backward(dy: &Tensor, full_h: usize, full_w: usize) -> Result<Tensor, AutodiffError> {
    let [n, c, h, w] = dy.shape4()?;
    let mut dx = Tensor::zeros(&[n, c, full_h, full_w]);
    for plane in 0..n * c {
        for y in 0..h {
            let src = &dy.data()[(plane * h + y) * w..(plane * h + y + 1) * w];
            let start = (plane * full_h + y) * full_w;
            dx.data_mut()[start..start + w].copy_from_slice(src);
        }
    }
    Ok(dx)
}

/// Repeats every pixel into a 2×2 block.
pub fn nearest_upsample2x(x: &Tensor) -> Result<Tensor, AutodiffError> {
    let [n, c, h, w] = x.shape4()?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xo in 0..2 * w {
                out.data_mut()[(plane * 2 * h + y) * 2 * w + xo] = x.data()[(plane * h + y / 2) * w + xo / 2];
            }
        }
    }
    Ok(out)
}

pub fn nearest_upsample2x_backward(dy: &Tensor) -> Result<Tensor, AutodiffError> {
    let [n, c, h2, w2] = dy.shape4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for plane in 0..n * c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx.data_mut()[(plane * h + y / 2) * w + x / 2] += dy.data()[(plane * h2 + y) * w2 + x];
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_identity_kernel() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        assert_eq!(conv2d(&x, &k, Some(&b), Padding::Same).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::full(&[2, 3, 5, 4], 7.0);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        let b = Tensor::full(&[4], 2.5);
        let y = conv2d(&x, &k, Some(&b), Padding::Same).unwrap();
        assert_eq!(y.dims(), &[2, 4, 5, 4]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn valid_padding_shrinks() {
        let x = Tensor::full(&[1, 1, 5, 6], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, None, Padding::Valid).unwrap();
        assert_eq!(y.dims(), &[1, 1, 3, 4]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let k = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(matches!(conv2d(&x, &k, None, Padding::Same), Err(AutodiffError::ShapeMismatch(_))));
    }

    #[test]
    fn upconv_scatter_of_ones() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.5]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = transposed_conv2x2(&x, &k, None).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.5; 4]);
        let zero = transposed_conv2x2(&x, &Tensor::zeros(&[1, 1, 2, 2]), None).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn maxpool_block() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2x2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
        let c = Tensor::full(&[1, 2, 4, 6], 1.5);
        let (y, arg) = maxpool2x2(&c).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.5));
        // ties resolve to the first element of the block
        assert_eq!(arg[0], 0);
        assert!(matches!(maxpool2x2(&Tensor::zeros(&[1, 1, 3, 2])), Err(AutodiffError::OddSpatialDims { .. })));
    }

    #[test]
    fn batchnorm_infer_anchors() {
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        let one = Tensor::full(&[1], 1.0);
        let zero = Tensor::zeros(&[1]);
        let y = batchnorm_infer(&x, &one, &zero, &zero, &one).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
        }
        let y = batchnorm_infer(&x, &zero, &Tensor::full(&[1], 5.0), &zero, &one).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let x = Tensor::from_vec(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let out = batchnorm_train(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(out.batch_mean, vec![4.0]);
        assert_eq!(out.batch_var, vec![5.0]);
        let mean: f32 = out.y.data().iter().sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::from_vec(&[2, 3, 2, 2], (0..24).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::from_vec(&[2, 1, 2, 2], (100..108).map(|v| v as f32).collect()).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.dims(), &[2, 4, 2, 2]);
        let parts = split_channels(&c, &[3, 1]).unwrap();
        assert_eq!(parts, vec![a, b]);
    }

    #[test]
    fn concat_image_with_features() {
        let img = Tensor::zeros(&[2, 3, 4, 5]);
        let feat = Tensor::zeros(&[2, 32, 4, 5]);
        assert_eq!(concat_channels(&[&img, &feat]).unwrap().dims(), &[2, 35, 4, 5]);
        let bad = Tensor::zeros(&[2, 32, 4, 6]);
        assert!(concat_channels(&[&img, &bad]).is_err());
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![4.0]).unwrap();
        assert_eq!(nearest_upsample2x(&x).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn relu_values() {
        let x = Tensor::from_vec(&[2], vec![-3.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = Tensor::from_vec(&[1, 2, 3, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let p = pad_replicate(&x, 2, 1).unwrap();
        assert_eq!(p.dims(), &[1, 2, 5, 4]);
        assert_eq!(p.at(0, 1, 4, 3), x.at(0, 1, 2, 2));
        assert_eq!(crop(&p, 3, 3).unwrap(), x);
    }
}
