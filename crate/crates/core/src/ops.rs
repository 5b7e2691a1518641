//! Forward kernels and their hand-written vector-Jacobian products.
//!
//! Every reduction runs left to right over a fixed index order, so a kernel
//! is bit-reproducible on a given platform whichever [`Exec`] it uses.

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::tensor::Tensor;

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2 pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

fn split_matrix(t: &Tensor, op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::dim(
            op,
            format!("expected rank >= 2, got {:?}", t.shape()),
        ));
    }
    let r = t.rank();
    Ok((
        t.shape()[..r - 2].to_vec(),
        t.shape()[r - 2],
        t.shape()[r - 1],
    ))
}

/// Batched matrix product `[.., P, Q] x [.., Q, R] -> [.., P, R]`.
///
/// Leading dimensions must be equal, or `b` may be a plain matrix shared by
/// every batch entry of `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (lead_a, p, q) = split_matrix(a, "matmul")?;
    let (lead_b, q2, r) = split_matrix(b, "matmul")?;
    if q != q2 || !(lead_a == lead_b || lead_b.is_empty()) {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let batch: usize = lead_a.iter().product();
    let shared_b = lead_b.is_empty() && !lead_a.is_empty();
    let mut out = vec![0.0; batch * p * r];
    let (ad, bd) = (a.data(), b.data());
    Exec::for_work(batch * p * q * r).for_each_chunk(&mut out, r, |row, dst| {
        let bi = row / p;
        let arow = &ad[row * q..(row + 1) * q];
        let boff = if shared_b { 0 } else { bi * q * r };
        for (k, &av) in arow.iter().enumerate() {
            let brow = &bd[boff + k * r..boff + (k + 1) * r];
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    let mut shape = lead_a;
    shape.extend([p, r]);
    Tensor::new(shape, out)
}

/// Same as [`matmul`] with an explicit execution policy; used by the benches.
pub fn matmul_exec(exec: Exec, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, p, q) = split_matrix(a, "matmul")?;
    let (_, q2, r) = split_matrix(b, "matmul")?;
    if q != q2 || a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; p * r];
    let (ad, bd) = (a.data(), b.data());
    exec.for_each_chunk(&mut out, r, |row, dst| {
        for (k, &av) in ad[row * q..(row + 1) * q].iter().enumerate() {
            for (o, &bv) in dst.iter_mut().zip(&bd[k * r..(k + 1) * r]) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(vec![p, r], out)
}

/// Swaps the last two axes.
pub fn transpose_last2(t: &Tensor) -> Result<Tensor> {
    let (lead, p, q) = split_matrix(t, "transpose_last2")?;
    let batch: usize = lead.iter().product();
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let o = b * p * q;
        for i in 0..p {
            for j in 0..q {
                out[o + j * p + i] = d[o + i * q + j];
            }
        }
    }
    let mut shape = lead;
    shape.extend([q, p]);
    Tensor::new(shape, out)
}

/// VJP of [`matmul`]: returns `(g bᵀ, aᵀ g)`, the latter summed over the
/// batch when `b` was shared.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let ga = matmul(g, &transpose_last2(b)?)?;
    let gb = if b.rank() == 2 && a.rank() > 2 {
        let q = a.last_dim();
        let a2 = a.clone().reshape(&[a.rows(), q])?;
        let g2 = g.clone().reshape(&[g.rows(), g.last_dim()])?;
        matmul(&a2.transpose()?, &g2)?
    } else {
        matmul(&transpose_last2(a)?, g)?
    };
    Ok((ga, gb))
}

/// Row-wise softmax over the trailing axis with max subtraction.
pub fn softmax_lastdim(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut out = a.data().to_vec();
    Exec::for_work(a.numel() * 8).for_each_chunk(&mut out, n, |_, row| {
        let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    });
    Tensor::new(a.shape().to_vec(), out).expect("same shape")
}

/// VJP of [`softmax_lastdim`] given its output `y`: `y ⊙ (g − Σ g⊙y)`.
pub fn softmax_vjp(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    if y.shape() != g.shape() {
        return Err(Error::shape("softmax_vjp", y.shape(), g.shape()));
    }
    let n = y.last_dim();
    let mut out = vec![0.0; y.numel()];
    for ((o, yr), gr) in out
        .chunks_mut(n)
        .zip(y.data().chunks(n))
        .zip(g.data().chunks(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), out)
}

fn check_dwconv(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<[usize; 4]> {
    if x.rank() != 4 {
        return Err(Error::dim(
            "depthwise_conv3x3",
            format!("input must be [B,Ch,H,W], got {:?}", x.shape()),
        ));
    }
    let s = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if kernels.shape() != [s[1], 3, 3] {
        return Err(Error::dim(
            "depthwise_conv3x3",
            format!(
                "kernels {:?} do not match {} channels",
                kernels.shape(),
                s[1]
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [s[1]] {
            return Err(Error::dim(
                "depthwise_conv3x3",
                format!("bias {:?} does not match {} channels", b.shape(), s[1]),
            ));
        }
    }
    Ok(s)
}

/// Depthwise 3×3 convolution, zero padding 1, stride 1.
pub fn depthwise_conv3x3(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [b, ch, h, w] = check_dwconv(x, kernels, bias)?;
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![0.0; x.numel()];
    Exec::for_work(x.numel() * 9).for_each_chunk(&mut out, h * w, |plane, dst| {
        let c = plane % ch;
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        let k = &kd[c * 9..(c + 1) * 9];
        let b0 = bias.map_or(0.0, |t| t.data()[c]);
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc += k[di * 3 + dj] * src[ii as usize * w + jj as usize];
                    }
                }
                dst[i * w + j] = acc + b0;
            }
        }
    });
    let _ = b;
    Tensor::new(x.shape().to_vec(), out)
}

/// VJP of [`depthwise_conv3x3`]: `(grad_input, grad_kernels, grad_bias)`.
pub fn depthwise_conv3x3_vjp(
    x: &Tensor,
    kernels: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [b, ch, h, w] = check_dwconv(x, kernels, None)?;
    if g.shape() != x.shape() {
        return Err(Error::shape("depthwise_conv3x3_vjp", x.shape(), g.shape()));
    }
    let (xd, kd, gd) = (x.data(), kernels.data(), g.data());
    let mut gx = vec![0.0; x.numel()];
    let mut gk = vec![0.0; ch * 9];
    let mut gb = vec![0.0; ch];
    for n in 0..b {
        for c in 0..ch {
            let off = (n * ch + c) * h * w;
            let k = &kd[c * 9..(c + 1) * 9];
            for i in 0..h {
                for j in 0..w {
                    let gv = gd[off + i * w + j];
                    gb[c] += gv;
                    for di in 0..3 {
                        let ii = i as isize + di as isize - 1;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for dj in 0..3 {
                            let jj = j as isize + dj as isize - 1;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let src = off + ii as usize * w + jj as usize;
                            gk[c * 9 + di * 3 + dj] += gv * xd[src];
                            gx[src] += gv * k[di * 3 + dj];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), gx)?,
        Tensor::new(vec![ch, 3, 3], gk)?,
        Tensor::new(vec![ch], gb)?,
    ))
}

/// `x · weightᵀ + bias` at every position; `weight` is `[Cout, Cin]`.
pub fn pointwise_mix(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if weight.rank() != 2 || x.last_dim() != weight.dim(1) {
        return Err(Error::shape("pointwise_mix", x.shape(), weight.shape()));
    }
    let (cout, cin) = (weight.dim(0), weight.dim(1));
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("pointwise_mix", weight.shape(), b.shape()));
        }
    }
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![0.0; x.rows() * cout];
    Exec::for_work(x.rows() * cin * cout).for_each_chunk(&mut out, cout, |row, dst| {
        let xr = &xd[row * cin..(row + 1) * cin];
        for (o, (dst, wr)) in dst.iter_mut().zip(wd.chunks(cin)).enumerate() {
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *dst = acc + bias.map_or(0.0, |b| b.data()[o]);
        }
    });
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(shape, out)
}

/// VJP of [`pointwise_mix`]: `(grad_x, grad_weight, grad_bias)`.
pub fn pointwise_mix_vjp(
    x: &Tensor,
    weight: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin) = (weight.dim(0), weight.dim(1));
    if g.last_dim() != cout || g.rows() != x.rows() || x.last_dim() != cin {
        return Err(Error::shape("pointwise_mix_vjp", x.shape(), g.shape()));
    }
    let g2 = g.clone().reshape(&[g.rows(), cout])?;
    let x2 = x.clone().reshape(&[x.rows(), cin])?;
    let gx = matmul(&g2, weight)?.reshape(x.shape())?;
    let gw = matmul(&g2.transpose()?, &x2)?;
    let gb = column_sums(&g2);
    Ok((gx, gw, gb))
}

/// Sums over every non-trailing position.
pub fn column_sums(t: &Tensor) -> Tensor {
    let c = t.last_dim();
    let mut s = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(vec![c], s).expect("nonzero")
}

/// Adds a per-channel vector to every trailing-axis row.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if bias.shape() != [c] {
        return Err(Error::shape("add_bias", x.shape(), bias.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (a, b) in row.iter_mut().zip(bias.data()) {
            *a += b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Multiplies every trailing-axis row elementwise by `scale`.
pub fn scale_channels(x: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if scale.shape() != [c] {
        return Err(Error::shape("scale_channels", x.shape(), scale.shape()));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        for (a, b) in row.iter_mut().zip(scale.data()) {
            *a *= b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Option<Tensor>,
    pub running_var: Option<Tensor>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    /// Identity statistics: `gamma = 1, beta = 0, mean = 0, var = 1`.
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Some(Tensor::zeros(&[channels])),
            running_var: Some(Tensor::ones(&[channels])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Per-channel `(scale, shift)` so that eval mode is `scale ⊙ x + shift`.
    pub fn eval_affine(&self) -> Result<(Tensor, Tensor)> {
        let (mean, var) = match (&self.running_mean, &self.running_var) {
            (Some(m), Some(v)) => (m, v),
            _ => {
                return Err(Error::State(
                    "batchnorm running statistics are missing".into(),
                ))
            }
        };
        let scale = self.gamma.zip_map(var, |g, v| g / (v + self.eps).sqrt())?;
        let shift = self.beta.sub(&mean.mul(&scale)?)?;
        Ok((scale, shift))
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let ok = self.beta.shape() == [c]
            && self.running_mean.as_ref().is_none_or(|t| t.shape() == [c])
            && self.running_var.as_ref().is_none_or(|t| t.shape() == [c]);
        if !ok {
            return Err(Error::dim(
                "batchnorm",
                "inconsistent per-channel parameter shapes",
            ));
        }
        if self.eps < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Statistics(format!(
                "eps {} / momentum {} out of range",
                self.eps, self.momentum
            )));
        }
        if let Some(v) = &self.running_var {
            if v.data().iter().any(|&x| x < 0.0) {
                return Err(Error::Statistics("negative running variance".into()));
            }
        }
        Ok(())
    }
}

/// Intermediates of a train-mode batchnorm needed by its VJP.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Train-mode batchnorm without touching running statistics.
pub fn batchnorm_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BnCache)> {
    let c = x.last_dim();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("batchnorm", x.shape(), gamma.shape()));
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::Statistics(format!(
            "train-mode batchnorm needs at least 2 positions, got {n}"
        )));
    }
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.data().to_vec();
    let mut y = vec![0.0; x.numel()];
    for (xr, yr) in xhat.chunks_mut(c).zip(y.chunks_mut(c)) {
        for j in 0..c {
            xr[j] = (xr[j] - mean[j]) * inv_std[j];
            yr[j] = gamma.data()[j] * xr[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
            mean,
            var,
        },
    ))
}

/// VJP of [`batchnorm_train_forward`] with batch statistics as functions of
/// the input: `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_train_vjp(
    cache: &BnCache,
    gamma: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if g.shape() != cache.xhat.shape() {
        return Err(Error::shape("batchnorm_vjp", cache.xhat.shape(), g.shape()));
    }
    let c = g.last_dim();
    let n = g.rows() as f64;
    let mut gbeta = vec![0.0; c];
    let mut ggamma = vec![0.0; c];
    for (gr, xr) in g.data().chunks(c).zip(cache.xhat.data().chunks(c)) {
        for j in 0..c {
            gbeta[j] += gr[j];
            ggamma[j] += gr[j] * xr[j];
        }
    }
    let mut gx = vec![0.0; g.numel()];
    for ((o, gr), xr) in gx
        .chunks_mut(c)
        .zip(g.data().chunks(c))
        .zip(cache.xhat.data().chunks(c))
    {
        for j in 0..c {
            let gam = gamma.data()[j];
            // d xhat = gamma * g; sums of d xhat are gamma * gbeta, gamma * ggamma
            o[j] = gam * cache.inv_std[j] / n * (n * gr[j] - gbeta[j] - xr[j] * ggamma[j]);
        }
    }
    Ok((
        Tensor::new(g.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// VJP of eval-mode batchnorm: `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_eval_vjp(
    x: &Tensor,
    state: &BatchNormState,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (scale, _) = state.eval_affine()?;
    let c = x.last_dim();
    let mean = state.running_mean.as_ref().unwrap().data();
    let var = state.running_var.as_ref().unwrap().data();
    let gx = scale_channels(g, &scale)?;
    let mut ggamma = vec![0.0; c];
    for (gr, xr) in g.data().chunks(c).zip(x.data().chunks(c)) {
        for j in 0..c {
            ggamma[j] += gr[j] * (xr[j] - mean[j]) / (var[j] + state.eps).sqrt();
        }
    }
    Ok((gx, Tensor::new(vec![c], ggamma)?, column_sums(g)))
}

/// Batchnorm over the trailing channel axis.
///
/// Train mode normalizes by batch statistics and folds them into the running
/// statistics with `momentum`; the running variance uses the unbiased
/// estimate. Eval mode is `gamma (x − μ) / √(σ² + eps) + beta`.
pub fn batchnorm(x: &Tensor, state: &mut BatchNormState, mode: BnMode) -> Result<Tensor> {
    state.validate()?;
    if x.last_dim() != state.channels() {
        return Err(Error::shape("batchnorm", x.shape(), state.gamma.shape()));
    }
    match mode {
        BnMode::Eval => {
            let (s, c) = state.eval_affine()?;
            add_bias(&scale_channels(x, &s)?, &c)
        }
        BnMode::Train => {
            let (y, cache) = batchnorm_train_forward(x, &state.gamma, &state.beta, state.eps)?;
            update_running_stats(state, &cache, x.rows());
            Ok(y)
        }
    }
}

pub(crate) fn update_running_stats(state: &mut BatchNormState, cache: &BnCache, n: usize) {
    let c = state.channels();
    let mom = state.momentum;
    let unbias = n as f64 / (n as f64 - 1.0);
    let rm = state
        .running_mean
        .get_or_insert_with(|| Tensor::zeros(&[c]));
    for (r, m) in rm.data_mut().iter_mut().zip(&cache.mean) {
        *r = (1.0 - mom) * *r + mom * m;
    }
    let rv = state.running_var.get_or_insert_with(|| Tensor::ones(&[c]));
    for (r, v) in rv.data_mut().iter_mut().zip(&cache.var) {
        *r = (1.0 - mom) * *r + mom * v * unbias;
    }
}

#[derive(Clone, Debug)]
pub struct LnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer normalization over the trailing axis, then `gamma ⊙ · + beta`.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layernorm_forward(x, gamma, beta, eps)?.0)
}

pub fn layernorm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LnCache)> {
    let c = x.last_dim();
    if c < 2 {
        return Err(Error::dim(
            "layernorm",
            "channel axis must have at least 2 entries",
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layernorm", x.shape(), gamma.shape()));
    }
    let mut xhat = x.data().to_vec();
    let mut y = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for (xr, yr) in xhat.chunks_mut(c).zip(y.chunks_mut(c)) {
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for j in 0..c {
            xr[j] = (xr[j] - mean) * is;
            yr[j] = gamma.data()[j] * xr[j] + beta.data()[j];
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        LnCache {
            xhat: Tensor::new(x.shape().to_vec(), xhat)?,
            inv_std,
        },
    ))
}

/// VJP of [`layernorm`]: `(grad_x, grad_gamma, grad_beta)`.
pub fn layernorm_vjp(
    cache: &LnCache,
    gamma: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if g.shape() != cache.xhat.shape() {
        return Err(Error::shape("layernorm_vjp", cache.xhat.shape(), g.shape()));
    }
    let c = g.last_dim();
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let mut gx = vec![0.0; g.numel()];
    for (r, ((o, gr), xr)) in gx
        .chunks_mut(c)
        .zip(g.data().chunks(c))
        .zip(cache.xhat.data().chunks(c))
        .enumerate()
    {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..c {
            ggamma[j] += gr[j] * xr[j];
            gbeta[j] += gr[j];
            let d = gr[j] * gamma.data()[j];
            s1 += d;
            s2 += d * xr[j];
        }
        let cf = c as f64;
        for j in 0..c {
            let d = gr[j] * gamma.data()[j];
            o[j] = cache.inv_std[r] / cf * (cf * d - s1 - xr[j] * s2);
        }
    }
    Ok((
        Tensor::new(g.shape().to_vec(), gx)?,
        Tensor::new(vec![c], ggamma)?,
        Tensor::new(vec![c], gbeta)?,
    ))
}

/// Exact GELU, `x Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * INV_SQRT_2))
}

/// `d/dx [x Φ(x)] = Φ(x) + x φ(x)`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.zip_map(g, |xv, gv| gelu_grad_scalar(xv) * gv)
}
