//! Vanilla FFN and the compact FFN.
//!
//! The compact FFN replaces one of the two FFN matrices by a product of two
//! thin factors `[mC, k] · [k, C]` with `k = round(t m C / (m + 1))`. During
//! training each factor is a sum of `r` parallel `matmul + batchnorm`
//! branches; [`reparam_merge`] folds the branches into one matrix plus bias
//! per factor for inference.

use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BatchNormState, BnCache, BnMode};
use crate::par::Exec;
use crate::params::{join, Grads, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type Rational = Ratio<i64>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactorTarget {
    M1,
    #[default]
    M2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnConfig {
    pub c: usize,
    /// Expand ratio.
    pub m: usize,
    /// Compact ratio in `(0, 1]`.
    pub t: Rational,
    /// Parallel re-parameterization branches per factor.
    pub r: usize,
    pub factor_target: FactorTarget,
}

impl FfnConfig {
    pub fn new(c: usize, m: usize, t: Rational, r: usize) -> Self {
        FfnConfig {
            c,
            m,
            t,
            r,
            factor_target: FactorTarget::M2,
        }
    }

    pub fn k(&self) -> Result<usize> {
        compact_dim(self.c, self.m, self.t)
    }

    pub fn hidden(&self) -> usize {
        self.m * self.c
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("cFFN needs at least one branch".into()));
        }
        self.k().map(|_| ())
    }
}

/// `round_half_to_even(t m C / (m + 1))`, at least 1.
pub fn compact_dim(c: usize, m: usize, t: Rational) -> Result<usize> {
    if c == 0 || m == 0 {
        return Err(Error::Config(format!(
            "compact_dim needs C >= 1 and m >= 1, got C={c}, m={m}"
        )));
    }
    if t <= Rational::zero() || t > Rational::from_integer(1) {
        return Err(Error::Config(format!("compact ratio {t} outside (0, 1]")));
    }
    let exact = t * Rational::new((m * c) as i64, (m + 1) as i64);
    Ok(round_half_even(exact).max(1) as usize)
}

pub(crate) fn round_half_even(v: Rational) -> i64 {
    let fl = v.floor();
    let frac = v - fl;
    let half = Rational::new(1, 2);
    let base = fl.to_integer();
    if frac > half || (frac == half && base % 2 != 0) {
        base + 1
    } else {
        base
    }
}

/// Parses `"2/3"`, `"0.5"` or `"1"` into an exact ratio.
pub fn parse_ratio(s: &str) -> Result<Rational> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once('/') {
        let a: i64 = a
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio `{s}`")))?;
        let b: i64 = b
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio `{s}`")))?;
        if b == 0 {
            return Err(Error::Config(format!("zero denominator in `{s}`")));
        }
        return Ok(Rational::new(a, b));
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Config(format!("bad ratio `{s}`")))?;
    ratio_from_f64(v)
}

pub fn ratio_from_f64(v: f64) -> Result<Rational> {
    Rational::approximate_float(v)
        .ok_or_else(|| Error::Config(format!("cannot represent {v} as a ratio")))
}

pub fn ratio_to_f64(r: Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Matrix in `x · W` orientation (`[in, out]`) with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    pub fn init(rng: &mut Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Dense {
            weight: rng.trunc_normal_tensor(&[in_dim, out_dim], 0.02),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Dense {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = ops::matmul(x, &self.weight)?;
        match &self.bias {
            Some(b) => ops::add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn backward(
        &self,
        x: &Tensor,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (gx, gw) = ops::matmul_vjp(x, &self.weight, g)?;
        grads.add(join(prefix, "weight"), gw)?;
        if self.bias.is_some() {
            grads.add(join(prefix, "bias"), ops::column_sums(g))?;
        }
        Ok(gx)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.weight.numel()) as u64
    }
}

impl Params for Dense {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights {
    /// `[C, mC]`
    pub m1: Dense,
    /// `[mC, C]`
    pub m2: Dense,
}

impl FfnWeights {
    pub fn init(c: usize, m: usize, rng: &mut Rng, bias: bool) -> Self {
        FfnWeights {
            m1: Dense::init(rng, c, m * c, bias),
            m2: Dense::init(rng, m * c, c, bias),
        }
    }

    pub fn zeros(c: usize, m: usize, bias: bool) -> Self {
        FfnWeights {
            m1: Dense::zeros(c, m * c, bias),
            m2: Dense::zeros(m * c, c, bias),
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.m1.macs(rows) + self.m2.macs(rows)
    }
}

impl Params for FfnWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.m1.visit_params(&join(prefix, "m1"), f);
        self.m2.visit_params(&join(prefix, "m2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.m1.visit_params_mut(&join(prefix, "m1"), f);
        self.m2.visit_params_mut(&join(prefix, "m2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct FfnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
}

/// `GELU(x M1 + b1) M2 + b2`.
pub fn ffn_forward(x: &Tensor, w: &FfnWeights) -> Result<Tensor> {
    Ok(ffn_forward_cached(x, w)?.0)
}

pub fn ffn_forward_cached(x: &Tensor, w: &FfnWeights) -> Result<(Tensor, FfnCache)> {
    let pre = w.m1.forward(x)?;
    let hidden = ops::gelu(&pre);
    let out = w.m2.forward(&hidden)?;
    Ok((
        out,
        FfnCache {
            x: x.clone(),
            pre,
            hidden,
        },
    ))
}

pub fn ffn_backward(
    w: &FfnWeights,
    cache: &FfnCache,
    g: &Tensor,
    prefix: &str,
    grads: &mut Grads,
) -> Result<Tensor> {
    let gh =
        w.m2.backward(&cache.hidden, g, &join(prefix, "m2"), grads)?;
    let gp = ops::gelu_vjp(&cache.pre, &gh)?;
    w.m1.backward(&cache.x, &gp, &join(prefix, "m1"), grads)
}

/// One `x · W` followed by batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    /// `[in, out]`
    pub weight: Tensor,
    pub bn: BatchNormState,
}

impl Params for Branch {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bn.gamma"), &self.bn.gamma);
        f(join(prefix, "bn.beta"), &self.bn.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bn.gamma"), &mut self.bn.gamma);
        f(join(prefix, "bn.beta"), &mut self.bn.beta);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Option<&'a Tensor>)) {
        f(
            join(prefix, "bn.running_mean"),
            self.bn.running_mean.as_ref(),
        );
        f(join(prefix, "bn.running_var"), self.bn.running_var.as_ref());
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Option<Tensor>)) {
        f(join(prefix, "bn.running_mean"), &mut self.bn.running_mean);
        f(join(prefix, "bn.running_var"), &mut self.bn.running_var);
    }
}

fn branches_init(rng: &mut Rng, r: usize, in_dim: usize, out_dim: usize) -> Vec<Branch> {
    (0..r)
        .map(|_| Branch {
            weight: rng
                .trunc_normal_tensor(&[in_dim, out_dim], 0.02)
                .scale(1.0 / r as f64),
            bn: BatchNormState::identity(out_dim),
        })
        .collect()
}

fn branches_zeros(r: usize, in_dim: usize, out_dim: usize) -> Vec<Branch> {
    (0..r)
        .map(|_| Branch {
            weight: Tensor::zeros(&[in_dim, out_dim]),
            bn: BatchNormState::identity(out_dim),
        })
        .collect()
}

#[derive(Clone, Debug)]
struct StageCache {
    x: Tensor,
    z: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

fn stage_forward(branches: &[Branch], x: &Tensor, mode: BnMode) -> Result<(Tensor, StageCache)> {
    let mut out: Option<Tensor> = None;
    let mut z = Vec::with_capacity(branches.len());
    let mut caches = Vec::with_capacity(branches.len());
    for b in branches {
        let zi = ops::matmul(x, &b.weight)?;
        let (yi, ci) = match mode {
            BnMode::Train => {
                let (y, c) = ops::batchnorm_train_forward(&zi, &b.bn.gamma, &b.bn.beta, b.bn.eps)?;
                (y, Some(c))
            }
            BnMode::Eval => {
                let (s, c) = b.bn.eval_affine()?;
                (ops::add_bias(&ops::scale_channels(&zi, &s)?, &c)?, None)
            }
        };
        match &mut out {
            None => out = Some(yi),
            Some(acc) => acc.add_assign(&yi)?,
        }
        z.push(zi);
        caches.push(ci);
    }
    let out = out.ok_or_else(|| Error::Config("stage without branches".into()))?;
    Ok((
        out,
        StageCache {
            x: x.clone(),
            z,
            bn: caches,
        },
    ))
}

fn stage_backward(
    branches: &[Branch],
    cache: &StageCache,
    g: &Tensor,
    prefix: &str,
    grads: &mut Grads,
) -> Result<Tensor> {
    let mut gx: Option<Tensor> = None;
    for (i, b) in branches.iter().enumerate() {
        let p = join(prefix, &i.to_string());
        let (gz, ggamma, gbeta) = match &cache.bn[i] {
            Some(c) => ops::batchnorm_train_vjp(c, &b.bn.gamma, g)?,
            None => ops::batchnorm_eval_vjp(&cache.z[i], &b.bn, g)?,
        };
        grads.add(join(&p, "bn.gamma"), ggamma)?;
        grads.add(join(&p, "bn.beta"), gbeta)?;
        let (gxi, gw) = ops::matmul_vjp(&cache.x, &b.weight, &gz)?;
        grads.add(join(&p, "weight"), gw)?;
        match &mut gx {
            None => gx = Some(gxi),
            Some(acc) => acc.add_assign(&gxi)?,
        }
    }
    gx.ok_or_else(|| Error::Config("stage without branches".into()))
}

fn stage_update_stats(branches: &mut [Branch], cache: &StageCache) {
    let rows = cache.x.rows();
    for (b, c) in branches.iter_mut().zip(&cache.bn) {
        if let Some(c) = c {
            ops::update_running_stats(&mut b.bn, c, rows);
        }
    }
}

/// Folds `Σ_i BN_i(x W_i)` into `x Ŵ + b̂`.
fn fold_stage(branches: &[Branch]) -> Result<(Tensor, Tensor)> {
    let mut weight: Option<Tensor> = None;
    let mut bias: Option<Tensor> = None;
    for b in branches {
        let (s, c) = b.bn.eval_affine()?;
        let wi = ops::scale_channels(&b.weight, &s)?;
        match (&mut weight, &mut bias) {
            (Some(w), Some(bb)) => {
                w.add_assign(&wi)?;
                bb.add_assign(&c)?;
            }
            _ => {
                weight = Some(wi);
                bias = Some(c);
            }
        }
    }
    match (weight, bias) {
        (Some(w), Some(b)) => Ok((w, b)),
        _ => Err(Error::Config("stage without branches".into())),
    }
}

/// Train-form compact FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct CffnTrainWeights {
    pub factor_target: FactorTarget,
    /// The matrix left whole: `M1` (`[C, mC]`) when factoring `M2`,
    /// `M2` (`[mC, C]`) when factoring `M1`.
    pub dense: Dense,
    pub u_branches: Vec<Branch>,
    pub v_branches: Vec<Branch>,
}

/// Factor shapes `(u_in, k, v_out)` for a target.
fn factor_dims(cfg: &FfnConfig) -> Result<(usize, usize, usize)> {
    let k = cfg.k()?;
    Ok(match cfg.factor_target {
        FactorTarget::M2 => (cfg.hidden(), k, cfg.c),
        FactorTarget::M1 => (cfg.c, k, cfg.hidden()),
    })
}

fn dense_dims(cfg: &FfnConfig) -> (usize, usize) {
    match cfg.factor_target {
        FactorTarget::M2 => (cfg.c, cfg.hidden()),
        FactorTarget::M1 => (cfg.hidden(), cfg.c),
    }
}

impl CffnTrainWeights {
    /// Dense part from a truncated normal; branch weights from a truncated
    /// normal scaled by `1/r`; batchnorms at identity statistics.
    pub fn init(cfg: &FfnConfig, rng: &mut Rng, bias: bool) -> Result<Self> {
        cfg.validate()?;
        let (a, k, b) = factor_dims(cfg)?;
        let (di, d_o) = dense_dims(cfg);
        Ok(CffnTrainWeights {
            factor_target: cfg.factor_target,
            dense: Dense::init(rng, di, d_o, bias),
            u_branches: branches_init(rng, cfg.r, a, k),
            v_branches: branches_init(rng, cfg.r, k, b),
        })
    }

    pub fn zeros(cfg: &FfnConfig, bias: bool) -> Result<Self> {
        cfg.validate()?;
        let (a, k, b) = factor_dims(cfg)?;
        let (di, d_o) = dense_dims(cfg);
        Ok(CffnTrainWeights {
            factor_target: cfg.factor_target,
            dense: Dense::zeros(di, d_o, bias),
            u_branches: branches_zeros(cfg.r, a, k),
            v_branches: branches_zeros(cfg.r, k, b),
        })
    }

    pub fn branches(&self) -> usize {
        self.u_branches.len()
    }

    fn check(&self) -> Result<()> {
        let r = self.u_branches.len();
        if r == 0 || self.v_branches.len() != r {
            return Err(Error::Config(
                "U and V stages need the same nonzero branch count".into(),
            ));
        }
        let us = self.u_branches[0].weight.shape();
        let vs = self.v_branches[0].weight.shape();
        if self.u_branches.iter().any(|b| b.weight.shape() != us)
            || self.v_branches.iter().any(|b| b.weight.shape() != vs)
            || us[1] != vs[0]
        {
            return Err(Error::dim("cffn", "branch shapes differ within a stage"));
        }
        Ok(())
    }

    /// Forward without touching running statistics.
    pub fn forward_cached(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, CffnCache)> {
        self.check()?;
        match self.factor_target {
            FactorTarget::M2 => {
                let pre = self.dense.forward(x)?;
                let hidden = ops::gelu(&pre);
                let (u, uc) = stage_forward(&self.u_branches, &hidden, mode)?;
                let (out, vc) = stage_forward(&self.v_branches, &u, mode)?;
                Ok((
                    out,
                    CffnCache {
                        x: x.clone(),
                        pre,
                        hidden,
                        u: uc,
                        v: vc,
                    },
                ))
            }
            FactorTarget::M1 => {
                let (u, uc) = stage_forward(&self.u_branches, x, mode)?;
                let (pre, vc) = stage_forward(&self.v_branches, &u, mode)?;
                let hidden = ops::gelu(&pre);
                let out = self.dense.forward(&hidden)?;
                Ok((
                    out,
                    CffnCache {
                        x: x.clone(),
                        pre,
                        hidden,
                        u: uc,
                        v: vc,
                    },
                ))
            }
        }
    }

    pub fn update_running_stats(&mut self, cache: &CffnCache) {
        stage_update_stats(&mut self.u_branches, &cache.u);
        stage_update_stats(&mut self.v_branches, &cache.v);
    }

    pub fn backward(
        &self,
        cache: &CffnCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match self.factor_target {
            FactorTarget::M2 => {
                let gu = stage_backward(&self.v_branches, &cache.v, g, &join(prefix, "v"), grads)?;
                let gh =
                    stage_backward(&self.u_branches, &cache.u, &gu, &join(prefix, "u"), grads)?;
                let gp = ops::gelu_vjp(&cache.pre, &gh)?;
                self.dense
                    .backward(&cache.x, &gp, &join(prefix, "dense"), grads)
            }
            FactorTarget::M1 => {
                let gh = self
                    .dense
                    .backward(&cache.hidden, g, &join(prefix, "dense"), grads)?;
                let gp = ops::gelu_vjp(&cache.pre, &gh)?;
                let gu =
                    stage_backward(&self.v_branches, &cache.v, &gp, &join(prefix, "v"), grads)?;
                stage_backward(&self.u_branches, &cache.u, &gu, &join(prefix, "u"), grads)
            }
        }
    }

    /// MACs of the train form for `rows` tokens (all branches).
    pub fn macs(&self, rows: usize) -> u64 {
        let s = |bs: &[Branch]| {
            bs.iter()
                .map(|b| (rows * b.weight.numel()) as u64)
                .sum::<u64>()
        };
        self.dense.macs(rows) + s(&self.u_branches) + s(&self.v_branches)
    }
}

impl Params for CffnTrainWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.dense.visit_params(&join(prefix, "dense"), f);
        for (i, b) in self.u_branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("u.{i}")), f);
        }
        for (i, b) in self.v_branches.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("v.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dense.visit_params_mut(&join(prefix, "dense"), f);
        for (i, b) in self.u_branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("u.{i}")), f);
        }
        for (i, b) in self.v_branches.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("v.{i}")), f);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Option<&'a Tensor>)) {
        for (i, b) in self.u_branches.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("u.{i}")), f);
        }
        for (i, b) in self.v_branches.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("v.{i}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Option<Tensor>)) {
        for (i, b) in self.u_branches.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("u.{i}")), f);
        }
        for (i, b) in self.v_branches.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("v.{i}")), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct CffnCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
    u: StageCache,
    v: StageCache,
}

/// Train-form forward. In train mode the running statistics of every branch
/// batchnorm are updated.
pub fn cffn_train_forward(x: &Tensor, w: &mut CffnTrainWeights, mode: BnMode) -> Result<Tensor> {
    let (out, cache) = w.forward_cached(x, mode)?;
    if mode == BnMode::Train {
        w.update_running_stats(&cache);
    }
    Ok(out)
}

/// Inference-form compact FFN.
#[derive(Clone, Debug, PartialEq)]
pub struct CffnInferWeights {
    pub factor_target: FactorTarget,
    pub dense: Dense,
    pub u_hat: Tensor,
    pub u_bias: Tensor,
    pub v_hat: Tensor,
    pub v_bias: Tensor,
}

impl CffnInferWeights {
    pub fn k(&self) -> usize {
        self.u_hat.dim(1)
    }

    pub fn macs(&self, rows: usize) -> u64 {
        self.dense.macs(rows) + (rows * (self.u_hat.numel() + self.v_hat.numel())) as u64
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, InferCache)> {
        let factored = |inp: &Tensor| -> Result<(Tensor, Tensor)> {
            let u = ops::add_bias(&ops::matmul(inp, &self.u_hat)?, &self.u_bias)?;
            let o = ops::add_bias(&ops::matmul(&u, &self.v_hat)?, &self.v_bias)?;
            Ok((u, o))
        };
        match self.factor_target {
            FactorTarget::M2 => {
                let pre = self.dense.forward(x)?;
                let hidden = ops::gelu(&pre);
                let (u, out) = factored(&hidden)?;
                Ok((
                    out,
                    InferCache {
                        x: x.clone(),
                        pre,
                        hidden,
                        u,
                    },
                ))
            }
            FactorTarget::M1 => {
                let (u, pre) = factored(x)?;
                let hidden = ops::gelu(&pre);
                let out = self.dense.forward(&hidden)?;
                Ok((
                    out,
                    InferCache {
                        x: x.clone(),
                        pre,
                        hidden,
                        u,
                    },
                ))
            }
        }
    }

    pub fn backward(
        &self,
        cache: &InferCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let factored_back = |inp: &Tensor, g: &Tensor, grads: &mut Grads| -> Result<Tensor> {
            let (gu, gv) = ops::matmul_vjp(&cache.u, &self.v_hat, g)?;
            grads.add(join(prefix, "v_hat"), gv)?;
            grads.add(join(prefix, "v_bias"), ops::column_sums(g))?;
            let (gi, guh) = ops::matmul_vjp(inp, &self.u_hat, &gu)?;
            grads.add(join(prefix, "u_hat"), guh)?;
            grads.add(join(prefix, "u_bias"), ops::column_sums(&gu))?;
            Ok(gi)
        };
        match self.factor_target {
            FactorTarget::M2 => {
                let gh = factored_back(&cache.hidden, g, grads)?;
                let gp = ops::gelu_vjp(&cache.pre, &gh)?;
                self.dense
                    .backward(&cache.x, &gp, &join(prefix, "dense"), grads)
            }
            FactorTarget::M1 => {
                let gh = self
                    .dense
                    .backward(&cache.hidden, g, &join(prefix, "dense"), grads)?;
                let gp = ops::gelu_vjp(&cache.pre, &gh)?;
                factored_back(&cache.x, &gp, grads)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferCache {
    x: Tensor,
    pre: Tensor,
    hidden: Tensor,
    u: Tensor,
}

impl Params for CffnInferWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.dense.visit_params(&join(prefix, "dense"), f);
        f(join(prefix, "u_hat"), &self.u_hat);
        f(join(prefix, "u_bias"), &self.u_bias);
        f(join(prefix, "v_hat"), &self.v_hat);
        f(join(prefix, "v_bias"), &self.v_bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.dense.visit_params_mut(&join(prefix, "dense"), f);
        f(join(prefix, "u_hat"), &mut self.u_hat);
        f(join(prefix, "u_bias"), &mut self.u_bias);
        f(join(prefix, "v_hat"), &mut self.v_hat);
        f(join(prefix, "v_bias"), &mut self.v_bias);
    }
}

/// Folds every branch batchnorm into its matrix and sums the branches:
/// `Ŵ = Σ_i W_i diag(s_i)`, `b̂ = Σ_i c_i` with `s_i = γ_i / √(σ²_i + ε)`
/// and `c_i = β_i − μ_i s_i`.
pub fn reparam_merge(w: &CffnTrainWeights) -> Result<CffnInferWeights> {
    w.check()?;
    let (u_hat, u_bias) = fold_stage(&w.u_branches)?;
    let (v_hat, v_bias) = fold_stage(&w.v_branches)?;
    Ok(CffnInferWeights {
        factor_target: w.factor_target,
        dense: w.dense.clone(),
        u_hat,
        u_bias,
        v_hat,
        v_bias,
    })
}

/// `GELU(x M1) Û V̂` (or the M1-factored mirror), two thin matmuls.
pub fn cffn_infer_forward(x: &Tensor, w: &CffnInferWeights) -> Result<Tensor> {
    Ok(w.forward_cached(x)?.0)
}

/// Random train weights with populated, non-trivial batchnorm statistics.
pub fn random_train_weights(cfg: &FfnConfig, rng: &mut Rng) -> Result<CffnTrainWeights> {
    let mut w = CffnTrainWeights::init(cfg, rng, true)?;
    w.visit_params_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v = rng.normal() * 0.5;
        }
    });
    for b in w.u_branches.iter_mut().chain(w.v_branches.iter_mut()) {
        let c = b.bn.channels();
        b.bn.gamma = rng.uniform_tensor(&[c], 0.5, 1.5);
        b.bn.running_mean = Some(rng.normal_tensor(&[c], 0.5));
        b.bn.running_var = Some(rng.uniform_tensor(&[c], 0.25, 2.0));
    }
    Ok(w)
}

/// One random instance of the merge-equivalence sweep.
#[derive(Clone, Debug, Serialize)]
pub struct SweepTrial {
    pub trial: usize,
    pub c: usize,
    pub m: usize,
    pub t: String,
    pub r: usize,
    pub factor_target: FactorTarget,
    pub rows: usize,
    pub max_abs_diff: f64,
}

/// Eval-mode train form vs merged form over `trials` random
/// `(C, m, t, r, input)` instances. Trials are independent and seeded by
/// `(seed, trial)`, so the result does not depend on the execution policy.
pub fn reparam_sweep(trials: usize, seed: u64) -> Result<Vec<SweepTrial>> {
    reparam_sweep_with(Exec::default(), trials, seed)
}

pub fn reparam_sweep_with(exec: Exec, trials: usize, seed: u64) -> Result<Vec<SweepTrial>> {
    const RATIOS: [(i64, i64); 6] = [(1, 4), (1, 3), (1, 2), (2, 3), (3, 4), (1, 1)];
    exec.map(trials, |i| -> Result<SweepTrial> {
        let mut rng = Rng::fork(seed, i as u64);
        let c = 2 + rng.below(47);
        let m = 1 + rng.below(4);
        let (a, b) = RATIOS[rng.below(RATIOS.len())];
        let r = 1 + rng.below(4);
        let mut cfg = FfnConfig::new(c, m, Rational::new(a, b), r);
        if rng.below(2) == 1 {
            cfg.factor_target = FactorTarget::M1;
        }
        let rows = 1 + rng.below(16);
        let w = random_train_weights(&cfg, &mut rng)?;
        let x = rng.normal_tensor(&[rows, c], 1.0);
        let merged = reparam_merge(&w)?;
        let (ya, _) = w.forward_cached(&x, BnMode::Eval)?;
        let yb = cffn_infer_forward(&x, &merged)?;
        Ok(SweepTrial {
            trial: i,
            c,
            m,
            t: cfg.t.to_string(),
            r,
            factor_target: cfg.factor_target,
            rows,
            max_abs_diff: ya.max_abs_diff(&yb)?,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn r(a: i64, b: i64) -> Rational {
        Rational::new(a, b)
    }

    #[test]
    fn compact_dim_examples() {
        assert_eq!(compact_dim(384, 4, r(2, 3)).unwrap(), 205);
        assert_eq!(compact_dim(5, 4, r(1, 1)).unwrap(), 4);
        assert_eq!(compact_dim(64, 4, r(1, 2)).unwrap(), 26);
        assert_eq!(compact_dim(1, 1, r(1, 100)).unwrap(), 1);
        assert!(compact_dim(0, 4, r(1, 2)).is_err());
        assert!(compact_dim(4, 4, r(0, 1)).is_err());
        assert!(compact_dim(4, 4, r(3, 2)).is_err());
    }

    #[test]
    fn half_rounds_to_even() {
        assert_eq!(round_half_even(r(5, 2)), 2);
        assert_eq!(round_half_even(r(7, 2)), 4);
        assert_eq!(round_half_even(r(1024, 5)), 205);
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("2/3").unwrap(), r(2, 3));
        assert_eq!(parse_ratio("0.5").unwrap(), r(1, 2));
        assert_eq!(parse_ratio("1").unwrap(), r(1, 1));
        assert!(parse_ratio("1/0").is_err());
        assert!(parse_ratio("abc").is_err());
    }

    #[test]
    fn ffn_zero_input_gives_zero() {
        let mut rng = Rng::seed(1);
        let w = FfnWeights::init(3, 2, &mut rng, true);
        let y = ffn_forward(&Tensor::zeros(&[2, 3]), &w).unwrap();
        assert_eq!(y, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn ffn_matches_loop_oracle() {
        let mut rng = Rng::seed(2);
        let (n, c, m) = (2, 3, 2);
        let w = FfnWeights {
            m1: Dense {
                weight: rng.normal_tensor(&[c, m * c], 1.0),
                bias: Some(rng.normal_tensor(&[m * c], 1.0)),
            },
            m2: Dense {
                weight: rng.normal_tensor(&[m * c, c], 1.0),
                bias: Some(rng.normal_tensor(&[c], 1.0)),
            },
        };
        let x = rng.normal_tensor(&[n, c], 1.0);
        let y = ffn_forward(&x, &w).unwrap();
        for i in 0..n {
            let hidden: Vec<f64> = (0..m * c)
                .map(|j| {
                    let s: f64 = (0..c)
                        .map(|a| x.get(&[i, a]) * w.m1.weight.get(&[a, j]))
                        .sum();
                    ops::gelu_scalar(s + w.m1.bias.as_ref().unwrap().data()[j])
                })
                .collect();
            for o in 0..c {
                let s: f64 = (0..m * c)
                    .map(|j| hidden[j] * w.m2.weight.get(&[j, o]))
                    .sum();
                let expect = s + w.m2.bias.as_ref().unwrap().data()[o];
                assert!((y.get(&[i, o]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_identity_branch_is_plain_factorization() {
        let cfg = FfnConfig::new(4, 2, r(1, 2), 1);
        let mut rng = Rng::seed(3);
        let mut w = random_train_weights(&cfg, &mut rng).unwrap();
        for b in w.u_branches.iter_mut().chain(w.v_branches.iter_mut()) {
            let c = b.bn.channels();
            b.bn = BatchNormState::identity(c);
            b.bn.eps = 0.0;
        }
        let x = rng.normal_tensor(&[5, 4], 1.0);
        let y = cffn_train_forward(&x, &mut w, BnMode::Eval).unwrap();
        let h = ops::gelu(&w.dense.forward(&x).unwrap());
        let expect = ops::matmul(
            &ops::matmul(&h, &w.u_branches[0].weight).unwrap(),
            &w.v_branches[0].weight,
        )
        .unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-13);
        assert_eq!(y.shape(), &[5, 4]);

        let merged = reparam_merge(&w).unwrap();
        assert_eq!(merged.u_hat, w.u_branches[0].weight);
        assert_eq!(merged.u_bias, Tensor::zeros(&[merged.k()]));
    }

    #[test]
    fn fold_arithmetic_single_channel() {
        let b = Branch {
            weight: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            bn: BatchNormState {
                gamma: Tensor::scalar(3.0),
                beta: Tensor::scalar(1.0),
                running_mean: Some(Tensor::scalar(4.0)),
                running_var: Some(Tensor::scalar(0.25)),
                eps: 0.0,
                momentum: 0.1,
            },
        };
        let (w, bias) = fold_stage(&[b]).unwrap();
        assert_eq!(w.data(), &[12.0]);
        assert_eq!(bias.data(), &[-23.0]);
    }

    #[test]
    fn merge_requires_running_stats() {
        let cfg = FfnConfig::new(4, 2, r(1, 2), 2);
        let mut w = CffnTrainWeights::init(&cfg, &mut Rng::seed(4), true).unwrap();
        w.v_branches[1].bn.running_var = None;
        assert!(matches!(reparam_merge(&w), Err(Error::State(_))));
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let cfg = FfnConfig::new(4, 2, r(1, 2), 2);
        let mut w = CffnTrainWeights::init(&cfg, &mut Rng::seed(4), true).unwrap();
        let err = cffn_train_forward(&Tensor::ones(&[1, 4]), &mut w, BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::Statistics(_)));
    }

    #[test]
    fn zero_factors_give_zero() {
        let cfg = FfnConfig::new(4, 2, r(1, 2), 2);
        let w = CffnInferWeights {
            factor_target: FactorTarget::M2,
            dense: Dense::init(&mut Rng::seed(1), 4, 8, true),
            u_hat: Tensor::zeros(&[8, cfg.k().unwrap()]),
            u_bias: Tensor::zeros(&[cfg.k().unwrap()]),
            v_hat: Tensor::zeros(&[cfg.k().unwrap(), 4]),
            v_bias: Tensor::zeros(&[4]),
        };
        let y = cffn_infer_forward(&Rng::seed(2).normal_tensor(&[3, 4], 1.0), &w).unwrap();
        assert_eq!(y, Tensor::zeros(&[3, 4]));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let cfg = FfnConfig::new(4, 2, r(1, 2), 2);
        let mut w = CffnTrainWeights::init(&cfg, &mut Rng::seed(5), true).unwrap();
        let before = w.clone();
        cffn_train_forward(
            &Rng::seed(6).normal_tensor(&[6, 4], 1.0),
            &mut w,
            BnMode::Train,
        )
        .unwrap();
        assert_ne!(
            before.u_branches[0].bn.running_mean,
            w.u_branches[0].bn.running_mean
        );
    }

    #[test]
    fn inference_params_shrink_for_t_below_one() {
        for t in [r(1, 2), r(2, 3), r(3, 4), r(9, 10)] {
            let cfg = FfnConfig::new(32, 4, t, 2);
            let merged =
                reparam_merge(&CffnTrainWeights::init(&cfg, &mut Rng::seed(0), true).unwrap())
                    .unwrap();
            let vanilla = FfnWeights::zeros(32, 4, true);
            assert!(merged.param_count() < vanilla.param_count(), "t = {t}");
        }
    }

    #[test]
    fn sweep_is_deterministic_and_tight() {
        let a = reparam_sweep(30, 7).unwrap();
        let b = reparam_sweep(30, 7).unwrap();
        assert_eq!(a.len(), 30);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.max_abs_diff, y.max_abs_diff);
            assert!(x.max_abs_diff < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn merge_equivalence(
            c in 4usize..=32,
            m in prop_oneof![Just(2usize), Just(4usize)],
            t in prop_oneof![Just((1i64, 2i64)), Just((2, 3)), Just((3, 4))],
            r in 1usize..=3,
            m1 in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let mut cfg = FfnConfig::new(c, m, Rational::new(t.0, t.1), r);
            if m1 {
                cfg.factor_target = FactorTarget::M1;
            }
            let mut rng = Rng::seed(seed);
            let mut w = random_train_weights(&cfg, &mut rng).unwrap();
            let x = rng.normal_tensor(&[5, c], 1.0);
            let merged = reparam_merge(&w).unwrap();
            let a = cffn_train_forward(&x, &mut w, BnMode::Eval).unwrap();
            let b = cffn_infer_forward(&x, &merged).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() < 1e-9);
        }
    }
}
