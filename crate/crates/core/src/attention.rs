//! Vanilla multi-head self-attention and the hallucinated variant.
//!
//! The hallucinated block computes only `h/2` attention maps from `Q̂ K̂ᵀ`
//! and derives the other `h/2` from them with cheap operators:
//!
//! * IHH: a depthwise 3×3 convolution per hallucinated head, where each
//!   query's row of keys is laid out on the `H × W` token grid and the query
//!   axis acts as the batch axis.
//! * CHH: a 1×1 mixing across the `h/2` head channels at every
//!   (query, key) position.
//!
//! Real maps pair with value heads `0..h/2`, hallucinated maps with heads
//! `h/2..h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::par::Exec;
use crate::params::{join, Grads, Linear, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HallucinationOp {
    Copy,
    Ihh,
    Chh,
}

impl std::str::FromStr for HallucinationOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "copy" => Ok(HallucinationOp::Copy),
            "ihh" => Ok(HallucinationOp::Ihh),
            "chh" => Ok(HallucinationOp::Chh),
            other => Err(Error::Config(format!("unknown hallucination op `{other}`"))),
        }
    }
}

pub const DEFAULT_HALLUCINATION_OPS: [HallucinationOp; 2] =
    [HallucinationOp::Ihh, HallucinationOp::Chh];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Vanilla,
    Hallucinated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    /// Token count.
    pub n: usize,
    /// Embedding width.
    pub c: usize,
    /// Head count (for the hallucinated mode, real plus hallucinated).
    pub h: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub has_class_token: bool,
    pub mode: AttentionMode,
    pub hallucination_ops: Vec<HallucinationOp>,
}

impl AttentionConfig {
    pub fn vanilla(
        grid_h: usize,
        grid_w: usize,
        has_class_token: bool,
        c: usize,
        h: usize,
    ) -> Self {
        AttentionConfig {
            n: grid_h * grid_w + has_class_token as usize,
            c,
            h,
            grid_h,
            grid_w,
            has_class_token,
            mode: AttentionMode::Vanilla,
            hallucination_ops: Vec::new(),
        }
    }

    pub fn hallucinated(
        grid_h: usize,
        grid_w: usize,
        has_class_token: bool,
        c: usize,
        h: usize,
    ) -> Self {
        AttentionConfig {
            mode: AttentionMode::Hallucinated,
            hallucination_ops: DEFAULT_HALLUCINATION_OPS.to_vec(),
            ..Self::vanilla(grid_h, grid_w, has_class_token, c, h)
        }
    }

    pub fn with_ops(mut self, ops: &[HallucinationOp]) -> Self {
        self.hallucination_ops = ops.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.c == 0 || !self.c.is_multiple_of(self.h) {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.c, self.h
            )));
        }
        if self.n != self.grid_h * self.grid_w + self.class_offset() {
            return Err(Error::Grid(format!(
                "N = {} does not match a {}x{} grid{}",
                self.n,
                self.grid_h,
                self.grid_w,
                if self.has_class_token {
                    " plus class token"
                } else {
                    ""
                }
            )));
        }
        if self.mode == AttentionMode::Hallucinated {
            if !self.h.is_multiple_of(2) {
                return Err(Error::Config(format!(
                    "hallucinated attention needs an even head count, got {}",
                    self.h
                )));
            }
            if self.hallucination_ops.is_empty() {
                return Err(Error::Config(
                    "hallucinated attention needs at least one op".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.h
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// Heads whose maps come from a query-key product.
    pub fn real_heads(&self) -> usize {
        match self.mode {
            AttentionMode::Vanilla => self.h,
            AttentionMode::Hallucinated => self.h / 2,
        }
    }

    pub fn class_offset(&self) -> usize {
        self.has_class_token as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Real,
    Hallucinated,
}

/// Post-softmax maps of one block, `[h, N, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMapStack {
    pub maps: Tensor,
    pub block_index: usize,
    pub provenance: Vec<HeadKind>,
}

impl AttentionMapStack {
    pub fn heads(&self) -> usize {
        self.maps.dim(0)
    }

    pub fn tokens(&self) -> usize {
        self.maps.dim(1)
    }

    /// Map of head `i` as an `[N, N]` tensor.
    pub fn head(&self, i: usize) -> Tensor {
        head_slice(&self.maps, i)
    }
}

fn head_slice(stack: &Tensor, i: usize) -> Tensor {
    let n = stack.dim(1);
    stack
        .narrow_first(i, 1)
        .and_then(|t| t.reshape(&[n, stack.dim(2)]))
        .expect("head index in range")
}

fn stack_heads(maps: Vec<Tensor>) -> Result<Tensor> {
    let refs: Vec<&Tensor> = maps.iter().collect();
    let (r, c) = (maps[0].dim(0), maps[0].dim(1));
    Tensor::concat_first(&refs)?.reshape(&[maps.len(), r, c])
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhsaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl MhsaWeights {
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng, bias: bool) -> Self {
        let c = cfg.c;
        MhsaWeights {
            q: Linear::init(rng, c, c, bias),
            k: Linear::init(rng, c, c, bias),
            v: Linear::init(rng, c, c, bias),
            proj: Linear::init(rng, c, c, bias),
        }
    }

    pub fn zeros(cfg: &AttentionConfig, bias: bool) -> Self {
        let c = cfg.c;
        MhsaWeights {
            q: Linear::zeros(c, c, bias),
            k: Linear::zeros(c, c, bias),
            v: Linear::zeros(c, c, bias),
            proj: Linear::zeros(c, c, bias),
        }
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let c = cfg.c;
        for (name, l) in [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("proj", &self.proj),
        ] {
            if l.weight.shape() != [c, c] {
                return Err(Error::dim(
                    "mhsa",
                    format!("{name} weight {:?} is not {c}x{c}", l.weight.shape()),
                ));
            }
        }
        Ok(())
    }
}

impl Params for MhsaWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q.visit_params(&join(prefix, "q"), f);
        self.k.visit_params(&join(prefix, "k"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q.visit_params_mut(&join(prefix, "q"), f);
        self.k.visit_params_mut(&join(prefix, "k"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HmhsaWeights {
    /// `C -> C/2`
    pub q_hat: Linear,
    /// `C -> C/2`
    pub k_hat: Linear,
    pub v: Linear,
    /// `[h/2, 3, 3]`
    pub ihh_kernels: Tensor,
    pub ihh_bias: Option<Tensor>,
    /// `[h/2, h/2]`
    pub chh_weight: Tensor,
    pub chh_bias: Option<Tensor>,
    pub proj: Linear,
}

impl HmhsaWeights {
    /// Projections from a truncated normal; IHH and CHH start as identities
    /// so hallucinated maps begin as copies of the real ones.
    pub fn init(cfg: &AttentionConfig, rng: &mut Rng, bias: bool) -> Self {
        let c = cfg.c;
        let hh = cfg.h / 2;
        HmhsaWeights {
            q_hat: Linear::init(rng, c, c / 2, bias),
            k_hat: Linear::init(rng, c, c / 2, bias),
            v: Linear::init(rng, c, c, bias),
            ihh_kernels: identity_kernels(hh),
            ihh_bias: bias.then(|| Tensor::zeros(&[hh])),
            chh_weight: Tensor::eye(hh),
            chh_bias: bias.then(|| Tensor::zeros(&[hh])),
            proj: Linear::init(rng, c, c, bias),
        }
    }

    pub fn zeros(cfg: &AttentionConfig, bias: bool) -> Self {
        let c = cfg.c;
        let hh = cfg.h / 2;
        HmhsaWeights {
            q_hat: Linear::zeros(c, c / 2, bias),
            k_hat: Linear::zeros(c, c / 2, bias),
            v: Linear::zeros(c, c, bias),
            ihh_kernels: Tensor::zeros(&[hh, 3, 3]),
            ihh_bias: bias.then(|| Tensor::zeros(&[hh])),
            chh_weight: Tensor::zeros(&[hh, hh]),
            chh_bias: bias.then(|| Tensor::zeros(&[hh])),
            proj: Linear::zeros(c, c, bias),
        }
    }

    fn check(&self, cfg: &AttentionConfig) -> Result<()> {
        let (c, hh) = (cfg.c, cfg.h / 2);
        let ok = self.q_hat.weight.shape() == [c / 2, c]
            && self.k_hat.weight.shape() == [c / 2, c]
            && self.v.weight.shape() == [c, c]
            && self.proj.weight.shape() == [c, c]
            && self.ihh_kernels.shape() == [hh, 3, 3]
            && self.chh_weight.shape() == [hh, hh]
            && self.ihh_bias.as_ref().is_none_or(|b| b.shape() == [hh])
            && self.chh_bias.as_ref().is_none_or(|b| b.shape() == [hh]);
        if !ok {
            return Err(Error::dim(
                "hmhsa",
                format!("weights do not match C={c}, h={}", cfg.h),
            ));
        }
        Ok(())
    }
}

impl Params for HmhsaWeights {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q_hat.visit_params(&join(prefix, "q_hat"), f);
        self.k_hat.visit_params(&join(prefix, "k_hat"), f);
        self.v.visit_params(&join(prefix, "v"), f);
        f(join(prefix, "ihh_kernels"), &self.ihh_kernels);
        if let Some(b) = &self.ihh_bias {
            f(join(prefix, "ihh_bias"), b);
        }
        f(join(prefix, "chh_weight"), &self.chh_weight);
        if let Some(b) = &self.chh_bias {
            f(join(prefix, "chh_bias"), b);
        }
        self.proj.visit_params(&join(prefix, "proj"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.q_hat.visit_params_mut(&join(prefix, "q_hat"), f);
        self.k_hat.visit_params_mut(&join(prefix, "k_hat"), f);
        self.v.visit_params_mut(&join(prefix, "v"), f);
        f(join(prefix, "ihh_kernels"), &mut self.ihh_kernels);
        if let Some(b) = &mut self.ihh_bias {
            f(join(prefix, "ihh_bias"), b);
        }
        f(join(prefix, "chh_weight"), &mut self.chh_weight);
        if let Some(b) = &mut self.chh_bias {
            f(join(prefix, "chh_bias"), b);
        }
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
    }
}

/// `[ch, 3, 3]` kernels with a single 1 at the centre.
pub fn identity_kernels(ch: usize) -> Tensor {
    Tensor::from_fn(&[ch, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 })
}

fn check_maps(
    a: &Tensor,
    heads: Option<usize>,
    cfg: &AttentionConfig,
    op: &'static str,
) -> Result<usize> {
    if a.rank() != 3 || a.dim(1) != a.dim(2) || heads.is_some_and(|h| a.dim(0) != h) {
        return Err(Error::dim(
            op,
            format!("maps {:?} are not [heads, N, N]", a.shape()),
        ));
    }
    if a.dim(1) != cfg.n {
        return Err(Error::dim(
            op,
            format!("maps have {} tokens, config says {}", a.dim(1), cfg.n),
        ));
    }
    Ok(a.dim(0))
}

/// `[hh, N, N] -> [N, hh, H, W]` over the patch key columns.
fn maps_to_grid(a: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let (hh, n) = (a.dim(0), a.dim(1));
    let off = cfg.class_offset();
    let hw = cfg.grid_h * cfg.grid_w;
    if n < off || n - off != hw {
        return Err(Error::Grid(format!(
            "{} key tokens after class offset {off} cannot form a {}x{} grid",
            n.saturating_sub(off),
            cfg.grid_h,
            cfg.grid_w
        )));
    }
    let d = a.data();
    let mut out = vec![0.0; n * hh * hw];
    for q in 0..n {
        for i in 0..hh {
            let src = &d[(i * n + q) * n + off..(i * n + q) * n + n];
            out[(q * hh + i) * hw..(q * hh + i + 1) * hw].copy_from_slice(src);
        }
    }
    Tensor::new(vec![n, hh, cfg.grid_h, cfg.grid_w], out)
}

/// Writes `[N, hh, H, W]` back into the patch columns of `base`.
fn grid_into_maps(grid: &Tensor, base: &Tensor, off: usize) -> Tensor {
    let (hh, n) = (base.dim(0), base.dim(1));
    let hw = n - off;
    let mut out = base.clone();
    let d = out.data_mut();
    let g = grid.data();
    for q in 0..n {
        for i in 0..hh {
            d[(i * n + q) * n + off..(i * n + q) * n + n]
                .copy_from_slice(&g[(q * hh + i) * hw..(q * hh + i + 1) * hw]);
        }
    }
    out
}

/// Intra-head hallucination. The class-token key column, when present,
/// passes through unchanged.
pub fn ihh(
    a: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    check_maps(a, None, cfg, "ihh")?;
    let grid = maps_to_grid(a, cfg)?;
    let y = ops::depthwise_conv3x3(&grid, kernels, bias)?;
    Ok(grid_into_maps(&y, a, cfg.class_offset()))
}

/// VJP of [`ihh`]: `(grad_maps, grad_kernels, grad_bias)`.
pub fn ihh_vjp(
    a: &Tensor,
    kernels: &Tensor,
    g: &Tensor,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_maps(a, None, cfg, "ihh")?;
    let grid = maps_to_grid(a, cfg)?;
    let g_grid = maps_to_grid(g, cfg)?;
    let (gx, gk, gb) = ops::depthwise_conv3x3_vjp(&grid, kernels, &g_grid)?;
    Ok((grid_into_maps(&gx, g, cfg.class_offset()), gk, gb))
}

fn maps_to_positions(a: &Tensor) -> Result<Tensor> {
    let (hh, n) = (a.dim(0), a.dim(1));
    a.clone().reshape(&[hh, n * n])?.transpose()
}

fn positions_to_maps(p: &Tensor, n: usize) -> Result<Tensor> {
    let hh = p.last_dim();
    p.transpose()?.reshape(&[hh, n, n])
}

/// Cross-head hallucination: `out[:, q, k] = W · a[:, q, k] + b`.
pub fn chh(a: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if a.rank() != 3 || weight.shape() != [a.dim(0), a.dim(0)] {
        return Err(Error::shape("chh", a.shape(), weight.shape()));
    }
    let y = ops::pointwise_mix(&maps_to_positions(a)?, weight, bias)?;
    positions_to_maps(&y, a.dim(1))
}

/// VJP of [`chh`]: `(grad_maps, grad_weight, grad_bias)`.
pub fn chh_vjp(a: &Tensor, weight: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if a.shape() != g.shape() {
        return Err(Error::shape("chh_vjp", a.shape(), g.shape()));
    }
    let (gx, gw, gb) =
        ops::pointwise_mix_vjp(&maps_to_positions(a)?, weight, &maps_to_positions(g)?)?;
    Ok((positions_to_maps(&gx, a.dim(1))?, gw, gb))
}

struct Hallucinator<'a> {
    ops: &'a [HallucinationOp],
    ihh_kernels: &'a Tensor,
    ihh_bias: Option<&'a Tensor>,
    chh_weight: &'a Tensor,
    chh_bias: Option<&'a Tensor>,
}

impl Hallucinator<'_> {
    fn apply(&self, op: HallucinationOp, a: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
        match op {
            HallucinationOp::Copy => Ok(a.clone()),
            HallucinationOp::Ihh => ihh(a, self.ihh_kernels, self.ihh_bias, cfg),
            HallucinationOp::Chh => chh(a, self.chh_weight, self.chh_bias),
        }
    }

    fn backward(
        &self,
        op: HallucinationOp,
        input: &Tensor,
        g: &Tensor,
        cfg: &AttentionConfig,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match op {
            HallucinationOp::Copy => Ok(g.clone()),
            HallucinationOp::Ihh => {
                let (gx, gk, gb) = ihh_vjp(input, self.ihh_kernels, g, cfg)?;
                grads.add(join(prefix, "ihh_kernels"), gk)?;
                if self.ihh_bias.is_some() {
                    grads.add(join(prefix, "ihh_bias"), gb)?;
                }
                Ok(gx)
            }
            HallucinationOp::Chh => {
                let (gx, gw, gb) = chh_vjp(input, self.chh_weight, g)?;
                grads.add(join(prefix, "chh_weight"), gw)?;
                if self.chh_bias.is_some() {
                    grads.add(join(prefix, "chh_bias"), gb)?;
                }
                Ok(gx)
            }
        }
    }
}

struct Parts<'a> {
    q: &'a Linear,
    k: &'a Linear,
    v: &'a Linear,
    proj: &'a Linear,
    names: [&'static str; 2],
    halluc: Option<Hallucinator<'a>>,
}

/// Intermediates kept by a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    halluc_inputs: Vec<Tensor>,
    post: Tensor,
    ctx: Tensor,
}

impl AttentionCache {
    pub fn maps(&self) -> &Tensor {
        &self.post
    }
}

fn attend(x: &Tensor, p: &Parts<'_>, cfg: &AttentionConfig) -> Result<(Tensor, AttentionCache)> {
    if x.shape() != [cfg.n, cfg.c] {
        return Err(Error::dim(
            "attention",
            format!("input {:?} is not [{}, {}]", x.shape(), cfg.n, cfg.c),
        ));
    }
    let ch = cfg.head_dim();
    let scale = cfg.scale();
    let q = p.q.forward(x)?;
    let k = p.k.forward(x)?;
    let v = p.v.forward(x)?;
    let real: Vec<Tensor> = Exec::default()
        .map(cfg.real_heads(), |i| -> Result<Tensor> {
            let qi = q.narrow_last(i * ch, ch)?;
            let ki = k.narrow_last(i * ch, ch)?;
            Ok(ops::matmul(&qi, &ki.transpose()?)?.scale(scale))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let real = stack_heads(real)?;

    let mut halluc_inputs = Vec::new();
    let pre = match &p.halluc {
        None => real,
        Some(hal) => {
            let mut cur = real.clone();
            for &op in hal.ops {
                let next = hal.apply(op, &cur, cfg)?;
                halluc_inputs.push(std::mem::replace(&mut cur, next));
            }
            Tensor::concat_first(&[&real, &cur])?
        }
    };
    let post = ops::softmax_lastdim(&pre);
    let heads: Vec<Tensor> = Exec::default()
        .map(cfg.h, |j| {
            ops::matmul(&head_slice(&post, j), &v.narrow_last(j * ch, ch)?)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let ctx = Tensor::concat_last(&heads.iter().collect::<Vec<_>>())?;
    let out = p.proj.forward(&ctx)?;
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            halluc_inputs,
            post,
            ctx,
        },
    ))
}

fn attend_backward(
    cache: &AttentionCache,
    p: &Parts<'_>,
    cfg: &AttentionConfig,
    g: &Tensor,
    prefix: &str,
    grads: &mut Grads,
) -> Result<Tensor> {
    let ch = cfg.head_dim();
    let scale = cfg.scale();
    let hr = cfg.real_heads();
    let gctx = p
        .proj
        .backward(&cache.ctx, g, &join(prefix, "proj"), grads)?;

    let per_head: Vec<(Tensor, Tensor)> = Exec::default()
        .map(cfg.h, |j| -> Result<(Tensor, Tensor)> {
            let pj = head_slice(&cache.post, j);
            let vj = cache.v.narrow_last(j * ch, ch)?;
            ops::matmul_vjp(&pj, &vj, &gctx.narrow_last(j * ch, ch)?)
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let (g_post, g_v): (Vec<Tensor>, Vec<Tensor>) = per_head.into_iter().unzip();
    let g_pre = ops::softmax_vjp(&cache.post, &stack_heads(g_post)?)?;
    let gv = Tensor::concat_last(&g_v.iter().collect::<Vec<_>>())?;

    let mut g_real = g_pre.narrow_first(0, hr)?;
    if let Some(hal) = &p.halluc {
        let mut gh = g_pre.narrow_first(hr, cfg.h - hr)?;
        for (&op, input) in hal.ops.iter().zip(&cache.halluc_inputs).rev() {
            gh = hal.backward(op, input, &gh, cfg, prefix, grads)?;
        }
        g_real.add_assign(&gh)?;
    }

    let qk: Vec<(Tensor, Tensor)> = Exec::default()
        .map(hr, |i| -> Result<(Tensor, Tensor)> {
            let gi = head_slice(&g_real, i).scale(scale);
            let qi = cache.q.narrow_last(i * ch, ch)?;
            let ki = cache.k.narrow_last(i * ch, ch)?;
            Ok((ops::matmul(&gi, &ki)?, ops::matmul(&gi.transpose()?, &qi)?))
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let (gq, gk): (Vec<Tensor>, Vec<Tensor>) = qk.into_iter().unzip();
    let gq = Tensor::concat_last(&gq.iter().collect::<Vec<_>>())?;
    let gk = Tensor::concat_last(&gk.iter().collect::<Vec<_>>())?;

    let mut gx =
        p.q.backward(&cache.x, &gq, &join(prefix, p.names[0]), grads)?;
    gx.add_assign(&p.k.backward(&cache.x, &gk, &join(prefix, p.names[1]), grads)?)?;
    gx.add_assign(&p.v.backward(&cache.x, &gv, &join(prefix, "v"), grads)?)?;
    Ok(gx)
}

fn provenance(cfg: &AttentionConfig) -> Vec<HeadKind> {
    (0..cfg.h)
        .map(|i| {
            if i < cfg.real_heads() {
                HeadKind::Real
            } else {
                HeadKind::Hallucinated
            }
        })
        .collect()
}

fn mhsa_parts(w: &MhsaWeights) -> Parts<'_> {
    Parts {
        q: &w.q,
        k: &w.k,
        v: &w.v,
        proj: &w.proj,
        names: ["q", "k"],
        halluc: None,
    }
}

fn hmhsa_parts<'a>(w: &'a HmhsaWeights, cfg: &'a AttentionConfig) -> Parts<'a> {
    Parts {
        q: &w.q_hat,
        k: &w.k_hat,
        v: &w.v,
        proj: &w.proj,
        names: ["q_hat", "k_hat"],
        halluc: Some(Hallucinator {
            ops: &cfg.hallucination_ops,
            ihh_kernels: &w.ihh_kernels,
            ihh_bias: w.ihh_bias.as_ref(),
            chh_weight: &w.chh_weight,
            chh_bias: w.chh_bias.as_ref(),
        }),
    }
}

/// Vanilla multi-head self-attention. Returns the output and the
/// post-softmax maps.
pub fn mhsa_forward(
    x: &Tensor,
    w: &MhsaWeights,
    cfg: &AttentionConfig,
) -> Result<(Tensor, AttentionMapStack)> {
    cfg.validate()?;
    if cfg.mode != AttentionMode::Vanilla {
        return Err(Error::Config("mhsa_forward needs a vanilla config".into()));
    }
    w.check(cfg)?;
    let (out, cache) = attend(x, &mhsa_parts(w), cfg)?;
    Ok((
        out,
        AttentionMapStack {
            maps: cache.post,
            block_index: 0,
            provenance: provenance(cfg),
        },
    ))
}

/// Hallucinated multi-head self-attention.
pub fn hmhsa_forward(
    x: &Tensor,
    w: &HmhsaWeights,
    cfg: &AttentionConfig,
) -> Result<(Tensor, AttentionMapStack)> {
    cfg.validate()?;
    if cfg.mode != AttentionMode::Hallucinated {
        return Err(Error::Config(
            "hmhsa_forward needs a hallucinated config".into(),
        ));
    }
    w.check(cfg)?;
    let (out, cache) = attend(x, &hmhsa_parts(w, cfg), cfg)?;
    Ok((
        out,
        AttentionMapStack {
            maps: cache.post,
            block_index: 0,
            provenance: provenance(cfg),
        },
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionWeights {
    Vanilla(MhsaWeights),
    Hallucinated(HmhsaWeights),
}

/// Attention layer of either kind, with its config.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub cfg: AttentionConfig,
    pub weights: AttentionWeights,
}

impl Attention {
    pub fn init(cfg: AttentionConfig, rng: &mut Rng, bias: bool) -> Result<Self> {
        cfg.validate()?;
        let weights = match cfg.mode {
            AttentionMode::Vanilla => AttentionWeights::Vanilla(MhsaWeights::init(&cfg, rng, bias)),
            AttentionMode::Hallucinated => {
                AttentionWeights::Hallucinated(HmhsaWeights::init(&cfg, rng, bias))
            }
        };
        Ok(Attention { cfg, weights })
    }

    pub fn zeros(cfg: AttentionConfig, bias: bool) -> Result<Self> {
        cfg.validate()?;
        let weights = match cfg.mode {
            AttentionMode::Vanilla => AttentionWeights::Vanilla(MhsaWeights::zeros(&cfg, bias)),
            AttentionMode::Hallucinated => {
                AttentionWeights::Hallucinated(HmhsaWeights::zeros(&cfg, bias))
            }
        };
        Ok(Attention { cfg, weights })
    }

    fn parts(&self) -> Parts<'_> {
        match &self.weights {
            AttentionWeights::Vanilla(w) => mhsa_parts(w),
            AttentionWeights::Hallucinated(w) => hmhsa_parts(w, &self.cfg),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        attend(x, &self.parts(), &self.cfg)
    }

    pub fn backward(
        &self,
        cache: &AttentionCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        attend_backward(cache, &self.parts(), &self.cfg, g, prefix, grads)
    }

    pub fn map_stack(&self, cache: &AttentionCache, block_index: usize) -> AttentionMapStack {
        AttentionMapStack {
            maps: cache.post.clone(),
            block_index,
            provenance: provenance(&self.cfg),
        }
    }

    /// Per-operator multiply-accumulate counts, read off the weight shapes.
    pub fn mac_breakdown(&self) -> Vec<(&'static str, u64)> {
        let n = self.cfg.n;
        let p = self.parts();
        let ch = self.cfg.head_dim();
        let hr = self.cfg.real_heads();
        let mut out = vec![
            ("q", p.q.macs(n)),
            ("k", p.k.macs(n)),
            ("v", p.v.macs(n)),
            ("qk", (hr * n * n * ch) as u64),
        ];
        if let AttentionWeights::Hallucinated(w) = &self.weights {
            let keys = self.cfg.grid_h * self.cfg.grid_w;
            for op in &self.cfg.hallucination_ops {
                match op {
                    HallucinationOp::Copy => {}
                    HallucinationOp::Ihh => {
                        out.push(("ihh", (w.ihh_kernels.dim(0) * 9 * n * keys) as u64));
                    }
                    HallucinationOp::Chh => {
                        out.push(("chh", (w.chh_weight.numel() * n * n) as u64));
                    }
                }
            }
        }
        out.push(("av", (self.cfg.h * n * n * ch) as u64));
        out.push(("proj", p.proj.macs(n)));
        out
    }

    pub fn macs(&self) -> u64 {
        self.mac_breakdown().iter().map(|(_, m)| m).sum()
    }
}

impl Params for Attention {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match &self.weights {
            AttentionWeights::Vanilla(w) => w.visit_params(prefix, f),
            AttentionWeights::Hallucinated(w) => w.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match &mut self.weights {
            AttentionWeights::Vanilla(w) => w.visit_params_mut(prefix, f),
            AttentionWeights::Hallucinated(w) => w.visit_params_mut(prefix, f),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_maps(rng: &mut Rng, h: usize, n: usize) -> Tensor {
        rng.normal_tensor(&[h, n, n], 1.0)
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = AttentionConfig::vanilla(1, 1, false, 4, 2);
        let mut rng = Rng::seed(1);
        let w = MhsaWeights::init(&cfg, &mut rng, true);
        let x = rng.normal_tensor(&[1, 4], 1.0);
        let (out, maps) = mhsa_forward(&x, &w, &cfg).unwrap();
        assert_eq!(maps.maps.data(), &[1.0, 1.0]);
        let expect = w.proj.forward(&w.v.forward(&x).unwrap()).unwrap();
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn mhsa_matches_explicit_loops() {
        let cfg = AttentionConfig::vanilla(2, 2, false, 8, 2);
        let mut rng = Rng::seed(2);
        let mut w = MhsaWeights::init(&cfg, &mut rng, true);
        w.visit_params_mut("", &mut |_, t| {
            *t = Rng::seed(t.numel() as u64).normal_tensor(t.shape(), 0.5)
        });
        let x = rng.normal_tensor(&[4, 8], 1.0);
        let (out, maps) = mhsa_forward(&x, &w, &cfg).unwrap();

        let lin = |l: &Linear, x: &Tensor| {
            let (o, i) = (l.weight.dim(0), l.weight.dim(1));
            let mut y = vec![0.0; x.dim(0) * o];
            for r in 0..x.dim(0) {
                for a in 0..o {
                    let mut s = l.bias.as_ref().unwrap().data()[a];
                    for b in 0..i {
                        s += x.get(&[r, b]) * l.weight.get(&[a, b]);
                    }
                    y[r * o + a] = s;
                }
            }
            Tensor::new(vec![x.dim(0), o], y).unwrap()
        };
        let (q, k, v) = (lin(&w.q, &x), lin(&w.k, &x), lin(&w.v, &x));
        let mut ctx = Tensor::zeros(&[4, 8]);
        for head in 0..2 {
            for i in 0..4 {
                let mut logits = [0.0; 4];
                for (j, l) in logits.iter_mut().enumerate() {
                    for d in 0..4 {
                        *l += q.get(&[i, head * 4 + d]) * k.get(&[j, head * 4 + d]);
                    }
                    *l /= 2.0;
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    let p = (l - m).exp() / z;
                    assert!((maps.maps.get(&[head, i, j]) - p).abs() < 1e-12);
                    for d in 0..4 {
                        let idx = [i, head * 4 + d];
                        ctx.set(&idx, ctx.get(&idx) + p * v.get(&[j, head * 4 + d]));
                    }
                }
            }
        }
        let expect = lin(&w.proj, &ctx);
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-10);
    }

    #[test]
    fn ihh_identity_and_class_passthrough() {
        let cfg = AttentionConfig::hallucinated(2, 3, true, 8, 4);
        let mut rng = Rng::seed(3);
        let a = rand_maps(&mut rng, 2, 7);
        let y = ihh(&a, &identity_kernels(2), Some(&Tensor::zeros(&[2])), &cfg).unwrap();
        assert_eq!(y, a);
        let k = rng.normal_tensor(&[2, 3, 3], 1.0);
        let b = rng.normal_tensor(&[2], 1.0);
        let y = ihh(&a, &k, Some(&b), &cfg).unwrap();
        for i in 0..2 {
            for q in 0..7 {
                assert_eq!(y.get(&[i, q, 0]), a.get(&[i, q, 0]));
            }
        }
    }

    #[test]
    fn ihh_counts_neighbours_on_2x2_grid() {
        let cfg = AttentionConfig::hallucinated(2, 2, false, 4, 2);
        let y = ihh(
            &Tensor::ones(&[1, 4, 4]),
            &Tensor::ones(&[1, 3, 3]),
            None,
            &cfg,
        )
        .unwrap();
        assert!(y.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn ihh_rejects_bad_grid() {
        let mut cfg = AttentionConfig::hallucinated(2, 2, false, 4, 2);
        cfg.n = 5;
        assert!(matches!(
            ihh(&Tensor::ones(&[1, 5, 5]), &identity_kernels(1), None, &cfg),
            Err(Error::Grid(_))
        ));
    }

    #[test]
    fn chh_examples() {
        let mut rng = Rng::seed(4);
        let a = rand_maps(&mut rng, 2, 3);
        assert_eq!(
            chh(&a, &Tensor::eye(2), Some(&Tensor::zeros(&[2]))).unwrap(),
            a
        );
        let swap = Tensor::new(vec![2, 2], vec![0., 1., 1., 0.]).unwrap();
        let y = chh(&a, &swap, None).unwrap();
        assert_eq!(head_slice(&y, 0), head_slice(&a, 1));
        assert_eq!(head_slice(&y, 1), head_slice(&a, 0));

        let a = rand_maps(&mut rng, 2, 2);
        let w = rng.normal_tensor(&[2, 2], 1.0);
        let b = rng.normal_tensor(&[2], 1.0);
        let y = chh(&a, &w, Some(&b)).unwrap();
        for q in 0..2 {
            for k in 0..2 {
                for o in 0..2 {
                    let mut s = b.data()[o];
                    for i in 0..2 {
                        s += w.get(&[o, i]) * a.get(&[i, q, k]);
                    }
                    assert!((y.get(&[o, q, k]) - s).abs() < 1e-12);
                }
            }
        }
        assert!(chh(&a, &Tensor::eye(3), None).is_err());
    }

    #[test]
    fn hmhsa_real_maps_match_standalone_product() {
        let cfg = AttentionConfig::hallucinated(2, 2, true, 8, 4);
        let mut rng = Rng::seed(5);
        let mut w = HmhsaWeights::init(&cfg, &mut rng, true);
        w.ihh_kernels = rng.normal_tensor(&[2, 3, 3], 1.0);
        w.chh_weight = rng.normal_tensor(&[2, 2], 1.0);
        let x = rng.normal_tensor(&[5, 8], 1.0);
        let (out, maps) = hmhsa_forward(&x, &w, &cfg).unwrap();
        assert_eq!(out.shape(), &[5, 8]);
        assert_eq!(maps.heads(), 4);
        assert_eq!(
            maps.provenance,
            [
                HeadKind::Real,
                HeadKind::Real,
                HeadKind::Hallucinated,
                HeadKind::Hallucinated
            ]
        );
        let q = w.q_hat.forward(&x).unwrap();
        let k = w.k_hat.forward(&x).unwrap();
        for i in 0..2 {
            let a = ops::matmul(
                &q.narrow_last(2 * i, 2).unwrap(),
                &k.narrow_last(2 * i, 2).unwrap().transpose().unwrap(),
            )
            .unwrap()
            .scale(1.0 / 2f64.sqrt());
            let p = ops::softmax_lastdim(&a);
            assert!(maps.head(i).max_abs_diff(&p).unwrap() < 1e-12);
        }
        for r in 0..4 * 5 {
            let s: f64 = maps.maps.data()[r * 5..r * 5 + 5].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn copy_mode_duplicates_maps() {
        let cfg =
            AttentionConfig::hallucinated(2, 2, false, 8, 4).with_ops(&[HallucinationOp::Copy]);
        let mut rng = Rng::seed(6);
        let w = HmhsaWeights::init(&cfg, &mut rng, true);
        let x = rng.normal_tensor(&[4, 8], 1.0);
        let (_, cache) = attend(&x, &hmhsa_parts(&w, &cfg), &cfg).unwrap();
        let post = cache.maps();
        for i in 0..2 {
            assert_eq!(head_slice(post, i), head_slice(post, i + 2));
        }
    }

    #[test]
    fn config_errors() {
        let cfg = AttentionConfig::hallucinated(2, 2, false, 6, 3);
        assert!(cfg.validate().is_err());
        let cfg = AttentionConfig::vanilla(2, 2, false, 6, 4);
        assert!(cfg.validate().is_err());
        let cfg = AttentionConfig::hallucinated(2, 2, false, 8, 4).with_ops(&[]);
        assert!(cfg.validate().is_err());
        assert!("xyz".parse::<HallucinationOp>().is_err());
        assert_eq!(
            "IHH".parse::<HallucinationOp>().unwrap(),
            HallucinationOp::Ihh
        );
    }

    #[test]
    fn op_order_matters() {
        let a = AttentionConfig::hallucinated(2, 2, false, 8, 4);
        let b = a
            .clone()
            .with_ops(&[HallucinationOp::Chh, HallucinationOp::Ihh]);
        let mut rng = Rng::seed(7);
        let mut w = HmhsaWeights::init(&a, &mut rng, true);
        w.ihh_kernels = rng.normal_tensor(&[2, 3, 3], 1.0);
        w.ihh_bias = Some(rng.normal_tensor(&[2], 1.0));
        w.chh_weight = rng.normal_tensor(&[2, 2], 1.0);
        let x = rng.normal_tensor(&[4, 8], 1.0);
        let (ya, _) = hmhsa_forward(&x, &w, &a).unwrap();
        let (yb, _) = hmhsa_forward(&x, &w, &b).unwrap();
        assert!(ya.max_abs_diff(&yb).unwrap() > 1e-6);
    }
}
