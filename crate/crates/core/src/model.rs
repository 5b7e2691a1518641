//! Straight DeiT-style classifier assembled from either vanilla blocks or
//! hallucinated-attention + compact-FFN blocks.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::{
    Attention, AttentionCache, AttentionConfig, AttentionMapStack, HallucinationOp,
    DEFAULT_HALLUCINATION_OPS,
};
use crate::error::{Error, Result};
use crate::ffn::{
    self, parse_ratio, reparam_merge, CffnCache, CffnInferWeights, CffnTrainWeights, FactorTarget,
    FfnCache, FfnConfig, FfnWeights, InferCache, Rational,
};
use crate::ops::{self, BnMode, LnCache};
use crate::par::Exec;
use crate::params::{join, Grads, Linear, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockVariant {
    Vanilla,
    Ours,
}

fn default_true() -> bool {
    true
}

fn default_ops() -> Vec<HallucinationOp> {
    DEFAULT_HALLUCINATION_OPS.to_vec()
}

fn default_t() -> Rational {
    Rational::new(2, 3)
}

fn default_r() -> usize {
    2
}

fn ser_ratio<S: Serializer>(t: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&t.to_string())
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Rational, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    let r = match Raw::deserialize(d)? {
        Raw::Num(v) => ffn::ratio_from_f64(v),
        Raw::Str(s) => parse_ratio(&s),
    };
    r.map_err(serde::de::Error::custom)
}

/// Model hyperparameters, serialized with exactly these field names.
///
/// For `block_variant = "ours"` the head count `h` is the one of the
/// vanilla backbone; the hallucinated blocks use `2h` heads of half the
/// width, so the embedding width `C` is unchanged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub depth: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub h: usize,
    pub m: usize,
    #[serde(default = "default_true")]
    pub class_token: bool,
    pub block_variant: BlockVariant,
    #[serde(default = "default_ops")]
    pub hallucination_ops: Vec<HallucinationOp>,
    #[serde(
        default = "default_t",
        serialize_with = "ser_ratio",
        deserialize_with = "de_ratio"
    )]
    pub t: Rational,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default)]
    pub factor_target: FactorTarget,
    /// Biases on projections and on IHH/CHH.
    #[serde(default = "default_true")]
    pub bias: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn deit_tiny() -> Self {
        ModelConfig {
            img_size: 224,
            patch_size: 16,
            in_channels: 3,
            num_classes: 1000,
            depth: 12,
            c: 192,
            h: 3,
            m: 4,
            class_token: true,
            block_variant: BlockVariant::Vanilla,
            hallucination_ops: default_ops(),
            t: default_t(),
            r: default_r(),
            factor_target: FactorTarget::M2,
            bias: true,
            seed: 0,
        }
    }

    pub fn deit_small() -> Self {
        ModelConfig {
            c: 384,
            h: 6,
            ..Self::deit_tiny()
        }
    }

    /// 16×16 RGB images, 4×4 patches, two blocks of width 32.
    pub fn toy() -> Self {
        ModelConfig {
            img_size: 16,
            patch_size: 4,
            in_channels: 3,
            num_classes: 2,
            depth: 2,
            c: 32,
            h: 4,
            ..Self::deit_tiny()
        }
    }

    pub fn with_variant(mut self, v: BlockVariant) -> Self {
        self.block_variant = v;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn tokens(&self) -> usize {
        self.num_patches() + self.class_token as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Head count actually instantiated.
    pub fn effective_heads(&self) -> usize {
        match self.block_variant {
            BlockVariant::Vanilla => self.h,
            BlockVariant::Ours => 2 * self.h,
        }
    }

    pub fn attention_config(&self) -> AttentionConfig {
        let g = self.grid();
        match self.block_variant {
            BlockVariant::Vanilla => {
                AttentionConfig::vanilla(g, g, self.class_token, self.c, self.h)
            }
            BlockVariant::Ours => {
                AttentionConfig::hallucinated(g, g, self.class_token, self.c, 2 * self.h)
                    .with_ops(&self.hallucination_ops)
            }
        }
    }

    pub fn ffn_config(&self) -> FfnConfig {
        FfnConfig {
            c: self.c,
            m: self.m,
            t: self.t,
            r: self.r,
            factor_target: self.factor_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("img_size", self.img_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("num_classes", self.num_classes),
            ("depth", self.depth),
            ("C", self.c),
            ("h", self.h),
            ("m", self.m),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "img_size {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        if self.c < 2 {
            return Err(Error::Config("C must be at least 2".into()));
        }
        self.attention_config().validate()?;
        if self.block_variant == BlockVariant::Ours {
            self.ffn_config().validate()?;
        }
        Ok(())
    }

    /// Equality ignoring the seed.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        ModelConfig {
            seed: 0,
            ..self.clone()
        } == ModelConfig {
            seed: 0,
            ..other.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(c: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[c]),
            beta: Tensor::zeros(&[c]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LnCache)> {
        ops::layernorm_forward(x, &self.gamma, &self.beta, ops::LN_EPS)
    }

    pub fn backward(
        &self,
        cache: &LnCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (gx, gg, gb) = ops::layernorm_vjp(cache, &self.gamma, g)?;
        grads.add(join(prefix, "gamma"), gg)?;
        grads.add(join(prefix, "beta"), gb)?;
        Ok(gx)
    }
}

impl Params for LayerNorm {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnLayer {
    Vanilla(FfnWeights),
    CompactTrain(CffnTrainWeights),
    CompactInfer(CffnInferWeights),
}

#[derive(Clone, Debug)]
pub enum FfnLayerCache {
    Vanilla(FfnCache),
    CompactTrain(CffnCache),
    CompactInfer(InferCache),
}

impl FfnLayer {
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<(Tensor, FfnLayerCache)> {
        Ok(match self {
            FfnLayer::Vanilla(w) => {
                let (y, c) = ffn::ffn_forward_cached(x, w)?;
                (y, FfnLayerCache::Vanilla(c))
            }
            FfnLayer::CompactTrain(w) => {
                let (y, c) = w.forward_cached(x, mode)?;
                (y, FfnLayerCache::CompactTrain(c))
            }
            FfnLayer::CompactInfer(w) => {
                let (y, c) = w.forward_cached(x)?;
                (y, FfnLayerCache::CompactInfer(c))
            }
        })
    }

    pub fn backward(
        &self,
        cache: &FfnLayerCache,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        match (self, cache) {
            (FfnLayer::Vanilla(w), FfnLayerCache::Vanilla(c)) => {
                ffn::ffn_backward(w, c, g, prefix, grads)
            }
            (FfnLayer::CompactTrain(w), FfnLayerCache::CompactTrain(c)) => {
                w.backward(c, g, prefix, grads)
            }
            (FfnLayer::CompactInfer(w), FfnLayerCache::CompactInfer(c)) => {
                w.backward(c, g, prefix, grads)
            }
            _ => Err(Error::State("ffn cache does not match layer kind".into())),
        }
    }

    pub fn macs(&self, rows: usize) -> u64 {
        match self {
            FfnLayer::Vanilla(w) => w.macs(rows),
            FfnLayer::CompactTrain(w) => w.macs(rows),
            FfnLayer::CompactInfer(w) => w.macs(rows),
        }
    }

    fn params(&self) -> &dyn Params {
        match self {
            FfnLayer::Vanilla(w) => w,
            FfnLayer::CompactTrain(w) => w,
            FfnLayer::CompactInfer(w) => w,
        }
    }

    fn params_mut(&mut self) -> &mut dyn Params {
        match self {
            FfnLayer::Vanilla(w) => w,
            FfnLayer::CompactTrain(w) => w,
            FfnLayer::CompactInfer(w) => w,
        }
    }
}

impl Params for FfnLayer {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.params().visit_params(prefix, f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.params_mut().visit_params_mut(prefix, f);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Option<&'a Tensor>)) {
        self.params().visit_buffers(prefix, f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Option<Tensor>)) {
        self.params_mut().visit_buffers_mut(prefix, f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FfnLayer,
}

impl Params for Block {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.norm1.visit_params(&join(prefix, "norm1"), f);
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.norm2.visit_params(&join(prefix, "norm2"), f);
        self.ffn.visit_params(&join(prefix, "ffn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.norm1.visit_params_mut(&join(prefix, "norm1"), f);
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), f);
        self.ffn.visit_params_mut(&join(prefix, "ffn"), f);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Option<&'a Tensor>)) {
        self.ffn.visit_buffers(&join(prefix, "ffn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Option<Tensor>)) {
        self.ffn.visit_buffers_mut(&join(prefix, "ffn"), f);
    }
}

/// Whether the compact FFNs hold train-form branches or merged factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Form {
    Train,
    Inference,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub form: Form,
    /// Patch embedding as a linear map over flattened `(channel, dy, dx)`
    /// patch vectors, equivalent to a stride-`p` convolution.
    pub patch_embed: Linear,
    pub pos_embed: Tensor,
    pub cls_token: Option<Tensor>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
}

#[derive(Clone, Copy)]
enum Init<'a> {
    Random(&'a std::cell::RefCell<Rng>),
    Zeros,
}

/// Builds a model with deterministic initialization from `cfg.seed`.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    let rng = std::cell::RefCell::new(Rng::seed(cfg.seed));
    Model::build(cfg, Init::Random(&rng))
}

impl Model {
    /// Same structure as [`build_model`] with every weight zero (batchnorms
    /// and layernorms at identity). Cheap even at ImageNet scale.
    pub fn zeros(cfg: &ModelConfig) -> Result<Model> {
        Model::build(cfg, Init::Zeros)
    }

    fn build(cfg: &ModelConfig, init: Init<'_>) -> Result<Model> {
        cfg.validate()?;
        let c = cfg.c;
        let bias = cfg.bias;
        let attn_cfg = cfg.attention_config();
        let ffn_cfg = cfg.ffn_config();
        let random = |f: &mut dyn FnMut(&mut Rng) -> Tensor, zero: &[usize]| match init {
            Init::Random(r) => f(&mut r.borrow_mut()),
            Init::Zeros => Tensor::zeros(zero),
        };
        let linear = |i: usize, o: usize, b: bool| match init {
            Init::Random(r) => Linear::init(&mut r.borrow_mut(), i, o, b),
            Init::Zeros => Linear::zeros(i, o, b),
        };
        let patch_embed = linear(cfg.patch_dim(), c, bias);
        let cls_token = cfg
            .class_token
            .then(|| random(&mut |r| r.trunc_normal_tensor(&[c], 0.02), &[c]));
        let pos_embed = random(
            &mut |r| r.trunc_normal_tensor(&[cfg.tokens(), c], 0.02),
            &[cfg.tokens(), c],
        );
        let mut blocks = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let attn = match init {
                Init::Random(r) => Attention::init(attn_cfg.clone(), &mut r.borrow_mut(), bias)?,
                Init::Zeros => Attention::zeros(attn_cfg.clone(), bias)?,
            };
            let ffn = match (cfg.block_variant, init) {
                (BlockVariant::Vanilla, Init::Random(r)) => {
                    FfnLayer::Vanilla(FfnWeights::init(c, cfg.m, &mut r.borrow_mut(), bias))
                }
                (BlockVariant::Vanilla, Init::Zeros) => {
                    FfnLayer::Vanilla(FfnWeights::zeros(c, cfg.m, bias))
                }
                (BlockVariant::Ours, Init::Random(r)) => FfnLayer::CompactTrain(
                    CffnTrainWeights::init(&ffn_cfg, &mut r.borrow_mut(), bias)?,
                ),
                (BlockVariant::Ours, Init::Zeros) => {
                    FfnLayer::CompactTrain(CffnTrainWeights::zeros(&ffn_cfg, bias)?)
                }
            };
            blocks.push(Block {
                norm1: LayerNorm::new(c),
                attn,
                norm2: LayerNorm::new(c),
                ffn,
            });
        }
        Ok(Model {
            cfg: cfg.clone(),
            form: Form::Train,
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            norm: LayerNorm::new(c),
            head: Linear::zeros(c, cfg.num_classes, true),
        })
    }

    /// Folds every compact FFN into its inference form.
    pub fn merged(&self) -> Result<Model> {
        let mut out = self.clone();
        for b in out.blocks.iter_mut() {
            if let FfnLayer::CompactTrain(w) = &b.ffn {
                b.ffn = FfnLayer::CompactInfer(reparam_merge(w)?);
            }
        }
        out.form = Form::Inference;
        Ok(out)
    }

    pub fn has_train_branches(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.ffn, FfnLayer::CompactTrain(_)))
    }
}

impl Params for Model {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.patch_embed
            .visit_params(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &self.pos_embed);
        if let Some(t) = &self.cls_token {
            f(join(prefix, "cls_token"), t);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params(&join(prefix, "norm"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed
            .visit_params_mut(&join(prefix, "patch_embed"), f);
        f(join(prefix, "pos_embed"), &mut self.pos_embed);
        if let Some(t) = &mut self.cls_token {
            f(join(prefix, "cls_token"), t);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, Option<&'a Tensor>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_buffers(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Option<Tensor>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_buffers_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: BnMode,
    pub capture_maps: bool,
    /// Policy for sharding attention across the images of a batch.
    pub exec: Exec,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            mode: BnMode::Eval,
            capture_maps: false,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LnCache,
    attn: Vec<AttentionCache>,
    ln2: LnCache,
    ffn: FfnLayerCache,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    batch: usize,
    exec: Exec,
    patches: Tensor,
    blocks: Vec<BlockCache>,
    ln: LnCache,
    feats: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// `maps[image][block]` when capture was requested.
    pub maps: Option<Vec<Vec<AttentionMapStack>>>,
    pub cache: ModelCache,
}

/// Post-softmax attention maps of a captured forward, `[image][block]`.
pub fn extract_attention_maps(out: &ForwardOutput) -> Result<Vec<Vec<AttentionMapStack>>> {
    out.maps.clone().ok_or_else(|| {
        Error::State("attention-map capture was not enabled for this forward".into())
    })
}

/// `[B, Cin, S, S] -> [B * Np, Cin * p * p]` with patches in row-major grid
/// order and `(channel, dy, dx)` inside a patch.
pub fn extract_patches(images: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.img_size;
    if images.rank() != 4 || images.shape()[1..] != [cfg.in_channels, s, s] {
        return Err(Error::dim(
            "forward",
            format!(
                "images {:?} do not match [B, {}, {s}, {s}]",
                images.shape(),
                cfg.in_channels
            ),
        ));
    }
    let (b, p, g, cin) = (images.dim(0), cfg.patch_size, cfg.grid(), cfg.in_channels);
    let d = images.data();
    let pd = cfg.patch_dim();
    let mut out = vec![0.0; b * g * g * pd];
    for n in 0..b {
        for gi in 0..g {
            for gj in 0..g {
                let row = (n * g + gi) * g + gj;
                for c in 0..cin {
                    for dy in 0..p {
                        let src = ((n * cin + c) * s + gi * p + dy) * s + gj * p;
                        let dst = row * pd + (c * p + dy) * p;
                        out[dst..dst + p].copy_from_slice(&d[src..src + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b * g * g, pd], out)
}

impl Model {
    pub fn forward(&self, images: &Tensor, opts: ForwardOptions) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let (c, n, np) = (cfg.c, cfg.tokens(), cfg.num_patches());
        let patches = extract_patches(images, cfg)?;
        let b = images.dim(0);
        let emb = self.patch_embed.forward(&patches)?;

        let off = cfg.class_token as usize;
        let mut x = vec![0.0; b * n * c];
        for img in 0..b {
            for tok in 0..n {
                let dst = &mut x[(img * n + tok) * c..(img * n + tok + 1) * c];
                let src = if tok < off {
                    self.cls_token.as_ref().expect("class token").data()
                } else {
                    emb.row(img * np + tok - off)
                };
                for ((d, s), p) in dst.iter_mut().zip(src).zip(self.pos_embed.row(tok)) {
                    *d = s + p;
                }
            }
        }
        let mut x = Tensor::new(vec![b * n, c], x)?;

        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut maps: Vec<Vec<AttentionMapStack>> = vec![Vec::new(); b];
        for (bi, blk) in self.blocks.iter().enumerate() {
            let (h1, ln1) = blk.norm1.forward(&x)?;
            let per_image: Vec<(Tensor, AttentionCache)> = opts
                .exec
                .map(b, |img| blk.attn.forward(&h1.narrow_first(img * n, n)?))
                .into_iter()
                .collect::<Result<_>>()?;
            let outs: Vec<&Tensor> = per_image.iter().map(|(o, _)| o).collect();
            x.add_assign(&Tensor::concat_first(&outs)?)?;
            let attn: Vec<AttentionCache> = per_image.into_iter().map(|(_, c)| c).collect();
            if opts.capture_maps {
                for (img, ac) in attn.iter().enumerate() {
                    maps[img].push(blk.attn.map_stack(ac, bi));
                }
            }
            let (h2, ln2) = blk.norm2.forward(&x)?;
            let (f, ffn) = blk.ffn.forward(&h2, opts.mode)?;
            x.add_assign(&f)?;
            caches.push(BlockCache {
                ln1,
                attn,
                ln2,
                ffn,
            });
        }

        let (normed, ln) = self.norm.forward(&x)?;
        let feats = pool(&normed, b, n, cfg.class_token)?;
        let logits = self.head.forward(&feats)?;
        Ok(ForwardOutput {
            logits,
            maps: opts.capture_maps.then_some(maps),
            cache: ModelCache {
                batch: b,
                exec: opts.exec,
                patches,
                blocks: caches,
                ln,
                feats,
            },
        })
    }

    /// Gradients of every parameter given `d loss / d logits`.
    pub fn backward(&self, cache: &ModelCache, g_logits: &Tensor) -> Result<Grads> {
        let cfg = &self.cfg;
        let (c, n, np, b) = (cfg.c, cfg.tokens(), cfg.num_patches(), cache.batch);
        let mut grads = Grads::new();
        let g_feats = self
            .head
            .backward(&cache.feats, g_logits, "head", &mut grads)?;
        let g_normed = unpool(&g_feats, b, n, cfg.class_token)?;
        let mut g = self
            .norm
            .backward(&cache.ln, &g_normed, "norm", &mut grads)?;

        for (bi, (blk, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let prefix = format!("blocks.{bi}");
            let gf = blk
                .ffn
                .backward(&bc.ffn, &g, &join(&prefix, "ffn"), &mut grads)?;
            let gh2 = blk
                .norm2
                .backward(&bc.ln2, &gf, &join(&prefix, "norm2"), &mut grads)?;
            g.add_assign(&gh2)?;

            let attn_prefix = join(&prefix, "attn");
            let per_image: Vec<(Tensor, Grads)> = cache
                .exec
                .map(b, |img| -> Result<(Tensor, Grads)> {
                    let mut local = Grads::new();
                    let gi = blk.attn.backward(
                        &bc.attn[img],
                        &g.narrow_first(img * n, n)?,
                        &attn_prefix,
                        &mut local,
                    )?;
                    Ok((gi, local))
                })
                .into_iter()
                .collect::<Result<_>>()?;
            let mut gh1 = Vec::with_capacity(b);
            for (gi, local) in per_image {
                grads.merge(local)?;
                gh1.push(gi);
            }
            let gh1 = Tensor::concat_first(&gh1.iter().collect::<Vec<_>>())?;
            let gx = blk
                .norm1
                .backward(&bc.ln1, &gh1, &join(&prefix, "norm1"), &mut grads)?;
            g.add_assign(&gx)?;
        }

        let off = cfg.class_token as usize;
        let mut g_pos = Tensor::zeros(&[n, c]);
        let mut g_cls = Tensor::zeros(&[c]);
        let mut g_emb = vec![0.0; b * np * c];
        for img in 0..b {
            for tok in 0..n {
                let row = g.row(img * n + tok);
                for (p, v) in g_pos.data_mut()[tok * c..(tok + 1) * c].iter_mut().zip(row) {
                    *p += v;
                }
                if tok < off {
                    for (p, v) in g_cls.data_mut().iter_mut().zip(row) {
                        *p += v;
                    }
                } else {
                    let r = img * np + tok - off;
                    g_emb[r * c..(r + 1) * c].copy_from_slice(row);
                }
            }
        }
        grads.add("pos_embed".into(), g_pos)?;
        if self.cls_token.is_some() {
            grads.add("cls_token".into(), g_cls)?;
        }
        let g_emb = Tensor::new(vec![b * np, c], g_emb)?;
        self.patch_embed
            .backward(&cache.patches, &g_emb, "patch_embed", &mut grads)?;
        Ok(grads)
    }

    /// Folds the train-mode batch statistics of a forward into the running
    /// statistics of every compact FFN.
    pub fn update_running_stats(&mut self, cache: &ModelCache) {
        for (blk, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            if let (FfnLayer::CompactTrain(w), FfnLayerCache::CompactTrain(c)) =
                (&mut blk.ffn, &bc.ffn)
            {
                w.update_running_stats(c);
            }
        }
    }
}

fn pool(normed: &Tensor, b: usize, n: usize, class_token: bool) -> Result<Tensor> {
    let c = normed.last_dim();
    let mut out = vec![0.0; b * c];
    for img in 0..b {
        let dst = &mut out[img * c..(img + 1) * c];
        if class_token {
            dst.copy_from_slice(normed.row(img * n));
        } else {
            for tok in 0..n {
                for (d, v) in dst.iter_mut().zip(normed.row(img * n + tok)) {
                    *d += v / n as f64;
                }
            }
        }
    }
    Tensor::new(vec![b, c], out)
}

fn unpool(g: &Tensor, b: usize, n: usize, class_token: bool) -> Result<Tensor> {
    let c = g.last_dim();
    let mut out = vec![0.0; b * n * c];
    for img in 0..b {
        if class_token {
            out[img * n * c..img * n * c + c].copy_from_slice(g.row(img));
        } else {
            for tok in 0..n {
                for (d, v) in out[(img * n + tok) * c..(img * n + tok + 1) * c]
                    .iter_mut()
                    .zip(g.row(img))
                {
                    *d = v / n as f64;
                }
            }
        }
    }
    Tensor::new(vec![b * n, c], out)
}

/// Eval-mode logits `[B, num_classes]`.
pub fn forward_classify(model: &Model, images: &Tensor) -> Result<Tensor> {
    Ok(model.forward(images, ForwardOptions::default())?.logits)
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    let p = ops::softmax_lastdim(logits);
    let mut loss = 0.0;
    let mut g = p.data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::dim(
                "cross_entropy",
                format!("label {y} outside {k} classes"),
            ));
        }
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        g[i * k + y] -= 1.0;
    }
    let g = Tensor::new(vec![b, k], g)?.scale(1.0 / b as f64);
    Ok((loss / b as f64, g))
}

pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: BlockVariant) -> ModelConfig {
        ModelConfig::toy().with_variant(variant)
    }

    #[test]
    fn deit_small_shapes() {
        let cfg = ModelConfig::deit_small();
        assert_eq!(cfg.effective_heads(), 6);
        assert_eq!(cfg.tokens(), 197);
        let ours = cfg.clone().with_variant(BlockVariant::Ours);
        assert_eq!(ours.effective_heads(), 12);
        assert_eq!(ours.attention_config().head_dim(), 32);
        let m = Model::zeros(&ours).unwrap();
        assert_eq!(m.blocks.len(), 12);
    }

    #[test]
    fn toy_has_17_tokens() {
        let cfg = toy(BlockVariant::Vanilla);
        assert_eq!(cfg.tokens(), 17);
        let m = build_model(&cfg).unwrap();
        assert_eq!(m.blocks.len(), 2);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = toy(BlockVariant::Ours);
        assert_eq!(build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        let other = ModelConfig {
            seed: 9,
            ..cfg.clone()
        };
        assert_ne!(build_model(&cfg).unwrap(), build_model(&other).unwrap());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::toy();
        cfg.patch_size = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.c = 30;
        assert!(cfg.validate().is_err());
        let bad = r#"{"img_size":16}"#;
        assert!(ModelConfig::from_json(bad).is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = toy(BlockVariant::Ours);
        let text = cfg.to_json();
        assert!(text.contains("\"C\": 32"));
        assert!(text.contains("\"t\": \"2/3\""));
        assert_eq!(ModelConfig::from_json(&text).unwrap(), cfg);
        let with_float = text.replace("\"2/3\"", "0.5");
        assert_eq!(
            ModelConfig::from_json(&with_float).unwrap().t,
            Rational::new(1, 2)
        );
    }

    #[test]
    fn logits_shape_and_zero_head() {
        let cfg = toy(BlockVariant::Ours);
        let m = build_model(&cfg).unwrap();
        let x = Rng::seed(1).normal_tensor(&[2, 3, 16, 16], 1.0);
        let logits = forward_classify(&m, &x).unwrap();
        assert_eq!(logits.shape(), &[2, 2]);
        assert_eq!(logits, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn bad_image_shape() {
        let m = build_model(&toy(BlockVariant::Vanilla)).unwrap();
        assert!(forward_classify(&m, &Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn map_capture() {
        let m = build_model(&toy(BlockVariant::Vanilla)).unwrap();
        let x = Rng::seed(1).normal_tensor(&[1, 3, 16, 16], 1.0);
        let out = m.forward(&x, ForwardOptions::default()).unwrap();
        assert!(matches!(extract_attention_maps(&out), Err(Error::State(_))));
        let out = m
            .forward(
                &x,
                ForwardOptions {
                    capture_maps: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let maps = extract_attention_maps(&out).unwrap();
        assert_eq!(maps[0].len(), 2);
        assert_eq!(maps[0][1].maps.shape(), &[4, 17, 17]);
        assert_eq!(maps[0][1].block_index, 1);
    }

    #[test]
    fn patches_layout() {
        let cfg = ModelConfig {
            img_size: 4,
            patch_size: 2,
            in_channels: 1,
            ..ModelConfig::toy()
        };
        let img = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = extract_patches(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(p.row(0), &[0., 1., 4., 5.]);
        assert_eq!(p.row(3), &[10., 11., 14., 15.]);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, -1.0]).unwrap();
        let (loss, g) = cross_entropy(&logits, &[0, 1]).unwrap();
        let l2 = 2f64.ln();
        let l_second = 2.0 + (1.0 + (-2f64).exp()).ln();
        assert!((loss - (l2 + l_second) / 2.0).abs() < 1e-12);
        assert!((g.row(0)[0] + 0.25).abs() < 1e-12);
    }
}
