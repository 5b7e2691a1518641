//! Parameter and FLOP accounting, analytic and traced from built weights.
//!
//! Convention throughout: one multiply-accumulate counts as one FLOP.
//! Normalizations, softmax, activations, residual adds and bias adds are
//! not counted.

use num_traits::{ToPrimitive, Zero};
use serde::Serialize;

use crate::attention::{AttentionMode, HallucinationOp};
use crate::error::{Error, Result};
use crate::ffn::Rational;
use crate::model::{BlockVariant, FfnLayer, Form, Model, ModelConfig};
use crate::params::Params;

pub const CONVENTION: &str = "1 MAC = 1 FLOP";

/// `4 N C^2 + 2 N^2 C`.
pub fn mhsa_flops(n: u64, c: u64) -> u64 {
    4 * n * c * c + 2 * n * n * c
}

/// `2 m N C^2`.
pub fn ffn_flops(n: u64, c: u64, m: u64) -> u64 {
    2 * m * n * c * c
}

/// `3 N C^2 + 3 N^2 C / 2 + N^2 h^2 / 4 + 9 N^2 h / 2`, with `h` the total
/// head count (real plus hallucinated).
pub fn hmhsa_flops(n: u64, c: u64, h: u64) -> Result<u64> {
    if !h.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "hallucinated attention needs an even head count, got {h}"
        )));
    }
    if !(n * n * c).is_multiple_of(2) {
        return Err(Error::Config(format!(
            "3 N^2 C / 2 is not integral for N={n}, C={c}"
        )));
    }
    Ok(3 * n * c * c + 3 * n * n * c / 2 + n * n * h * h / 4 + 9 * n * n * h / 2)
}

/// `(1 + t) m N C^2` exactly, and the count with the rounded width `k`:
/// `N m C^2 + N k C (m + 1)`.
pub fn cffn_flops(n: u64, c: u64, m: u64, t: Rational) -> Result<(Rational, u64)> {
    let k = crate::ffn::compact_dim(c as usize, m as usize, t)? as u64;
    let analytic = (Rational::from_integer(1) + t) * Rational::from_integer((m * n * c * c) as i64);
    Ok((analytic, n * m * c * c + n * k * c * (m + 1)))
}

/// `MHSA(N, C) - hMHSA(N, C, h) = N C^2 + (2C - h^2 - 18h) N^2 / 4`.
pub fn delta_flops(n: u64, c: u64, h: u64) -> i128 {
    let (n, c, h) = (n as i128, c as i128, h as i128);
    n * c * c + (2 * c - h * h - 18 * h) * n * n / 4
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostGroup {
    MhsaLike,
    FfnLike,
    Other,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostEntry {
    pub name: String,
    pub group: CostGroup,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
    pub mhsa_like_flops: u64,
    pub ffn_like_flops: u64,
    pub other_flops: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub convention: String,
    pub block_variant: BlockVariant,
    pub form: Form,
    pub tokens: usize,
    pub entries: Vec<CostEntry>,
    pub totals: CostTotals,
}

fn count<P: Params + ?Sized>(p: &P) -> u64 {
    p.param_count() as u64
}

fn bias_count<P: Params + ?Sized>(p: &P) -> u64 {
    p.named_params()
        .iter()
        .filter(|(n, _)| n.ends_with("bias"))
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

fn ffn_params(f: &FfnLayer) -> (u64, u64) {
    match f {
        FfnLayer::Vanilla(w) => (count(w), bias_count(w)),
        FfnLayer::CompactTrain(w) => (count(w), bias_count(w)),
        FfnLayer::CompactInfer(w) => (count(w), bias_count(w)),
    }
}

/// Counts the deployed model: compact FFNs are merged first, so the
/// re-parameterization branches never appear in the totals.
pub fn count_model(cfg: &ModelConfig) -> Result<CostReport> {
    let model = Model::zeros(cfg)?.merged()?;
    Ok(trace(&model))
}

/// Per-module counts read off the weight shapes of `model`.
pub fn trace(model: &Model) -> CostReport {
    let cfg = &model.cfg;
    let n = cfg.tokens();
    let mut entries = Vec::new();
    let mut push = |name: String, group, params, flops| {
        entries.push(CostEntry {
            name,
            group,
            params,
            flops,
        })
    };
    push(
        "patch_embed".into(),
        CostGroup::Other,
        count(&model.patch_embed),
        model.patch_embed.macs(cfg.num_patches()),
    );
    push(
        "pos_embed".into(),
        CostGroup::Other,
        model.pos_embed.numel() as u64,
        0,
    );
    if let Some(t) = &model.cls_token {
        push("cls_token".into(), CostGroup::Other, t.numel() as u64, 0);
    }
    for (i, b) in model.blocks.iter().enumerate() {
        push(
            format!("blocks.{i}.norms"),
            CostGroup::Other,
            count(&b.norm1) + count(&b.norm2),
            0,
        );
        push(
            format!("blocks.{i}.attn"),
            CostGroup::MhsaLike,
            count(&b.attn),
            b.attn.macs(),
        );
        push(
            format!("blocks.{i}.ffn"),
            CostGroup::FfnLike,
            ffn_params(&b.ffn).0,
            b.ffn.macs(n),
        );
    }
    push("norm".into(), CostGroup::Other, count(&model.norm), 0);
    push(
        "head".into(),
        CostGroup::Other,
        count(&model.head),
        model.head.macs(1),
    );

    let mut totals = CostTotals::default();
    for e in &entries {
        totals.params += e.params;
        totals.flops += e.flops;
        match e.group {
            CostGroup::MhsaLike => totals.mhsa_like_flops += e.flops,
            CostGroup::FfnLike => totals.ffn_like_flops += e.flops,
            CostGroup::Other => totals.other_flops += e.flops,
        }
    }
    CostReport {
        convention: CONVENTION.into(),
        block_variant: cfg.block_variant,
        form: model.form,
        tokens: n,
        entries,
        totals,
    }
}

impl CostReport {
    pub fn params_m(&self) -> f64 {
        self.totals.params as f64 / 1e6
    }

    pub fn flops_g(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render_table(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|e| e.name.len())
            .max()
            .unwrap_or(4)
            .max(10);
        let mut s = format!("# {} ({} tokens)\n", self.convention, self.tokens);
        s += &format!(
            "{:<w$}  {:<9}  {:>12}  {:>15}\n",
            "module", "group", "params", "flops"
        );
        for e in &self.entries {
            let g = match e.group {
                CostGroup::MhsaLike => "mhsa",
                CostGroup::FfnLike => "ffn",
                CostGroup::Other => "other",
            };
            s += &format!(
                "{:<w$}  {:<9}  {:>12}  {:>15}\n",
                e.name, g, e.params, e.flops
            );
        }
        let t = &self.totals;
        s += &format!(
            "{:<w$}  {:<9}  {:>12}  {:>15}\n",
            "total", "", t.params, t.flops
        );
        s += &format!(
            "flops by group: mhsa {}  ffn {}  other {}\n",
            t.mhsa_like_flops, t.ffn_like_flops, t.other_flops
        );
        s += &format!(
            "Params {:.2} M, FLOPs {:.2} G\n",
            self.params_m(),
            self.flops_g()
        );
        s
    }
}

/// Relative change in percent.
pub fn percent_delta(base: u64, new: u64) -> f64 {
    (new as f64 - base as f64) / base as f64 * 100.0
}

/// `-18.75` as `−18.8%`, with a typographic minus.
pub fn signed_pct(v: f64) -> String {
    let s = format!("{:.1}%", v.abs());
    if v < 0.0 && s != "0.0%" {
        format!("\u{2212}{s}")
    } else {
        format!("+{s}")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub baseline: CostReport,
    pub ours: CostReport,
    pub params_delta_pct: f64,
    pub flops_delta_pct: f64,
}

pub fn compare(cfg: &ModelConfig) -> Result<Comparison> {
    let baseline = count_model(&cfg.clone().with_variant(BlockVariant::Vanilla))?;
    let ours = count_model(&cfg.clone().with_variant(BlockVariant::Ours))?;
    Ok(Comparison {
        params_delta_pct: percent_delta(baseline.totals.params, ours.totals.params),
        flops_delta_pct: percent_delta(baseline.totals.flops, ours.totals.flops),
        baseline,
        ours,
    })
}

impl Comparison {
    pub fn render_table(&self) -> String {
        let row = |name: &str, r: &CostReport, d: Option<(f64, f64)>| {
            let (p, f) = match d {
                Some((dp, df)) => (
                    format!("{:.2} ({})", r.params_m(), signed_pct(dp)),
                    format!("{:.2} ({})", r.flops_g(), signed_pct(df)),
                ),
                None => (
                    format!("{:.2}", r.params_m()),
                    format!("{:.2}", r.flops_g()),
                ),
            };
            format!("{name:<10}  {p:>18}  {f:>18}\n")
        };
        let mut s = format!("# {}\n", CONVENTION);
        s += &format!(
            "{:<10}  {:>18}  {:>18}\n",
            "model", "Params (M)", "FLOPs (G)"
        );
        s += &row("baseline", &self.baseline, None);
        s += &row(
            "ours",
            &self.ours,
            Some((self.params_delta_pct, self.flops_delta_pct)),
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustmentKind {
    /// Bias vectors, which the closed forms leave out.
    Bias,
    /// Rounding the compact width to an integer.
    KRounding,
    /// The class-token key column has no grid position and skips IHH.
    ClassTokenColumn,
}

#[derive(Clone, Debug, Serialize)]
pub struct Adjustment {
    pub kind: AdjustmentKind,
    #[serde(serialize_with = "ser_ratio")]
    pub params: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub flops: Rational,
}

fn ser_ratio<S: serde::Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&r.to_string())
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleReconciliation {
    pub block: usize,
    pub module: &'static str,
    pub traced_params: u64,
    pub traced_flops: u64,
    #[serde(serialize_with = "ser_ratio")]
    pub analytic_params: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub analytic_flops: Rational,
    pub adjustments: Vec<Adjustment>,
    #[serde(serialize_with = "ser_ratio")]
    pub residual_params: Rational,
    #[serde(serialize_with = "ser_ratio")]
    pub residual_flops: Rational,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReconcileReport {
    pub modules: Vec<ModuleReconciliation>,
}

fn int(v: u64) -> Rational {
    Rational::from_integer(v as i64)
}

/// Matches traced per-block counts against the closed forms, itemizing
/// every known difference. Fails when anything is left unexplained.
pub fn reconcile(cfg: &ModelConfig) -> Result<ReconcileReport> {
    let model = Model::zeros(cfg)?.merged()?;
    let (n, c, m) = (cfg.tokens() as u64, cfg.c as u64, cfg.m as u64);
    let h = cfg.effective_heads() as u64;
    let ihh_count = cfg
        .hallucination_ops
        .iter()
        .filter(|o| **o == HallucinationOp::Ihh)
        .count();
    let chh_count = cfg
        .hallucination_ops
        .iter()
        .filter(|o| **o == HallucinationOp::Chh)
        .count();
    let hallucinated = cfg.attention_config().mode == AttentionMode::Hallucinated;
    if hallucinated && (ihh_count != 1 || chh_count != 1 || cfg.hallucination_ops.len() != 2) {
        return Err(Error::Config(format!(
            "closed form assumes one IHH and one CHH, got {:?}",
            cfg.hallucination_ops
        )));
    }

    let mut modules = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let attn_params = count(&b.attn);
        let attn_flops = b.attn.macs();
        let (ap, af) = if hallucinated {
            let p = Rational::new((3 * c * c) as i64, 1)
                + Rational::new((h * h) as i64, 4)
                + Rational::new((9 * h) as i64, 2);
            (p, int(hmhsa_flops(n, c, h)?))
        } else {
            (int(4 * c * c), int(mhsa_flops(n, c)))
        };
        let mut adj = vec![Adjustment {
            kind: AdjustmentKind::Bias,
            params: int(bias_count(&b.attn)),
            flops: Rational::zero(),
        }];
        if hallucinated && cfg.class_token {
            adj.push(Adjustment {
                kind: AdjustmentKind::ClassTokenColumn,
                params: Rational::zero(),
                flops: -int(9 * n * h / 2),
            });
        }
        modules.push(finish(i, "attention", attn_params, attn_flops, ap, af, adj));

        let (fp, fb) = ffn_params(&b.ffn);
        let ff = b.ffn.macs(n as usize);
        let mut adj = vec![Adjustment {
            kind: AdjustmentKind::Bias,
            params: int(fb),
            flops: Rational::zero(),
        }];
        let (ap, af) = match &b.ffn {
            FfnLayer::Vanilla(_) => (int(2 * m * c * c), int(ffn_flops(n, c, m))),
            FfnLayer::CompactInfer(w) => {
                let (analytic, _) = cffn_flops(n, c, m, cfg.t)?;
                let k_star = cfg.t * Rational::new((m * c) as i64, (m + 1) as i64);
                let dk = int(w.k() as u64) - k_star;
                let per_token = dk * int((m + 1) * c);
                adj.push(Adjustment {
                    kind: AdjustmentKind::KRounding,
                    params: per_token,
                    flops: per_token * int(n),
                });
                (analytic / int(n), analytic)
            }
            FfnLayer::CompactTrain(_) => {
                return Err(Error::State("reconcile expects merged compact FFNs".into()))
            }
        };
        modules.push(finish(i, "ffn", fp, ff, ap, af, adj));
    }
    for r in &modules {
        if !r.residual_params.is_zero() || !r.residual_flops.is_zero() {
            return Err(Error::Reconcile {
                block: format!("blocks.{}", r.block),
                detail: format!(
                    "{}: unexplained params {} flops {}",
                    r.module, r.residual_params, r.residual_flops
                ),
            });
        }
    }
    Ok(ReconcileReport { modules })
}

fn finish(
    block: usize,
    module: &'static str,
    tp: u64,
    tf: u64,
    ap: Rational,
    af: Rational,
    adjustments: Vec<Adjustment>,
) -> ModuleReconciliation {
    let sp: Rational = adjustments.iter().map(|a| a.params).sum();
    let sf: Rational = adjustments.iter().map(|a| a.flops).sum();
    ModuleReconciliation {
        block,
        module,
        traced_params: tp,
        traced_flops: tf,
        residual_params: int(tp) - ap - sp,
        residual_flops: int(tf) - af - sf,
        analytic_params: ap,
        analytic_flops: af,
        adjustments,
    }
}

impl ReconcileReport {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<5} {:<9} {:>12} {:>14} {:>16} {:>12} {:>12}\n",
            "block", "module", "traced_p", "traced_f", "analytic_f", "adjust_f", "residual"
        );
        for r in &self.modules {
            let adj: Rational = r.adjustments.iter().map(|a| a.flops).sum();
            s += &format!(
                "{:<5} {:<9} {:>12} {:>14} {:>16.1} {:>12.1} {:>12}\n",
                r.block,
                r.module,
                r.traced_params,
                r.traced_flops,
                r.analytic_flops.to_f64().unwrap_or(f64::NAN),
                adj.to_f64().unwrap_or(f64::NAN),
                r.residual_flops
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Signed;
    use proptest::prelude::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(mhsa_flops(196, 384), 145_108_992);
        assert_eq!(mhsa_flops(197, 384), 146_000_640);
        assert_eq!(ffn_flops(196, 384, 4), 231_211_008);
        assert_eq!(ffn_flops(197, 384, 4), 232_390_656);
        assert_eq!(hmhsa_flops(196, 384, 12).unwrap(), 112_289_184);
        assert_eq!(hmhsa_flops(2, 2, 2).unwrap(), 76);
        assert_eq!(delta_flops(196, 384, 12), 32_819_808);
        let (a, e) = cffn_flops(196, 384, 4, Rational::new(2, 3)).unwrap();
        assert_eq!(a, Rational::from_integer(192_675_840));
        assert_eq!(e, 192_751_104);
    }

    #[test]
    fn percent_format() {
        assert_eq!(signed_pct(-18.75), "\u{2212}18.8%");
        assert_eq!(signed_pct(2.0), "+2.0%");
    }

    #[test]
    fn odd_heads_rejected() {
        assert!(hmhsa_flops(196, 384, 3).is_err());
    }

    #[test]
    fn deit_small_totals() {
        let r = count_model(&ModelConfig::deit_small()).unwrap();
        assert_eq!(r.totals.params, 22_050_664);
        assert_eq!(r.totals.flops, 4_598_882_304);
        let t = count_model(&ModelConfig::deit_tiny()).unwrap();
        assert_eq!(t.totals.params, 5_717_416);
    }

    #[test]
    fn ours_is_cheaper_and_reconciles() {
        for base in [ModelConfig::deit_tiny(), ModelConfig::deit_small()] {
            let cmp = compare(&base).unwrap();
            assert!(cmp.params_delta_pct < -15.0, "{}", cmp.params_delta_pct);
            assert!(cmp.flops_delta_pct < -15.0, "{}", cmp.flops_delta_pct);
            reconcile(&base).unwrap();
            reconcile(&base.clone().with_variant(BlockVariant::Ours)).unwrap();
        }
    }

    #[test]
    fn reconcile_itemizes() {
        let cfg = ModelConfig::deit_small().with_variant(BlockVariant::Ours);
        let r = reconcile(&cfg).unwrap();
        let attn = &r.modules[0];
        assert!(attn
            .adjustments
            .iter()
            .any(|a| a.kind == AdjustmentKind::ClassTokenColumn));
        let ffn = &r.modules[1];
        assert!(ffn
            .adjustments
            .iter()
            .any(|a| a.kind == AdjustmentKind::KRounding));
    }

    #[test]
    fn report_renders() {
        let r = count_model(&ModelConfig::toy()).unwrap();
        assert!(r.render_table().contains("1 MAC = 1 FLOP"));
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["totals"]["params"], r.totals.params);
    }

    proptest! {
        #[test]
        fn mhsa_monotone(n in 1u64..300, c in 1u64..600) {
            prop_assert!(mhsa_flops(n + 1, c) > mhsa_flops(n, c));
            prop_assert!(mhsa_flops(n, c + 1) > mhsa_flops(n, c));
            prop_assert!(ffn_flops(n, c + 1, 4) > ffn_flops(n, c, 4));
        }

        #[test]
        fn delta_identity(n in 1u64..300, c2 in 1u64..400, h2 in 1u64..16) {
            let (c, h) = (2 * c2, 2 * h2);
            let d = mhsa_flops(n, c) as i128 - hmhsa_flops(n, c, h).unwrap() as i128;
            prop_assert_eq!(d, delta_flops(n, c, h));
        }

        #[test]
        fn cffn_exact_tracks_analytic(n in 1u64..300, c in 4u64..800, m in 1u64..6) {
            let t = Rational::new(2, 3);
            let (a, e) = cffn_flops(n, c, m, t).unwrap();
            let bound = Rational::from_integer((n * c * (m + 1)) as i64) / 2;
            prop_assert!((int(e) - a).abs() <= bound);
        }
    }
}
