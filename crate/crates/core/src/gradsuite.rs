//! The built-in list of operations whose VJPs are checked numerically.

use serde::Serialize;

use crate::attention::{self, Attention, AttentionConfig};
use crate::error::{Error, Result};
use crate::ffn::{self, CffnTrainWeights, FfnConfig, FfnWeights, Rational};
use crate::gradcheck::{vjp_check, Differentiable, FnOp, GradCheckConfig};
use crate::model::{build_model, BlockVariant, FfnLayer, ForwardOptions, Model, ModelConfig};
use crate::ops::{self, BatchNormState, BnMode};
use crate::params::{Grads, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const SUITE: &[&str] = &[
    "matmul",
    "softmax",
    "depthwise_conv3x3",
    "pointwise_mix",
    "batchnorm_train",
    "batchnorm_eval",
    "layernorm",
    "gelu",
    "ihh",
    "chh",
    "mhsa_block",
    "hmhsa_block",
    "ffn",
    "cffn_train",
    "cffn_infer",
    "vit_vanilla",
    "vit_ours",
];

pub struct GradCase {
    pub op: Box<dyn Differentiable>,
    pub inputs: Vec<Tensor>,
}

fn small_attention(hallucinated: bool) -> AttentionConfig {
    if hallucinated {
        AttentionConfig::hallucinated(2, 2, true, 8, 4)
    } else {
        AttentionConfig::vanilla(2, 2, true, 8, 2)
    }
}

/// Wraps a parameterized module as `f(x, params...)`.
fn module_op<M>(
    name: &str,
    module: M,
    x: Tensor,
    fwd: fn(&M, &Tensor) -> Result<Tensor>,
    bwd: fn(&M, &Tensor, &Tensor, &mut Grads) -> Result<Tensor>,
    rng: &mut Rng,
) -> GradCase
where
    M: Params + Clone + Send + Sync + 'static,
{
    let mut inputs = vec![x];
    inputs.extend(
        module
            .named_params()
            .into_iter()
            .map(|(_, t)| rng.normal_tensor(t.shape(), 0.5)),
    );
    let template = module.clone();
    let fwd_template = module;
    let op = FnOp::new(
        name,
        move |inp| {
            let mut m = fwd_template.clone();
            m.assign_params(&inp[1..])?;
            fwd(&m, &inp[0])
        },
        move |inp, g| {
            let mut m = template.clone();
            m.assign_params(&inp[1..])?;
            let mut grads = Grads::new();
            let gx = bwd(&m, &inp[0], g, &mut grads)?;
            let mut out = vec![gx];
            out.extend(grads.ordered_like(&m));
            Ok(out)
        },
    );
    GradCase {
        op: Box::new(op),
        inputs,
    }
}

/// Whole classifier as a function of its parameters on fixed images.
fn model_op(name: &str, model: Model, images: Tensor, rng: &mut Rng) -> GradCase {
    let inputs: Vec<Tensor> = model
        .named_params()
        .into_iter()
        .map(|(_, t)| rng.normal_tensor(t.shape(), 0.3))
        .collect();
    let fwd_model = model.clone();
    let fwd_images = images.clone();
    let opts = ForwardOptions {
        mode: BnMode::Train,
        ..Default::default()
    };
    let op = FnOp::new(
        name,
        move |inp| {
            let mut m = fwd_model.clone();
            m.assign_params(inp)?;
            Ok(m.forward(&fwd_images, opts)?.logits)
        },
        move |inp, g| {
            let mut m = model.clone();
            m.assign_params(inp)?;
            let out = m.forward(&images, opts)?;
            Ok(m.backward(&out.cache, g)?.ordered_like(&m))
        },
    );
    GradCase {
        op: Box::new(op),
        inputs,
    }
}

fn tiny_vit(variant: BlockVariant) -> ModelConfig {
    ModelConfig {
        img_size: 8,
        patch_size: 4,
        in_channels: 3,
        num_classes: 3,
        depth: 1,
        c: 8,
        h: 2,
        ..ModelConfig::toy()
    }
    .with_variant(variant)
}

pub fn build_case(name: &str, seed: u64) -> Result<GradCase> {
    let mut rng = Rng::fork(seed, 0x7375_6974);
    let r = &mut rng;
    Ok(match name {
        "matmul" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| ops::matmul(&x[0], &x[1]),
                |x, g| {
                    let (a, b) = ops::matmul_vjp(&x[0], &x[1], g)?;
                    Ok(vec![a, b])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[2, 3, 4], 1.0),
                r.normal_tensor(&[2, 4, 5], 1.0),
            ],
        },
        "softmax" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| Ok(ops::softmax_lastdim(&x[0])),
                |x, g| Ok(vec![ops::softmax_vjp(&ops::softmax_lastdim(&x[0]), g)?]),
            )),
            inputs: vec![r.normal_tensor(&[3, 6], 2.0)],
        },
        "depthwise_conv3x3" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| ops::depthwise_conv3x3(&x[0], &x[1], Some(&x[2])),
                |x, g| {
                    let (a, b, c) = ops::depthwise_conv3x3_vjp(&x[0], &x[1], g)?;
                    Ok(vec![a, b, c])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[2, 3, 4, 5], 1.0),
                r.normal_tensor(&[3, 3, 3], 1.0),
                r.normal_tensor(&[3], 1.0),
            ],
        },
        "pointwise_mix" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| ops::pointwise_mix(&x[0], &x[1], Some(&x[2])),
                |x, g| {
                    let (a, b, c) = ops::pointwise_mix_vjp(&x[0], &x[1], g)?;
                    Ok(vec![a, b, c])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[5, 4], 1.0),
                r.normal_tensor(&[3, 4], 1.0),
                r.normal_tensor(&[3], 1.0),
            ],
        },
        "batchnorm_train" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| Ok(ops::batchnorm_train_forward(&x[0], &x[1], &x[2], ops::BN_EPS)?.0),
                |x, g| {
                    let (_, cache) =
                        ops::batchnorm_train_forward(&x[0], &x[1], &x[2], ops::BN_EPS)?;
                    let (a, b, c) = ops::batchnorm_train_vjp(&cache, &x[1], g)?;
                    Ok(vec![a, b, c])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[6, 4], 1.0),
                r.normal_tensor(&[4], 1.0),
                r.normal_tensor(&[4], 1.0),
            ],
        },
        "batchnorm_eval" => {
            let mean = r.normal_tensor(&[4], 1.0);
            let var = r.uniform_tensor(&[4], 0.5, 2.0);
            let state = move |x: &[Tensor]| BatchNormState {
                gamma: x[1].clone(),
                beta: x[2].clone(),
                running_mean: Some(mean.clone()),
                running_var: Some(var.clone()),
                ..BatchNormState::identity(4)
            };
            let s2 = state.clone();
            GradCase {
                op: Box::new(FnOp::new(
                    name,
                    move |x| ops::batchnorm(&x[0], &mut state(x), BnMode::Eval),
                    move |x, g| {
                        let (a, b, c) = ops::batchnorm_eval_vjp(&x[0], &s2(x), g)?;
                        Ok(vec![a, b, c])
                    },
                )),
                inputs: vec![
                    r.normal_tensor(&[5, 4], 1.0),
                    r.normal_tensor(&[4], 1.0),
                    r.normal_tensor(&[4], 1.0),
                ],
            }
        }
        "layernorm" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| ops::layernorm(&x[0], &x[1], &x[2], ops::LN_EPS),
                |x, g| {
                    let (_, cache) = ops::layernorm_forward(&x[0], &x[1], &x[2], ops::LN_EPS)?;
                    let (a, b, c) = ops::layernorm_vjp(&cache, &x[1], g)?;
                    Ok(vec![a, b, c])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[4, 6], 1.0),
                r.normal_tensor(&[6], 1.0),
                r.normal_tensor(&[6], 1.0),
            ],
        },
        "gelu" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| Ok(ops::gelu(&x[0])),
                |x, g| Ok(vec![ops::gelu_vjp(&x[0], g)?]),
            )),
            inputs: vec![r.normal_tensor(&[3, 5], 1.5)],
        },
        "ihh" => {
            let cfg = small_attention(true);
            let c2 = cfg.clone();
            GradCase {
                op: Box::new(FnOp::new(
                    name,
                    move |x| attention::ihh(&x[0], &x[1], Some(&x[2]), &cfg),
                    move |x, g| {
                        let (a, b, c) = attention::ihh_vjp(&x[0], &x[1], g, &c2)?;
                        Ok(vec![a, b, c])
                    },
                )),
                inputs: vec![
                    r.normal_tensor(&[2, 5, 5], 1.0),
                    r.normal_tensor(&[2, 3, 3], 1.0),
                    r.normal_tensor(&[2], 1.0),
                ],
            }
        }
        "chh" => GradCase {
            op: Box::new(FnOp::new(
                name,
                |x| attention::chh(&x[0], &x[1], Some(&x[2])),
                |x, g| {
                    let (a, b, c) = attention::chh_vjp(&x[0], &x[1], g)?;
                    Ok(vec![a, b, c])
                },
            )),
            inputs: vec![
                r.normal_tensor(&[3, 5, 5], 1.0),
                r.normal_tensor(&[3, 3], 1.0),
                r.normal_tensor(&[3], 1.0),
            ],
        },
        "mhsa_block" | "hmhsa_block" => {
            let cfg = small_attention(name == "hmhsa_block");
            let x = r.normal_tensor(&[cfg.n, cfg.c], 1.0);
            let module = Attention::zeros(cfg, true)?;
            module_op(
                name,
                module,
                x,
                |m, x| Ok(m.forward(x)?.0),
                |m, x, g, grads| {
                    let (_, cache) = m.forward(x)?;
                    m.backward(&cache, g, "", grads)
                },
                r,
            )
        }
        "ffn" | "cffn_train" | "cffn_infer" => {
            let cfg = FfnConfig::new(6, 2, Rational::new(2, 3), 2);
            let layer = match name {
                "ffn" => FfnLayer::Vanilla(FfnWeights::zeros(6, 2, true)),
                "cffn_train" => FfnLayer::CompactTrain(CffnTrainWeights::zeros(&cfg, true)?),
                _ => FfnLayer::CompactInfer(ffn::reparam_merge(&ffn::random_train_weights(
                    &cfg, r,
                )?)?),
            };
            let x = r.normal_tensor(&[5, 6], 1.0);
            module_op(
                name,
                layer,
                x,
                |m, x| Ok(m.forward(x, BnMode::Train)?.0),
                |m, x, g, grads| {
                    let (_, cache) = m.forward(x, BnMode::Train)?;
                    m.backward(&cache, g, "", grads)
                },
                r,
            )
        }
        "vit_vanilla" | "vit_ours" => {
            let variant = if name == "vit_ours" {
                BlockVariant::Ours
            } else {
                BlockVariant::Vanilla
            };
            let cfg = ModelConfig {
                seed,
                ..tiny_vit(variant)
            };
            let images = r.normal_tensor(&[3, 3, 8, 8], 1.0);
            model_op(name, build_model(&cfg)?, images, r)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown gradient-suite op `{other}`"
            )))
        }
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seeds: usize,
    pub worst_rel_err: f64,
    pub max_attempts: usize,
    /// First failure message, if any seed failed.
    pub failure: Option<String>,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Checks each named op at seeds `0..seeds`.
pub fn run_suite(names: &[&str], seeds: u64, base: &GradCheckConfig) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::with_capacity(names.len());
    for &name in names {
        let mut entry = SuiteEntry {
            name: name.to_string(),
            seeds: seeds as usize,
            worst_rel_err: 0.0,
            max_attempts: 0,
            failure: None,
        };
        for seed in 0..seeds {
            let case = build_case(name, seed)?;
            let cfg = GradCheckConfig {
                seed,
                ..base.clone()
            };
            match vjp_check(case.op.as_ref(), &case.inputs, &cfg) {
                Ok(r) => {
                    entry.worst_rel_err = entry.worst_rel_err.max(r.worst_rel_err);
                    entry.max_attempts = entry.max_attempts.max(r.attempts);
                }
                Err(Error::GradCheck { worst, .. }) => {
                    entry.worst_rel_err = entry.worst_rel_err.max(worst);
                    entry
                        .failure
                        .get_or_insert(format!("seed {seed}: worst relative error {worst:.3e}"));
                }
                Err(e) => {
                    entry.failure.get_or_insert(format!("seed {seed}: {e}"));
                }
            }
        }
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_builds() {
        for name in SUITE {
            let c = build_case(name, 0).unwrap();
            assert!(c.op.forward(&c.inputs).unwrap().is_finite(), "{name}");
        }
        assert!(build_case("nope", 0).is_err());
    }

    #[test]
    fn suite_passes_one_seed() {
        let r = run_suite(SUITE, 1, &GradCheckConfig::default()).unwrap();
        for e in &r {
            assert!(e.passed(), "{} {:?}", e.name, e.failure);
        }
    }
}
