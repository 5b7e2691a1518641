//! Named parameter traversal, gradient maps and the `Linear` layer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns trainable tensors addressable by dotted names.
pub trait Params {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    /// Non-trainable state (batchnorm running statistics).
    fn visit_buffers_mut(
        &mut self,
        _prefix: &str,
        _f: &mut dyn FnMut(String, &mut Option<Tensor>),
    ) {
    }

    fn visit_buffers<'a>(&'a self, _prefix: &str, _f: &mut dyn FnMut(String, Option<&'a Tensor>)) {}

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    /// Replaces parameters in visiting order; the inverse of collecting
    /// `named_params` into a list.
    fn assign_params(&mut self, values: &[Tensor]) -> Result<()> {
        let mut it = values.iter();
        let mut err = None;
        self.visit_params_mut("", &mut |name, t| match it.next() {
            Some(v) if v.shape() == t.shape() => *t = v.clone(),
            Some(v) => {
                err.get_or_insert(Error::shape("assign_params", t.shape(), v.shape()));
            }
            None => {
                err.get_or_insert(Error::dim("assign_params", format!("no value for {name}")));
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if it.next().is_some() {
            return Err(Error::dim("assign_params", "more values than parameters"));
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name; repeated contributions accumulate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    map: BTreeMap<String, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, g: Tensor) -> Result<()> {
        match self.map.get_mut(&name) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.map.insert(name, g);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn merge(&mut self, other: Grads) -> Result<()> {
        for (k, v) in other.map {
            self.add(k, v)?;
        }
        Ok(())
    }

    /// Gradients in the visiting order of `params`, zeros where absent.
    pub fn ordered_like<P: Params + ?Sized>(&self, params: &P) -> Vec<Tensor> {
        params
            .named_params()
            .into_iter()
            .map(|(n, t)| {
                self.map
                    .get(&n)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}

/// Plain SGD: `p -= lr * g` for every parameter that has a gradient.
pub fn sgd_step<P: Params + ?Sized>(params: &mut P, grads: &Grads, lr: f64) -> Result<()> {
    let mut err = None;
    params.visit_params_mut("", &mut |name, p| {
        if let Some(g) = grads.get(&name) {
            if let Err(e) = p.axpy(-lr, g) {
                err.get_or_insert(e);
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Affine map over the trailing axis; `weight` is `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::dim(
                "linear",
                format!("weight must be rank 2, got {:?}", weight.shape()),
            ));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.dim(0)] {
                return Err(Error::shape("linear", weight.shape(), b.shape()));
            }
        }
        Ok(Linear { weight, bias })
    }

    /// Truncated normal (std 0.02) weights and zero bias.
    pub fn init(rng: &mut Rng, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: rng.trunc_normal_tensor(&[out_dim, in_dim], 0.02),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros(&[out_dim, in_dim]),
            bias: bias.then(|| Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pointwise_mix(x, &self.weight, self.bias.as_ref())
    }

    pub fn backward(
        &self,
        x: &Tensor,
        g: &Tensor,
        prefix: &str,
        grads: &mut Grads,
    ) -> Result<Tensor> {
        let (gx, gw, gb) = ops::pointwise_mix_vjp(x, &self.weight, g)?;
        grads.add(join(prefix, "weight"), gw)?;
        if self.bias.is_some() {
            grads.add(join(prefix, "bias"), gb)?;
        }
        Ok(gx)
    }

    /// Multiply-accumulates for `rows` input positions.
    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.in_dim() * self.out_dim()) as u64
    }
}

impl Params for Linear {
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

impl Params for Tensor {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(prefix.to_string(), self);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(prefix.to_string(), self);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_and_counts() {
        let l = Linear::zeros(3, 4, true);
        let names: Vec<_> = l.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
        assert_eq!(l.param_count(), 16);
        assert_eq!(l.macs(5), 60);
    }

    #[test]
    fn assign_and_sgd() {
        let mut l = Linear::zeros(2, 2, false);
        l.assign_params(&[Tensor::ones(&[2, 2])]).unwrap();
        let mut g = Grads::new();
        g.add("weight".into(), Tensor::ones(&[2, 2])).unwrap();
        g.add("weight".into(), Tensor::ones(&[2, 2])).unwrap();
        sgd_step(&mut l, &g, 0.25).unwrap();
        assert_eq!(l.weight, Tensor::full(&[2, 2], 0.5));
        assert!(l.assign_params(&[Tensor::ones(&[3])]).is_err());
    }
}
