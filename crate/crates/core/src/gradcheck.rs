//! Central finite-difference check of hand-written VJPs.

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A function of several tensors with a hand-written VJP.
pub trait Differentiable: Sync {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Gradients of `<cotangent, forward(inputs)>` with respect to every input.
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>>;
}

type FwdFn = dyn Fn(&[Tensor]) -> Result<Tensor> + Sync;
type VjpFn = dyn Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + Sync;

/// [`Differentiable`] assembled from two closures.
pub struct FnOp {
    name: String,
    fwd: Box<FwdFn>,
    vjp: Box<VjpFn>,
}

impl FnOp {
    pub fn new(
        name: impl Into<String>,
        fwd: impl Fn(&[Tensor]) -> Result<Tensor> + Sync + 'static,
        vjp: impl Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>> + Sync + 'static,
    ) -> Self {
        FnOp {
            name: name.into(),
            fwd: Box::new(fwd),
            vjp: Box::new(vjp),
        }
    }
}

impl Differentiable for FnOp {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        (self.fwd)(inputs)
    }
    fn vjp(&self, inputs: &[Tensor], cotangent: &Tensor) -> Result<Vec<Tensor>> {
        (self.vjp)(inputs, cotangent)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    /// Probe at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
    /// Errors are measured against `max(|analytic|, |numeric|, floor)` with
    /// `floor = floor_frac * max|analytic|` over all inputs, so structurally
    /// zero gradients (a key bias under softmax) compare on the op's scale.
    pub floor_frac: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
            max_coords: None,
            floor_frac: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub worst_rel_err: f64,
    pub per_input: Vec<f64>,
    pub attempts: usize,
}

const MAX_ATTEMPTS: usize = 3;

/// Compares `op.vjp` against central differences of `<g, op.forward(x)>`
/// for a random cotangent `g`.
///
/// A failing probe is retried from a slightly perturbed input, so an
/// unlucky non-differentiable point does not fail the check; after three
/// failed attempts the worst error is reported as [`Error::GradCheck`].
pub fn vjp_check(
    op: &dyn Differentiable,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-4).contains(&cfg.eps) {
        return Err(Error::Config(format!(
            "finite-difference eps {} outside [1e-7, 1e-4]",
            cfg.eps
        )));
    }
    let mut rng = Rng::fork(cfg.seed, 0x6772_6164);
    let mut current = inputs.to_vec();
    let mut last = None;
    for attempt in 1..=MAX_ATTEMPTS {
        let per_input = probe(op, &current, cfg, &mut rng)?;
        let worst = per_input.iter().cloned().fold(0.0, f64::max);
        if worst < cfg.tol {
            return Ok(GradCheckReport {
                name: op.name(),
                worst_rel_err: worst,
                per_input,
                attempts: attempt,
            });
        }
        last = Some(worst);
        for t in current.iter_mut() {
            for v in t.data_mut() {
                *v += 1e-3 * rng.normal();
            }
        }
    }
    Err(Error::GradCheck {
        name: op.name(),
        worst: last.unwrap_or(f64::NAN),
        tol: cfg.tol,
    })
}

fn probe(
    op: &dyn Differentiable,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let y = op.forward(inputs)?;
    let cot = rng.normal_tensor(y.shape(), 1.0);
    let analytic = op.vjp(inputs, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(Error::dim(
            "vjp_check",
            format!(
                "vjp returned {} gradients for {} inputs",
                analytic.len(),
                inputs.len()
            ),
        ));
    }
    let scale = analytic.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let floor = (cfg.floor_frac * scale).max(1e-12);
    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, (x, ga)) in inputs.iter().zip(&analytic).enumerate() {
        if ga.shape() != x.shape() {
            return Err(Error::shape("vjp_check", x.shape(), ga.shape()));
        }
        let mut coords: Vec<usize> = (0..x.numel()).collect();
        if let Some(k) = cfg.max_coords {
            if k < coords.len() {
                rng.shuffle(&mut coords);
                coords.truncate(k);
            }
        }
        let errs =
            Exec::for_work(coords.len() * y.numel() * 64).map(coords.len(), |ci| -> Result<f64> {
                let idx = coords[ci];
                let mut shifted = inputs.to_vec();
                let orig = x.data()[idx];
                shifted[i].data_mut()[idx] = orig + cfg.eps;
                let lp = op.forward(&shifted)?.dot(&cot)?;
                shifted[i].data_mut()[idx] = orig - cfg.eps;
                let lm = op.forward(&shifted)?.dot(&cot)?;
                let numeric = (lp - lm) / (2.0 * cfg.eps);
                let a = ga.data()[idx];
                Ok((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor))
            });
        let mut worst: f64 = 0.0;
        for e in errs {
            let e = e?;
            if !e.is_finite() {
                return Err(Error::NonFinite(format!("gradient probe of {}", op.name())));
            }
            worst = worst.max(e);
        }
        per_input.push(worst);
    }
    Ok(per_input)
}
