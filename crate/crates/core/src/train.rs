//! Plain SGD on softmax cross-entropy for toy-scale runs.

use std::io::Write;
use std::path::Path;

use crate::data::ToyDataset;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, cross_entropy, ForwardOptions, Model};
use crate::ops::BnMode;
use crate::params::sgd_step;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Minibatch size; the whole dataset when `None`.
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.1,
            batch_size: None,
            seed: 0,
        }
    }
}

/// Runs `cfg.steps` SGD updates and returns the loss measured before each.
///
/// Compact FFNs stay in train form with batch statistics; running
/// statistics are updated after every step.
pub fn train_toy(model: &mut Model, data: &ToyDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if model.form != crate::model::Form::Train {
        return Err(Error::State(
            "cannot train a merged inference-form model".into(),
        ));
    }
    let mut rng = Rng::fork(cfg.seed, 0x7472_6169);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut cursor = data.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let opts = ForwardOptions {
        mode: BnMode::Train,
        ..Default::default()
    };
    for step in 0..cfg.steps {
        let idx: Vec<usize> = if bs == data.len() {
            order.clone()
        } else {
            if cursor + bs > data.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            cursor += bs;
            order[cursor - bs..cursor].to_vec()
        };
        let (x, y) = data.subset(&idx)?;
        let out = model.forward(&x, opts)?;
        let (loss, g) = cross_entropy(&out.logits, &y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        losses.push(loss);
        let grads = model.backward(&out.cache, &g)?;
        sgd_step(model, &grads, cfg.lr)?;
        model.update_running_stats(&out.cache);
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Eval-mode loss and accuracy; compact FFNs are merged first.
pub fn evaluate(model: &Model, data: &ToyDataset) -> Result<Evaluation> {
    let merged = if model.has_train_branches() {
        model.merged()?
    } else {
        model.clone()
    };
    evaluate_as_is(&merged, data)
}

/// Eval-mode loss and accuracy without merging.
pub fn evaluate_as_is(model: &Model, data: &ToyDataset) -> Result<Evaluation> {
    let logits = model
        .forward(&data.images, ForwardOptions::default())?
        .logits;
    let (loss, _) = cross_entropy(&logits, &data.labels)?;
    let hits = argmax_rows(&logits)
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(Evaluation {
        loss,
        accuracy: hits as f64 / data.len() as f64,
    })
}

pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut f =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        body += &format!("{i},{l:.17e}\n");
    }
    f.write_all(body.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, BlockVariant, ModelConfig};

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let cfg = ModelConfig::toy().with_variant(BlockVariant::Ours);
        let mut m = build_model(&cfg).unwrap();
        let d = ToyDataset::generate(&cfg, 8, 0).unwrap();
        let tc = TrainConfig {
            steps: 3,
            lr: 0.0,
            ..Default::default()
        };
        let l = train_toy(&mut m, &d, &tc).unwrap();
        assert!(l.iter().all(|v| *v == l[0]));
    }

    #[test]
    fn merged_model_refuses_training() {
        let cfg = ModelConfig::toy().with_variant(BlockVariant::Ours);
        let mut m = build_model(&cfg).unwrap().merged().unwrap();
        let d = ToyDataset::generate(&cfg, 4, 0).unwrap();
        assert!(matches!(
            train_toy(&mut m, &d, &TrainConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = ModelConfig::toy();
        let mut m = build_model(&cfg).unwrap();
        let d = ToyDataset::generate(&cfg, 4, 0).unwrap();
        m.head.weight.data_mut()[0] = f64::NAN;
        let tc = TrainConfig {
            steps: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_toy(&mut m, &d, &tc),
            Err(Error::Divergence { step: 0 })
        ));
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(&p, &[0.5, 0.25]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,loss\n0,5.0"));
        assert_eq!(text.lines().count(), 3);
    }
}
