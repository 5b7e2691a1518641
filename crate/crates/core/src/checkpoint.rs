//! Checkpoint directories: `index.json` plus one JSON file per tensor.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Form, Model, ModelConfig};
use crate::params::Params;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const INDEX: &str = "index.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub form: Form,
    pub config: ModelConfig,
    /// Tensor name to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
}

fn named_tensors(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out = model.named_params();
    model.visit_buffers("", &mut |n, t| {
        if let Some(t) = t {
            out.push((n, t));
        }
    });
    out
}

pub fn save_weights(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = BTreeMap::new();
    for (name, t) in named_tensors(model) {
        let file = format!("{name}.json");
        t.save(dir.join(&file))?;
        tensors.insert(name, file);
    }
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION,
        form: model.form,
        config: model.cfg.clone(),
        tensors,
    };
    let path = dir.join(INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: impl AsRef<Path>) -> Result<CheckpointIndex> {
    let path = dir.as_ref().join(INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint version {} but this build reads version {CHECKPOINT_VERSION}",
            index.version
        )));
    }
    Ok(index)
}

/// Loads whatever the checkpoint holds, in the form it was saved in.
pub fn load_weights(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    let mut model = Model::zeros(&index.config)?;
    if index.form == Form::Inference {
        model = model.merged()?;
    }

    let mut pending: BTreeMap<String, String> = index.tensors.clone();
    let mut err = None;
    let mut fill =
        |name: String, slot: &mut Tensor, err: &mut Option<Error>| match pending.remove(&name) {
            None => {
                err.get_or_insert(Error::ConfigMismatch(format!(
                    "checkpoint has no tensor `{name}`"
                )));
            }
            Some(file) => match Tensor::load(dir.join(file)) {
                Ok(t) if t.shape() == slot.shape() => *slot = t,
                Ok(t) => {
                    err.get_or_insert(Error::ConfigMismatch(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                Err(e) => {
                    err.get_or_insert(e);
                }
            },
        };
    model.visit_params_mut("", &mut |n, t| fill(n, t, &mut err));
    model.visit_buffers_mut("", &mut |n, slot| {
        let mut t = match slot.take() {
            Some(t) => t,
            None => return,
        };
        if index.tensors.contains_key(&n) {
            fill(n, &mut t, &mut err);
            *slot = Some(t);
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(extra) = pending.keys().next() {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint tensor `{extra}` has no place in the model"
        )));
    }
    Ok(model)
}

/// Loads a checkpoint that must match `cfg` (up to seed) and `form`.
pub fn load_weights_checked(dir: impl AsRef<Path>, cfg: &ModelConfig, form: Form) -> Result<Model> {
    let dir = dir.as_ref();
    let index = read_index(dir)?;
    if !index.config.same_architecture(cfg) {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint was saved for block_variant={:?}, C={}, h={}, depth={}; requested block_variant={:?}, C={}, h={}, depth={}",
            index.config.block_variant,
            index.config.c,
            index.config.h,
            index.config.depth,
            cfg.block_variant,
            cfg.c,
            cfg.h,
            cfg.depth
        )));
    }
    if index.form != form {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds the {:?} form, {:?} form requested",
            index.form, form
        )));
    }
    load_weights(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, forward_classify, BlockVariant};
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy().with_variant(BlockVariant::Ours);
        let mut m = build_model(&cfg).unwrap();
        m.head = crate::params::Linear::init(&mut Rng::seed(5), 32, 2, true);
        save_weights(&m, dir.path()).unwrap();
        let back = load_weights(dir.path()).unwrap();
        assert_eq!(back, m);
        let x = Rng::seed(2).normal_tensor(&[2, 3, 16, 16], 1.0);
        assert_eq!(
            forward_classify(&back, &x).unwrap(),
            forward_classify(&m, &x).unwrap()
        );
    }

    #[test]
    fn vanilla_into_ours_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy();
        save_weights(&build_model(&cfg).unwrap(), dir.path()).unwrap();
        let ours = cfg.clone().with_variant(BlockVariant::Ours);
        let r = load_weights_checked(dir.path(), &ours, Form::Train);
        assert!(matches!(r, Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn inference_form_is_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::toy().with_variant(BlockVariant::Ours);
        let merged = build_model(&cfg).unwrap().merged().unwrap();
        save_weights(&merged, dir.path()).unwrap();
        assert_eq!(read_index(dir.path()).unwrap().form, Form::Inference);
        assert!(matches!(
            load_weights_checked(dir.path(), &cfg, Form::Train),
            Err(Error::ConfigMismatch(_))
        ));
        assert_eq!(
            load_weights_checked(dir.path(), &cfg, Form::Inference).unwrap(),
            merged
        );
    }

    #[test]
    fn bad_version() {
        let dir = tempfile::tempdir().unwrap();
        save_weights(&build_model(&ModelConfig::toy()).unwrap(), dir.path()).unwrap();
        let p = dir.path().join(INDEX);
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"version\": 1", "\"version\": 7");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(
            load_weights(dir.path()),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
