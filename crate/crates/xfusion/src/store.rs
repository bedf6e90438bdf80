//! Checkpoint files and model cards.

use std::path::{Path, PathBuf};

use serde::Serialize;
use xfusion_core::checkpoint::Checkpoint;
use xfusion_core::model::{Model, ModelConfig};
use xfusion_core::optim::OptimizerState;
use xfusion_core::params::hex;

use crate::error::{CliError, CliResult};

pub const FINAL: &str = "final.ckpt";
const MODEL_KEY: &str = "model";

pub fn save(path: &Path, model: &Model<f32>, opt: Option<&OptimizerState<f32>>, extra: &[(&str, String)]) -> CliResult<()> {
    let mut ck = Checkpoint::new(model.params().clone());
    ck.optimizer = opt.cloned();
    ck.meta.insert(
        MODEL_KEY.into(),
        toml::to_string(model.config()).expect("configs always serialize"),
    );
    for (k, v) in extra {
        ck.meta.insert((*k).into(), v.clone());
    }
    write_atomic(path, &ck.encode())
}

/// Writes through a temporary sibling so an interrupted write never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// A checkpoint file, or a run directory (its final checkpoint).
pub fn resolve(path: &Path) -> PathBuf {
    if path.is_dir() {
        let nested = path.join("checkpoints").join(FINAL);
        if nested.exists() {
            return nested;
        }
        return path.join(FINAL);
    }
    path.to_path_buf()
}

pub fn load(path: &Path) -> CliResult<Checkpoint<f32>> {
    let path = resolve(path);
    let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Checkpoint::decode(&bytes).map_err(|e| CliError::user(format!("{}: {e}; refusing to load it", path.display())))
}

pub fn config_of(ck: &Checkpoint<f32>) -> CliResult<ModelConfig> {
    let text = ck
        .meta
        .get(MODEL_KEY)
        .ok_or_else(|| CliError::user("checkpoint does not record its model configuration"))?;
    toml::from_str(text).map_err(|e| CliError::user(format!("checkpoint model configuration: {e}")))
}

pub fn load_model(path: &Path) -> CliResult<Model<f32>> {
    let ck = load(path)?;
    let cfg = config_of(&ck)?;
    Ok(Model::from_params(cfg, ck.params)?)
}

#[derive(Serialize)]
struct ModelCard<'a> {
    parameters: ParamCounts,
    model: &'a ModelConfig,
}

#[derive(Serialize)]
struct ParamCounts {
    tensors: usize,
    elements: usize,
    trainable_elements: usize,
    frozen_elements: usize,
    frozen_digest: String,
}

/// Key-value description of the architecture and its parameter partition.
pub fn model_card(model: &Model<f32>) -> String {
    let ps = model.params();
    let count = |frozen: Option<bool>| -> usize {
        ps.iter()
            .filter(|(_, p)| frozen.is_none_or(|f| p.frozen == f))
            .map(|(_, p)| p.value.len())
            .sum()
    };
    let card = ModelCard {
        parameters: ParamCounts {
            tensors: ps.len(),
            elements: count(None),
            trainable_elements: count(Some(false)),
            frozen_elements: count(Some(true)),
            frozen_digest: hex(&ps.frozen_digest()),
        },
        model: model.config(),
    };
    toml::to_string(&card).expect("model cards always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use xfusion_core::model::TowerVariant;
    use xfusion_core::optim::AdamWConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            layers: 1,
            dim: 8,
            vision_dim: 8,
            heads: 2,
            mlp_hidden: 16,
            align_layer: 1,
            ..Default::default()
        }
    }

    #[test]
    fn checkpoint_file_rebuilds_the_model() {
        let dir = tempfile::tempdir().unwrap();
        let base = Model::<f32>::text_only(tiny(), 0).unwrap();
        let m = Model::multimodal(tiny(), base.params(), 1).unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, Some(&OptimizerState::new(AdamWConfig::default())), &[("stage", "multimodal".into())]).unwrap();
        let back = load_model(&p).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.params(), m.params());
        assert_eq!(back.params().frozen_names(), m.params().frozen_names());
        let ck = load(&p).unwrap();
        assert_eq!(ck.meta["stage"], "multimodal");
        assert!(ck.optimizer.is_some());
    }

    #[test]
    fn corrupted_file_is_refused_with_its_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::<f32>::text_only(tiny(), 0).unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, None, &[]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        let e = load(&p).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("m.ckpt") && e.to_string().contains("checksum"), "{e}");
    }

    #[test]
    fn card_counts_the_partition() {
        let base = Model::<f32>::text_only(tiny(), 0).unwrap();
        let cfg = ModelConfig {
            variant: TowerVariant::DualTower,
            ..tiny()
        };
        let m = Model::multimodal(cfg, base.params(), 1).unwrap();
        let card: toml::Table = model_card(&m).parse().unwrap();
        let p = card["parameters"].as_table().unwrap();
        let total = p["elements"].as_integer().unwrap();
        let parts = p["trainable_elements"].as_integer().unwrap() + p["frozen_elements"].as_integer().unwrap();
        assert_eq!(total, parts);
        assert!(p["frozen_elements"].as_integer().unwrap() > 0);
        assert_eq!(card["model"]["variant"].as_str(), Some("dual-tower"));
    }
}
