//! Run configuration: one TOML document holding every knob of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};
use crate::infer::DecodeMode;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::world::SplitRatio;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub split: SplitRatio,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_samples: 6000,
            seed: 0,
            split: SplitRatio::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VqConfig {
    /// Lloyd iterations.
    pub iters: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self { iters: 25, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub modes: Vec<DecodeMode>,
    /// Cap on scored test samples; all when unset.
    pub max_samples: Option<usize>,
    pub latency_samples: usize,
    pub latency_runs: usize,
    pub latency_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: DecodeMode::ALL.to_vec(),
            max_samples: None,
            latency_samples: 100,
            latency_runs: 3,
            latency_warmup: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where artifacts go. Not part of the config hash.
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub vq: VqConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            vq: VqConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Named starting points: `desk` (the defaults), `acceptance` (a narrower
    /// model with rates sized for training from scratch on one core) and
    /// `smoke` (seconds-long CI run).
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "smoke" => Ok(Self {
                run_dir: PathBuf::from("runs/smoke"),
                data: DataConfig {
                    n_samples: 40,
                    ..DataConfig::default()
                },
                vq: VqConfig { iters: 5, seed: 0 },
                model: ModelConfig {
                    d: 16,
                    n_layers: 1,
                    n_heads: 2,
                    dec_layers: 1,
                    codebook_size: 32,
                    ..ModelConfig::default()
                },
                train: TrainConfig::smoke(),
                eval: EvalConfig {
                    max_samples: Some(4),
                    latency_samples: 2,
                    latency_runs: 1,
                    latency_warmup: 1,
                    ..EvalConfig::default()
                },
            }),
            "acceptance" => Ok(Self {
                run_dir: PathBuf::from("runs/acceptance"),
                model: ModelConfig {
                    d: 32,
                    n_layers: 2,
                    n_heads: 2,
                    dec_layers: 1,
                    ..ModelConfig::default()
                },
                train: TrainConfig {
                    pretrain_steps: 500,
                    pretrain_lr: 1e-3,
                    stage0_lr: 4e-4,
                    stage1_lr: 1e-3,
                    stage2_lr: 1e-3,
                    val_subset: 100,
                    ..TrainConfig::default()
                },
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, acceptance, smoke)"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return Err(Error::Config(format!("train.warmup_frac {} outside [0, 1)", t.warmup_frac)));
        }
        if self.eval.modes.is_empty() {
            return Err(Error::Config("eval.modes is empty".into()));
        }
        if self.eval.latency_runs == 0 {
            return Err(Error::Config("eval.latency_runs must be positive".into()));
        }
        Ok(())
    }

    /// Same run with model init and training order driven by `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.model.init_seed = seed;
        c.train.seed = seed;
        c
    }

    /// SHA-256 over the canonical JSON of everything except `run_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// First 12 hex digits of [`RunConfig::hash`].
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        for name in ["desk", "acceptance", "smoke"] {
            let c = RunConfig::preset(name).unwrap();
            let back = RunConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml("[model]\nd = 64\n[train]\nstage2_epochs = 3\n").unwrap();
        assert_eq!(c.model.d, 64);
        assert_eq!(c.model.n_layers, ModelConfig::default().n_layers);
        assert_eq!(c.train.stage2_epochs, 3);
        assert_eq!(c.train.stage0_lr, 4e-5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["lamda_l = 1.0\n", "[train]\nlamda_l = 1.0\n", "[data.split]\ntrian = 0.5\n", "[eval]\nmodes = [\"fast\"]\n"] {
            let e = RunConfig::from_toml(doc).unwrap_err().to_string();
            assert!(!e.is_empty(), "{doc}");
        }
    }

    #[test]
    fn hash_tracks_content_not_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.run_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.train.lambda_v = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.reseeded(1).hash(), a.hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[model]\nd = 30\nn_heads = 4\n").is_err());
        assert!(RunConfig::from_toml("[train]\nwarmup_frac = 1.5\n").is_err());
        assert!(RunConfig::preset("huge").is_err());
    }
}
