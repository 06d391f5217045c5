//! Run configuration: a flat TOML file with [task], [model], [data], and
//! [optim] sections. Every constant used by the pipelines is reachable
//! from here; unspecified fields fall back to the standard defaults
//! (16-frame 4×4 stitching at 224², 1.3 test crop scale, 30 replicas,
//! τ=0.07, α=β=1, hidden widths 512/1024).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::HeadMode;
use crate::mcan::MCANConfig;
use crate::moma::DistillConfig;
use crate::stitch::StitchConfig;
use crate::synth::{SyntheticVideoSpec, SyntheticVqaSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Recognition,
    Anticipation,
    Vqa,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    #[serde(default = "default_head_mode")]
    pub head_mode: HeadMode,
}

fn default_head_mode() -> HeadMode {
    HeadMode::Adg
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channel widths of the strided encoder blocks; the last is the
    /// embedding width.
    pub encoder_channels: Vec<usize>,
    /// Heads of the embedding-recalibration attention.
    pub attn_heads: usize,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub queue_capacity: usize,
    /// Initialize the teacher from a previously trained checkpoint
    /// instead of the fixed-seed random stand-in.
    pub teacher_init: Option<PathBuf>,
    /// Answer-classifier hidden width (512 small, 1024 large).
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub fqca: bool,
    pub n_obj_max: usize,
    pub glove_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder_channels: vec![32, 64, 128, 256],
            attn_heads: 4,
            tau: 0.07,
            alpha: 1.0,
            beta: 1.0,
            queue_capacity: 512,
            teacher_init: None,
            hidden_dim: 512,
            layers: 2,
            heads: 8,
            fqca: true,
            n_obj_max: 36,
            glove_dim: 300,
        }
    }
}

impl ModelConfig {
    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            queue_capacity: self.queue_capacity,
        }
    }

    pub fn mcan(&self, num_answers: usize) -> MCANConfig {
        MCANConfig {
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            num_answers,
            fqca: self.fqca,
            n_obj_max: self.n_obj_max,
            feat_dim: crate::mcan::OBJECT_FEATURE_WIDTH,
            glove_dim: self.glove_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataConfig {
    pub root: PathBuf,
    #[serde(default = "default_frame_block")]
    pub frame_block: usize,
    #[serde(default)]
    pub stitch: StitchConfig,
}

fn default_frame_block() -> usize {
    15
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            steps: 500,
            batch_size: 8,
            seed: 0,
            checkpoint_every: 100,
        }
    }
}

/// Dataset-generation recipes used by the generate command.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SynthSection {
    pub recognition: Option<SyntheticVideoSpec>,
    pub vqa: Option<SyntheticVqaSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.stitch.validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be positive", self.optim.lr)));
        }
        if self.model.encoder_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        let d = *self.model.encoder_channels.last().unwrap();
        if d % self.model.attn_heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {d} not divisible by attn_heads {}",
                self.model.attn_heads
            )));
        }
        if self.data.frame_block == 0 {
            return Err(Error::Config("frame_block must be positive".into()));
        }
        if self.model.hidden_dim == 0 || self.model.hidden_dim % self.model.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.model.hidden_dim, self.model.heads
            )));
        }
        Ok(())
    }

    /// Paths must exist by the time a command runs.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.data.root.exists() {
            return Err(Error::Config(format!(
                "data root {} does not exist",
                self.data.root.display()
            )));
        }
        if let Some(p) = &self.model.teacher_init {
            if !p.exists() {
                return Err(Error::Config(format!(
                    "teacher_init {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Hash of the architecture-defining sections; checkpoints refuse to
    /// load under a different hash.
    pub fn model_hash(&self) -> String {
        #[derive(Serialize)]
        struct HashView<'a> {
            task: &'a TaskConfig,
            model: &'a ModelConfig,
            stitch: &'a StitchConfig,
            frame_block: usize,
        }
        let view = HashView {
            task: &self.task,
            model: &self.model,
            stitch: &self.data.stitch,
            frame_block: self.data.frame_block,
        };
        let bytes = serde_json::to_vec(&view).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn embed_dim(&self) -> usize {
        *self.model.encoder_channels.last().expect("validated")
    }

    /// The same run with a different head design; single-task prediction
    /// validates each checkpoint against its own head's hash.
    pub fn with_head_mode(&self, mode: HeadMode) -> RunConfig {
        let mut out = self.clone();
        out.task.head_mode = mode;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> &'static str {
        r#"
[task]
kind = "recognition"
head_mode = "adg"

[data]
root = "/tmp/does-not-matter"
"#
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        assert_eq!(cfg.data.stitch.num_selected, 16);
        assert_eq!(cfg.data.stitch.crop_size, 224);
        assert_eq!(cfg.data.stitch.test_crop_scale, 1.3);
        assert_eq!(cfg.data.stitch.test_replicas, 30);
        assert_eq!(cfg.model.tau, 0.07);
        assert_eq!(cfg.model.alpha, 1.0);
        assert_eq!(cfg.model.beta, 1.0);
        assert_eq!(cfg.model.hidden_dim, 512);
        assert_eq!(cfg.data.frame_block, 15);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trip_preserves_config() {
        let cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg.model_hash(), back.model_hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.data.stitch.num_selected = 7; // not a square
        assert!(cfg.validate().is_err());

        let mut cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.optim.batch_size = 0;
        assert!(cfg.validate().is_err());

        let mut cfg: RunConfig = toml::from_str(minimal_toml()).unwrap();
        cfg.model.encoder_channels = vec![30];
        cfg.model.attn_heads = 4;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_architecture_not_paths() {
        let a: RunConfig = toml::from_str(minimal_toml()).unwrap();
        let mut b = a.clone();
        b.data.root = PathBuf::from("/somewhere/else");
        b.optim.steps = 9;
        assert_eq!(a.model_hash(), b.model_hash());
        let mut c = a.clone();
        c.model.encoder_channels = vec![8, 16];
        assert_ne!(a.model_hash(), c.model_hash());
    }

    #[test]
    fn policy_variants_round_trip_in_toml() {
        let toml_text = r#"
[task]
kind = "recognition"

[data]
root = "/x"

[data.stitch]
policy = "identity"
"#;
        let cfg: RunConfig = toml::from_str(toml_text).unwrap();
        assert_eq!(cfg.data.stitch.policy, crate::stitch::AugmentPolicy::Identity);
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.data.stitch.policy, cfg.data.stitch.policy);
    }
}
