use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::SgdConfig;
use crate::error::{Error, Result};
use crate::model::{default_density_scale, Framework, ModelConfig};
use crate::scenegen::{default_glyphs, SceneSpec};

/// Everything that determines a run. Serialized into every artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub framework: Framework,

    pub num_categories: usize,
    pub image_size: usize,
    pub max_count: u32,
    pub zero_probability: f64,
    pub glyph_radius: u32,
    pub min_separation: f64,
    /// Seed of the training split; the test split uses `data_seed + 1`.
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,

    pub t_tilde: u32,
    pub lambda: f32,
    pub lr_backbone: f32,
    pub lr_heads: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,

    /// Number of count-annotated categories (RLC).
    pub annotated_count: usize,
    pub split_seed: u64,
    /// Train RLC in two stages, holding back the reduced-count loss in
    /// the first.
    pub rlc_two_stage: bool,
    /// Add squared error on absent annotated categories to the reduced-count
    /// loss.
    pub rlc_absent_mse: bool,

    pub feature_dim: usize,
    /// Fixed factor on density outputs; `None` picks the framework default.
    pub density_scale: Option<f32>,
    /// Seeds initialization and mini-batch order.
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneSpec::default();
        RunConfig {
            framework: Framework::Lc,
            num_categories: scene.num_categories,
            image_size: scene.image_size,
            max_count: scene.max_count,
            zero_probability: scene.zero_probability,
            glyph_radius: scene.glyph_radius,
            min_separation: scene.min_separation,
            data_seed: 0,
            n_train: 2000,
            n_test: 500,
            t_tilde: 5,
            lambda: 0.1,
            lr_backbone: 1e-2,
            lr_heads: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs_stage1: 10,
            epochs_stage2: 20,
            annotated_count: 9,
            split_seed: 0,
            rlc_two_stage: false,
            rlc_absent_mse: false,
            feature_dim: 32,
            density_scale: None,
            seed: 0,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_tilde < 2 {
            return bad(format!("t_tilde {} must be at least 2", self.t_tilde));
        }
        if self.max_count < self.t_tilde + 2 {
            return bad(format!(
                "max_count {} must be at least t_tilde + 2 = {} so every label set occurs",
                self.max_count,
                self.t_tilde + 2
            ));
        }
        if self.batch_size == 0 || self.batch_size > self.n_train {
            return bad(format!(
                "batch_size {} must be in 1..=n_train ({})",
                self.batch_size, self.n_train
            ));
        }
        if self.n_test == 0 {
            return bad("n_test must be positive".into());
        }
        if !self.image_size.is_multiple_of(4) {
            return bad(format!("image_size {} must be divisible by 4", self.image_size));
        }
        if self.annotated_count > self.num_categories {
            return bad(format!(
                "annotated_count {} exceeds num_categories {}",
                self.annotated_count, self.num_categories
            ));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("lr_backbone", self.lr_backbone),
            ("lr_heads", self.lr_heads),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        self.scene_spec(self.data_seed)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.model_config().validate()
    }

    pub fn scene_spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            num_categories: self.num_categories,
            image_size: self.image_size,
            max_count: self.max_count,
            zero_probability: self.zero_probability,
            glyphs: default_glyphs(self.num_categories),
            glyph_radius: self.glyph_radius,
            min_separation: self.min_separation,
            seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_dim: self.feature_dim,
            density_scale: self.density_scale.unwrap_or(default_density_scale(self.framework)),
            init_seed: self.seed,
            ..ModelConfig::new(self.framework, self.num_categories)
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"lambda": 0.1, "lamda": 0.2}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"));
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"framework": "rlc", "t_tilde": 3}"#).unwrap();
        assert_eq!(cfg.framework, Framework::Rlc);
        assert_eq!(cfg.t_tilde, 3);
        assert_eq!(cfg.batch_size, 16);
    }

    #[test]
    fn max_count_must_cover_beyond_range() {
        let cfg = RunConfig {
            max_count: 6,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: Some("/tmp/x".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            lambda: 0.0,
            ..a.clone()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
