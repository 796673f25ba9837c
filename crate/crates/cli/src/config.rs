//! Run configuration: a strict JSON schema (unknown keys are errors) with a
//! required version field. Every numeric default carries the pipeline's
//! published settings: N = 50 solver steps, guidance 3.5, gate threshold
//! 4.2, mixing ratio 0.9, batch size 32.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lego_core::adapt::MixConfig;
use lego_core::error::{Error, Result};
use lego_core::flow::SolverConfig;
use lego_core::net::OptConfig;
use lego_core::synth::{preset_strong, preset_weak, DegradationSpec};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageSection {
    pub height: usize,
    pub width: usize,
}

impl Default for ImageSection {
    fn default() -> Self {
        Self { height: 32, width: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub n_id_train: usize,
    pub n_id_test: usize,
    pub n_ood_train: usize,
    pub n_ood_test: usize,
    pub n_oracle_clean: usize,
    pub n_oracle_degraded: usize,
    pub generator_modes: usize,
    pub generator_spread: f64,
    pub generator_decay: f64,
    pub weak: DegradationSpec,
    pub strong: DegradationSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_id_train: 2048,
            n_id_test: 256,
            n_ood_train: 512,
            n_ood_test: 256,
            n_oracle_clean: 512,
            n_oracle_degraded: 512,
            generator_modes: 6,
            generator_spread: 0.35,
            generator_decay: 1.25,
            weak: preset_weak(),
            strong: preset_strong(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub k_per_class: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { k_per_class: 8, em_max_iters: 200, em_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateSection {
    pub alpha: f64,
    pub sharpness_weight: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        Self { alpha: 4.2, sharpness_weight: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { iters: 5000, batch_size: 32, lr: 1e-3, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub ratio: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { ratio: 0.9, batch_size: 32, iters: 1000, lr: 5e-4, weight_decay: 0.01 }
    }
}

impl FinetuneSection {
    pub fn mix_config(&self) -> MixConfig {
        MixConfig {
            ratio: self.ratio,
            batch_size: self.batch_size,
            iters: self.iters,
            opt: OptConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub workdir: Option<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub image: ImageSection,
    #[serde(default = "default_basis_d")]
    pub basis_d: usize,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub gate: GateSection,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default = "default_ablate_ratios")]
    pub ablate_ratios: Vec<f64>,
}

fn default_seed() -> u64 {
    42
}

fn default_basis_d() -> usize {
    48
}

fn default_ablate_ratios() -> Vec<f64> {
    vec![1.0, 0.95, 0.9, 0.6, 0.3, 0.0]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            workdir: None,
            seed: default_seed(),
            image: ImageSection::default(),
            basis_d: default_basis_d(),
            data: DataSection::default(),
            oracle: OracleSection::default(),
            solver: SolverConfig::default(),
            gate: GateSection::default(),
            pretrain: TrainSection::default(),
            finetune: FinetuneSection::default(),
            ablate_ratios: default_ablate_ratios(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact { path: path.to_path_buf() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::InvalidArgument(format!(
                "config version {} unsupported; expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.image.height < 8 || self.image.width < 8 {
            return Err(Error::InvalidArgument("image dims must be at least 8x8".into()));
        }
        if self.basis_d == 0 || self.basis_d > self.image.height * self.image.width {
            return Err(Error::InvalidArgument(format!(
                "basis_d {} outside 1..={}",
                self.basis_d,
                self.image.height * self.image.width
            )));
        }
        self.data.weak.validate()?;
        self.data.strong.validate()?;
        self.solver.validate()?;
        if self.data.generator_modes == 0
            || !(self.data.generator_spread > 0.0)
            || !(self.data.generator_decay > 0.0)
        {
            return Err(Error::InvalidArgument("generator settings must be positive".into()));
        }
        if self.oracle.k_per_class == 0 {
            return Err(Error::InvalidArgument("oracle needs k_per_class >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.finetune.ratio) {
            return Err(Error::InvalidArgument(format!(
                "finetune ratio {} outside [0, 1]",
                self.finetune.ratio
            )));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be >= 1".into()));
        }
        if self.ablate_ratios.is_empty()
            || self.ablate_ratios.iter().any(|r| !(0.0..=1.0).contains(r))
        {
            return Err(Error::InvalidArgument("ablate_ratios must be nonempty in [0, 1]".into()));
        }
        if !self.gate.alpha.is_finite() {
            return Err(Error::InvalidArgument("gate alpha must be finite".into()));
        }
        Ok(())
    }

    /// Canonical hash of the resolved configuration (after any seed
    /// override); embedded in every report for auditability.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Workdir resolution order: CLI flag, then the config's `workdir` field,
/// then the LEGO_WORKDIR environment variable, then `./lego-work`.
pub fn resolve_workdir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.workdir {
        return PathBuf::from(p);
    }
    if let Ok(p) = std::env::var("LEGO_WORKDIR") {
        if !p.is_empty() {
            return PathBuf::from(p);
        }
    }
    PathBuf::from("lego-work")
}
