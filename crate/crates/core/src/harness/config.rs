//! Experiment configuration (TOML, `format_version = 1`).
//!
//! Every section is optional and falls back to the defaults below. The config
//! hash is SHA-256 over the canonical JSON form of the fully resolved config
//! (defaults filled in, keys sorted), so comments, key order and spelling out
//! a default never change it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::{ArchKind, PolicyArchitecture, Vocabulary};
use crate::spectrum::ProbeConfig;
use crate::tasks::UniverseConfig;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    /// Master seed; every component seed derives from it.
    pub seed: u64,
    pub universe: UniverseConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub probe: ProbeConfig,
    pub fusion: FusionConfig,
    pub rl: RlConfig,
    pub eval: ProbeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed: 20251016,
            universe: UniverseConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            probe: ProbeConfig::default(),
            fusion: FusionConfig::default(),
            rl: RlConfig::default(),
            eval: ProbeConfig {
                n: 16,
                k: 8,
                temperature: 1.0,
                max_len: 6,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    TabularSoftmax,
    LinearSoftmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub context_length: usize,
    /// Hashed feature buckets (linear only).
    pub feature_dim: usize,
    /// Hashed context rows (tabular only).
    pub rows: usize,
    /// Initial parameters are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::LinearSoftmax,
            context_length: 1,
            feature_dim: 1 << 14,
            rows: 1 << 12,
            init_scale: 0.01,
        }
    }
}

impl PolicyConfig {
    pub fn architecture(&self, vocab: Vocabulary) -> Result<PolicyArchitecture> {
        let kind = match self.kind {
            PolicyKind::TabularSoftmax => ArchKind::TabularSoftmax { rows: self.rows },
            PolicyKind::LinearSoftmax => ArchKind::LinearSoftmax {
                feature_dim: self.feature_dim,
            },
        };
        PolicyArchitecture {
            kind,
            context_length: self.context_length,
            vocab,
        }
        .validated()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Steps on the union of all training splits before the per-subdomain runs.
    pub warmup_steps: usize,
    /// Steps of each per-subdomain specialist run.
    pub steps: usize,
    /// A checkpoint is stored every `checkpoint_every` specialist steps.
    pub checkpoint_every: usize,
    /// Gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr: 20.0,
            batch_size: 32,
            warmup_steps: 100,
            steps: 1000,
            checkpoint_every: 200,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// One weight per subdomain; empty means uniform `1/N`.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Grpo,
    Mgpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlStage {
    pub algorithm: Algorithm,
    /// Entropy-deviation sharpness; ignored by GRPO stages.
    pub lambda: f64,
    pub p0: f64,
    pub epsilon: f64,
    pub group_size: usize,
    pub temperature: f64,
    pub max_len: usize,
    pub steps: usize,
    pub lr: f64,
    pub questions_per_step: usize,
    /// Optimization passes over each rollout batch.
    pub epochs: usize,
    /// KL penalty towards the policy the RL phase started from.
    pub kl_coef: f64,
    pub grad_clip: Option<f64>,
}

impl Default for RlStage {
    fn default() -> Self {
        RlStage {
            algorithm: Algorithm::Mgpo,
            lambda: 1.0,
            p0: 0.5,
            epsilon: 0.2,
            group_size: 8,
            temperature: 1.0,
            max_len: 3,
            steps: 600,
            lr: 60.0,
            questions_per_step: 64,
            epochs: 1,
            kl_coef: 0.0,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub stages: Vec<RlStage>,
    /// Probe-split pass@1/pass@k is recorded every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        // short-then-long response budget
        RlConfig {
            stages: vec![
                RlStage::default(),
                RlStage {
                    max_len: 6,
                    ..RlStage::default()
                },
            ],
            eval_every: 50,
        }
    }
}

fn positive(x: f64) -> bool {
    x > 0.0 && x.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        self.universe.validate()?;
        self.policy.architecture(self.universe.vocabulary()?)?;
        if !(self.policy.init_scale >= 0.0 && self.policy.init_scale.is_finite()) {
            return Err(Error::Config("policy.init_scale must be >= 0".into()));
        }

        let s = &self.sft;
        if !positive(s.lr) || s.batch_size == 0 || s.checkpoint_every == 0 {
            return Err(Error::Config(
                "sft: lr must be > 0, batch_size and checkpoint_every >= 1".into(),
            ));
        }
        if s.steps < s.checkpoint_every {
            return Err(Error::Config(format!(
                "sft.steps {} yields no checkpoint at cadence {}",
                s.steps, s.checkpoint_every
            )));
        }
        if s.grad_clip.is_some_and(|c| !positive(c)) {
            return Err(Error::Config("sft.grad_clip must be > 0".into()));
        }

        self.probe.validate()?;
        self.eval.validate()?;

        let n = self.universe.subdomains.len();
        let w = &self.fusion.weights;
        if !w.is_empty() {
            if w.len() != n {
                return Err(Error::Config(format!(
                    "fusion.weights has {} entries for {n} subdomains",
                    w.len()
                )));
            }
            let sum: f64 = w.iter().sum();
            if w.iter().any(|x| x.is_nan() || *x < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config("fusion.weights must be >= 0 and sum to 1".into()));
            }
        }

        for (i, st) in self.rl.stages.iter().enumerate() {
            let bad = |what: &str| Err(Error::Config(format!("rl.stages[{i}]: {what}")));
            if !(st.lambda >= 0.0 && st.lambda.is_finite()) {
                return bad("lambda must be >= 0");
            }
            if !(st.p0 > 0.0 && st.p0 < 1.0) {
                return bad("p0 must lie in (0, 1)");
            }
            if !(st.epsilon > 0.0 && st.epsilon < 1.0) {
                return bad("epsilon must lie in (0, 1)");
            }
            if st.group_size < 2 {
                return bad("group_size must be >= 2");
            }
            if !positive(st.temperature) || st.max_len == 0 {
                return bad("temperature must be > 0 and max_len >= 1");
            }
            if !positive(st.lr) || st.questions_per_step == 0 || st.epochs == 0 {
                return bad("lr must be > 0, questions_per_step and epochs >= 1");
            }
            if !(st.kl_coef >= 0.0 && st.kl_coef.is_finite()) {
                return bad("kl_coef must be >= 0");
            }
            if st.grad_clip.is_some_and(|c| !positive(c)) {
                return bad("grad_clip must be > 0");
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
