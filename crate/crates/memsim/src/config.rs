//! Declarative run configuration: TOML schema, resolution, and hashing.
//!
//! Configs are strict — unknown keys are rejected with the offending key and
//! its location. Resolution normalizes mode-implied settings (`grpo_baseline`
//! forces `p_local = 0`; `no_curriculum` collapses the stages into one at the
//! maximum horizon with the same total epochs) before the config hash is
//! computed, so the hash names what actually ran.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use memsim_core::logo_grpo::{AnchorMode, LossAggregation, ObjectiveConfig, RolloutConfig};
use memsim_core::policy::ManagerConfig;
use memsim_core::reward::RetrievalConfig;
use memsim_core::synth_env::EnvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Logo,
    GrpoBaseline,
    NoCurriculum,
    TokenLevel,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Logo => "logo",
            Mode::GrpoBaseline => "grpo_baseline",
            Mode::NoCurriculum => "no_curriculum",
            Mode::TokenLevel => "token_level",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    Uniform,
    Best,
    First,
}

impl From<Anchor> for AnchorMode {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::Uniform => AnchorMode::Uniform,
            Anchor::Best => AnchorMode::Best,
            Anchor::First => AnchorMode::First,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvSection {
    pub sessions: usize,
    pub chunks_per_session: usize,
    pub facts_per_session: usize,
    pub distractor_rate: f64,
    pub evolution_rate: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            sessions: 32,
            chunks_per_session: 4,
            facts_per_session: 2,
            distractor_rate: 0.5,
            evolution_rate: 0.5,
        }
    }
}

impl From<&EnvSection> for EnvConfig {
    fn from(s: &EnvSection) -> Self {
        EnvConfig {
            sessions: s.sessions,
            chunks_per_session: s.chunks_per_session,
            facts_per_session: s.facts_per_session,
            distractor_rate: s.distractor_rate,
            evolution_rate: s.evolution_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    /// Global rollouts per batch (n).
    pub n_global: usize,
    /// Local rerollouts per selected session (m).
    pub m_local: usize,
    pub p_local: f64,
    /// Memory budget ratio for the compression penalty.
    pub alpha: f64,
    pub lambda_comp: f64,
    /// Advantage normalization guard.
    pub epsilon: f64,
    pub eps_clip: f64,
    pub dual_clip_c: f64,
    pub beta_ent: f64,
    pub beta_kl: f64,
    pub learning_rate: f64,
    /// Scale of the uniform random parameter initialization.
    pub init_scale: f64,
    pub anchor: Anchor,
    /// Generation-budget cap carried over from LLM-scale training; the
    /// analytic policy never truncates, so this knob is inert.
    pub max_memory_turns: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            n_global: 16,
            m_local: 4,
            p_local: 0.5,
            alpha: 0.5,
            lambda_comp: 0.3,
            epsilon: 1e-8,
            eps_clip: 0.2,
            dual_clip_c: 3.0,
            beta_ent: 0.001,
            beta_kl: 0.001,
            learning_rate: 0.5,
            init_scale: 0.1,
            anchor: Anchor::Uniform,
            max_memory_turns: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalSection {
    pub top_k: usize,
    pub threshold: f64,
    /// Manager candidate count per fact.
    pub candidates: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            top_k: 30,
            threshold: 0.3,
            candidates: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumStage {
    pub max_sessions: usize,
    pub epochs: usize,
}

fn default_stages() -> Vec<CurriculumStage> {
    vec![
        CurriculumStage {
            max_sessions: 8,
            epochs: 10,
        },
        CurriculumStage {
            max_sessions: 16,
            epochs: 5,
        },
        CurriculumStage {
            max_sessions: 32,
            epochs: 5,
        },
    ]
}

/// The on-disk schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub env: EnvSection,
    pub optim: OptimSection,
    pub retrieval: RetrievalSection,
    pub stages: Vec<CurriculumStage>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Logo,
            seed: 7,
            env: EnvSection::default(),
            optim: OptimSection::default(),
            retrieval: RetrievalSection::default(),
            stages: default_stages(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read config: {e}"),
            ConfigError::Parse(msg) => write!(f, "config parse error: {msg}"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(ConfigError::Io)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Normalizes mode-implied settings and checks every invariant.
    pub fn resolve(mut self) -> Result<ResolvedConfig, ConfigError> {
        match self.mode {
            Mode::GrpoBaseline => {
                self.optim.p_local = 0.0;
            }
            Mode::NoCurriculum => {
                let max = self
                    .stages
                    .iter()
                    .map(|s| s.max_sessions)
                    .max()
                    .unwrap_or(self.env.sessions);
                let epochs = self.stages.iter().map(|s| s.epochs).sum();
                self.stages = vec![CurriculumStage {
                    max_sessions: max,
                    epochs,
                }];
            }
            Mode::Logo | Mode::TokenLevel => {}
        }
        self.validate()?;
        Ok(ResolvedConfig(self))
    }

    fn validate(&self) -> Result<(), ConfigError> {
        EnvConfig::from(&self.env)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.stages.is_empty() {
            return Err(ConfigError::Invalid("stages must be non-empty".into()));
        }
        if self.stages.windows(2).any(|w| w[0].max_sessions > w[1].max_sessions) {
            return Err(ConfigError::Invalid(
                "stage max_sessions must be non-decreasing".into(),
            ));
        }
        if let Some(stage) = self
            .stages
            .iter()
            .find(|s| s.max_sessions > self.env.sessions)
        {
            return Err(ConfigError::Invalid(format!(
                "stage horizon {} exceeds env.sessions {}",
                stage.max_sessions, self.env.sessions
            )));
        }
        if self.stages.iter().any(|s| s.epochs == 0) {
            return Err(ConfigError::Invalid("stage epochs must be >= 1".into()));
        }
        if self.optim.n_global < 2 {
            return Err(ConfigError::Invalid("n_global must be >= 2".into()));
        }
        if self.optim.m_local < 2 {
            return Err(ConfigError::Invalid("m_local must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.optim.p_local) {
            return Err(ConfigError::Invalid("p_local must lie in [0, 1]".into()));
        }
        if !(self.optim.eps_clip > 0.0 && self.optim.eps_clip < 1.0) {
            return Err(ConfigError::Invalid("eps_clip must lie in (0, 1)".into()));
        }
        if self.optim.dual_clip_c <= 1.0 {
            return Err(ConfigError::Invalid("dual_clip_c must exceed 1".into()));
        }
        for (name, v) in [
            ("alpha", self.optim.alpha),
            ("lambda_comp", self.optim.lambda_comp),
            ("epsilon", self.optim.epsilon),
            ("beta_ent", self.optim.beta_ent),
            ("beta_kl", self.optim.beta_kl),
            ("learning_rate", self.optim.learning_rate),
            ("init_scale", self.optim.init_scale),
            ("threshold", self.retrieval.threshold),
        ] {
            if !v.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} must be finite")));
            }
        }
        if self.optim.alpha < 0.0 {
            return Err(ConfigError::Invalid("alpha must be >= 0".into()));
        }
        if self.retrieval.top_k == 0 || self.retrieval.candidates == 0 {
            return Err(ConfigError::Invalid(
                "retrieval top_k and candidates must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A validated, mode-normalized configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig(TrainConfig);

impl std::ops::Deref for ResolvedConfig {
    type Target = TrainConfig;

    fn deref(&self) -> &TrainConfig {
        &self.0
    }
}

impl ResolvedConfig {
    /// SHA-256 of the canonical serialization, truncated to 16 hex chars.
    /// Field order comes from the struct definition, so the hash is stable
    /// under reordering in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.0).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig::from(&self.env)
    }

    pub fn retrieval_config(&self) -> RetrievalConfig {
        RetrievalConfig {
            top_k: self.retrieval.top_k,
            threshold: self.retrieval.threshold,
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            manager: ManagerConfig {
                candidates: self.retrieval.candidates,
                threshold: self.retrieval.threshold,
            },
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            eps_clip: self.optim.eps_clip,
            dual_clip_c: self.optim.dual_clip_c,
            beta_ent: self.optim.beta_ent,
            beta_kl: self.optim.beta_kl,
            aggregation: if self.mode == Mode::TokenLevel {
                LossAggregation::TokenLevel
            } else {
                LossAggregation::StepNormalized
            },
        }
    }

    pub fn with_seed(&self, seed: u64) -> ResolvedConfig {
        let mut inner = self.0.clone();
        inner.seed = seed;
        ResolvedConfig(inner)
    }
}
