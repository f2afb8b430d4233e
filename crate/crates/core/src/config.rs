//! Run configuration.
//!
//! A config file is a flat key-value TOML document. Unset keys fall back to the
//! selected profile (`paper` unless the file sets `profile = "toy"`), and any
//! key can be overridden by an `EFFZERO_<KEY>` environment variable.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: &'static str, reason: String },
    #[error("unknown profile `{0}` (expected toy or paper)")]
    UnknownProfile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    Toy,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "toy" => Ok(Profile::Toy),
            "paper" => Ok(Profile::Paper),
            other => Err(ConfigError::UnknownProfile(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepresentationKind {
    /// Flattened frames through an MLP trunk, for tiny grids.
    Mlp,
    /// Two 3×3 convolutions and a residual block, flattened to the latent.
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Serial,
    Parallel,
}

/// Every hyperparameter of a run. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub env: String,
    pub env_size: usize,
    pub frames_stacked: usize,
    pub reward_clipping: bool,

    #[serde(deserialize_with = "number_or_power")]
    pub discount: f64,
    pub unroll_steps: usize,
    pub td_steps: usize,
    pub num_simulations: usize,
    pub uct_c1: f64,
    pub uct_c2: f64,
    pub dirichlet_alpha: f64,
    pub dirichlet_frac: f64,
    pub softminmax_eps: f64,
    pub horizon_tau: f64,
    pub lstm_reset_horizon: usize,

    pub value_prefix_loss_coeff: f64,
    pub policy_loss_coeff: f64,
    pub value_loss_coeff: f64,
    pub consistency_loss_coeff: f64,
    pub weight_decay: f64,

    pub priority_alpha: f64,
    pub priority_beta_start: f64,
    pub priority_beta_end: f64,

    pub lr_init: f64,
    pub lr_decayed: f64,
    pub lr_decay_steps: usize,
    pub momentum: f64,
    pub grad_clip_norm: f64,
    pub dynamics_grad_scale: bool,

    pub batch_size: usize,
    pub training_steps: usize,
    pub env_steps_budget: usize,
    pub env_steps_per_train_step: f64,
    pub min_replay_size: usize,
    pub selfplay_model_interval: usize,
    pub target_model_interval: usize,
    pub segment_length: usize,
    pub reanalyze_policy_ratio: f64,
    pub temperature_decay_points: Vec<f64>,
    pub temperature_values: Vec<f64>,

    pub support_half_width: f64,
    pub support_bins: usize,

    pub representation: RepresentationKind,
    pub latent_dim: usize,
    pub repr_hidden: usize,
    pub conv_planes: usize,
    pub head_hidden: usize,
    pub lstm_hidden: usize,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub predictor_hidden: usize,

    pub augment_shift: usize,
    pub augment_intensity: f64,

    pub seed: u64,
    pub pipeline_mode: PipelineMode,
    pub actors: usize,
    pub selfplay_envs: usize,
    pub context_workers: usize,
    pub batch_workers: usize,
    pub queue_capacity: usize,

    pub eval_episodes: usize,
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    pub log_interval: usize,

    pub use_consistency: bool,
    pub use_value_prefix: bool,
    pub use_off_policy_correction: bool,
    pub use_augmentation: bool,
}

fn number_or_power<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Int(i64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Int(x) => Ok(x as f64),
        Raw::Text(s) => parse_power(&s).ok_or_else(|| serde::de::Error::custom(format!("expected a number or `base^exp`, got `{s}`"))),
    }
}

/// Parses `x` or `base^exp`.
fn parse_power(s: &str) -> Option<f64> {
    match s.split_once('^') {
        Some((b, e)) => Some(b.trim().parse::<f64>().ok()?.powf(e.trim().parse::<f64>().ok()?)),
        None => s.trim().parse().ok(),
    }
}

impl RunConfig {
    /// Hyperparameters at Atari scale.
    pub fn paper() -> Self {
        RunConfig {
            profile: Profile::Paper,
            env: "catcher".into(),
            env_size: 5,
            frames_stacked: 4,
            reward_clipping: true,
            discount: 0.997f64.powi(4),
            unroll_steps: 5,
            td_steps: 5,
            num_simulations: 50,
            uct_c1: 1.25,
            uct_c2: 19652.0,
            dirichlet_alpha: 0.3,
            dirichlet_frac: 0.25,
            softminmax_eps: 0.01,
            horizon_tau: 0.3,
            lstm_reset_horizon: 5,
            value_prefix_loss_coeff: 1.0,
            policy_loss_coeff: 1.0,
            value_loss_coeff: 0.25,
            consistency_loss_coeff: 2.0,
            weight_decay: 1e-4,
            priority_alpha: 0.6,
            priority_beta_start: 0.4,
            priority_beta_end: 1.0,
            lr_init: 0.2,
            lr_decayed: 0.02,
            lr_decay_steps: 100_000,
            momentum: 0.9,
            grad_clip_norm: 5.0,
            dynamics_grad_scale: false,
            batch_size: 256,
            training_steps: 120_000,
            env_steps_budget: 100_000,
            env_steps_per_train_step: 1.0,
            min_replay_size: 2000,
            selfplay_model_interval: 100,
            target_model_interval: 200,
            segment_length: 400,
            reanalyze_policy_ratio: 0.99,
            temperature_decay_points: vec![0.5, 0.75],
            temperature_values: vec![1.0, 0.5, 0.25],
            support_half_width: 300.0,
            support_bins: 601,
            representation: RepresentationKind::Conv,
            latent_dim: 64,
            repr_hidden: 128,
            conv_planes: 32,
            head_hidden: 32,
            lstm_hidden: 512,
            projection_hidden: 512,
            projection_dim: 1024,
            predictor_hidden: 512,
            augment_shift: 4,
            augment_intensity: 0.05,
            seed: 0,
            pipeline_mode: PipelineMode::Serial,
            actors: 1,
            selfplay_envs: 1,
            context_workers: 1,
            batch_workers: 1,
            queue_capacity: 8,
            eval_episodes: 32,
            eval_interval: 10_000,
            checkpoint_interval: 10_000,
            log_interval: 1,
            use_consistency: true,
            use_value_prefix: true,
            use_off_policy_correction: true,
            use_augmentation: true,
        }
    }

    /// Desk-scale profile: same algorithm, budgets small enough for a laptop.
    pub fn toy() -> Self {
        RunConfig {
            profile: Profile::Toy,
            reward_clipping: false,
            training_steps: 20_000,
            env_steps_budget: 20_000,
            batch_size: 64,
            num_simulations: 25,
            segment_length: 50,
            support_half_width: 20.0,
            support_bins: 41,
            latent_dim: 64,
            lstm_hidden: 64,
            projection_hidden: 64,
            projection_dim: 128,
            predictor_hidden: 64,
            representation: RepresentationKind::Mlp,
            lr_init: 0.02,
            lr_decayed: 0.002,
            // 100k of 120k, scaled to 20k
            lr_decay_steps: 16_667,
            min_replay_size: 200,
            selfplay_envs: 8,
            eval_interval: 1_000,
            checkpoint_interval: 5_000,
            use_augmentation: false,
            augment_shift: 1,
            ..RunConfig::paper()
        }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Toy => RunConfig::toy(),
            Profile::Paper => RunConfig::paper(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &'static str, reason: impl Into<String>) -> Result<(), ConfigError> {
            Err(ConfigError::Invalid {
                key,
                reason: reason.into(),
            })
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount", format!("{} not in (0, 1)", self.discount));
        }
        for (key, v) in [
            ("td_steps", self.td_steps),
            ("unroll_steps", self.unroll_steps),
            ("lstm_reset_horizon", self.lstm_reset_horizon),
            ("num_simulations", self.num_simulations),
            ("batch_size", self.batch_size),
            ("frames_stacked", self.frames_stacked),
            ("segment_length", self.segment_length),
            ("training_steps", self.training_steps),
            ("latent_dim", self.latent_dim),
            ("queue_capacity", self.queue_capacity),
            ("selfplay_envs", self.selfplay_envs),
            ("lr_decay_steps", self.lr_decay_steps),
            ("env_size", self.env_size),
        ] {
            if v < 1 {
                return bad(key, "must be at least 1");
            }
        }
        if self.pipeline_mode == PipelineMode::Parallel {
            for (key, v) in [
                ("actors", self.actors),
                ("context_workers", self.context_workers),
                ("batch_workers", self.batch_workers),
            ] {
                if v < 1 {
                    return bad(key, "must be at least 1 in parallel mode");
                }
            }
        }
        if !(0.0..=1.0).contains(&self.dirichlet_frac) {
            return bad("dirichlet_frac", format!("{} not in [0, 1]", self.dirichlet_frac));
        }
        if self.dirichlet_alpha <= 0.0 {
            return bad("dirichlet_alpha", "must be positive");
        }
        if self.softminmax_eps <= 0.0 {
            return bad("softminmax_eps", "must be positive");
        }
        if self.horizon_tau <= 0.0 {
            return bad("horizon_tau", "must be positive");
        }
        if self.support_bins < 3 || self.support_bins % 2 == 0 {
            return bad("support_bins", format!("{} must be odd and at least 3", self.support_bins));
        }
        if self.support_half_width <= 0.0 {
            return bad("support_half_width", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.reanalyze_policy_ratio) {
            return bad("reanalyze_policy_ratio", "must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.priority_beta_start) || !(0.0..=1.0).contains(&self.priority_beta_end) {
            return bad("priority_beta_start", "beta endpoints must be in [0, 1]");
        }
        if self.priority_alpha < 0.0 {
            return bad("priority_alpha", "must be non-negative");
        }
        if self.uct_c2 <= 0.0 {
            return bad("uct_c2", "must be positive");
        }
        if self.env_steps_per_train_step <= 0.0 {
            return bad("env_steps_per_train_step", "must be positive");
        }
        let points = &self.temperature_decay_points;
        if points.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return bad("temperature_decay_points", "points must lie in (0, 1)");
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return bad("temperature_decay_points", "points must be strictly increasing");
        }
        if self.temperature_values.len() != points.len() + 1 {
            return bad("temperature_values", "needs one more value than decay points");
        }
        if self.temperature_values.iter().any(|t| *t <= 0.0) {
            return bad("temperature_values", "temperatures must be positive");
        }
        if self.lr_init <= 0.0 || self.lr_decayed <= 0.0 {
            return bad("lr_init", "learning rates must be positive");
        }
        if self.grad_clip_norm <= 0.0 {
            return bad("grad_clip_norm", "must be positive");
        }
        if self.augment_intensity < 0.0 {
            return bad("augment_intensity", "must be non-negative");
        }
        Ok(())
    }

    /// Parses a document, applying it over the profile it names.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self, ConfigError> {
        let profile = match table.get("profile") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(ConfigError::Parse(format!("profile must be a string, got {other}"))),
            None => Profile::Paper,
        };
        let base = RunConfig::for_profile(profile);
        let mut merged = toml::Table::try_from(&base).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in table {
            if !merged.contains_key(&k) {
                return Err(ConfigError::Parse(format!("unknown key `{k}`")));
            }
            merged.insert(k, v);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `EFFZERO_<KEY>` overrides from an iterator of environment pairs.
    pub fn with_overrides<I>(self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = toml::Table::try_from(&self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut changed = false;
        for (name, raw) in vars {
            let Some(key) = name.strip_prefix("EFFZERO_") else { continue };
            let key = key.to_ascii_lowercase();
            if !table.contains_key(&key) {
                return Err(ConfigError::Parse(format!("unknown override `{name}`")));
            }
            let value = parse_override(&raw);
            table.insert(key, value);
            changed = true;
        }
        if !changed {
            return Ok(self);
        }
        // the profile cannot be switched by an override; keep the current one
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the serialized config, embedded in checkpoint metadata.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_toml_string().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Learning rate after `step` learner steps: one decade per decay interval.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let drops = (step / self.lr_decay_steps) as i32;
        self.lr_init * (self.lr_decayed / self.lr_init).powi(drops)
    }

    /// Importance-sampling exponent, linear in learner steps.
    pub fn priority_beta(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.training_steps as f64).min(1.0);
        self.priority_beta_start + (self.priority_beta_end - self.priority_beta_start) * frac
    }

    /// Visit-count temperature at a given point of training.
    pub fn temperature(&self, step: usize) -> f64 {
        let progress = step as f64 / self.training_steps as f64;
        let idx = self
            .temperature_decay_points
            .iter()
            .take_while(|p| progress >= **p)
            .count();
        self.temperature_values[idx]
    }
}

fn parse_override(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Reads a config file and applies environment overrides.
pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)?;
    RunConfig::from_toml_str(&text)?.with_overrides(std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_paper_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.num_simulations, 50);
        assert_eq!(cfg.uct_c1, 1.25);
        assert_eq!(cfg.uct_c2, 19652.0);
        assert_eq!(cfg.td_steps, 5);
        assert_eq!(cfg.unroll_steps, 5);
        assert_eq!(cfg.policy_loss_coeff, 1.0);
        assert_eq!(cfg.value_loss_coeff, 0.25);
        assert_eq!(cfg.consistency_loss_coeff, 2.0);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert_eq!(cfg.priority_alpha, 0.6);
        assert_eq!((cfg.priority_beta_start, cfg.priority_beta_end), (0.4, 1.0));
        assert_eq!(cfg.lstm_reset_horizon, 5);
        assert_eq!(cfg.dirichlet_alpha, 0.3);
        assert_eq!(cfg.dirichlet_frac, 0.25);
        assert_eq!(cfg.softminmax_eps, 0.01);
        assert_eq!(cfg.horizon_tau, 0.3);
        assert_eq!((cfg.lr_init, cfg.lr_decayed), (0.2, 0.02));
        assert_eq!(cfg.grad_clip_norm, 5.0);
        assert_eq!(cfg.reanalyze_policy_ratio, 0.99);
        assert_eq!(cfg.segment_length, 400);
        assert_eq!(cfg.support_bins, 601);
        assert_eq!(cfg.min_replay_size, 2000);
        assert_eq!((cfg.selfplay_model_interval, cfg.target_model_interval), (100, 200));
        assert_eq!(cfg, RunConfig::paper());
    }

    #[test]
    fn discount_power_expression() {
        let cfg = RunConfig::from_toml_str("discount = \"0.997^4\"").unwrap();
        assert!((cfg.discount - 0.98806).abs() < 1e-5);
        let cfg = RunConfig::from_toml_str("discount = 0.9").unwrap();
        assert_eq!(cfg.discount, 0.9);
    }

    #[test]
    fn invalid_dirichlet_frac_names_key() {
        let err = RunConfig::from_toml_str("dirichlet_frac = 1.5").unwrap_err();
        assert!(err.to_string().contains("dirichlet_frac"), "{err}");
    }

    #[test]
    fn invariants_are_checked() {
        for (doc, key) in [
            ("td_steps = 0", "td_steps"),
            ("unroll_steps = 0", "unroll_steps"),
            ("lstm_reset_horizon = 0", "lstm_reset_horizon"),
            ("softminmax_eps = 0.0", "softminmax_eps"),
            ("support_bins = 40", "support_bins"),
            ("support_bins = 1", "support_bins"),
            ("temperature_decay_points = [0.75, 0.5]", "temperature_decay_points"),
            ("temperature_decay_points = [0.0, 0.5]", "temperature_decay_points"),
            ("discount = 1.0", "discount"),
        ] {
            let err = RunConfig::from_toml_str(doc).unwrap_err();
            assert!(err.to_string().contains(key), "{doc}: {err}");
        }
    }

    #[test]
    fn toy_profile_selected_from_file() {
        let cfg = RunConfig::from_toml_str("profile = \"toy\"\nseed = 3").unwrap();
        assert_eq!(cfg.training_steps, 20_000);
        assert_eq!(cfg.env_steps_budget, 20_000);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.num_simulations, 25);
        assert_eq!(cfg.segment_length, 50);
        assert_eq!((cfg.support_half_width, cfg.support_bins), (20.0, 41));
        assert_eq!(cfg.latent_dim, 64);
        assert_eq!((cfg.lr_init, cfg.lr_decayed), (0.02, 0.002));
        assert_eq!(cfg.seed, 3);
        // untouched paper values carry over
        assert_eq!(cfg.uct_c1, 1.25);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(RunConfig::from_toml_str("nonsense = 1").is_err());
        assert!(RunConfig::from_toml_str("profile = \"huge\"").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = RunConfig::toy();
        cfg.seed = 17;
        cfg.discount = 0.95;
        cfg.use_consistency = false;
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml_str(&RunConfig::paper().to_toml_string()).unwrap(), RunConfig::paper());
    }

    #[test]
    fn env_overrides() {
        let cfg = RunConfig::toy()
            .with_overrides(vec![
                ("EFFZERO_NUM_SIMULATIONS".to_string(), "7".to_string()),
                ("EFFZERO_ENV".to_string(), "deepsea".to_string()),
                ("EFFZERO_USE_CONSISTENCY".to_string(), "false".to_string()),
                ("PATH".to_string(), "/bin".to_string()),
            ])
            .unwrap();
        assert_eq!(cfg.num_simulations, 7);
        assert_eq!(cfg.env, "deepsea");
        assert!(!cfg.use_consistency);
        let err = RunConfig::toy()
            .with_overrides(vec![("EFFZERO_DIRICHLET_FRAC".to_string(), "2".to_string())])
            .unwrap_err();
        assert!(err.to_string().contains("dirichlet_frac"));
    }

    #[test]
    fn schedules() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.learning_rate(0), 0.2);
        assert_eq!(cfg.learning_rate(99_999), 0.2);
        assert!((cfg.learning_rate(100_000) - 0.02).abs() < 1e-15);
        assert_eq!(cfg.priority_beta(0), 0.4);
        assert!((cfg.priority_beta(60_000) - 0.7).abs() < 1e-12);
        assert_eq!(cfg.priority_beta(500_000), 1.0);
        assert_eq!(cfg.temperature(0), 1.0);
        assert_eq!(cfg.temperature(59_999), 1.0);
        assert_eq!(cfg.temperature(60_000), 0.5);
        assert_eq!(cfg.temperature(90_000), 0.25);
        let toy = RunConfig::toy();
        assert!((toy.learning_rate(toy.lr_decay_steps) - toy.lr_init / 10.0).abs() < 1e-15);
    }
}
