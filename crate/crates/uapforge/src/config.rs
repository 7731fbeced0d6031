//! Run configuration: TOML schema, strict key validation, defaults, and
//! resolution into engine-level configs.
//!
//! Every knob has a default reproducing the reference settings
//! (ε_I = 12/255, ε_T = 1, M_I = 100, M_T = 15, batch 16, β1 = 0.8,
//! β2 = 0.2, γ1 = 0.9, γ2 = 0.1, α = ε_I/M_I·1.25) except `manifest` and
//! `adapter`, which the user must supply. Unknown keys are rejected with a
//! nearest-key suggestion, so a typo can never silently fall back to a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{CropResizeParams, ScMixParams};
use crate::error::{Result, UapError};
use crate::objective::DivergenceConfig;
use crate::optimizer::{AttackConfig, FutureMode, GpCadence};
use crate::text_attack::{TextMiningConfig, TriggerPolicy};

pub const DEFAULT_EPSILON_I: f32 = 12.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adapter: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "epsilon_I", default = "d_epsilon_i")]
    pub epsilon_i: f32,
    #[serde(rename = "epsilon_T", default = "d_epsilon_t")]
    pub epsilon_t: usize,
    /// Defaults to ε_I / iterations · 1.25 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default = "d_text_iterations")]
    pub text_iterations: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub augment: AugmentSection,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default)]
    pub crop: CropSection,
    #[serde(default)]
    pub momentum: MomentumSection,
    #[serde(default)]
    pub text: TextSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn d_epsilon_i() -> f32 {
    DEFAULT_EPSILON_I
}
fn d_epsilon_t() -> usize {
    1
}
fn d_iterations() -> usize {
    100
}
fn d_text_iterations() -> usize {
    15
}
fn d_batch_size() -> usize {
    16
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            adapter: None,
            seed: 0,
            epsilon_i: d_epsilon_i(),
            epsilon_t: d_epsilon_t(),
            step_size: None,
            iterations: d_iterations(),
            text_iterations: d_text_iterations(),
            batch_size: d_batch_size(),
            augment: AugmentSection::default(),
            loss: LossSection::default(),
            crop: CropSection::default(),
            momentum: MomentumSection::default(),
            text: TextSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSection {
    pub enabled: bool,
    pub alpha_mix: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub crop_lo: f64,
    pub crop_hi: f64,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            enabled: true,
            alpha_mix: 1.0,
            beta1: 0.8,
            beta2: 0.2,
            crop_lo: 0.5,
            crop_hi: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub temperature: f64,
    pub use_local: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            temperature: 1.0,
            use_local: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropSection {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub per_sample: bool,
}

impl Default for CropSection {
    fn default() -> Self {
        CropSection {
            scale_lo: 0.5,
            scale_hi: 1.0,
            per_sample: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FutureModeCfg {
    Mean,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpCadenceCfg {
    Epoch,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentumSection {
    pub gamma1: f64,
    pub gamma2: f64,
    pub lookahead: usize,
    pub future_sign: f64,
    pub future_mode: FutureModeCfg,
    pub gp_cadence: GpCadenceCfg,
}

impl Default for MomentumSection {
    fn default() -> Self {
        MomentumSection {
            gamma1: 0.9,
            gamma2: 0.1,
            lookahead: 2,
            future_sign: -1.0,
            future_mode: FutureModeCfg::Mean,
            gp_cadence: GpCadenceCfg::Epoch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextSection {
    pub top_k: usize,
    pub sample_count: usize,
    pub policy: TriggerPolicy,
}

impl Default for TextSection {
    fn default() -> Self {
        TextSection {
            top_k: 3,
            sample_count: 32,
            policy: TriggerPolicy::Importance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { ks: vec![1, 5, 10] }
    }
}

const TOP_KEYS: &[&str] = &[
    "manifest",
    "adapter",
    "seed",
    "epsilon_I",
    "epsilon_T",
    "step_size",
    "iterations",
    "text_iterations",
    "batch_size",
    "augment",
    "loss",
    "crop",
    "momentum",
    "text",
    "eval",
];
const AUGMENT_KEYS: &[&str] = &[
    "enabled",
    "alpha_mix",
    "beta1",
    "beta2",
    "crop_lo",
    "crop_hi",
];
const LOSS_KEYS: &[&str] = &["temperature", "use_local"];
const CROP_KEYS: &[&str] = &["scale_lo", "scale_hi", "per_sample"];
const MOMENTUM_KEYS: &[&str] = &[
    "gamma1",
    "gamma2",
    "lookahead",
    "future_sign",
    "future_mode",
    "gp_cadence",
];
const TEXT_KEYS: &[&str] = &["top_k", "sample_count", "policy"];
const EVAL_KEYS: &[&str] = &["ks"];

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            cur[j] = (prev[j] + 1).min(cur[j - 1] + 1).min(prev[j - 1] + cost);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str, candidates: &[&str]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (levenshtein(key, c), *c))
        .min()
        .filter(|(d, _)| *d <= 1 + key.len() / 3)
        .map(|(_, c)| c.to_string())
}

fn check_table(
    table: &toml::map::Map<String, toml::Value>,
    allowed: &[&str],
    prefix: &str,
    offending: &mut Vec<String>,
) {
    for key in table.keys() {
        if !allowed.contains(&key.as_str()) {
            let mut msg = format!("unknown key '{prefix}{key}'");
            if let Some(s) = suggest(key, allowed) {
                msg.push_str(&format!(" (did you mean '{prefix}{s}'?)"));
            }
            offending.push(msg);
        }
    }
}

/// Validate every key in a parsed TOML document against the schema,
/// collecting all offenders before failing.
pub fn validate_keys(value: &toml::Value) -> Result<()> {
    let table = value
        .as_table()
        .ok_or_else(|| UapError::Config("config root must be a table".into()))?;
    let mut offending = Vec::new();
    check_table(table, TOP_KEYS, "", &mut offending);
    let sections: &[(&str, &[&str])] = &[
        ("augment", AUGMENT_KEYS),
        ("loss", LOSS_KEYS),
        ("crop", CROP_KEYS),
        ("momentum", MOMENTUM_KEYS),
        ("text", TEXT_KEYS),
        ("eval", EVAL_KEYS),
    ];
    for (name, keys) in sections {
        if let Some(sub) = table.get(*name).and_then(|v| v.as_table()) {
            check_table(sub, keys, &format!("{name}."), &mut offending);
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(UapError::Config(offending.join("; ")))
    }
}

/// Parse a config file with strict key validation.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UapError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_run_config(&text)
}

pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let value: toml::Value = toml::from_str(text).map_err(|e| UapError::Config(e.to_string()))?;
    validate_keys(&value)?;
    toml::from_str(text).map_err(|e| UapError::Config(e.to_string()))
}

/// Fully materialized configuration: seed and step size resolved, manifest
/// and adapter present.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub run: RunConfig,
    pub manifest: PathBuf,
    pub adapter: String,
}

impl RunConfig {
    /// Resolve CLI/env overrides and required fields. `seed_override` wins
    /// over the environment, which wins over the file.
    pub fn resolve(
        mut self,
        manifest: Option<PathBuf>,
        adapter: Option<String>,
        seed_override: Option<u64>,
        env_seed: Option<u64>,
    ) -> Result<ResolvedConfig> {
        if let Some(m) = manifest {
            self.manifest = Some(m.display().to_string());
        }
        if let Some(a) = adapter {
            self.adapter = Some(a);
        }
        if let Some(s) = seed_override.or(env_seed) {
            self.seed = s;
        }
        if self.step_size.is_none() {
            self.step_size = Some(f64::from(self.epsilon_i) / self.iterations as f64 * 1.25);
        }
        let manifest = PathBuf::from(self.manifest.clone().ok_or_else(|| {
            UapError::Config("manifest is required (config key or --manifest)".into())
        })?);
        let adapter = self.adapter.clone().ok_or_else(|| {
            UapError::Config("adapter is required (config key or --adapter)".into())
        })?;
        Ok(ResolvedConfig {
            run: self,
            manifest,
            adapter,
        })
    }
}

impl ResolvedConfig {
    pub fn attack_config(&self) -> Result<AttackConfig> {
        let r = &self.run;
        let cfg = AttackConfig {
            epsilon_i: r.epsilon_i,
            step_size: r.step_size.expect("resolved"),
            iterations: r.iterations,
            batch_size: r.batch_size,
            seed: r.seed,
            gamma1: r.momentum.gamma1,
            gamma2: r.momentum.gamma2,
            lookahead: r.momentum.lookahead,
            future_sign: r.momentum.future_sign,
            future_mode: match r.momentum.future_mode {
                FutureModeCfg::Mean => FutureMode::Mean,
                FutureModeCfg::Final => FutureMode::Final,
            },
            gp_cadence: match r.momentum.gp_cadence {
                GpCadenceCfg::Epoch => GpCadence::PerEpoch,
                GpCadenceCfg::Batch => GpCadence::PerBatch,
            },
            augment_enabled: r.augment.enabled,
            use_local: r.loss.use_local,
            scmix: ScMixParams::new(
                r.augment.alpha_mix,
                r.augment.beta1,
                r.augment.beta2,
                (r.augment.crop_lo, r.augment.crop_hi),
            )?,
            crop: CropResizeParams::new((r.crop.scale_lo, r.crop.scale_hi))?,
            crop_per_sample: r.crop.per_sample,
            divergence: DivergenceConfig::new(r.loss.temperature)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mining_config(&self) -> Result<TextMiningConfig> {
        Ok(TextMiningConfig {
            top_k: self.run.text.top_k,
            sample_count: self.run.text.sample_count,
            passes: self.run.text_iterations,
            seed: self.run.seed,
            divergence: DivergenceConfig::new(self.run.loss.temperature)?,
        })
    }

    /// TOML snapshot of the resolved configuration.
    pub fn snapshot_toml(&self) -> Result<String> {
        toml::to_string_pretty(&self.run).map_err(|e| UapError::Config(e.to_string()))
    }
}
