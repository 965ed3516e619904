//! Run configuration: JSON schema, `key=value` overrides, and validation.
//!
//! Unknown keys are hard errors (no silent typos), both in the file and in
//! overrides; override errors suggest the closest known key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moetta_core::bench::TaskSpec;
use moetta_core::tta::Strategy;
use moetta_core::vit::{ReplacementPlan, ViTConfig};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_image_side")]
    pub image_side: usize,
    #[serde(default = "d_channels")]
    pub channels: usize,
    #[serde(default = "d_train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "d_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "d_prototype_seed")]
    pub prototype_seed: u64,
    /// Seed for the per-sample noise of both splits.
    #[serde(default = "d_sample_seed")]
    pub sample_seed: u64,
}

fn d_classes() -> usize {
    10
}
fn d_image_side() -> usize {
    8
}
fn d_channels() -> usize {
    3
}
fn d_train_per_class() -> usize {
    200
}
fn d_test_per_class() -> usize {
    50
}
fn d_prototype_seed() -> u64 {
    7
}
fn d_sample_seed() -> u64 {
    42
}

impl Default for TaskSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TaskSection {
    pub fn spec(&self) -> TaskSpec {
        TaskSpec {
            classes: self.classes,
            image_side: self.image_side,
            channels: self.channels,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            prototype_seed: self.prototype_seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d_patch_side")]
    pub patch_side: usize,
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "d_eps")]
    pub layer_norm_eps: f64,
    #[serde(default)]
    pub two_layer_head: bool,
    #[serde(default = "d_init_seed")]
    pub init_seed: u64,
}

fn d_patch_side() -> usize {
    4
}
fn d_embed_dim() -> usize {
    64
}
fn d_depth() -> usize {
    4
}
fn d_heads() -> usize {
    4
}
fn d_mlp_ratio() -> usize {
    2
}
fn d_eps() -> f64 {
    1e-5
}
fn d_init_seed() -> u64 {
    42
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl ModelSection {
    pub fn vit_config(&self, task: &TaskSection) -> ViTConfig {
        ViTConfig {
            image_side: task.image_side,
            channels: task.channels,
            patch_side: self.patch_side,
            embed_dim: self.embed_dim,
            depth: self.depth,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            classes: task.classes,
            layer_norm_eps: self.layer_norm_eps,
            two_layer_head: self.two_layer_head,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_pre_batch")]
    pub batch_size: usize,
    #[serde(default = "d_shuffle_seed")]
    pub shuffle_seed: u64,
}

fn d_epochs() -> usize {
    1
}
fn d_pre_lr() -> f64 {
    5e-3
}
fn d_momentum() -> f64 {
    0.9
}
fn d_pre_batch() -> usize {
    32
}
fn d_shuffle_seed() -> u64 {
    421
}

impl Default for PretrainSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

/// Which normalization slots become MoE-LayerNorms.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ReplacementChoice {
    /// "all-but-first" (the pre-trained default), "all", or "none".
    Named(String),
    /// Explicit slot indices to replace.
    Indices(Vec<usize>),
}

impl Default for ReplacementChoice {
    fn default() -> Self {
        ReplacementChoice::Named("all-but-first".into())
    }
}

impl ReplacementChoice {
    pub fn plan(&self, slots: usize) -> Result<ReplacementPlan, CliError> {
        match self {
            ReplacementChoice::Named(name) => match name.as_str() {
                "all-but-first" => Ok(ReplacementPlan::all_but_first(slots)),
                "all" => Ok(ReplacementPlan::all(slots)),
                "none" => Ok(ReplacementPlan::none(slots)),
                other => Err(CliError::Config(format!(
                    "adapt.replacement: unknown strategy '{other}' \
                     (expected all-but-first, all, none, or a slot index list)"
                ))),
            },
            ReplacementChoice::Indices(indices) => {
                ReplacementPlan::from_indices(slots, indices).map_err(CliError::Core)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptSection {
    #[serde(default = "d_adapt_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    /// Entropy re-weight constant; null resolves to 0.4 * ln(classes).
    #[serde(default)]
    pub e0: Option<f64>,
    #[serde(default = "d_adapt_batch")]
    pub batch_size: usize,
    #[serde(default = "d_experts")]
    pub experts: usize,
    #[serde(default = "d_activated")]
    pub activated_experts: usize,
    #[serde(default)]
    pub replacement: ReplacementChoice,
    /// Path to the pre-trained checkpoint (required by adapt/sweep/analyze).
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_true")]
    pub detach_scale: bool,
    #[serde(default = "d_true")]
    pub record_diagnostics: bool,
}

fn d_adapt_lr() -> f64 {
    1e-3
}
fn d_lambda() -> f64 {
    0.2
}
fn d_adapt_batch() -> usize {
    64
}
fn d_experts() -> usize {
    9
}
fn d_activated() -> usize {
    1
}
fn d_seeds() -> Vec<u64> {
    vec![42, 4242, 424242]
}
fn d_true() -> bool {
    true
}

impl Default for AdaptSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl AdaptSection {
    pub fn adaptation_config(&self, strategy: Strategy) -> moetta_core::tta::AdaptationConfig {
        moetta_core::tta::AdaptationConfig {
            strategy,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lambda: self.lambda,
            e0: self.e0,
            batch_size: self.batch_size,
            detach_scale: self.detach_scale,
            record_diagnostics: self.record_diagnostics,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub adapt: AdaptSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let range = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(CliError::Config(format!("{path}: {msg}")))
            }
        };
        range(self.task.classes >= 2, "task.classes", "must be >= 2")?;
        range(self.task.image_side >= 1, "task.image_side", "must be >= 1")?;
        range(
            self.task.train_per_class >= 1 && self.task.test_per_class >= 1,
            "task.train_per_class/test_per_class",
            "must be >= 1",
        )?;
        self.model
            .vit_config(&self.task)
            .validate()
            .map_err(CliError::Core)?;
        range(
            self.pretrain.learning_rate > 0.0,
            "pretrain.learning_rate",
            "must be > 0",
        )?;
        range(
            (0.0..1.0).contains(&self.pretrain.momentum),
            "pretrain.momentum",
            "must be in [0, 1)",
        )?;
        range(
            self.pretrain.batch_size >= 1,
            "pretrain.batch_size",
            "must be >= 1",
        )?;
        range(
            self.adapt.learning_rate >= 0.0,
            "adapt.learning_rate",
            "must be >= 0",
        )?;
        range(
            (0.0..1.0).contains(&self.adapt.momentum),
            "adapt.momentum",
            "must be in [0, 1)",
        )?;
        range(self.adapt.lambda >= 0.0, "adapt.lambda", "must be >= 0")?;
        range(
            self.adapt.batch_size >= 1,
            "adapt.batch_size",
            "must be >= 1",
        )?;
        range(self.adapt.experts >= 1, "adapt.experts", "must be >= 1")?;
        range(
            self.adapt.activated_experts >= 1
                && self.adapt.activated_experts <= self.adapt.experts,
            "adapt.activated_experts",
            "must satisfy 1 <= k <= experts",
        )?;
        range(!self.adapt.seeds.is_empty(), "adapt.seeds", "must not be empty")?;
        Ok(())
    }
}

/// Bare override keys accepted as shorthand for their dotted paths.
const ALIASES: &[(&str, &str)] = &[
    ("classes", "task.classes"),
    ("learning_rate", "adapt.learning_rate"),
    ("momentum", "adapt.momentum"),
    ("lambda", "adapt.lambda"),
    ("e0", "adapt.e0"),
    ("batch_size", "adapt.batch_size"),
    ("experts", "adapt.experts"),
    ("activated_experts", "adapt.activated_experts"),
    ("replacement", "adapt.replacement"),
    ("checkpoint", "adapt.checkpoint"),
    ("seeds", "adapt.seeds"),
    ("detach_scale", "adapt.detach_scale"),
    ("record_diagnostics", "adapt.record_diagnostics"),
    ("epochs", "pretrain.epochs"),
];

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = ALIASES.iter().map(|(a, _)| (*a).to_string()).collect();
    for section in ["task", "model", "pretrain", "adapt"] {
        let value = match section {
            "task" => serde_json::to_value(TaskSection::default()),
            "model" => serde_json::to_value(ModelSection::default()),
            "pretrain" => serde_json::to_value(PretrainSection::default()),
            _ => serde_json::to_value(AdaptSection::default()),
        }
        .expect("serializable");
        if let serde_json::Value::Object(map) = value {
            for k in map.keys() {
                keys.push(format!("{section}.{k}"));
            }
        }
    }
    keys.sort();
    keys
}

fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn suggest(key: &str) -> Option<String> {
    known_keys()
        .into_iter()
        .map(|k| (edit_distance(key, &k), k))
        .min()
        .filter(|(d, _)| *d <= 3)
        .map(|(_, k)| k)
}

/// Apply one `key=value` override onto the raw JSON document. The value is
/// parsed as JSON when possible and as a bare string otherwise.
fn apply_override(doc: &mut serde_json::Value, key: &str, value: &str) -> Result<(), CliError> {
    let dotted = ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, d)| (*d).to_string())
        .unwrap_or_else(|| key.to_string());
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.len() != 2 || !known_keys().contains(&dotted) {
        let hint = suggest(key)
            .map(|s| format!(" (did you mean '{s}'?)"))
            .unwrap_or_default();
        return Err(CliError::Config(format!(
            "unknown override key '{key}'{hint}"
        )));
    }
    let parsed: serde_json::Value = serde_json::from_str(value)
        .unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let section = doc
        .as_object_mut()
        .expect("config root is an object")
        .entry(parts[0])
        .or_insert_with(|| serde_json::json!({}));
    section
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("config section '{}' is not an object", parts[0])))?
        .insert(parts[1].to_string(), parsed);
    Ok(())
}

/// Load, override, validate. The returned config serializes back to the
/// `run_config.json` echo.
pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("malformed config {}: {e}", path.display())))?;
    if !doc.is_object() {
        return Err(CliError::Config(format!(
            "config {} must be a JSON object",
            path.display()
        )));
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            CliError::Config(format!("override '{item}' must have the form key=value"))
        })?;
        apply_override(&mut doc, key.trim(), value.trim())?;
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| {
        // serde names the unknown/invalid field; pass its message through and
        // append a suggestion when it looks like a typo.
        let msg = e.to_string();
        let hint = msg
            .split('`')
            .nth(1)
            .and_then(suggest)
            .map(|s| format!(" (did you mean '{s}'?)"))
            .unwrap_or_default();
        CliError::Config(format!("{}: {msg}{hint}", path.display()))
    })?;
    config.validate()?;
    Ok(config)
}

/// Write the fully-resolved configuration into the output directory.
pub fn echo_config(config: &RunConfig, out_dir: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(config).map_err(CliError::Json)?;
    std::fs::write(out_dir.join("run_config.json"), text + "\n").map_err(CliError::Io)?;
    Ok(())
}

/// Overrides echoed alongside for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun<'a> {
    pub command: &'a str,
    pub config: &'a RunConfig,
    pub overrides: &'a [String],
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.adapt.learning_rate, 1e-3);
        assert_eq!(cfg.adapt.momentum, 0.9);
        assert_eq!(cfg.adapt.lambda, 0.2);
        assert_eq!(cfg.adapt.experts, 9);
        assert_eq!(cfg.adapt.activated_experts, 1);
        assert_eq!(cfg.adapt.seeds, vec![42, 4242, 424242]);
        assert_eq!(
            cfg.adapt.replacement,
            ReplacementChoice::Named("all-but-first".into())
        );
    }

    #[test]
    fn unknown_override_suggests_the_close_key() {
        let mut doc = serde_json::json!({});
        let err = apply_override(&mut doc, "learningrate", "0.5").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learningrate"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");
    }

    #[test]
    fn overrides_take_effect_through_aliases() {
        let mut doc = serde_json::json!({});
        apply_override(&mut doc, "lambda", "0.5").unwrap();
        apply_override(&mut doc, "experts", "11").unwrap();
        apply_override(&mut doc, "model.embed_dim", "32").unwrap();
        let cfg: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(cfg.adapt.lambda, 0.5);
        assert_eq!(cfg.adapt.experts, 11);
        assert_eq!(cfg.model.embed_dim, 32);
    }

    #[test]
    fn out_of_range_values_name_the_key_path() {
        let mut cfg = RunConfig::default();
        cfg.adapt.momentum = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("adapt.momentum"), "{msg}");
    }
}
