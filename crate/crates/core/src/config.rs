//! One settings document for every command, overridable with flat
//! `dotted.key = value` lines.
//!
//! ```text
//! # comment
//! tau = 6
//! setup.sft.lr = 0.001
//! plan.seeds = [0, 1, 2]
//! setup.grpo.advantage_mode = std
//! ```
//!
//! Values are parsed as JSON and fall back to a plain string. Keys must
//! name an existing field.

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use serde_json::Value;

use crate::closedloop::LoopConfig;
use crate::error::{GenError, Result};
use crate::harness::{ExperimentConfig, ExperimentPlan};
use crate::setup::Setup;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Settings {
    pub seed: u64,
    pub setup: Setup,
    pub iterations: u32,
    pub candidates: usize,
    pub tau: f64,
    pub allow_overlap: bool,
    pub sft_from_scratch: bool,
    pub grpo_prompts: usize,
    pub pool_size: usize,
    pub include_seed: bool,
    pub stratify: bool,
    pub plan: ExperimentPlan,
}

impl Default for Settings {
    fn default() -> Self {
        let (l, e) = (LoopConfig::default(), ExperimentConfig::default());
        Settings {
            seed: l.seed,
            setup: l.setup,
            iterations: l.iterations,
            candidates: l.candidates,
            tau: l.tau,
            allow_overlap: l.allow_overlap,
            sft_from_scratch: l.sft_from_scratch,
            grpo_prompts: l.grpo_prompts,
            pool_size: e.pool_size,
            include_seed: e.include_seed,
            stratify: e.stratify,
            plan: ExperimentPlan::default(),
        }
    }
}

impl Settings {
    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            iterations: self.iterations,
            candidates: self.candidates,
            tau: self.tau,
            allow_overlap: self.allow_overlap,
            sft_from_scratch: self.sft_from_scratch,
            grpo_prompts: self.grpo_prompts,
            seed: self.seed,
            setup: self.setup.clone(),
        }
    }

    pub fn experiment_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            setup: self.setup.clone(),
            pool_size: self.pool_size,
            include_seed: self.include_seed,
            stratify: self.stratify,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| GenError::Config(format!("unknown setting `{key}`")))?;
    }
    *node = value;
    Ok(())
}

/// Applies `key = value` lines on top of `base`.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, text: &str) -> Result<T> {
    let mut doc = serde_json::to_value(base)?;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| GenError::Config(format!("line {}: expected `key = value`", n + 1)))?;
        set_path(&mut doc, k.trim(), parse_value(v.trim()))?;
    }
    serde_json::from_value(doc).map_err(|e| GenError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides() {
        let s = apply_overrides(&Settings::default(), "# x\ntau = 6\nsetup.sft.lr = 0.001\nplan.seeds = [7, 8, 9]\n\n")
            .unwrap();
        assert_eq!(s.tau, 6.0);
        assert_eq!(s.setup.sft.lr, 0.001);
        assert_eq!(s.plan.seeds, vec![7, 8, 9]);
        assert_eq!(s.loop_config().tau, 6.0);
    }

    #[test]
    fn override_errors() {
        let base = Settings::default();
        assert!(matches!(apply_overrides(&base, "nope = 1"), Err(GenError::Config(_))));
        assert!(matches!(apply_overrides(&base, "tau"), Err(GenError::Config(_))));
        assert!(matches!(apply_overrides(&base, "tau = fast"), Err(GenError::Config(_))));
        assert_eq!(apply_overrides(&base, "").unwrap(), base);
    }
}
