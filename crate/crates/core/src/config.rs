//! Layered run configuration: defaults, an optional TOML file of dotted keys,
//! then `key=value` overrides. The resolved result is written back as a flat
//! snapshot holding every key.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Element type for training and evaluation.
    pub precision: Precision,
    /// Train without a pretrained backbone.
    pub from_scratch: bool,
    /// Seed of the backbone initialization when training from scratch.
    pub init_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { precision: Precision::F32, from_scratch: false, init_seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub scenario_count: usize,
    pub vocab_per_scenario: usize,
    pub chain_length: usize,
    pub candidate_count: usize,
    pub null_argument_rate: f64,
    pub distractor_overlap_rate: f64,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            scenario_count: g.scenario_count,
            vocab_per_scenario: g.vocab_per_scenario,
            chain_length: g.chain_length,
            candidate_count: g.candidate_count,
            null_argument_rate: g.null_argument_rate,
            distractor_overlap_rate: g.distractor_overlap_rate,
            train_count: 20_000,
            dev_count: 2_000,
            test_count: 2_000,
            seed: g.seed,
        }
    }
}

impl GenerateSection {
    /// Generator settings for all splits at once; splits are taken in
    /// train, dev, test order.
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            scenario_count: self.scenario_count,
            vocab_per_scenario: self.vocab_per_scenario,
            chain_length: self.chain_length,
            candidate_count: self.candidate_count,
            null_argument_rate: self.null_argument_rate,
            distractor_overlap_rate: self.distractor_overlap_rate,
            instance_count: self.train_count + self.dev_count + self.test_count,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: vec![13] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub samples: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { samples: vec![0, 1, 2, 4, 6, 8, 10], lambdas: vec![0.1, 0.5, 1.0, 2.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub samples_per_family: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { seed: 3, step: 1e-4, tolerance: 1e-3, samples_per_family: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub generate: GenerateSection,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub ablate: AblateSection,
    pub sweep: SweepSection,
    pub gradcheck: GradcheckSection,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn insert(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key {key:?} descends into a non-table value")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, toml::Value)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.clone())),
    }
}

impl RunConfig {
    /// Defaults, then `file`, then each `key=value` override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default())
            .map_err(|e| Error::Config(format!("cannot encode defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let parsed: toml::Table =
                text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut flat = Vec::new();
            flatten("", &toml::Value::Table(parsed), &mut flat);
            for (k, v) in flat {
                insert(&mut table, &k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            insert(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.generate.generator().validate()?;
        Ok(())
    }

    /// Every key as `a.b = value`, sorted.
    pub fn flat_entries(&self) -> Result<Vec<(String, toml::Value)>> {
        let table = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &toml::Value::Table(table), &mut flat);
        flat.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(flat)
    }

    pub fn snapshot(&self, header: &str) -> Result<String> {
        let mut out = String::new();
        for line in header.lines() {
            out.push_str(&format!("# {line}\n"));
        }
        for (k, v) in self.flat_entries()? {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }

    pub fn write_snapshot(&self, path: &Path, header: &str) -> Result<()> {
        std::fs::write(path, self.snapshot(header)?)?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config is plain data")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_overrides_and_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("base.toml");
        std::fs::write(&file, "train.steps = 40\n[model]\nlambda = 0.5\nflags.static_prompt = true\n").unwrap();
        let cfg = RunConfig::resolve(
            Some(&file),
            &["train.steps=7".into(), "model.sign=literal".into(), "run.precision=\"f64\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model.lambda, 0.5);
        assert!(cfg.model.flags.static_prompt);
        assert_eq!(cfg.run.precision, Precision::F64);
        assert_eq!(cfg.model.sign, crate::scoring::SignConvention::Literal);

        let snap = dir.path().join("snap.toml");
        cfg.write_snapshot(&snap, "test run").unwrap();
        let text = std::fs::read_to_string(&snap).unwrap();
        assert!(text.contains("train.steps = 7\n"));
        assert!(text.contains("model.flags.no_pe_variance = false\n"));
        assert_eq!(RunConfig::resolve(Some(&snap), &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(RunConfig::resolve(None, &["train.stepz=3".into()]).is_err());
        assert!(RunConfig::resolve(None, &["train.steps=many".into()]).is_err());
        assert!(RunConfig::resolve(None, &["novalue".into()]).is_err());
        assert!(RunConfig::resolve(None, &["backbone.head_count=3".into()]).is_err());
        assert_eq!(RunConfig::resolve(None, &[]).unwrap(), RunConfig::default());
    }
}
