//! Flat key/value configuration (`section.key = value`). Every key has a
//! documented default; files and command-line overrides layer on top, and
//! the fully resolved map is logged verbatim next to every command's output.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attention::Variant;
use crate::corpus::{Field, FieldLimits};
use crate::eval::synth::SynthConfig;
use crate::kernels::KernelBank;
use crate::ranker::{AttentionField, MetaFeature, ModelConfig};
use crate::training::{LabelSource, TrainConfig};
use crate::{Error, Result};

/// Every valid key with its default value.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("corpus.min_count", "1"),
    ("corpus.max_query_len", "16"),
    ("corpus.max_title_len", "24"),
    ("corpus.max_body_len", "256"),
    ("model.dim", "300"),
    ("model.heads", "4"),
    ("model.fields", "title,body"),
    ("model.attention_doc_field", "title"),
    ("model.attention_test_mode", "false"),
    ("model.kernel_bank", "default"),
    ("expansion.variant", "full"),
    ("expansion.max_click_queries", "20"),
    ("ranker.meta_feature", "none"),
    ("train.lr", "0.001"),
    ("train.batch_size", "64"),
    ("train.adam_eps", "1e-5"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.validation_fraction", "0.2"),
    ("train.patience", "3"),
    ("train.max_epochs", "30"),
    ("train.seed", "42"),
    ("train.label_source", "clicks"),
    ("train.grade_margin", "0.1"),
    ("eval.relevance_threshold", "0.5"),
    ("eval.permutation_iterations", "10000"),
    ("eval.doc_buckets", "0,1,2,3,5,10"),
    ("synth.seed", "42"),
    ("synth.docs", "2000"),
    ("synth.train_queries", "500"),
    ("synth.test_queries", "200"),
    ("synth.topics", "40"),
    ("synth.core_terms_per_topic", "30"),
    ("synth.synonyms_per_topic", "3"),
    ("synth.noise_terms", "400"),
    ("synth.overlap_injection", "0.1"),
    ("synth.synonym_rate", "0.35"),
    ("synth.zipf_skew", "1.1"),
    ("synth.doc_popularity_skew", "0.9"),
    ("synth.train_events", "40000"),
    ("synth.test_events", "15000"),
    ("synth.relevant_per_query", "3"),
    ("synth.candidates_per_query", "9"),
    ("synth.click_relevant", "0.75"),
    ("synth.click_irrelevant", "0.03"),
];

fn default_of(key: &str) -> Option<&'static str> {
    CONFIG_KEYS.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn unknown_key_error(key: &str) -> Error {
    let valid: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
    Error::Config(format!("unknown config key '{key}'; valid keys: {}", valid.join(", ")))
}

/// Layered configuration; unset keys fall back to the defaults table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Config::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::malformed(path, lineno + 1, "expected 'key = value'"));
            };
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Build from an explicit map, validating every key.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Config> {
        let mut config = Config::default();
        for (k, v) in map {
            config.set(k, v)?;
        }
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if default_of(key).is_none() {
            return Err(unknown_key_error(key));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Apply `key=value` override strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for entry in overrides {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(Error::Config(format!("override '{entry}' is not of the form key=value")));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| default_of(key))
            .unwrap_or_else(|| panic!("unknown config key '{key}' requested internally"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.get(key)
            .parse()
            .map_err(|_| Error::Config(format!("config key '{key}' is not a valid {what}: '{}'", self.get(key))))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.parse(key, "number")
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "non-negative integer")
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "boolean")
    }

    /// The fully resolved map: defaults overlaid with explicit settings.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| (k.to_string(), self.get(k).to_string()))
            .collect()
    }

    /// Resolved configuration as `key = value` lines.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn field_limits(&self) -> Result<FieldLimits> {
        Ok(FieldLimits {
            max_query_len: self.usize("corpus.max_query_len")?,
            max_title_len: self.usize("corpus.max_title_len")?,
            max_body_len: self.usize("corpus.max_body_len")?,
        })
    }

    pub fn min_count(&self) -> Result<u64> {
        self.u64("corpus.min_count")
    }

    pub fn max_click_queries(&self) -> Result<usize> {
        self.usize("expansion.max_click_queries")
    }

    pub fn variant(&self) -> Result<Variant> {
        self.get("expansion.variant").parse()
    }

    pub fn kernel_bank(&self) -> Result<Vec<(f64, f64)>> {
        let spec = self.get("model.kernel_bank");
        if spec == "default" {
            return Ok(KernelBank::standard().pairs());
        }
        let mut pairs = Vec::new();
        for part in spec.split(',') {
            let Some((mu, sigma)) = part.split_once(':') else {
                return Err(Error::Config(format!(
                    "kernel bank entry '{part}' is not of the form mu:sigma"
                )));
            };
            let mu: f64 = mu
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad kernel mu '{mu}'")))?;
            let sigma: f64 = sigma
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad kernel sigma '{sigma}'")))?;
            pairs.push((mu, sigma));
        }
        Ok(pairs)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let fields: Vec<Field> = self
            .get("model.fields")
            .split(',')
            .map(|f| f.trim().parse())
            .collect::<Result<_>>()?;
        let meta_feature = match self.get("ranker.meta_feature") {
            "none" => None,
            "doc_freq" => Some(MetaFeature::DocFreq),
            "cq_count" => Some(MetaFeature::CqCount),
            other => {
                return Err(Error::Config(format!(
                    "unknown meta feature '{other}' (expected none|doc_freq|cq_count)"
                )))
            }
        };
        let attention_doc_field: AttentionField = self.get("model.attention_doc_field").parse()?;
        Ok(ModelConfig {
            dim: self.usize("model.dim")?,
            heads: self.usize("model.heads")?,
            fields,
            attention_doc_field,
            variant: self.variant()?,
            meta_feature,
            attention_test_mode: self.bool("model.attention_test_mode")?,
            bank: self.kernel_bank()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lr: self.f64("train.lr")?,
            batch_size: self.usize("train.batch_size")?,
            adam_eps: self.f64("train.adam_eps")?,
            beta1: self.f64("train.beta1")?,
            beta2: self.f64("train.beta2")?,
            validation_fraction: self.f64("train.validation_fraction")?,
            patience: self.usize("train.patience")?,
            max_epochs: self.usize("train.max_epochs")?,
            seed: self.u64("train.seed")?,
            label_source: self.get("train.label_source").parse()?,
            grade_margin: self.f64("train.grade_margin")?,
        })
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        Ok(SynthConfig {
            seed: self.u64("synth.seed")?,
            docs: self.usize("synth.docs")?,
            train_queries: self.usize("synth.train_queries")?,
            test_queries: self.usize("synth.test_queries")?,
            topics: self.usize("synth.topics")?,
            core_terms_per_topic: self.usize("synth.core_terms_per_topic")?,
            synonyms_per_topic: self.usize("synth.synonyms_per_topic")?,
            noise_terms: self.usize("synth.noise_terms")?,
            overlap_injection: self.f64("synth.overlap_injection")?,
            synonym_rate: self.f64("synth.synonym_rate")?,
            zipf_skew: self.f64("synth.zipf_skew")?,
            doc_popularity_skew: self.f64("synth.doc_popularity_skew")?,
            train_events: self.usize("synth.train_events")?,
            test_events: self.usize("synth.test_events")?,
            relevant_per_query: self.usize("synth.relevant_per_query")?,
            candidates_per_query: self.usize("synth.candidates_per_query")?,
            click_relevant: self.f64("synth.click_relevant")?,
            click_irrelevant: self.f64("synth.click_irrelevant")?,
        })
    }

    pub fn doc_buckets(&self) -> Result<Vec<usize>> {
        self.get("eval.doc_buckets")
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad doc bucket edge '{s}'")))
            })
            .collect()
    }
}
