//! Experiment configuration files: `key = value` lines, `#` comments,
//! repeated keys for lists.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::adapter::{AdapterConfig, Placement};
use crate::data::TokenMode;
use crate::evalgen::DecodeConfig;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

use super::pipeline::{Regime, UpdateBudget, WarmupConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    /// `bundled`, `bundled:ted`, `bundled:opus100` or a registry file.
    pub registry: String,
    /// `bundled` (generated in memory) or a directory of bitext files.
    pub data: String,
    pub token_mode: TokenMode,
    /// `vocab_size` is filled in from the data.
    pub model: ModelConfig,
    pub placement: Placement,
    pub train: TrainConfig,
    pub warmup: WarmupConfig,
    pub budget: UpdateBudget,
    pub decode: DecodeConfig,
    pub regimes: Vec<Regime>,
    pub bottlenecks: Vec<usize>,
    pub dropouts: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let mut model = ModelConfig::toy(0);
        model.model_dim = 16;
        model.ff_dim = 32;
        ExperimentSpec {
            registry: "bundled".into(),
            data: "bundled".into(),
            token_mode: TokenMode::Whitespace,
            model,
            placement: Placement::AfterFf,
            train: TrainConfig {
                max_updates: 1500,
                eval_interval_updates: 100,
                ..TrainConfig::default()
            },
            warmup: WarmupConfig {
                train: TrainConfig {
                    max_updates: 500,
                    ..WarmupConfig::default().train
                },
                ..WarmupConfig::default()
            },
            budget: UpdateBudget::Shared,
            decode: DecodeConfig::default(),
            regimes: Vec::new(),
            bottlenecks: vec![4],
            dropouts: vec![0.1],
            seeds: vec![1],
        }
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad value {v:?} for {key}"),
    })
}

fn parse_bool(key: &str, v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Parse {
            line,
            msg: format!("bad value {v:?} for {key} (expected true or false)"),
        }),
    }
}

impl ExperimentSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = ExperimentSpec::default();
        let (mut bottlenecks, mut dropouts, mut seeds) = (Vec::new(), Vec::new(), Vec::new());
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: ln,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            s.set(k, v, ln, &mut bottlenecks, &mut dropouts, &mut seeds)?;
        }
        if !bottlenecks.is_empty() {
            s.bottlenecks = bottlenecks;
        }
        if !dropouts.is_empty() {
            s.dropouts = dropouts;
        }
        if !seeds.is_empty() {
            s.seeds = seeds;
        }
        // short runs shrink the schedule instead of failing validation
        for w in [&mut s.train, &mut s.warmup.train] {
            w.warmup_updates = w.warmup_updates.min(w.max_updates);
            w.eval_interval_updates = w.eval_interval_updates.min(w.max_updates.max(1));
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn set(
        &mut self,
        k: &str,
        v: &str,
        ln: usize,
        bottlenecks: &mut Vec<usize>,
        dropouts: &mut Vec<f64>,
        seeds: &mut Vec<u64>,
    ) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match k {
            "registry" => self.registry = v.to_string(),
            "data" => self.data = v.to_string(),
            "token_mode" => self.token_mode = v.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad token_mode {v:?}") })?,
            "model_dim" => m.model_dim = parse_value(k, v, ln)?,
            "ff_dim" => m.ff_dim = parse_value(k, v, ln)?,
            "heads" => m.heads = parse_value(k, v, ln)?,
            "layers" => {
                m.enc_layers = parse_value(k, v, ln)?;
                m.dec_layers = m.enc_layers;
            }
            "enc_layers" => m.enc_layers = parse_value(k, v, ln)?,
            "dec_layers" => m.dec_layers = parse_value(k, v, ln)?,
            "max_len" => m.max_len = parse_value(k, v, ln)?,
            "embedding_adapters" => m.use_embedding_adapters = parse_bool(k, v, ln)?,
            "train_embeddings" => m.train_embeddings = parse_bool(k, v, ln)?,
            "placement" => {
                self.placement = v.parse().map_err(|_| Error::Parse { line: ln, msg: format!("bad placement {v:?}") })?;
                m.adapter_placement = self.placement;
            }
            "max_updates" => t.max_updates = parse_value(k, v, ln)?,
            "warmup_updates" => t.warmup_updates = parse_value(k, v, ln)?,
            "max_lr" => t.max_lr = parse_value(k, v, ln)?,
            "label_smoothing" => t.label_smoothing = parse_value(k, v, ln)?,
            "update_frequency" => t.update_frequency = parse_value(k, v, ln)?,
            "eval_interval" => t.eval_interval_updates = parse_value(k, v, ln)?,
            "patience" => t.patience = parse_value(k, v, ln)?,
            "batch_tokens" => t.batch_tokens = parse_value(k, v, ln)?,
            "temperature" => t.temperature = parse_value(k, v, ln)?,
            "weight_decay" => t.weight_decay = parse_value(k, v, ln)?,
            "backbone_updates" => self.warmup.train.max_updates = parse_value(k, v, ln)?,
            "backbone_mask_prob" => self.warmup.mask_prob = parse_value(k, v, ln)?,
            "budget" => {
                self.budget = match v {
                    "shared" => UpdateBudget::Shared,
                    "per_group" => UpdateBudget::PerGroup,
                    _ => return Err(Error::Parse { line: ln, msg: format!("bad budget {v:?} (shared or per_group)") }),
                }
            }
            "beam" => self.decode.beam = parse_value(k, v, ln)?,
            "decode_max_len" => self.decode.max_len = parse_value(k, v, ln)?,
            "length_penalty" => self.decode.length_penalty = parse_value(k, v, ln)?,
            "regime" => {
                let r: Regime = v.parse().map_err(|_| Error::Parse { line: ln, msg: format!("unknown regime {v:?}") })?;
                if !self.regimes.contains(&r) {
                    self.regimes.push(r);
                }
            }
            "bottleneck" => bottlenecks.push(parse_value(k, v, ln)?),
            "dropout" => dropouts.push(parse_value(k, v, ln)?),
            "seed" => seeds.push(parse_value(k, v, ln)?),
            _ => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("unknown key {k:?}"),
                })
            }
        }
        Ok(())
    }

    fn is_bundled(s: &str) -> bool {
        s == "bundled" || s.starts_with("bundled:")
    }

    /// Checks everything that can be checked before data is loaded.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.regimes.is_empty() {
            errs.push("at least one regime is required".to_string());
        }
        if !Self::is_bundled(&self.registry) && !Path::new(&self.registry).is_file() {
            errs.push(format!("registry file {} does not exist", self.registry));
        }
        if self.data != "bundled" && !Path::new(&self.data).is_dir() {
            errs.push(format!("data directory {} does not exist", self.data));
        }
        if self.bottlenecks.iter().any(|&b| b == 0 || b > self.model.model_dim) {
            errs.push(format!("bottleneck sizes must lie in 1..={}", self.model.model_dim));
        }
        if self.dropouts.iter().any(|p| !(0.0..1.0).contains(p)) {
            errs.push("dropout must lie in [0, 1)".to_string());
        }
        if self.decode.beam == 0 {
            errs.push("beam must be at least 1".to_string());
        }
        let mut probe = self.model.clone();
        probe.vocab_size = probe.vocab_size.max(8);
        if let Err(Error::Config(e)) = probe.validate() {
            errs.extend(e);
        }
        if let Err(Error::Config(e)) = self.train.validate() {
            errs.extend(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn data_dir(&self) -> Option<PathBuf> {
        (self.data != "bundled").then(|| PathBuf::from(&self.data))
    }

    pub fn adapter(&self, bottleneck: usize) -> Result<AdapterConfig> {
        Ok(AdapterConfig::new(self.model.model_dim, bottleneck)?.with_placement(self.placement))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists_and_overrides() {
        let s = ExperimentSpec::parse(
            "# grid\nregime = family\nregime = agnostic\nbottleneck = 4\nbottleneck = 8\ndropout=0.1\ndropout = 0.3\nseed = 3\nmax_updates = 20\nlayers = 1\nbudget = per_group\n",
        )
        .unwrap();
        assert_eq!(s.regimes, vec![Regime::Family, Regime::Agnostic]);
        assert_eq!(s.bottlenecks, vec![4, 8]);
        assert_eq!(s.dropouts, vec![0.1, 0.3]);
        assert_eq!(s.seeds, vec![3]);
        assert_eq!(s.train.max_updates, 20);
        assert_eq!((s.model.enc_layers, s.model.dec_layers), (1, 1));
        assert_eq!(s.budget, UpdateBudget::PerGroup);
        s.validate().unwrap();
    }

    #[test]
    fn rejects_bad_lines_with_line_numbers() {
        match ExperimentSpec::parse("regime = family\nfoo = 1\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentSpec::parse("regime = famly\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(ExperimentSpec::parse("max_updates = many\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn validation_requires_regime_and_existing_files() {
        let s = ExperimentSpec::parse("data = /no/such/dir\nregistry = /no/such.tsv\n").unwrap();
        match s.validate() {
            Err(Error::Config(e)) => {
                assert_eq!(e.len(), 3, "{e:?}");
                assert!(e.iter().any(|m| m.contains("/no/such/dir")));
            }
            other => panic!("{other:?}"),
        }
    }
}
