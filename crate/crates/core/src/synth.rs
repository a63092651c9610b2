//! Toy multilingual corpus of constructed languages.
//!
//! Every target language renders a shared English-like source through a word
//! substitution. Languages of one family share a base substitution and differ
//! by a few swapped entries; different families use unrelated substitutions
//! over the same target word inventory, so their mappings conflict. Corpus
//! sizes follow the registry's size profile, rescaled.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::data::{write_pair, Split};
use crate::langreg::LanguageRegistry;
use crate::{derive_seed, seeded_rng, Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Size of both the source and the target word inventories.
    pub words: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Training size of the largest language; others scale by registry size.
    pub max_train: usize,
    pub min_train: usize,
    pub valid: usize,
    pub test: usize,
    /// Entries swapped in each language's copy of its family mapping.
    pub swaps: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            words: 24,
            min_len: 3,
            max_len: 8,
            max_train: 400,
            min_train: 40,
            valid: 30,
            test: 30,
            swaps: 2,
        }
    }
}

pub fn source_word(i: usize) -> String {
    format!("e{i}")
}

pub fn target_word(i: usize) -> String {
    format!("t{i}")
}

/// Raw text pairs for one language.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

impl SynthSplits {
    pub fn get(&self, split: Split) -> &[(String, String)] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub registry: LanguageRegistry,
    /// Word substitution (source index → target index) per language.
    pub mappings: BTreeMap<String, Vec<usize>>,
    pub pairs: BTreeMap<String, SynthSplits>,
}

fn zipf_sentence(rng: &mut Rng, cfg: &SynthConfig, cumulative: &[f64]) -> Vec<usize> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    (0..len)
        .map(|_| {
            let u: f64 = rng.gen();
            cumulative.iter().position(|&c| u < c).unwrap_or(cfg.words - 1)
        })
        .collect()
}

fn render(ids: &[usize], word: fn(usize) -> String) -> String {
    ids.iter().map(|&i| word(i)).collect::<Vec<_>>().join(" ")
}

/// Generate the corpus for every registry language.
pub fn generate(registry: &LanguageRegistry, cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.words < 2 || cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.min_train == 0 {
        return Err(Error::Config(vec!["synthetic corpus settings are degenerate".into()]));
    }
    let weights: Vec<f64> = (1..=cfg.words).map(|r| 1.0 / r as f64).collect();
    let z: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let cumulative: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w / z;
            acc
        })
        .collect();
    let mut family_maps: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for fam in registry.families() {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &format!("family/{fam}")));
        let mut perm: Vec<usize> = (0..cfg.words).collect();
        perm.shuffle(&mut rng);
        family_maps.insert(fam, perm);
    }
    let largest = registry.languages().iter().map(|l| l.train_size).max().unwrap_or(1).max(1);
    let mut mappings = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    for lang in registry.languages() {
        let mut rng = seeded_rng(derive_seed(cfg.seed, &format!("lang/{}", lang.code)));
        let mut map = family_maps[&lang.family].clone();
        for _ in 0..cfg.swaps {
            let a = rng.gen_range(0..cfg.words);
            let b = rng.gen_range(0..cfg.words);
            map.swap(a, b);
        }
        let n_train = ((cfg.max_train as f64 * lang.train_size as f64 / largest as f64).round() as usize).max(cfg.min_train);
        let mut make = |n: usize| -> Vec<(String, String)> {
            (0..n)
                .map(|_| {
                    let s = zipf_sentence(&mut rng, cfg, &cumulative);
                    let t: Vec<usize> = s.iter().map(|&w| map[w]).collect();
                    (render(&s, source_word), render(&t, target_word))
                })
                .collect()
        };
        let splits = SynthSplits {
            train: make(n_train),
            valid: make(cfg.valid),
            test: make(cfg.test),
        };
        mappings.insert(lang.code.clone(), map);
        pairs.insert(lang.code.clone(), splits);
    }
    Ok(SynthCorpus {
        registry: registry.clone(),
        mappings,
        pairs,
    })
}

impl SynthCorpus {
    /// Write `registry.tsv` and all bitext files into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let reg = dir.join("registry.tsv");
        std::fs::write(&reg, self.registry.to_text()).map_err(|e| Error::io(&reg, e))?;
        for (lang, s) in &self.pairs {
            for split in [Split::Train, Split::Valid, Split::Test] {
                write_pair(dir, split, lang, s.get(split))?;
            }
        }
        Ok(())
    }

    /// Target-side text of every split, for vocabulary building.
    pub fn all_text(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in self.pairs.values() {
            for split in [Split::Train, Split::Valid, Split::Test] {
                for (a, b) in s.get(split) {
                    out.push(a.clone());
                    out.push(b.clone());
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_follow_registry_profile() {
        let reg = LanguageRegistry::bundled_ted();
        let c = generate(&reg, &SynthConfig::default()).unwrap();
        assert_eq!(c.pairs.len(), 17);
        assert_eq!(c.pairs["bg"].train.len(), 400);
        assert_eq!(c.pairs["fa"].train.len(), (400.0f64 * 151.0 / 174.0).round() as usize);
        assert_eq!(c.pairs["fil"].train.len(), 40);
        assert!(c.pairs.values().all(|s| s.valid.len() == 30 && s.test.len() == 30));
        assert_eq!(c, generate(&reg, &SynthConfig::default()).unwrap());
    }

    #[test]
    fn families_share_mappings_and_conflict_across() {
        let reg = LanguageRegistry::bundled_ted();
        let cfg = SynthConfig::default();
        let c = generate(&reg, &cfg).unwrap();
        let agree = |a: &str, b: &str| (0..cfg.words).filter(|&w| c.mappings[a][w] == c.mappings[b][w]).count();
        assert!(agree("hr", "uk") >= cfg.words - 4 * cfg.swaps);
        assert!(agree("hr", "fa") < cfg.words / 2);
        for (code, s) in &c.pairs {
            let map = &c.mappings[code];
            for (src, tgt) in &s.train {
                let want: Vec<String> = src
                    .split(' ')
                    .map(|w| target_word(map[w[1..].parse::<usize>().unwrap()]))
                    .collect();
                assert_eq!(tgt, &want.join(" "));
            }
        }
    }
}
