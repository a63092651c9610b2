//! End-to-end pieces shared by the commands: datasets, backbone warm-up,
//! regime groupings, training and scoring.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;

use crate::adapter::AdapterConfig;
use crate::cluster::{cluster_languages, cluster_report, mean_pool_embed, ClusterReport, EmbeddingBatch, Provenance};
use crate::data::{
    bitext_from_lines, bitext_paths, load_pair, temperature_weights, BitextCorpus, Example, Split, TokenMode, Vocab, BOS,
    UNK,
};
use crate::evalgen::{evaluate_corpus, BleuStats, DecodeConfig};
use crate::langreg::{build_grouping, GroupingKind, GroupingScheme, LanguageRegistry, SOURCE_LANG};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::synth::SynthCorpus;
use crate::trainer::{model_from_checkpoint, train_regime, GroupOutcome, GroupTrainer, TrainConfig};
use crate::{derive_seed, seeded_rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Regime {
    Family,
    Agnostic,
    Pair,
    Random,
    Gmm,
    FullFt,
}

impl Regime {
    pub const ALL: [Regime; 6] = [
        Regime::Family,
        Regime::Agnostic,
        Regime::Pair,
        Regime::Random,
        Regime::Gmm,
        Regime::FullFt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Family => "family",
            Regime::Agnostic => "agnostic",
            Regime::Pair => "pair",
            Regime::Random => "random",
            Regime::Gmm => "gmm",
            Regime::FullFt => "full_ft",
        }
    }

    pub fn uses_adapters(self) -> bool {
        self != Regime::FullFt
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s || (s == "full-ft" && *r == Regime::FullFt))
            .ok_or_else(|| {
                Error::Config(vec![format!(
                    "unknown regime {s:?} (expected one of family, agnostic, pair, random, gmm, full_ft)"
                )])
            })
    }
}

/// Registry, vocabulary and tokenized splits of every language.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub registry: LanguageRegistry,
    pub vocab: Vocab,
    pub train: Vec<BitextCorpus>,
    pub valid: Vec<BitextCorpus>,
    pub test: Vec<BitextCorpus>,
}

/// Tag languages: the source first, then the registry order.
pub fn tag_languages(registry: &LanguageRegistry) -> Vec<String> {
    std::iter::once(SOURCE_LANG.to_string()).chain(registry.codes()).collect()
}

impl Dataset {
    /// Tokenize a generated corpus; builds the vocabulary unless one is given.
    pub fn from_synth(c: &SynthCorpus, vocab: Option<Vocab>) -> Result<Self> {
        let vocab = match vocab {
            Some(v) => v,
            None => Vocab::build(&c.all_text(), TokenMode::Whitespace, &tag_languages(&c.registry))?,
        };
        let mut ds = Dataset {
            registry: c.registry.clone(),
            vocab,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for (lang, s) in &c.pairs {
            for split in [Split::Train, Split::Valid, Split::Test] {
                let (src, tgt): (Vec<&str>, Vec<&str>) = s.get(split).iter().map(|(a, b)| (a.as_str(), b.as_str())).unzip();
                let corpus = bitext_from_lines(&src, &tgt, &ds.vocab, lang, split)?;
                ds.split_mut(split).push(corpus);
            }
        }
        ds.order_by_registry();
        Ok(ds)
    }

    /// Load `<split>.en-<code>.<side>` files for every registry language.
    /// Uses the given vocabulary, else `vocab.txt` in `dir` when present,
    /// else one built from the training text.
    pub fn load_dir(dir: &Path, registry: &LanguageRegistry, mode: TokenMode, vocab: Option<Vocab>) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        let vocab = if let Some(v) = vocab {
            v
        } else if vocab_path.exists() {
            Vocab::load(&vocab_path, mode)?
        } else {
            let mut text = Vec::new();
            for code in registry.codes() {
                let (s, t) = bitext_paths(dir, Split::Train, &code);
                for p in [s, t] {
                    let body = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    text.extend(body.lines().map(str::to_string));
                }
            }
            Vocab::build(&text, mode, &tag_languages(registry))?
        };
        let mut ds = Dataset {
            registry: registry.clone(),
            vocab,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for code in registry.codes() {
            for split in [Split::Train, Split::Valid, Split::Test] {
                let c = load_pair(dir, split, &code, &ds.vocab)?;
                ds.split_mut(split).push(c);
            }
        }
        Ok(ds)
    }

    fn order_by_registry(&mut self) {
        let order = self.registry.codes();
        for split in [Split::Train, Split::Valid, Split::Test] {
            self.split_mut(split)
                .sort_by_key(|c| order.iter().position(|o| *o == c.lang).unwrap_or(usize::MAX));
        }
    }

    pub fn split(&self, split: Split) -> &[BitextCorpus] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<BitextCorpus> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    pub fn corpus(&self, split: Split, lang: &str) -> Result<&BitextCorpus> {
        self.split(split)
            .iter()
            .find(|c| c.lang == lang)
            .ok_or_else(|| Error::Coverage(format!("no {} data for {lang}", split.as_str())))
    }

    /// Drop tokens beyond what the model accepts.
    pub fn truncate(&mut self, max: usize) {
        for split in [Split::Train, Split::Valid, Split::Test] {
            for c in self.split_mut(split) {
                c.truncate(max);
            }
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::toy(self.vocab.len())
    }
}

/// Denoising warm-up of a fresh backbone on source text and the target text
/// of languages marked seen, so later adapter training starts from a model
/// that already reads and writes those languages.
#[derive(Clone, Debug, PartialEq)]
pub struct WarmupConfig {
    pub train: TrainConfig,
    pub mask_prob: f64,
    /// Tokens move at most this far when shuffled.
    pub shuffle_window: usize,
    pub valid_per_lang: usize,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        WarmupConfig {
            train: TrainConfig {
                max_updates: 1500,
                warmup_updates: 100,
                max_lr: 3e-3,
                eval_interval_updates: 500,
                patience: 100,
                ..TrainConfig::default()
            },
            mask_prob: 0.15,
            shuffle_window: 3,
            valid_per_lang: 20,
        }
    }
}

fn corrupt(tokens: &[usize], cfg: &WarmupConfig, rng: &mut crate::Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (i as f64 + rng.gen_range(0.0..cfg.shuffle_window as f64 + 1.0), t))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed
        .into_iter()
        .map(|(_, t)| if rng.gen::<f64>() < cfg.mask_prob { UNK } else { t })
        .collect()
}

/// Build the denoising corpora: one per seen language plus the source language.
pub fn denoising_corpora(ds: &Dataset, cfg: &WarmupConfig, seed: u64) -> (Vec<BitextCorpus>, Vec<BitextCorpus>) {
    let mut rng = seeded_rng(derive_seed(seed, "denoise"));
    let mut texts: Vec<(String, Vec<Vec<usize>>)> = Vec::new();
    let mut source: Vec<Vec<usize>> = Vec::new();
    for c in &ds.train {
        source.extend(c.examples.iter().map(|e| e.src.clone()));
        if ds.registry.get(&c.lang).is_some_and(|l| l.seen) {
            texts.push((c.lang.clone(), c.examples.iter().map(|e| e.tgt.clone()).collect()));
        }
    }
    source.sort();
    source.dedup();
    source.shuffle(&mut rng);
    texts.insert(0, (SOURCE_LANG.to_string(), source));
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for (lang, sents) in texts {
        let mk = |s: &[Vec<usize>], rng: &mut crate::Rng, split| BitextCorpus {
            lang: lang.clone(),
            split,
            examples: s
                .iter()
                .map(|t| Example {
                    src: corrupt(t, cfg, rng),
                    tgt: t.clone(),
                })
                .collect(),
        };
        let v = cfg.valid_per_lang.min(sents.len() / 2);
        valid.push(mk(&sents[..v], &mut rng, Split::Valid));
        train.push(mk(&sents[v..], &mut rng, Split::Train));
    }
    (train, valid)
}

pub fn warmup_backbone(ds: &Dataset, model_cfg: &ModelConfig, cfg: &WarmupConfig, seed: u64) -> Result<Seq2SeqModel> {
    let mut rng = seeded_rng(derive_seed(seed, "backbone"));
    let model = Seq2SeqModel::build(model_cfg.clone(), &mut rng)?;
    if cfg.train.max_updates == 0 {
        return Ok(model);
    }
    let (train, valid) = denoising_corpora(ds, cfg, seed);
    let langs: Vec<String> = train.iter().map(|c| c.lang.clone()).collect();
    let tc = TrainConfig {
        seed: derive_seed(seed, "warmup"),
        ..cfg.train.clone()
    };
    let mut t = GroupTrainer::new(&model, "warmup", &langs, &train, &valid, &ds.vocab, &tc, None)?;
    t.run()?;
    Ok(t.into_model())
}

/// Mean-pooled backbone encodings of up to `per_lang` target sentences per
/// language, all read with the same neutral tag.
pub fn language_embeddings(backbone: &Seq2SeqModel, ds: &Dataset, per_lang: usize) -> Result<EmbeddingBatch> {
    let mut langs = Vec::new();
    for c in &ds.train {
        let sents: Vec<Vec<usize>> = c.examples.iter().take(per_lang).map(|e| e.tgt.clone()).collect();
        langs.push((c.lang.clone(), mean_pool_embed(backbone, &sents, BOS)?));
    }
    EmbeddingBatch::new(langs, Provenance::OwnEncoder)
}

/// GMM over backbone sentence vectors with one component per family.
pub fn gmm_grouping(backbone: &Seq2SeqModel, ds: &Dataset, seed: u64) -> Result<(ClusterReport, GroupingScheme)> {
    let batch = language_embeddings(backbone, ds, 50)?;
    let k = ds.registry.families().len();
    let run = cluster_languages(&batch, 100, k, &mut seeded_rng(derive_seed(seed, "gmm")), 300, 1e-8)?;
    let report = cluster_report(&run.assignment, &ds.registry)?;
    let scheme = report.scheme.clone();
    Ok((report, scheme))
}

/// Grouping used by `regime`; the gmm regime also returns its cluster report.
pub fn regime_grouping(
    regime: Regime,
    backbone: &Seq2SeqModel,
    ds: &Dataset,
    seed: u64,
) -> Result<(GroupingScheme, Option<ClusterReport>)> {
    let mut rng = seeded_rng(derive_seed(seed, "grouping"));
    let kind = match regime {
        Regime::Family => GroupingKind::Family,
        Regime::Agnostic | Regime::FullFt => GroupingKind::Agnostic,
        Regime::Pair => GroupingKind::Pair,
        Regime::Random => GroupingKind::Random,
        Regime::Gmm => {
            let (report, scheme) = gmm_grouping(backbone, ds, seed)?;
            return Ok((scheme, Some(report)));
        }
    };
    Ok((build_grouping(&ds.registry, kind, &mut rng, None)?, None))
}

/// How update counts relate across the groups of one regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateBudget {
    /// Every group runs `max_updates`.
    PerGroup,
    /// Groups split `max_updates` in proportion to the sampling mass their
    /// languages hold when all languages are sampled together.
    Shared,
}

/// Per-group update counts under [`UpdateBudget::Shared`] (largest remainder, sum exact).
pub fn shared_updates(scheme: &GroupingScheme, ds: &Dataset, total: usize, temperature: f64) -> Result<BTreeMap<String, usize>> {
    let sizes: Vec<f64> = ds.train.iter().map(|c| c.len() as f64).collect();
    let p = temperature_weights(&sizes, temperature)?;
    let mass: BTreeMap<&str, f64> = ds.train.iter().map(|c| c.lang.as_str()).zip(p).collect();
    let shares: Vec<(String, f64)> = scheme
        .groups
        .iter()
        .map(|(g, m)| (g.clone(), total as f64 * m.iter().map(|l| mass.get(l.as_str()).copied().unwrap_or(0.0)).sum::<f64>()))
        .collect();
    let mut out: BTreeMap<String, usize> = shares.iter().map(|(g, s)| (g.clone(), s.floor() as usize)).collect();
    let mut rest = total - out.values().sum::<usize>();
    let mut order: Vec<&(String, f64)> = shares.iter().collect();
    order.sort_by(|a, b| (b.1 - b.1.floor()).total_cmp(&(a.1 - a.1.floor())).then(a.0.cmp(&b.0)));
    for (g, _) in order {
        if rest == 0 {
            break;
        }
        *out.get_mut(g).expect("group present") += 1;
        rest -= 1;
    }
    for v in out.values_mut() {
        *v = (*v).max(1);
    }
    Ok(out)
}

pub struct RegimeOutcome {
    pub regime: Regime,
    pub grouping: GroupingScheme,
    pub groups: BTreeMap<String, GroupOutcome>,
}

impl RegimeOutcome {
    /// Perplexity pooled over every language's validation tokens, each
    /// language scored by its group's best checkpoint.
    pub fn pooled_perplexity(&self, ds: &Dataset) -> Result<f64> {
        let mut weighted = 0.0;
        let mut tokens = 0usize;
        for (g, members) in &self.grouping.groups {
            let n: usize = members
                .iter()
                .map(|l| ds.corpus(Split::Valid, l).map(|c| c.examples.iter().map(|e| e.tgt.len() + 1).sum::<usize>()))
                .sum::<Result<usize>>()?;
            weighted += n as f64 * self.groups[g].best_perplexity.ln();
            tokens += n;
        }
        Ok((weighted / tokens as f64).exp())
    }

    /// BLEU statistics per language on `split` using each group's best checkpoint.
    pub fn bleu(&self, ds: &Dataset, split: Split, decode: &DecodeConfig, workers: usize) -> Result<BTreeMap<String, BleuStats>> {
        let mut out = BTreeMap::new();
        for (g, members) in &self.grouping.groups {
            let model = model_from_checkpoint(&self.groups[g].best)?;
            for l in members {
                let (stats, _) = evaluate_corpus(&model, &ds.vocab, ds.corpus(split, l)?, decode, workers)?;
                out.insert(l.clone(), stats);
            }
        }
        Ok(out)
    }
}

/// Train `regime` on top of `backbone`.
pub fn run_regime(
    backbone: &Seq2SeqModel,
    ds: &Dataset,
    regime: Regime,
    grouping: GroupingScheme,
    cfg: &TrainConfig,
    adapter_cfg: &AdapterConfig,
    budget: UpdateBudget,
    workers: usize,
) -> Result<RegimeOutcome> {
    let adapters = regime.uses_adapters().then_some(adapter_cfg);
    let groups = match budget {
        UpdateBudget::PerGroup => train_regime(backbone, &grouping, &ds.train, &ds.valid, &ds.vocab, cfg, adapters, workers)?,
        UpdateBudget::Shared => {
            let alloc = shared_updates(&grouping, ds, cfg.max_updates, cfg.temperature)?;
            let one = |(g, members): (&String, &Vec<String>)| -> Result<(String, GroupOutcome)> {
                let scheme = GroupingScheme {
                    kind: GroupingKind::Custom,
                    groups: [(g.clone(), members.clone())].into(),
                };
                let gc = TrainConfig {
                    max_updates: alloc[g],
                    warmup_updates: cfg.warmup_updates.min(alloc[g]),
                    ..cfg.clone()
                };
                let mut r = train_regime(backbone, &scheme, &ds.train, &ds.valid, &ds.vocab, &gc, adapters, 1)?;
                Ok((g.clone(), r.remove(g).expect("group trained")))
            };
            if workers > 1 {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
                pool.install(|| grouping.groups.par_iter().map(one).collect::<Result<_>>())?
            } else {
                grouping.groups.iter().map(one).collect::<Result<_>>()?
            }
        }
    };
    Ok(RegimeOutcome {
        regime,
        grouping,
        groups,
    })
}
