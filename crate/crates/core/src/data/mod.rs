//! Bitext ingestion, toy tokenization and temperature-weighted sampling.
//!
//! Bitext lives in line-aligned plain-text files named `<split>.<pair>.<side>`,
//! e.g. `train.en-ku.en` and `train.en-ku.ku`.

mod sampling;
mod vocab;


use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

pub use sampling::{temperature_weights, Batch, BatchSampler, SamplingSchedule};
pub use vocab::{lang_tag, TokenMode, Vocab, BOS, EOS, PAD, SPACE_MARK, UNK};

use crate::langreg::{pair_id, SOURCE_LANG};
use crate::{Error, Result, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(vec![format!("unknown split {other:?}")])),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Example {
    /// Length counted against the batch token budget.
    pub fn budget_len(&self) -> usize {
        self.src.len().max(self.tgt.len())
    }
}

/// Examples of one `en → lang` pair in one split.
#[derive(Clone, Debug, PartialEq)]
pub struct BitextCorpus {
    pub lang: String,
    pub split: Split,
    pub examples: Vec<Example>,
}

impl BitextCorpus {
    pub fn pair(&self) -> String {
        pair_id(&self.lang)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Drop tokens beyond `max` on either side.
    pub fn truncate(&mut self, max: usize) {
        for e in &mut self.examples {
            e.src.truncate(max);
            e.tgt.truncate(max);
        }
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Tokenize line-aligned source and target text.
pub fn bitext_from_lines<S: AsRef<str>>(
    src: &[S],
    tgt: &[S],
    vocab: &Vocab,
    lang: &str,
    split: Split,
) -> Result<BitextCorpus> {
    if src.len() != tgt.len() {
        return Err(Error::Alignment {
            src_lines: src.len(),
            tgt_lines: tgt.len(),
        });
    }
    let mut examples = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(tgt).enumerate() {
        let ex = Example {
            src: vocab.encode(s.as_ref()),
            tgt: vocab.encode(t.as_ref()),
        };
        if ex.src.is_empty() || ex.tgt.is_empty() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("empty side in {} bitext", pair_id(lang)),
            });
        }
        examples.push(ex);
    }
    Ok(BitextCorpus {
        lang: lang.to_string(),
        split,
        examples,
    })
}

pub fn load_bitext(
    src_path: &Path,
    tgt_path: &Path,
    vocab: &Vocab,
    lang: &str,
    split: Split,
) -> Result<BitextCorpus> {
    let src = read_lines(src_path)?;
    let tgt = read_lines(tgt_path)?;
    bitext_from_lines(&src, &tgt, vocab, lang, split)
}

/// `(source path, target path)` for a pair under `dir`.
pub fn bitext_paths(dir: &Path, split: Split, lang: &str) -> (PathBuf, PathBuf) {
    let stem = format!("{}.{}", split.as_str(), pair_id(lang));
    (
        dir.join(format!("{stem}.{SOURCE_LANG}")),
        dir.join(format!("{stem}.{lang}")),
    )
}

pub fn load_pair(dir: &Path, split: Split, lang: &str, vocab: &Vocab) -> Result<BitextCorpus> {
    let (s, t) = bitext_paths(dir, split, lang);
    load_bitext(&s, &t, vocab, lang, split)
}

/// Write raw text pairs in the on-disk layout.
pub fn write_pair(dir: &Path, split: Split, lang: &str, pairs: &[(String, String)]) -> Result<()> {
    let (s, t) = bitext_paths(dir, split, lang);
    let join = |side: &dyn Fn(&(String, String)) -> &str| {
        let mut out = String::new();
        for p in pairs {
            out.push_str(side(p));
            out.push('\n');
        }
        out
    };
    std::fs::write(&s, join(&|p| p.0.as_str())).map_err(|e| Error::io(&s, e))?;
    std::fs::write(&t, join(&|p| p.1.as_str())).map_err(|e| Error::io(&t, e))?;
    Ok(())
}

/// Seeded disjoint split into (train, valid, test).
pub fn split_corpus(
    corpus: &BitextCorpus,
    valid_n: usize,
    test_n: usize,
    rng: &mut Rng,
) -> Result<(BitextCorpus, BitextCorpus, BitextCorpus)> {
    if valid_n + test_n >= corpus.len() {
        return Err(Error::Contract(format!(
            "cannot hold out {valid_n}+{test_n} of {} examples",
            corpus.len()
        )));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(rng);
    let take = |idx: &[usize], split: Split| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        BitextCorpus {
            lang: corpus.lang.clone(),
            split,
            examples: idx.iter().map(|&i| corpus.examples[i].clone()).collect(),
        }
    };
    let valid = take(&order[..valid_n], Split::Valid);
    let test = take(&order[valid_n..valid_n + test_n], Split::Test);
    let train = take(&order[valid_n + test_n..], Split::Train);
    Ok((train, valid, test))
}
