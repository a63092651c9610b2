use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Clipped n-gram counts; additive across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<'a>(toks: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

impl BleuStats {
    pub fn sentence(hyp: &[&str], reference: &[&str]) -> Self {
        let mut s = BleuStats {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let h = ngrams(hyp, n);
            let r = ngrams(reference, n);
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
            s.matches[n - 1] = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len >= self.ref_len {
            1.0
        } else if self.hyp_len == 0 {
            0.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU-4 in `[0, 100]` with exponential smoothing: the k-th order with
    /// no matches gets precision `1 / (2^k · total)`.
    pub fn score(&self) -> f64 {
        if self.matches[0] == 0 || self.totals.contains(&0) {
            return 0.0;
        }
        let mut smooth = 1.0;
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            let p = if self.matches[n] == 0 {
                smooth *= 2.0;
                1.0 / (smooth * self.totals[n] as f64)
            } else {
                self.matches[n] as f64 / self.totals[n] as f64
            };
            log_sum += p.ln();
        }
        100.0 * self.brevity_penalty() * (log_sum / MAX_ORDER as f64).exp()
    }
}

fn corpus_stats<S: AsRef<str>>(hyps: &[S], refs: &[S], tok: impl Fn(&str) -> String) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut total = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (tok(h.as_ref()), tok(r.as_ref()));
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        total.add(&BleuStats::sentence(&ht, &rt));
    }
    Ok(total)
}

/// Corpus BLEU over whitespace-separated tokens.
pub fn bleu_corpus<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    Ok(corpus_stats(hyps, refs, str::to_string)?.score())
}

/// Corpus BLEU over raw text, tokenized with [`tokenize_13a`].
pub fn bleu_corpus_13a<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    Ok(corpus_stats(hyps, refs, tokenize_13a)?.score())
}

/// The mteval-v13a tokenization: unescape a few entities, split off
/// punctuation and symbols, and separate periods and commas unless they
/// sit between digits.
pub fn tokenize_13a(line: &str) -> String {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        [
            (r"([\{-~\[-` -&\(-\+:-@/])", " $1 "),
            (r"([^0-9])([\.,])", "$1 $2 "),
            (r"([\.,])([^0-9])", " $1 $2"),
            (r"([0-9])(-)", "$1 $2 "),
        ]
        .into_iter()
        .map(|(p, r)| (Regex::new(p).expect("valid pattern"), r))
        .collect()
    });
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
