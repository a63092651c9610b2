use std::cmp::Ordering;

use crate::data::{BitextCorpus, Vocab, EOS};
use crate::model::{AdapterSet, Encoded, Mode, Seq2SeqModel};
use crate::numcore::{Graph, Tensor};
use crate::Result;

use super::BleuStats;

/// A (possibly unfinished) output sequence; `tokens` include the final eos
/// when `finished`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Tokens without the trailing eos.
    pub fn output(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// `log_prob / len^penalty`, where `len` counts generated tokens incl. eos.
    pub fn score(&self, length_penalty: f64) -> f64 {
        if self.tokens.is_empty() {
            return self.log_prob;
        }
        self.log_prob / (self.tokens.len() as f64).powf(length_penalty)
    }
}

/// Encoder output for one source, reused across decoding steps.
pub struct SourceState<'m> {
    model: &'m Seq2SeqModel,
    adapters: Option<&'m AdapterSet>,
    states: Tensor,
    tag: usize,
}

impl<'m> SourceState<'m> {
    pub fn new(model: &'m Seq2SeqModel, adapters: Option<&'m AdapterSet>, src: &[usize], tag: usize) -> Result<Self> {
        let mut g = Graph::new();
        let enc = model.encode_graph(&mut g, adapters, &[src], &[tag], &mut Mode::Eval, None)?;
        Ok(SourceState {
            model,
            adapters,
            states: g.value(enc.states).clone(),
            tag,
        })
    }

    /// Next-token log-probabilities after each prefix (all of equal length).
    pub fn next_log_probs(&self, prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let len = self.states.rows();
        let mut g = Graph::new();
        let mut data = Vec::with_capacity(n * self.states.numel());
        for _ in 0..n {
            data.extend_from_slice(self.states.data());
        }
        let states = g.constant(Tensor::new(vec![n * len, self.states.cols()], data)?);
        let enc = Encoded {
            states,
            lens: vec![len; n],
            max_len: len,
        };
        let inputs: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(self.tag).chain(p.iter().copied()).collect())
            .collect();
        let refs: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
        let dec = self.model.decode_graph(&mut g, self.adapters, &enc, &refs, &mut Mode::Eval, None)?;
        let logits = g.value(dec.logits);
        Ok((0..n)
            .map(|b| log_softmax(logits.row(b * dec.max_len + dec.lens[b] - 1)))
            .collect())
    }

    /// Total log-probability of `tokens` by teacher forcing.
    pub fn sequence_log_prob(&self, tokens: &[usize]) -> Result<f64> {
        let mut lp = 0.0;
        for t in 0..tokens.len() {
            lp += self.next_log_probs(&[&tokens[..t]])?[0][tokens[t]];
        }
        Ok(lp)
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = top + row.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Argmax (lowest id on ties) until eos or `max_len` tokens.
pub fn greedy_decode(
    model: &Seq2SeqModel,
    adapters: Option<&AdapterSet>,
    src: &[usize],
    lang_tag: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    let st = SourceState::new(model, adapters, src, lang_tag)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let lp = st.next_log_probs(&[&h.tokens])?.remove(0);
        let best = (0..lp.len()).fold(0, |b, v| if lp[v] > lp[b] { v } else { b });
        h.tokens.push(best);
        h.log_prob += lp[best];
        if best == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

fn by_score_then_tokens(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search. Each step keeps the `beam` best expansions of the live
/// hypotheses by log-probability; expansions ending in eos retire. The
/// result maximizes `log_prob / len^length_penalty` over retired and
/// (at `max_len`) unfinished hypotheses; ties go to the smaller sequence.
pub fn beam_search(
    model: &Seq2SeqModel,
    adapters: Option<&AdapterSet>,
    src: &[usize],
    lang_tag: usize,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    let beam = beam.max(1);
    let st = SourceState::new(model, adapters, src, lang_tag)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = live.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = st.next_log_probs(&prefixes)?;
        let mut cands: Vec<Hypothesis> = Vec::with_capacity(live.len() * lps[0].len());
        for (h, lp) in live.iter().zip(&lps) {
            for (v, &l) in lp.iter().enumerate() {
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                cands.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + l,
                    finished: v == EOS,
                });
            }
        }
        cands.sort_by(|a, b| by_score_then_tokens((a.log_prob, &a.tokens), (b.log_prob, &b.tokens)));
        cands.truncate(beam);
        live.clear();
        for c in cands {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
    }
    done.extend(live);
    Ok(done
        .into_iter()
        .min_by(|a, b| {
            by_score_then_tokens(
                (a.score(length_penalty), &a.tokens),
                (b.score(length_penalty), &b.tokens),
            )
        })
        .expect("beam search yields a hypothesis"))
}

/// Decoding settings for translating whole corpora.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 5,
            max_len: 32,
            length_penalty: 1.0,
        }
    }
}

pub fn decode_one(model: &Seq2SeqModel, src: &[usize], tag: usize, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    let adapters = model.active_adapters();
    let h = if cfg.beam <= 1 {
        greedy_decode(model, adapters, src, tag, cfg.max_len)?
    } else {
        beam_search(model, adapters, src, tag, cfg.beam, cfg.max_len, cfg.length_penalty)?
    };
    Ok(h.output().to_vec())
}

/// Translate id sequences with the model's active adapters, in input order.
pub fn translate_ids(
    model: &Seq2SeqModel,
    srcs: &[Vec<usize>],
    tag: usize,
    cfg: &DecodeConfig,
    workers: usize,
) -> Result<Vec<Vec<usize>>> {
    if workers > 1 && srcs.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| crate::Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| srcs.par_iter().map(|s| decode_one(model, s, tag, cfg)).collect())
    } else {
        srcs.iter().map(|s| decode_one(model, s, tag, cfg)).collect()
    }
}

/// Decode a corpus and score it against its references.
pub fn evaluate_corpus(
    model: &Seq2SeqModel,
    vocab: &Vocab,
    corpus: &BitextCorpus,
    cfg: &DecodeConfig,
    workers: usize,
) -> Result<(BleuStats, Vec<String>)> {
    let tag = vocab.tag_id(&corpus.lang)?;
    let srcs: Vec<Vec<usize>> = corpus.examples.iter().map(|e| e.src.clone()).collect();
    let outs = translate_ids(model, &srcs, tag, cfg, workers)?;
    let mut stats = BleuStats::default();
    let mut hyps = Vec::with_capacity(outs.len());
    for (o, e) in outs.iter().zip(&corpus.examples) {
        let h = vocab.decode(o);
        let r = vocab.decode(&e.tgt);
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        stats.add(&BleuStats::sentence(&ht, &rt));
        hyps.push(h);
    }
    Ok((stats, hyps))
}
