use crate::rngstate::RngState;
use crate::{seeded_rng, Error, Result, Rng};
use rand::Rng as _;

use super::{BitextCorpus, Example};

/// `p_i = n_i^{1/T} / Σ_j n_j^{1/T}`; `T = ∞` gives the uniform distribution.
pub fn temperature_weights(sizes: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Domain("no sizes given".into()));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(bad) = sizes.iter().find(|&&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Domain(format!("sizes must be positive, got {bad}")));
    }
    let logs: Vec<f64> = sizes.iter().map(|n| n.ln() / temperature).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / z).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSchedule {
    pub temperature: f64,
    pub pairs: Vec<String>,
    pub sizes: Vec<u64>,
    pub probs: Vec<f64>,
}

impl SamplingSchedule {
    pub fn new(pairs: Vec<String>, sizes: Vec<u64>, temperature: f64) -> Result<Self> {
        if pairs.len() != sizes.len() {
            return Err(Error::Contract("one size per pair required".into()));
        }
        let f: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
        let probs = temperature_weights(&f, temperature)?;
        Ok(SamplingSchedule {
            temperature,
            pairs,
            sizes,
            probs,
        })
    }

    /// Schedule over the given corpora using their own sizes.
    pub fn for_corpora(corpora: &[BitextCorpus], temperature: f64) -> Result<Self> {
        Self::new(
            corpora.iter().map(|c| c.lang.clone()).collect(),
            corpora.iter().map(|c| c.examples.len() as u64).collect(),
            temperature,
        )
    }
}

/// One mixed mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Target language code per example.
    pub langs: Vec<String>,
    pub examples: Vec<Example>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.examples.iter().map(Example::budget_len).sum()
    }
}

/// Infinite seeded stream of mixed mini-batches.
pub struct BatchSampler {
    corpora: Vec<BitextCorpus>,
    cumulative: Vec<f64>,
    batch_tokens: usize,
    rng: Rng,
}

impl BatchSampler {
    /// Copies the scheduled corpora in schedule order.
    pub fn new(
        corpora: &[BitextCorpus],
        schedule: &SamplingSchedule,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut ordered = Vec::with_capacity(schedule.pairs.len());
        for p in &schedule.pairs {
            let c = corpora
                .iter()
                .find(|c| &c.lang == p)
                .ok_or_else(|| Error::Coverage(format!("no corpus for scheduled pair {p}")))?;
            if c.examples.is_empty() {
                return Err(Error::Coverage(format!("corpus for {p} is empty")));
            }
            ordered.push(c.clone());
        }
        if corpora.len() != ordered.len() {
            return Err(Error::Coverage("schedule must cover exactly the given corpora".into()));
        }
        let mut acc = 0.0;
        let cumulative = schedule
            .probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(BatchSampler {
            corpora: ordered,
            cumulative,
            batch_tokens,
            rng: seeded_rng(seed),
        })
    }

    /// (pair index in schedule order, example index).
    pub fn draw(&mut self) -> (usize, usize) {
        let u: f64 = self.rng.gen();
        let last = self.cumulative.len() - 1;
        let pair = self.cumulative.iter().position(|&c| u < c).unwrap_or(last);
        let ex = self.rng.gen_range(0..self.corpora[pair].examples.len());
        (pair, ex)
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut batch = Batch {
            langs: Vec::new(),
            examples: Vec::new(),
        };
        let mut tokens = 0;
        while batch.is_empty() || tokens < self.batch_tokens {
            let (p, e) = self.draw();
            let c = &self.corpora[p];
            tokens += c.examples[e].budget_len();
            batch.langs.push(c.lang.clone());
            batch.examples.push(c.examples[e].clone());
        }
        batch
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn restore_rng(&mut self, state: &RngState) {
        self.rng = state.restore();
    }
}

impl Iterator for BatchSampler {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}
