//! Per-group training with warmup, gradient accumulation, validation
//! perplexity, early stopping and resumable checkpoints.

mod checkpoint;


use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    adapter_from_kv, adapter_kv, checkpoint_load, checkpoint_save, config_fingerprint, Checkpoint,
    FORMAT_VERSION,
};
use checkpoint::{f64_bits, parse_f64_bits};

use crate::adapter::AdapterConfig;
use crate::data::{Batch, BatchSampler, BitextCorpus, Example, SamplingSchedule, TokenMode, Vocab, EOS, PAD};
use crate::langreg::GroupingScheme;
use crate::model::{AdapterSet, Mode, Seq2SeqModel};
use crate::numcore::{Adam, AdamConfig, Graph, Moments, Tensor, Var};
use crate::rngstate::RngState;
use crate::{derive_seed, seeded_rng, Error, Result, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_updates: usize,
    pub warmup_updates: usize,
    pub max_lr: f64,
    pub label_smoothing: f64,
    /// Micro-batches accumulated per update.
    pub update_frequency: usize,
    pub eval_interval_updates: usize,
    pub patience: usize,
    pub seed: u64,
    pub dropout: f64,
    /// Token budget per micro-batch.
    pub batch_tokens: usize,
    pub temperature: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_updates: 2000,
            warmup_updates: 100,
            max_lr: 3e-3,
            label_smoothing: 0.2,
            update_frequency: 2,
            eval_interval_updates: 100,
            patience: 5,
            seed: 1,
            dropout: 0.1,
            batch_tokens: 200,
            temperature: 1.5,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    /// The large-scale values: 130k updates, 4k warmup, peak 1e-4, eval every 5k.
    pub fn large_scale() -> Self {
        TrainConfig {
            max_updates: 130_000,
            warmup_updates: 4000,
            max_lr: 1e-4,
            eval_interval_updates: 5000,
            batch_tokens: 900,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.warmup_updates > self.max_updates {
            errs.push(format!(
                "warmup_updates {} exceeds max_updates {}",
                self.warmup_updates, self.max_updates
            ));
        }
        if self.patience < 1 {
            errs.push("patience must be at least 1".into());
        }
        for (name, v) in [
            ("max_updates", self.max_updates),
            ("update_frequency", self.update_frequency),
            ("eval_interval_updates", self.eval_interval_updates),
            ("batch_tokens", self.batch_tokens),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if !(self.max_lr > 0.0) {
            errs.push(format!("max_lr must be positive, got {}", self.max_lr));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push(format!("label_smoothing {} not in [0,1)", self.label_smoothing));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("dropout {} not in [0,1)", self.dropout));
        }
        if !(self.temperature > 0.0) {
            errs.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// Linear warmup to `max_lr`, then `max_lr·sqrt(warmup/step)`.
pub fn lr_at_step(cfg: &TrainConfig, step: usize) -> f64 {
    let w = cfg.warmup_updates;
    if w == 0 {
        return cfg.max_lr;
    }
    if step <= w {
        cfg.max_lr * step as f64 / w as f64
    } else {
        cfg.max_lr * (w as f64 / step as f64).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub since_improvement: usize,
    pub stopped: bool,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        EarlyStopState {
            best: f64::INFINITY,
            since_improvement: 0,
            stopped: false,
            patience,
        }
    }

    /// Whether the last update was a strict improvement.
    pub fn improved(&self) -> bool {
        self.since_improvement == 0 && self.best.is_finite()
    }
}

/// Lower is better; ties do not reset patience.
pub fn early_stop_update(state: EarlyStopState, metric: f64) -> EarlyStopState {
    let mut s = state;
    if metric < s.best {
        s.best = metric;
        s.since_improvement = 0;
    } else {
        s.since_improvement += 1;
    }
    s.stopped = s.since_improvement > s.patience;
    s
}

/// Examples of a batch with the language tag of each.
pub struct TaggedBatch<'a> {
    pub examples: &'a [Example],
    pub tags: Vec<usize>,
}

impl<'a> TaggedBatch<'a> {
    pub fn new(batch: &'a Batch, vocab: &Vocab) -> Result<Self> {
        let tags = batch
            .langs
            .iter()
            .map(|l| vocab.tag_id(l))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaggedBatch {
            examples: &batch.examples,
            tags,
        })
    }

    /// Non-pad target positions (each target plus its eos).
    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len() + 1).sum()
    }
}

/// Teacher-forced forward pass; returns the summed loss over target tokens
/// divided by `normalizer`. Decoder input is `[tag] + tgt`, targets `tgt + [eos]`.
pub fn batch_loss(
    g: &mut Graph,
    model: &Seq2SeqModel,
    batch: &TaggedBatch,
    smoothing: f64,
    normalizer: f64,
    mode: &mut Mode,
) -> Result<Var> {
    let srcs: Vec<&[usize]> = batch.examples.iter().map(|e| e.src.as_slice()).collect();
    let enc = model.encode_graph(g, model.active_adapters(), &srcs, &batch.tags, mode, None)?;
    let dec_in: Vec<Vec<usize>> = batch
        .examples
        .iter()
        .zip(&batch.tags)
        .map(|(e, &t)| std::iter::once(t).chain(e.tgt.iter().copied()).collect())
        .collect();
    let refs: Vec<&[usize]> = dec_in.iter().map(Vec::as_slice).collect();
    let dec = model.decode_graph(g, model.active_adapters(), &enc, &refs, mode, None)?;
    let mut targets = vec![PAD; dec.lens.len() * dec.max_len];
    for (b, e) in batch.examples.iter().enumerate() {
        let row = &mut targets[b * dec.max_len..];
        row[..e.tgt.len()].copy_from_slice(&e.tgt);
        row[e.tgt.len()] = EOS;
    }
    g.label_smoothed_nll_scaled(dec.logits, &targets, smoothing, PAD, normalizer)
}

const EVAL_CHUNK: usize = 32;

/// Pooled perplexity: exp(unsmoothed cross-entropy summed over every target
/// token of every corpus ÷ token count), using the model's active adapters.
pub fn validate_perplexity(model: &Seq2SeqModel, valid: &[BitextCorpus], vocab: &Vocab) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for c in valid {
        let tag = vocab.tag_id(&c.lang)?;
        for chunk in c.examples.chunks(EVAL_CHUNK) {
            let batch = TaggedBatch {
                examples: chunk,
                tags: vec![tag; chunk.len()],
            };
            let mut g = Graph::new();
            let loss = batch_loss(&mut g, model, &batch, 0.0, 1.0, &mut Mode::Eval)?;
            total += g.value(loss).item();
            tokens += batch.target_tokens();
        }
    }
    if tokens == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok((total / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub update: usize,
    pub lr: f64,
    pub loss: f64,
    pub perplexity: Option<f64>,
}

impl LogRow {
    pub fn tsv(&self) -> String {
        let ppl = self.perplexity.map_or_else(|| "-".to_string(), |p| format!("{p:.6}"));
        format!("{}\t{:.6e}\t{:.6}\t{}\n", self.update, self.lr, self.loss, ppl)
    }
}

pub const LOG_HEADER: &str = "update\tlr\tloss\tperplexity\n";

/// Append rows to a tab-separated log, writing the header for a new file.
pub fn append_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(LOG_HEADER);
    }
    for r in rows {
        text.push_str(&r.tsv());
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Training state of one adapter group (or the whole model when fully fine-tuning).
pub struct GroupTrainer {
    pub group_id: String,
    pub langs: Vec<String>,
    model: Seq2SeqModel,
    adapter_cfg: Option<AdapterConfig>,
    cfg: TrainConfig,
    vocab: Vocab,
    optimizer: Adam,
    update: usize,
    early: EarlyStopState,
    sampler: BatchSampler,
    dropout_rng: Rng,
    valid: Vec<BitextCorpus>,
    best: Option<(f64, Checkpoint)>,
    log: Vec<LogRow>,
}

fn corpora_for(langs: &[String], corpora: &[BitextCorpus], what: &str) -> Result<Vec<BitextCorpus>> {
    langs
        .iter()
        .map(|l| {
            corpora
                .iter()
                .find(|c| &c.lang == l)
                .cloned()
                .ok_or_else(|| Error::Coverage(format!("no {what} corpus for language {l}")))
        })
        .collect()
}

impl GroupTrainer {
    /// Fresh trainer. With `adapter_cfg` the backbone is frozen and a new
    /// adapter set is attached; without it every parameter is trained.
    pub fn new(
        base: &Seq2SeqModel,
        group_id: &str,
        langs: &[String],
        train: &[BitextCorpus],
        valid: &[BitextCorpus],
        vocab: &Vocab,
        cfg: &TrainConfig,
        adapter_cfg: Option<&AdapterConfig>,
    ) -> Result<Self> {
        cfg.validate()?;
        if langs.is_empty() {
            return Err(Error::Coverage(format!("group {group_id} has no languages")));
        }
        let mut model = base.clone();
        model.detach_adapter_set();
        model.set_dropout(cfg.dropout);
        let group_seed = derive_seed(cfg.seed, group_id);
        match adapter_cfg {
            Some(a) => {
                model.freeze_backbone();
                let mut init = seeded_rng(derive_seed(group_seed, "init"));
                let set = AdapterSet::fresh(model.config(), a, group_id, &mut init)?;
                model.attach_adapter_set(set)?;
            }
            None => model.unfreeze_backbone(),
        }
        let train = corpora_for(langs, train, "training")?;
        let valid = corpora_for(langs, valid, "validation")?;
        if valid.iter().all(BitextCorpus::is_empty) {
            return Err(Error::Coverage(format!("group {group_id} has no validation data")));
        }
        let schedule = SamplingSchedule::for_corpora(&train, cfg.temperature)?;
        let sampler = BatchSampler::new(&train, &schedule, cfg.batch_tokens, derive_seed(group_seed, "sampler"))?;
        Ok(GroupTrainer {
            group_id: group_id.to_string(),
            langs: langs.to_vec(),
            model,
            adapter_cfg: adapter_cfg.cloned(),
            cfg: cfg.clone(),
            vocab: vocab.clone(),
            optimizer: Adam::new(AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            }),
            update: 0,
            early: EarlyStopState::new(cfg.patience),
            sampler,
            dropout_rng: seeded_rng(derive_seed(group_seed, "dropout")),
            valid,
            best: None,
            log: Vec::new(),
        })
    }

    /// Continue from a checkpoint written by [`GroupTrainer::checkpoint`].
    pub fn resume(
        ckpt: &Checkpoint,
        train: &[BitextCorpus],
        valid: &[BitextCorpus],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        let model_cfg = ckpt.model_config()?;
        let adapter_cfg = ckpt.adapter_config()?;
        ckpt.check_fingerprint(config_fingerprint(&model_cfg, adapter_cfg.as_ref()))?;
        let vocab = vocab_from_checkpoint(ckpt)?;
        let group_id = ckpt.meta_str("group.id")?.to_string();
        let langs: Vec<String> = ckpt.meta_str("group.langs")?.split_whitespace().map(str::to_string).collect();
        let base = model_from_checkpoint(ckpt)?;
        let mut t = GroupTrainer::new(&base, &group_id, &langs, train, valid, &vocab, cfg, adapter_cfg.as_ref())?;
        t.model = base;
        t.model.set_dropout(cfg.dropout);
        match &adapter_cfg {
            Some(_) => t.model.freeze_backbone(),
            None => t.model.unfreeze_backbone(),
        }
        t.update = ckpt.meta_parse("train.update")?;
        t.sampler.restore_rng(&RngState::from_hex(ckpt.meta_str("rng.sampler")?)?);
        t.dropout_rng = RngState::from_hex(ckpt.meta_str("rng.dropout")?)?.restore();
        t.early = EarlyStopState {
            best: parse_f64_bits(ckpt.meta_str("early.best")?)
                .ok_or_else(|| Error::Integrity("malformed early.best".into()))?,
            since_improvement: ckpt.meta_parse("early.since")?,
            stopped: ckpt.meta_parse("early.stopped")?,
            patience: cfg.patience,
        };
        for p in t.model.all_params() {
            let (Some(m), Some(v)) = (
                ckpt.tensors.get(&format!("adam.m/{}", p.name)),
                ckpt.tensors.get(&format!("adam.v/{}", p.name)),
            ) else {
                continue;
            };
            let step: u64 = ckpt.meta_parse(&format!("adam.t/{}", p.name))?;
            t.optimizer.state.insert(
                p.name.clone(),
                Moments {
                    m: m.data().to_vec(),
                    v: v.data().to_vec(),
                    t: step,
                },
            );
        }
        Ok(t)
    }

    pub fn model(&self) -> &Seq2SeqModel {
        &self.model
    }

    pub fn into_model(self) -> Seq2SeqModel {
        self.model
    }

    pub fn updates(&self) -> usize {
        self.update
    }

    pub fn early_stop(&self) -> &EarlyStopState {
        &self.early
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    pub fn best(&self) -> Option<&(f64, Checkpoint)> {
        self.best.as_ref()
    }

    pub fn done(&self) -> bool {
        self.early.stopped || self.update >= self.cfg.max_updates
    }

    /// One optimizer update on the given micro-batches; returns the
    /// per-token training loss of the whole update.
    pub fn apply_update(&mut self, micro: &[Batch]) -> Result<f64> {
        let tagged = micro
            .iter()
            .map(|b| TaggedBatch::new(b, &self.vocab))
            .collect::<Result<Vec<_>>>()?;
        let normalizer: usize = tagged.iter().map(TaggedBatch::target_tokens).sum();
        if normalizer == 0 {
            return Err(Error::EmptyBatch);
        }
        self.model.zero_grad();
        let mut loss = 0.0;
        for b in &tagged {
            let mut g = Graph::new();
            let l = {
                let mut mode = if self.cfg.dropout > 0.0 {
                    Mode::Train(&mut self.dropout_rng)
                } else {
                    Mode::Eval
                };
                batch_loss(&mut g, &self.model, b, self.cfg.label_smoothing, normalizer as f64, &mut mode)?
            };
            loss += g.value(l).item();
            g.backward(l)?;
            g.accumulate_into(self.model.all_params_mut());
        }
        self.update += 1;
        let lr = lr_at_step(&self.cfg, self.update);
        self.optimizer.step(self.model.all_params_mut(), lr);
        self.model.zero_grad();
        self.log.push(LogRow {
            update: self.update,
            lr,
            loss,
            perplexity: None,
        });
        Ok(loss)
    }

    /// Sample `update_frequency` micro-batches and apply one update.
    pub fn step(&mut self) -> Result<f64> {
        let micro: Vec<Batch> = (0..self.cfg.update_frequency)
            .map(|_| self.sampler.next_batch())
            .collect();
        self.apply_update(&micro)
    }

    pub fn validate(&self) -> Result<f64> {
        validate_perplexity(&self.model, &self.valid, &self.vocab)
    }

    /// Validate, update early stopping and keep the best snapshot.
    pub fn evaluate(&mut self) -> Result<f64> {
        let ppl = self.validate()?;
        self.early = early_stop_update(self.early, ppl);
        if self.early.improved() {
            self.best = Some((ppl, self.checkpoint()));
        }
        if let Some(row) = self.log.last_mut().filter(|r| r.update == self.update) {
            row.perplexity = Some(ppl);
        }
        Ok(ppl)
    }

    /// Train until `until` updates (capped by `max_updates`) or early stop.
    /// Evaluates every `eval_interval_updates` and at the final update.
    pub fn run_until(&mut self, until: usize) -> Result<()> {
        let end = until.min(self.cfg.max_updates);
        while self.update < end && !self.early.stopped {
            self.step()?;
            if self.update.is_multiple_of(self.cfg.eval_interval_updates) || self.update == self.cfg.max_updates {
                self.evaluate()?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.max_updates)
    }

    /// Full resumable snapshot.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = model_checkpoint(&self.model, self.adapter_cfg.as_ref(), &self.vocab);
        let m = &mut ck.meta;
        m.insert("group.id".into(), self.group_id.clone());
        m.insert("group.langs".into(), self.langs.join(" "));
        m.insert("train.update".into(), self.update.to_string());
        m.insert("rng.sampler".into(), self.sampler.rng_state().to_hex());
        m.insert("rng.dropout".into(), RngState::capture(&self.dropout_rng).to_hex());
        m.insert("early.best".into(), f64_bits(self.early.best));
        m.insert("early.since".into(), self.early.since_improvement.to_string());
        m.insert("early.stopped".into(), self.early.stopped.to_string());
        for (name, st) in &self.optimizer.state {
            m.insert(format!("adam.t/{name}"), st.t.to_string());
            let n = st.m.len();
            ck.tensors.insert(format!("adam.m/{name}"), Tensor::new(vec![n], st.m.clone()).expect("length matches"));
            ck.tensors.insert(format!("adam.v/{name}"), Tensor::new(vec![n], st.v.clone()).expect("length matches"));
        }
        ck
    }
}

/// Parameters, configs and vocabulary of `model` (no optimizer state).
pub fn model_checkpoint(model: &Seq2SeqModel, adapter_cfg: Option<&AdapterConfig>, vocab: &Vocab) -> Checkpoint {
    let mut ck = Checkpoint::new(config_fingerprint(model.config(), adapter_cfg));
    ck.meta.extend(model.config().to_kv());
    if let Some(a) = adapter_cfg {
        ck.meta.extend(adapter_kv(a));
    }
    if let Some(set) = model.active_adapters() {
        ck.meta.insert("adapter.set_id".into(), set.set_id.clone());
    }
    ck.meta.insert("vocab.mode".into(), vocab.mode().as_str().into());
    ck.meta.insert("vocab.tokens".into(), vocab.tokens().join("\n"));
    for p in model.all_params() {
        ck.tensors.insert(format!("param/{}", p.name), p.tensor.clone());
    }
    ck
}

pub fn vocab_from_checkpoint(ckpt: &Checkpoint) -> Result<Vocab> {
    let mode: TokenMode = ckpt.meta_str("vocab.mode")?.parse()?;
    Vocab::parse(ckpt.meta_str("vocab.tokens")?, mode)
}

/// Rebuild the model (with its adapter set attached, if any) from a checkpoint.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<Seq2SeqModel> {
    let cfg = ckpt.model_config()?;
    let adapter_cfg = ckpt.adapter_config()?;
    ckpt.check_fingerprint(config_fingerprint(&cfg, adapter_cfg.as_ref()))?;
    let mut rng = seeded_rng(0);
    let mut model = Seq2SeqModel::build(cfg, &mut rng)?;
    if let Some(a) = &adapter_cfg {
        let set_id = ckpt.meta_str("adapter.set_id")?;
        let set = AdapterSet::fresh(model.config(), a, set_id, &mut rng)?;
        model.attach_adapter_set(set)?;
        model.freeze_backbone();
    }
    for p in model.all_params_mut() {
        let t = ckpt
            .tensors
            .get(&format!("param/{}", p.name))
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter {}", p.name)))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Integrity(format!("parameter {} has shape {:?}", p.name, t.shape())));
        }
        p.tensor = t.clone();
    }
    Ok(model)
}

/// Result of training one group.
pub struct GroupOutcome {
    pub group_id: String,
    pub best_perplexity: f64,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub final_perplexity: f64,
    pub updates: usize,
    pub log: Vec<LogRow>,
}

/// Train one adapter set per group of `grouping` (or the whole model per
/// group when `adapter_cfg` is `None`), each on its own languages only.
/// Groups are independent and run on up to `workers` threads.
pub fn train_regime(
    base: &Seq2SeqModel,
    grouping: &GroupingScheme,
    train: &[BitextCorpus],
    valid: &[BitextCorpus],
    vocab: &Vocab,
    cfg: &TrainConfig,
    adapter_cfg: Option<&AdapterConfig>,
    workers: usize,
) -> Result<BTreeMap<String, GroupOutcome>> {
    cfg.validate()?;
    let mut trainers = Vec::with_capacity(grouping.len());
    for (gid, langs) in &grouping.groups {
        trainers.push(GroupTrainer::new(base, gid, langs, train, valid, vocab, cfg, adapter_cfg)?);
    }
    let run = |mut t: GroupTrainer| -> Result<GroupOutcome> {
        t.run()?;
        let final_perplexity = match t.log.last().and_then(|r| r.perplexity) {
            Some(p) => p,
            None => t.validate()?,
        };
        let (best_perplexity, best) = match t.best.take() {
            Some(b) => b,
            None => (final_perplexity, t.checkpoint()),
        };
        Ok(GroupOutcome {
            group_id: t.group_id.clone(),
            best_perplexity,
            best,
            last: t.checkpoint(),
            final_perplexity,
            updates: t.update,
            log: std::mem::take(&mut t.log),
        })
    };
    let outcomes: Vec<Result<GroupOutcome>> = if workers > 1 && trainers.len() > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
        pool.install(|| trainers.into_par_iter().map(run).collect())
    } else {
        trainers.into_iter().map(run).collect()
    };
    outcomes
        .into_iter()
        .map(|o| o.map(|o| (o.group_id.clone(), o)))
        .collect()
}
