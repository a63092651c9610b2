//! Loading workspaces, writing run directories, and the resumable
//! regime x sweep x seed runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::adapter::AdapterConfig;
use crate::data::{Split, Vocab};
use crate::evalgen::{report_emit, ReportSummary, ScoreTable};
use crate::langreg::{budget_report, load_registry, LanguageRegistry};
use crate::model::{ModelConfig, Seq2SeqModel};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{
    append_log, checkpoint_load, checkpoint_save, config_fingerprint, model_checkpoint, model_from_checkpoint,
    TrainConfig, LOG_HEADER,
};
use crate::{derive_seed, Error, Result};

use super::pipeline::{regime_grouping, run_regime, warmup_backbone, Dataset, Regime, RegimeOutcome};
use super::spec::ExperimentSpec;

pub fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Registry and tokenized data named by `spec`. `vocab` forces the
/// vocabulary (e.g. the one stored in a checkpoint).
pub fn load_workspace(spec: &ExperimentSpec, vocab: Option<Vocab>) -> Result<Dataset> {
    let registry = load_registry(Path::new(&spec.registry))?;
    let mut ds = match spec.data_dir() {
        None => Dataset::from_synth(&generate(&registry, &SynthConfig::default())?, vocab)?,
        Some(dir) => Dataset::load_dir(&dir, &registry, spec.token_mode, vocab)?,
    };
    ds.truncate(spec.model.max_len - 1);
    Ok(ds)
}

pub fn model_config(spec: &ExperimentSpec, ds: &Dataset) -> ModelConfig {
    ModelConfig {
        vocab_size: ds.vocab.len(),
        ..spec.model.clone()
    }
}

/// Warmed-up backbone for `seed`, cached as `<cache>/backbone-s<seed>.ckpt`.
pub fn backbone(spec: &ExperimentSpec, ds: &Dataset, seed: u64, cache: Option<&Path>) -> Result<Seq2SeqModel> {
    let mc = model_config(spec, ds);
    let key = format!("{seed}|{:?}|{:?}|{}", spec.warmup, mc, ds.vocab.tokens().join(" "));
    let path = cache.map(|d| d.join(format!("backbone-s{seed}.ckpt")));
    if let Some(p) = path.as_deref().filter(|p| p.exists()) {
        let ck = checkpoint_load(p)?;
        if ck.meta.get("backbone.key") == Some(&key) {
            return model_from_checkpoint(&ck);
        }
    }
    let model = warmup_backbone(ds, &mc, &spec.warmup, seed)?;
    if let Some(p) = path {
        let mut ck = model_checkpoint(&model, None, &ds.vocab);
        ck.meta.insert("backbone.key".into(), key);
        if let Some(d) = p.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        checkpoint_save(&ck, &p)?;
    }
    Ok(model)
}

/// Directory-safe form of a group id.
pub fn group_dir_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// `grouping.tsv`, `vocab.txt` and `groups/<id>/{best,last}.ckpt` + `train.log.tsv`.
pub fn write_run(dir: &Path, outcome: &RegimeOutcome, ds: &Dataset) -> Result<()> {
    write_file(&dir.join("grouping.tsv"), &outcome.grouping.to_text())?;
    write_file(&dir.join("vocab.txt"), &ds.vocab.to_text())?;
    write_file(&dir.join("registry.tsv"), &ds.registry.to_text())?;
    let mut summary = String::from("group\tupdates\tbest_perplexity\tfinal_perplexity\n");
    for (gid, o) in &outcome.groups {
        let gd = dir.join("groups").join(group_dir_name(gid));
        std::fs::create_dir_all(&gd).map_err(|e| Error::io(&gd, e))?;
        checkpoint_save(&o.best, &gd.join("best.ckpt"))?;
        checkpoint_save(&o.last, &gd.join("last.ckpt"))?;
        let log = gd.join("train.log.tsv");
        write_file(&log, LOG_HEADER)?;
        append_log(&log, &o.log)?;
        let _ = writeln!(summary, "{gid}\t{}\t{}\t{}", o.updates, o.best_perplexity, o.final_perplexity);
    }
    write_file(&dir.join("summary.tsv"), &summary)
}

/// One point of the experiment grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub regime: Regime,
    pub seed: u64,
    pub bottleneck: usize,
    pub dropout: f64,
}

impl Cell {
    pub fn sweep_name(&self) -> String {
        format!("d{}-p{}", self.bottleneck, self.dropout)
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join("cells").join(format!("s{}-{}", self.seed, self.sweep_name())).join(self.regime.as_str())
    }

    pub fn train_config(&self, spec: &ExperimentSpec) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            dropout: self.dropout,
            ..spec.train.clone()
        }
    }

    /// Covers every setting that changes the cell's checkpoints or scores.
    pub fn fingerprint(&self, spec: &ExperimentSpec, mc: &ModelConfig, ac: &AdapterConfig) -> u64 {
        let key = format!(
            "{}|{:?}|{:?}|{:?}|{:?}|{}|{}|{}",
            self.regime.as_str(),
            self.train_config(spec),
            spec.warmup,
            spec.budget,
            spec.decode,
            spec.registry,
            spec.data,
            self.dropout
        );
        derive_seed(config_fingerprint(mc, self.regime.uses_adapters().then_some(ac)), &key)
    }
}

/// Scores of a finished cell, stored in `<cell>/cell.tsv`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub fingerprint: u64,
    pub pooled_perplexity: f64,
    pub bleu: BTreeMap<String, f64>,
    pub groups: usize,
}

impl CellResult {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fingerprint\t{:016x}\npooled_perplexity\t{}\ngroups\t{}\n",
            self.fingerprint, self.pooled_perplexity, self.groups
        );
        for (l, b) in &self.bleu {
            let _ = writeln!(s, "bleu\t{l}\t{b}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let mut r = CellResult {
            fingerprint: 0,
            pooled_perplexity: f64::NAN,
            bleu: BTreeMap::new(),
            groups: 0,
        };
        for (i, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["fingerprint", v] => r.fingerprint = u64::from_str_radix(v, 16).map_err(|_| bad(i + 1, "bad fingerprint"))?,
                ["pooled_perplexity", v] => r.pooled_perplexity = v.parse().map_err(|_| bad(i + 1, "bad perplexity"))?,
                ["groups", v] => r.groups = v.parse().map_err(|_| bad(i + 1, "bad group count"))?,
                ["bleu", l, v] => {
                    r.bleu.insert(l.to_string(), v.parse().map_err(|_| bad(i + 1, "bad bleu"))?);
                }
                _ => return Err(bad(i + 1, "unrecognized cell line")),
            }
        }
        Ok(r)
    }
}

/// What `run_experiment` did.
pub struct ExperimentRun {
    pub cells: Vec<(Cell, CellResult)>,
    pub skipped: usize,
    pub reports: Vec<(String, ReportSummary)>,
}

fn finished_cell(dir: &Path, fingerprint: u64) -> Option<CellResult> {
    let text = std::fs::read_to_string(dir.join("cell.tsv")).ok()?;
    let r = CellResult::parse(&text).ok()?;
    if r.fingerprint != fingerprint {
        return None;
    }
    let groups = std::fs::read_dir(dir.join("groups")).ok()?;
    let mut n = 0;
    for g in groups.flatten() {
        let ck = checkpoint_load(&g.path().join("best.ckpt")).ok()?;
        let mc = ck.model_config().ok()?;
        let ac = ck.adapter_config().ok()?;
        ck.check_fingerprint(config_fingerprint(&mc, ac.as_ref())).ok()?;
        n += 1;
    }
    (n == r.groups).then_some(r)
}

/// Run every (regime, seed, bottleneck, dropout) cell, skipping finished
/// ones, then write one report per sweep point averaged over seeds.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, workers: usize, mut progress: impl FnMut(&str)) -> Result<ExperimentRun> {
    spec.validate()?;
    let ds = load_workspace(spec, None)?;
    let mc = model_config(spec, &ds);
    let registry: &LanguageRegistry = &ds.registry;
    let mut cells = Vec::new();
    let mut skipped = 0;
    for &seed in &spec.seeds {
        let mut bb: Option<Seq2SeqModel> = None;
        for &bottleneck in &spec.bottlenecks {
            for &dropout in &spec.dropouts {
                let ac = spec.adapter(bottleneck)?;
                for &regime in &spec.regimes {
                    let cell = Cell { regime, seed, bottleneck, dropout };
                    let dir = cell.dir(out);
                    let fp = cell.fingerprint(spec, &mc, &ac);
                    if let Some(r) = finished_cell(&dir, fp) {
                        progress(&format!("skip {} seed {seed} {}", regime.as_str(), cell.sweep_name()));
                        skipped += 1;
                        cells.push((cell, r));
                        continue;
                    }
                    progress(&format!("run {} seed {seed} {}", regime.as_str(), cell.sweep_name()));
                    if bb.is_none() {
                        bb = Some(backbone(spec, &ds, seed, Some(&out.join("backbones")))?);
                    }
                    let base = bb.as_ref().expect("backbone built");
                    let (grouping, report) = regime_grouping(regime, base, &ds, seed)?;
                    let outcome =
                        run_regime(base, &ds, regime, grouping, &cell.train_config(spec), &ac, spec.budget, workers)?;
                    if dir.exists() {
                        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    }
                    write_run(&dir, &outcome, &ds)?;
                    if let Some(rep) = report {
                        write_file(&dir.join("cluster.txt"), &rep.to_text())?;
                    }
                    let bleu = outcome
                        .bleu(&ds, Split::Test, &spec.decode, workers)?
                        .into_iter()
                        .map(|(l, s)| (l, s.score()))
                        .collect();
                    let r = CellResult {
                        fingerprint: fp,
                        pooled_perplexity: outcome.pooled_perplexity(&ds)?,
                        bleu,
                        groups: outcome.groups.len(),
                    };
                    write_file(&dir.join("cell.tsv"), &r.to_text())?;
                    cells.push((cell, r));
                }
            }
        }
    }
    let reports = write_reports(spec, &ds, &mc, registry, &cells, out)?;
    Ok(ExperimentRun { cells, skipped, reports })
}

/// Baseline of the delta charts: `pair` when run, else the first regime.
pub fn baseline_regime(regimes: &[Regime]) -> Regime {
    if regimes.contains(&Regime::Pair) {
        Regime::Pair
    } else {
        regimes[0]
    }
}

fn write_reports(
    spec: &ExperimentSpec,
    ds: &Dataset,
    mc: &ModelConfig,
    registry: &LanguageRegistry,
    cells: &[(Cell, CellResult)],
    out: &Path,
) -> Result<Vec<(String, ReportSummary)>> {
    let baseline = baseline_regime(&spec.regimes);
    let mut reports = Vec::new();
    for &bottleneck in &spec.bottlenecks {
        for &dropout in &spec.dropouts {
            let point: Vec<&(Cell, CellResult)> =
                cells.iter().filter(|(c, _)| c.bottleneck == bottleneck && c.dropout == dropout).collect();
            let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
            let mut ppl = String::from("regime\tseed\tpooled_perplexity\n");
            for (c, r) in &point {
                let _ = writeln!(ppl, "{}\t{}\t{}", c.regime.as_str(), c.seed, r.pooled_perplexity);
                for (l, b) in &r.bleu {
                    let e = sums.entry((c.regime.as_str().to_string(), l.clone())).or_insert((0.0, 0));
                    e.0 += b;
                    e.1 += 1;
                }
            }
            let table: ScoreTable = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
            let ac = spec.adapter(bottleneck)?;
            let mut budgets = Vec::new();
            for &r in spec.regimes.iter().filter(|r| r.uses_adapters()) {
                let seed = spec.seeds[0];
                let grouping = match r {
                    // gmm groupings come from training; read the first seed's
                    Regime::Gmm => {
                        let cell = Cell { regime: r, seed, bottleneck, dropout };
                        let text = std::fs::read_to_string(cell.dir(out).join("grouping.tsv"))
                            .map_err(|e| Error::io(cell.dir(out).join("grouping.tsv"), e))?;
                        crate::langreg::GroupingScheme::parse(&text)?
                    }
                    _ => regime_grouping(r, &Seq2SeqModel::build(mc.clone(), &mut crate::seeded_rng(0))?, ds, seed)?.0,
                };
                budgets.push((r.as_str().to_string(), budget_report(mc, &ac, &grouping)));
            }
            let name = Cell { regime: baseline, seed: 0, bottleneck, dropout }.sweep_name();
            let dir = out.join("report").join(&name);
            let summary = report_emit(&table, registry, baseline.as_str(), &budgets, &dir)?;
            write_file(&dir.join("perplexity.tsv"), &ppl)?;
            reports.push((name, summary));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_result_round_trips() {
        let r = CellResult {
            fingerprint: 0xdead_beef_0bad_f00d,
            pooled_perplexity: 12.5,
            bleu: [("bg".to_string(), 31.25), ("fil".to_string(), 0.0)].into(),
            groups: 3,
        };
        assert_eq!(CellResult::parse(&r.to_text()).unwrap(), r);
        assert!(CellResult::parse("bogus\tline\n").is_err());
    }

    #[test]
    fn baseline_prefers_pair() {
        assert_eq!(baseline_regime(&[Regime::Family, Regime::Pair]), Regime::Pair);
        assert_eq!(baseline_regime(&[Regime::Agnostic, Regime::Family]), Regime::Agnostic);
    }

    #[test]
    fn fingerprint_tracks_settings() {
        let spec = ExperimentSpec {
            regimes: vec![Regime::Family],
            ..ExperimentSpec::default()
        };
        let mc = ModelConfig { vocab_size: 50, ..spec.model.clone() };
        let ac = spec.adapter(4).unwrap();
        let cell = Cell { regime: Regime::Family, seed: 1, bottleneck: 4, dropout: 0.1 };
        let fp = cell.fingerprint(&spec, &mc, &ac);
        assert_eq!(fp, cell.fingerprint(&spec, &mc, &ac));
        assert_ne!(fp, Cell { dropout: 0.3, ..cell }.fingerprint(&spec, &mc, &ac));
        assert_ne!(fp, Cell { seed: 2, ..cell }.fingerprint(&spec, &mc, &ac));
        let mut other = spec.clone();
        other.train.max_updates += 1;
        assert_ne!(fp, cell.fingerprint(&other, &mc, &ac));
        assert_eq!(group_dir_name("Balto-Slavic"), "Balto-Slavic");
        assert_eq!(group_dir_name("a b/c"), "a_b_c");
    }
}
