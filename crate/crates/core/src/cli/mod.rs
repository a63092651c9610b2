//! Command-line front end.

pub mod experiment;
pub mod pipeline;
pub mod spec;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Read as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::cluster::{cluster_languages, cluster_report, EmbeddingBatch};
use crate::data::{Split, Vocab};
use crate::evalgen::{evaluate_corpus, translate_ids, BleuStats, DecodeConfig};
use crate::langreg::{budget_report, build_grouping, load_registry, GroupingKind, GroupingScheme};
use crate::model::ModelConfig;
use crate::synth::{generate, SynthConfig};
use crate::trainer::{checkpoint_load, model_from_checkpoint, vocab_from_checkpoint};
use crate::{derive_seed, seeded_rng};

use experiment::{backbone, group_dir_name, load_workspace, run_experiment, write_file, write_run};
use pipeline::{language_embeddings, regime_grouping, run_regime, Regime, UpdateBudget};
use spec::ExperimentSpec;

#[derive(Parser, Debug)]
#[command(name = "famadapt", version, about = "Language-family adapters for toy multilingual translation")]
struct Cli {
    /// Master seed (default 1).
    #[arg(long, global = true, env = "FAMADAPT_SEED")]
    seed: Option<u64>,
    /// Experiment configuration file (key = value lines).
    #[arg(long, global = true, env = "FAMADAPT_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "FAMADAPT_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, env = "FAMADAPT_WORKERS", default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the configuration file.
#[derive(Args, Debug, Default)]
struct SpecArgs {
    /// `bundled`, `bundled:ted`, `bundled:opus100` or a registry file.
    #[arg(long, env = "FAMADAPT_REGISTRY")]
    registry: Option<String>,
    /// `bundled` or a directory of `<split>.en-<xx>.{en,xx}` files.
    #[arg(long, env = "FAMADAPT_DATA")]
    data: Option<String>,
    #[arg(long)]
    bottleneck: Option<usize>,
    #[arg(long)]
    max_updates: Option<usize>,
    #[arg(long)]
    backbone_updates: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// `shared` or `per_group`.
    #[arg(long)]
    budget: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one regime end to end.
    Train {
        #[arg(long)]
        regime: Regime,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Translate a file line by line.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Target language code.
        #[arg(long)]
        lang: String,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
    },
    /// Corpus BLEU per language pair.
    Eval {
        /// Directory written by `train`.
        #[arg(long, conflicts_with = "checkpoint")]
        run: Option<PathBuf>,
        #[arg(long, requires = "lang")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        lang: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Group languages by clustering sentence vectors.
    Cluster {
        /// Externally computed vectors; otherwise the checkpoint's encoder is used.
        #[arg(long, conflicts_with = "checkpoint")]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Mixture components (default: number of families).
        #[arg(long)]
        components: Option<usize>,
        #[arg(long, default_value_t = 100)]
        pca_dim: usize,
        #[arg(long, default_value_t = 50)]
        sentences: usize,
        #[command(flatten)]
        spec: SpecArgs,
    },
    /// Adapter parameter budgets per grouping regime.
    Params {
        #[arg(long, default_value = "bundled:opus100")]
        registry: String,
        #[arg(long, default_value_t = 1024)]
        model_dim: usize,
        #[arg(long, default_value_t = 4096)]
        ff_dim: usize,
        #[arg(long, default_value_t = 16)]
        heads: usize,
        /// Encoder and decoder layers each.
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 250_054)]
        vocab: usize,
        #[arg(long, default_value_t = 1024)]
        max_len: usize,
        #[arg(long, default_value_t = 512)]
        bottleneck: usize,
        #[arg(long)]
        no_embedding_adapters: bool,
    },
    /// Run every regime x sweep point x seed of a configuration file and report.
    Experiment,
    /// Write the synthetic toy corpus as bitext files.
    Synth {
        #[arg(long, default_value = "bundled")]
        registry: String,
        #[arg(long)]
        max_train: Option<usize>,
    },
}

/// Entry point; returns the process exit code.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("error: bad usage");
            eprintln!("{}", first.trim_end());
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

fn base_spec(config: Option<&Path>) -> anyhow::Result<ExperimentSpec> {
    Ok(match config {
        Some(p) => ExperimentSpec::load(p)?,
        None => ExperimentSpec::default(),
    })
}

fn apply(mut s: ExperimentSpec, a: &SpecArgs) -> anyhow::Result<ExperimentSpec> {
    if let Some(v) = &a.registry {
        s.registry = v.clone();
    }
    if let Some(v) = &a.data {
        s.data = v.clone();
    }
    if let Some(v) = a.bottleneck {
        s.bottlenecks = vec![v];
    }
    if let Some(v) = a.max_updates {
        s.train.max_updates = v;
        s.train.warmup_updates = s.train.warmup_updates.min(v);
        s.train.eval_interval_updates = s.train.eval_interval_updates.min(v.max(1));
    }
    if let Some(v) = a.backbone_updates {
        s.warmup.train.max_updates = v;
        s.warmup.train.warmup_updates = s.warmup.train.warmup_updates.min(v);
        s.warmup.train.eval_interval_updates = s.warmup.train.eval_interval_updates.min(v.max(1));
    }
    if let Some(v) = a.dropout {
        s.dropouts = vec![v];
    }
    match a.budget.as_deref() {
        None => {}
        Some("shared") => s.budget = UpdateBudget::Shared,
        Some("per_group") => s.budget = UpdateBudget::PerGroup,
        Some(o) => bail!("unknown budget {o:?} (expected shared or per_group)"),
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let out = cli.out_dir.as_path();
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Train { regime, spec } => {
            let mut s = apply(base_spec(cli.config.as_deref())?, &spec)?;
            s.regimes = vec![regime];
            if let Some(seed) = cli.seed {
                s.seeds = vec![seed];
            }
            s.validate()?;
            cmd_train(&s, regime, out, workers)
        }
        Command::Translate { checkpoint, input, output, lang, beam, max_len } => {
            cmd_translate(&checkpoint, &input, output.as_deref(), &lang, beam, max_len, workers)
        }
        Command::Eval { run, checkpoint, lang, split, beam, spec } => {
            let s = apply(base_spec(cli.config.as_deref())?, &spec)?;
            let decode = DecodeConfig { beam, ..s.decode };
            let targets = match (run, checkpoint, lang) {
                (Some(dir), _, _) => run_checkpoints(&dir)?,
                (None, Some(c), Some(l)) => vec![(c, vec![l])],
                _ => bail!("eval needs --run DIR or --checkpoint FILE --lang CODE"),
            };
            cmd_eval(&s, &targets, split, &decode, out, workers)
        }
        Command::Cluster { embeddings, checkpoint, components, pca_dim, sentences, spec } => {
            let s = apply(base_spec(cli.config.as_deref())?, &spec)?;
            let seed = cli.seed.unwrap_or(1);
            cmd_cluster(&s, embeddings.as_deref(), checkpoint.as_deref(), components, pca_dim, sentences, seed, out)
        }
        Command::Params { registry, model_dim, ff_dim, heads, layers, vocab, max_len, bottleneck, no_embedding_adapters } => {
            let mc = ModelConfig {
                vocab_size: vocab,
                model_dim,
                ff_dim,
                heads,
                enc_layers: layers,
                dec_layers: layers,
                max_len,
                use_embedding_adapters: !no_embedding_adapters,
                ..ModelConfig::toy(vocab)
            };
            mc.validate()?;
            print!("{}", params_table(&registry, &mc, bottleneck)?);
            Ok(())
        }
        Command::Experiment => {
            let path = cli.config.context("experiment needs --config FILE")?;
            let mut s = ExperimentSpec::load(&path)?;
            if let Some(seed) = cli.seed {
                s.seeds = vec![seed];
            }
            let run = run_experiment(&s, out, workers, |m| eprintln!("{m}"))?;
            println!("cells\t{}\tskipped\t{}", run.cells.len(), run.skipped);
            for (c, r) in &run.cells {
                println!("{}\t{}\t{}\tpooled_perplexity\t{:.4}", c.regime.as_str(), c.seed, c.sweep_name(), r.pooled_perplexity);
            }
            for (name, sum) in &run.reports {
                println!("report\t{}\t{}", name, out.join("report").join(name).display());
                for f in &sum.files {
                    println!("file\t{}", f.display());
                }
            }
            Ok(())
        }
        Command::Synth { registry, max_train } => {
            let reg = load_registry(Path::new(&registry))?;
            let mut cfg = SynthConfig::default();
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(m) = max_train {
                cfg.max_train = m;
            }
            let corpus = generate(&reg, &cfg)?;
            corpus.write_dir(out)?;
            println!("wrote {} languages to {}", reg.len(), out.display());
            Ok(())
        }
    }
}

fn cmd_train(s: &ExperimentSpec, regime: Regime, out: &Path, workers: usize) -> anyhow::Result<()> {
    let seed = s.seeds[0];
    let ds = load_workspace(s, None)?;
    let bb = backbone(s, &ds, seed, Some(out))?;
    let (grouping, report) = regime_grouping(regime, &bb, &ds, seed)?;
    if let Some(rep) = &report {
        write_file(&out.join("cluster.txt"), &rep.to_text())?;
    }
    let cfg = crate::trainer::TrainConfig {
        seed,
        dropout: s.dropouts[0],
        ..s.train.clone()
    };
    let ac = s.adapter(s.bottlenecks[0])?;
    let outcome = run_regime(&bb, &ds, regime, grouping, &cfg, &ac, s.budget, workers)?;
    write_run(out, &outcome, &ds)?;
    for (g, o) in &outcome.groups {
        println!("{g}\tupdates\t{}\tbest_perplexity\t{:.4}", o.updates, o.best_perplexity);
    }
    println!("pooled_perplexity\t{:.4}", outcome.pooled_perplexity(&ds)?);
    Ok(())
}

/// Best checkpoint and languages of every group of a `train` directory.
fn run_checkpoints(dir: &Path) -> anyhow::Result<Vec<(PathBuf, Vec<String>)>> {
    let gpath = dir.join("grouping.tsv");
    let text = std::fs::read_to_string(&gpath).with_context(|| format!("cannot read {}", gpath.display()))?;
    let scheme = GroupingScheme::parse(&text)?;
    Ok(scheme
        .groups
        .iter()
        .map(|(g, langs)| (dir.join("groups").join(group_dir_name(g)).join("best.ckpt"), langs.clone()))
        .collect())
}

fn load_model(path: &Path) -> anyhow::Result<(crate::model::Seq2SeqModel, Vocab, crate::trainer::Checkpoint)> {
    if !path.exists() {
        bail!("checkpoint {} does not exist", path.display());
    }
    let ck = checkpoint_load(path)?;
    let model = model_from_checkpoint(&ck)?;
    let vocab = vocab_from_checkpoint(&ck)?;
    Ok((model, vocab, ck))
}

fn cmd_translate(
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
    lang: &str,
    beam: usize,
    max_len: usize,
    workers: usize,
) -> anyhow::Result<()> {
    if beam == 0 {
        bail!("--beam must be at least 1");
    }
    let (model, vocab, ck) = load_model(checkpoint)?;
    let tag = vocab.tag_id(lang).map_err(|_| anyhow::anyhow!("unknown language tag {lang:?}"))?;
    if let Some(langs) = ck.meta.get("group.langs") {
        if !langs.split_whitespace().any(|l| l == lang) {
            bail!("language {lang:?} is not served by this checkpoint (languages: {langs})");
        }
    }
    let mut text = String::new();
    if input == Path::new("-") {
        std::io::stdin().read_to_string(&mut text).context("cannot read stdin")?;
    } else {
        text = std::fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    }
    let limit = model.config().max_len - 1;
    let srcs: Vec<Vec<usize>> = text
        .lines()
        .map(|l| {
            let mut ids = vocab.encode(l);
            ids.truncate(limit);
            ids
        })
        .collect();
    let cfg = DecodeConfig { beam, max_len, length_penalty: 1.0 };
    let outs = translate_ids(&model, &srcs, tag, &cfg, workers)?;
    let mut body = String::new();
    for o in &outs {
        body.push_str(&vocab.decode(o));
        body.push('\n');
    }
    match output {
        Some(p) => write_file(p, &body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_eval(
    s: &ExperimentSpec,
    targets: &[(PathBuf, Vec<String>)],
    split: Split,
    decode: &DecodeConfig,
    out: &Path,
    workers: usize,
) -> anyhow::Result<()> {
    let mut table = String::from("pair\tbleu\n");
    let mut total = BleuStats::default();
    let mut ds = None;
    for (path, langs) in targets {
        let (model, vocab, _) = load_model(path)?;
        if ds.is_none() {
            ds = Some(load_workspace(s, Some(vocab.clone()))?);
        }
        let ds = ds.as_ref().expect("loaded");
        for l in langs {
            let corpus = ds.corpus(split, l)?;
            let (stats, _) = evaluate_corpus(&model, &vocab, corpus, decode, workers)?;
            total.add(&stats);
            let _ = writeln!(table, "en-{l}\t{:.2}", stats.score());
        }
    }
    let _ = writeln!(table, "all\t{:.2}", total.score());
    write_file(&out.join("bleu.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_cluster(
    s: &ExperimentSpec,
    embeddings: Option<&Path>,
    checkpoint: Option<&Path>,
    components: Option<usize>,
    pca_dim: usize,
    sentences: usize,
    seed: u64,
    out: &Path,
) -> anyhow::Result<()> {
    let registry = load_registry(Path::new(&s.registry))?;
    let batch = match (embeddings, checkpoint) {
        (Some(p), _) => {
            if !p.exists() {
                bail!("embedding file {} does not exist", p.display());
            }
            EmbeddingBatch::load(p)?
        }
        (None, Some(c)) => {
            let (model, vocab, _) = load_model(c)?;
            let ds = load_workspace(s, Some(vocab))?;
            language_embeddings(&model, &ds, sentences)?
        }
        (None, None) => bail!("cluster needs --embeddings FILE or --checkpoint FILE"),
    };
    let k = components.unwrap_or_else(|| registry.families().len());
    let run = cluster_languages(&batch, pca_dim, k, &mut seeded_rng(derive_seed(seed, "gmm")), 300, 1e-8)?;
    let report = cluster_report(&run.assignment, &registry)?;
    write_file(&out.join("confusion.txt"), &report.to_text())?;
    write_file(&out.join("grouping.tsv"), &report.scheme.to_text())?;
    print!("{}", report.to_text());
    Ok(())
}

fn params_table(registry: &str, mc: &ModelConfig, bottleneck: usize) -> anyhow::Result<String> {
    let reg = load_registry(Path::new(registry))?;
    let ac = crate::adapter::AdapterConfig::new(mc.model_dim, bottleneck)?;
    let mut rng = seeded_rng(0);
    let mut s = String::from("regime\tgroups\tper_set\ttotal\tbackbone\tfraction\n");
    for kind in [GroupingKind::Agnostic, GroupingKind::Family, GroupingKind::Pair] {
        let scheme = build_grouping(&reg, kind, &mut rng, None)?;
        let b = budget_report(mc, &ac, &scheme);
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{:.6}",
            kind.as_str(),
            b.groups,
            b.per_set,
            b.total,
            b.backbone_total,
            b.trainable_fraction
        );
    }
    Ok(s)
}
