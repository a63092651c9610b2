use super::*;
use crate::data::{Vocab, EOS};
use crate::langreg::LanguageRegistry;
use crate::model::{AdapterSet, Mode, ModelConfig, Seq2SeqModel};
use crate::adapter::AdapterConfig;
use crate::seeded_rng;
use crate::trainer::tests::copy_setup;
use crate::trainer::{GroupTrainer, TrainConfig};
use proptest::prelude::*;
use rand::Rng as _;

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

#[test]
fn bleu_examples() {
    assert!((bleu_corpus(&["a b c d e"], &["a b c d e"]).unwrap() - 100.0).abs() < 1e-9);
    let bp = bleu_corpus(&["a b c d"], &["a b c d e"]).unwrap();
    assert!((bp - 100.0 * (1.0f64 - 5.0 / 4.0).exp()).abs() < 1e-9);
    assert!((bp - 77.88).abs() < 0.01);
    assert_eq!(bleu_corpus(&["x y z"], &["a b c"]).unwrap(), 0.0);
    // 4-gram has no match: precision 1/(2·1).
    let s = bleu_corpus(&["a b c x"], &["a b c d"]).unwrap();
    let want = 100.0 * (0.75f64 * (2.0 / 3.0) * 0.5 * 0.5).powf(0.25);
    assert!((s - want).abs() < 1e-9, "{s} vs {want}");
    assert_eq!(bleu_corpus(&["a b"], &["a b"]).unwrap(), 0.0);
    assert!(bleu_corpus(&["a"], &["a", "b"]).is_err());
}

#[test]
fn clipping_counts() {
    let st = BleuStats::sentence(&toks("the the the the"), &toks("the cat the mat"));
    assert_eq!(st.matches[0], 2);
    assert_eq!(st.totals, [4, 3, 2, 1]);
}

#[test]
fn thirteen_a_tokenization() {
    assert_eq!(tokenize_13a("Hello, world!"), "Hello , world !");
    assert_eq!(tokenize_13a("It costs 3.14 or 1,000."), "It costs 3.14 or 1,000 .");
    assert_eq!(tokenize_13a("x&amp;y (z)"), "x & y ( z )");
    assert_eq!(tokenize_13a("1990-2000"), "1990 - 2000");
    assert_eq!(tokenize_13a("Don't stop."), "Don't stop .");
    let raw = bleu_corpus_13a(&["Hello, world!"], &["Hello , world !"]).unwrap();
    assert!((raw - 100.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn bleu_properties(seed in 0u64..5000, n in 1usize..8) {
        let mut rng = seeded_rng(seed);
        let words = ["a", "b", "c", "d", "e"];
        let sent = |rng: &mut crate::Rng| -> String {
            let len = rng.gen_range(4..9);
            (0..len).map(|_| words[rng.gen_range(0..5)]).collect::<Vec<_>>().join(" ")
        };
        let hyps: Vec<String> = (0..n).map(|_| sent(&mut rng)).collect();
        let refs: Vec<String> = (0..n).map(|_| sent(&mut rng)).collect();
        let s = bleu_corpus(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0).contains(&s));
        prop_assert!((bleu_corpus(&hyps, &hyps).unwrap() - 100.0).abs() < 1e-9);
        let mut hr: Vec<(String, String)> = hyps.into_iter().zip(refs).collect();
        hr.reverse();
        let (h2, r2): (Vec<String>, Vec<String>) = hr.into_iter().unzip();
        prop_assert!((bleu_corpus(&h2, &r2).unwrap() - s).abs() < 1e-9);
        let mut total = BleuStats::default();
        for (h, r) in h2.iter().zip(&r2) {
            let st = BleuStats::sentence(&toks(h), &toks(r));
            for k in 0..MAX_ORDER {
                prop_assert!(st.matches[k] <= st.totals[k]);
            }
            total.add(&st);
        }
        prop_assert!((total.score() - s).abs() < 1e-9);
    }
}

pub(crate) fn random_model(vocab: usize, seed: u64, with_adapters: bool) -> Seq2SeqModel {
    let mut rng = seeded_rng(seed);
    let cfg = ModelConfig {
        model_dim: 8,
        ff_dim: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        max_len: 8,
        dropout: 0.0,
        ..ModelConfig::toy(vocab)
    };
    let mut m = Seq2SeqModel::build(cfg, &mut rng).unwrap();
    // Larger embeddings give peaked, non-degenerate distributions.
    for p in m.backbone_mut().iter_mut() {
        if p.name == "embed.tokens" {
            p.tensor.data_mut().iter_mut().for_each(|v| *v *= 6.0);
        }
    }
    if with_adapters {
        let a = AdapterConfig::new(8, 3).unwrap();
        let mut set = AdapterSet::fresh(m.config(), &a, "g", &mut rng).unwrap();
        for p in set.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        m.attach_adapter_set(set).unwrap();
    }
    m
}

#[test]
fn beam_one_equals_greedy() {
    for seed in 0..50 {
        let m = random_model(9, seed, seed % 2 == 0);
        let mut rng = seeded_rng(seed + 1000);
        let src: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(3..9)).collect();
        let g = greedy_decode(&m, m.active_adapters(), &src, 1, 6).unwrap();
        let b = beam_search(&m, m.active_adapters(), &src, 1, 1, 6, 0.0).unwrap();
        assert_eq!(g.tokens, b.tokens, "seed {seed}");
        assert_eq!(g, greedy_decode(&m, m.active_adapters(), &src, 1, 6).unwrap());
    }
}

#[test]
fn greedy_respects_max_len() {
    let m = random_model(9, 3, false);
    let h = greedy_decode(&m, None, &[4, 5], 1, 1).unwrap();
    assert_eq!(h.tokens.len(), 1);
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|v| v.exp()).sum();
    row.iter().map(|v| v - z.ln()).collect()
}

/// Every candidate output: eos-terminated sequences up to `max_len` and
/// unterminated ones of exactly `max_len`.
fn enumerate(v: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![vec![]];
    for step in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..v {
                let mut s = p.clone();
                s.push(t);
                if t == EOS || step == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn exhaustive_beam_matches_brute_force() {
    for seed in 0..20 {
        let m = random_model(3, seed, seed % 2 == 1);
        let src = vec![(seed % 3) as usize, 2, 1];
        let penalty = [0.0, 1.0][seed as usize % 2];
        let enc = m.encode(&src, 1, Mode::Eval).unwrap();
        let mut best: Option<(f64, Vec<usize>)> = None;
        for seq in enumerate(3, 3) {
            let logits = m.decode_teacher_forced(&enc, &seq, 1, Mode::Eval).unwrap();
            let lp: f64 = seq.iter().enumerate().map(|(t, &tok)| log_softmax(logits.row(t))[tok]).sum();
            let score = lp / (seq.len() as f64).powf(penalty);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, seq));
            }
        }
        let (score, seq) = best.unwrap();
        let h = beam_search(&m, m.active_adapters(), &src, 1, 27, 3, penalty).unwrap();
        assert_eq!(h.tokens, seq, "seed {seed}");
        assert!((h.score(penalty) - score).abs() < 1e-9);
    }
}

#[test]
fn wider_beam_scores_at_least_as_well() {
    for seed in 0..30 {
        let m = random_model(7, seed, false);
        let src = vec![3, 4, (seed % 4) as usize + 3];
        let one = beam_search(&m, None, &src, 1, 1, 6, 1.0).unwrap();
        let five = beam_search(&m, None, &src, 1, 5, 6, 1.0).unwrap();
        assert!(five.score(1.0) >= one.score(1.0) - 1e-12, "seed {seed}");
    }
}

#[test]
fn log_prob_never_increases() {
    let m = random_model(7, 11, true);
    let st = SourceState::new(&m, m.active_adapters(), &[3, 4], 1).unwrap();
    let h = greedy_decode(&m, m.active_adapters(), &[3, 4], 1, 6).unwrap();
    let mut prev = 0.0;
    for t in 1..=h.tokens.len() {
        let lp = st.sequence_log_prob(&h.tokens[..t]).unwrap();
        assert!(lp <= prev);
        prev = lp;
    }
    assert!((prev - h.log_prob).abs() < 1e-12);
}

#[test]
fn overfit_copy_model_copies() {
    let (vocab, train): (Vocab, _) = copy_setup(20, 5);
    let cfg = ModelConfig {
        model_dim: 16,
        ff_dim: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..ModelConfig::toy(vocab.len())
    };
    let base = Seq2SeqModel::build(cfg, &mut seeded_rng(5)).unwrap();
    let tc = TrainConfig {
        max_updates: 300,
        warmup_updates: 20,
        max_lr: 1e-2,
        dropout: 0.0,
        label_smoothing: 0.0,
        update_frequency: 1,
        eval_interval_updates: 300,
        batch_tokens: 200,
        ..TrainConfig::default()
    };
    let mut t = GroupTrainer::new(&base, "all", &["xa".into()], &train, &train, &vocab, &tc, None).unwrap();
    t.run().unwrap();
    let m = t.into_model();
    let tag = vocab.tag_id("xa").unwrap();
    for e in &train[0].examples {
        let h = greedy_decode(&m, None, &e.src, tag, 10).unwrap();
        assert_eq!(h.output(), e.src.as_slice());
        assert!(h.finished);
    }
    let (stats, _) = evaluate_corpus(&m, &vocab, &train[0], &DecodeConfig::default(), 1).unwrap();
    assert!((stats.score() - 100.0).abs() < 1e-9);
}

fn scores(reg: &LanguageRegistry, f: impl Fn(&str, usize) -> f64) -> ScoreTable {
    let mut t = ScoreTable::new();
    for (ri, r) in ["pair", "family", "agnostic"].iter().enumerate() {
        for l in reg.codes() {
            t.insert((r.to_string(), l.clone()), f(&l, ri));
        }
    }
    t
}

#[test]
fn report_deltas() {
    let reg = LanguageRegistry::bundled_ted();
    let flat = scores(&reg, |_, _| 20.0);
    let s = summarize(&flat, &reg, "pair").unwrap();
    assert!(s.family_deltas.values().chain(s.seen_deltas.values()).all(|&d| d == 0.0));
    let varied = scores(&reg, |l, r| l.len() as f64 + l.as_bytes()[0] as f64 * r as f64);
    let s = summarize(&varied, &reg, "pair").unwrap();
    let fam: Vec<String> = reg.languages().iter().filter(|i| i.family == "Austronesian").map(|i| i.code.clone()).collect();
    let want: f64 = fam.iter().map(|l| l.as_bytes()[0] as f64).sum::<f64>() / fam.len() as f64;
    assert!((s.family_deltas[&("family".to_string(), "Austronesian".to_string())] - want).abs() < 1e-12);
    let mut unseen: Vec<String> = reg.unseen_codes();
    unseen.sort();
    assert_eq!(unseen, ["be", "bg", "bs", "fil", "ku", "ms", "sk", "sr"]);
    let want: f64 = unseen.iter().map(|l| 2.0 * l.as_bytes()[0] as f64).sum::<f64>() / 8.0;
    assert!((s.seen_deltas[&("agnostic".to_string(), "unseen".to_string())] - want).abs() < 1e-12);
    let dir = tempfile::tempdir().unwrap();
    let out = report_emit(&varied, &reg, "pair", &[], dir.path()).unwrap();
    assert_eq!(out.files.len(), 5);
    let svg = std::fs::read_to_string(dir.path().join("family_deltas.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("Balto-Slavic"));
    let mut partial = varied.clone();
    partial.remove(&("family".to_string(), "ku".to_string()));
    assert!(matches!(summarize(&partial, &reg, "pair"), Err(crate::Error::Coverage(_))));
}
