use rand::Rng as _;

use super::*;
use crate::adapter::AdapterConfig;
use crate::seeded_rng;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        model_dim: 8,
        ff_dim: 12,
        heads: 2,
        enc_layers: 2,
        dec_layers: 2,
        max_len: 10,
        dropout: 0.1,
        adapter_placement: Placement::AfterFf,
        use_embedding_adapters: true,
        train_embeddings: false,
    }
}

fn randomize(set: &mut AdapterSet, rng: &mut Rng) {
    for p in set.params_mut() {
        for x in p.tensor.data_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
}

fn random_ids(rng: &mut Rng, n: usize, v: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..v)).collect()
}

fn logits(model: &Seq2SeqModel, src: &[usize], tgt: &[usize]) -> Tensor {
    let enc = model.encode(src, 1, Mode::Eval).unwrap();
    model.decode_teacher_forced(&enc, tgt, 1, Mode::Eval).unwrap()
}

#[test]
fn build_is_deterministic_and_validated() {
    let a = Seq2SeqModel::build(cfg(), &mut seeded_rng(1)).unwrap();
    let b = Seq2SeqModel::build(cfg(), &mut seeded_rng(1)).unwrap();
    assert_eq!(a.backbone_hash(), b.backbone_hash());
    let c = Seq2SeqModel::build(cfg(), &mut seeded_rng(2)).unwrap();
    assert_ne!(a.backbone_hash(), c.backbone_hash());

    let bad = ModelConfig {
        heads: 3,
        dropout: 1.0,
        ..cfg()
    };
    match Seq2SeqModel::build(bad, &mut seeded_rng(0)) {
        Err(Error::Config(v)) => assert_eq!(v.len(), 2, "{v:?}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn smoke_forward_pass() {
    let cfg = ModelConfig {
        vocab_size: 20,
        model_dim: 32,
        ff_dim: 64,
        heads: 4,
        ..cfg()
    };
    let model = Seq2SeqModel::build(cfg, &mut seeded_rng(3)).unwrap();
    let enc = model.encode(&[4, 5, 6], 2, Mode::Eval).unwrap();
    assert_eq!(enc.shape(), &[4, 32]);
    let out = model.decode_teacher_forced(&enc, &[7, 8, 9, 3], 2, Mode::Eval).unwrap();
    assert_eq!(out.shape(), &[4, 20]);
}

#[test]
fn backbone_count_matches_enumeration() {
    for c in [cfg(), ModelConfig { enc_layers: 1, dec_layers: 3, ..cfg() }] {
        let model = Seq2SeqModel::build(c.clone(), &mut seeded_rng(0)).unwrap();
        assert_eq!(model.backbone().numel(), backbone_param_count(&c));
    }
}

#[test]
fn freeze_and_unfreeze() {
    let mut model = Seq2SeqModel::build(cfg(), &mut seeded_rng(0)).unwrap();
    let set = AdapterSet::fresh(&cfg(), &AdapterConfig::new(8, 2).unwrap(), "g", &mut seeded_rng(1)).unwrap();
    model.attach_adapter_set(set).unwrap();
    model.freeze_backbone();
    assert!(model.is_backbone_frozen());
    assert!(model.active_adapters().unwrap().params().all(|p| !p.frozen));
    assert_eq!(model.trainable_param_count(), model.active_adapters().unwrap().param_count());
    model.unfreeze_backbone();
    assert!(model.all_params().all(|p| !p.frozen));

    let mut emb = Seq2SeqModel::build(ModelConfig { train_embeddings: true, ..cfg() }, &mut seeded_rng(0)).unwrap();
    emb.freeze_backbone();
    assert!(!emb.backbone().by_name("embed.tokens").unwrap().frozen);
    assert!(emb.backbone().by_name("enc.0.ff.in.weight").unwrap().frozen);
}

#[test]
fn fresh_adapters_are_identity() {
    let mut rng = seeded_rng(5);
    for placement in [Placement::AfterFf, Placement::BeforeFf] {
        let c = ModelConfig { adapter_placement: placement, ..cfg() };
        let mut model = Seq2SeqModel::build(c.clone(), &mut rng).unwrap();
        let src = random_ids(&mut rng, 5, 11);
        let tgt = random_ids(&mut rng, 4, 11);
        let bare = logits(&model, &src, &tgt);
        let set = AdapterSet::fresh(&c, &AdapterConfig::new(8, 3).unwrap(), "g", &mut rng).unwrap();
        model.attach_adapter_set(set).unwrap();
        let with = logits(&model, &src, &tgt);
        assert!(bare.max_abs_diff(&with) <= 1e-9);
    }
}

#[test]
fn attach_swap_and_coverage() {
    let mut rng = seeded_rng(6);
    let mut model = Seq2SeqModel::build(cfg(), &mut rng).unwrap();
    let acfg = AdapterConfig::new(8, 2).unwrap();
    let mut a = AdapterSet::fresh(&cfg(), &acfg, "a", &mut rng).unwrap();
    let mut b = AdapterSet::fresh(&cfg(), &acfg, "b", &mut rng).unwrap();
    randomize(&mut a, &mut rng);
    randomize(&mut b, &mut rng);
    let (src, tgt) = (vec![3, 4, 5], vec![6, 7]);
    assert!(model.attach_adapter_set(a).unwrap().is_none());
    let first = logits(&model, &src, &tgt);
    let a = model.attach_adapter_set(b).unwrap().unwrap();
    let with_b = logits(&model, &src, &tgt);
    assert!(first.max_abs_diff(&with_b) > 1e-6);
    let b = model.attach_adapter_set(a).unwrap().unwrap();
    assert_eq!(b.set_id, "b");
    assert_eq!(logits(&model, &src, &tgt), first);

    let mut missing = AdapterSet::fresh(&cfg(), &acfg, "m", &mut rng).unwrap();
    missing.remove(DEC_EMBED_SLOT);
    match model.attach_adapter_set(missing) {
        Err(Error::Coverage(msg)) => assert!(msg.contains(DEC_EMBED_SLOT), "{msg}"),
        other => panic!("expected coverage error, got {other:?}"),
    }
}

#[test]
fn encode_contracts() {
    let mut rng = seeded_rng(7);
    let model = Seq2SeqModel::build(cfg(), &mut rng).unwrap();
    let src = random_ids(&mut rng, 6, 11);
    let a = model.encode(&src, 2, Mode::Eval).unwrap();
    assert_eq!(a.shape(), &[7, 8]);
    assert_eq!(model.encode(&src, 2, Mode::Eval).unwrap(), a);
    let mut drng = seeded_rng(1);
    let t = model.encode(&src, 2, Mode::Train(&mut drng)).unwrap();
    assert_ne!(t, a);
    assert!(matches!(model.encode(&[1; 11], 2, Mode::Eval), Err(Error::Length { len: 11, max: 10 })));
    assert!(matches!(model.encode(&[11], 2, Mode::Eval), Err(Error::Index { id: 11, .. })));
}

#[test]
fn decoder_is_causal() {
    let mut rng = seeded_rng(8);
    let mut model = Seq2SeqModel::build(cfg(), &mut rng).unwrap();
    let mut set = AdapterSet::fresh(&cfg(), &AdapterConfig::new(8, 2).unwrap(), "g", &mut rng).unwrap();
    randomize(&mut set, &mut rng);
    model.attach_adapter_set(set).unwrap();
    for _ in 0..10 {
        let src = random_ids(&mut rng, 4, 11);
        let tgt = random_ids(&mut rng, 6, 11);
        let base = logits(&model, &src, &tgt);
        let t = rng.gen_range(0..5);
        let mut edited = tgt.clone();
        for x in edited.iter_mut().skip(t + 1) {
            *x = (*x + 3) % 11;
        }
        let pert = logits(&model, &src, &edited);
        // logits at position p depend on decoder inputs 0..=p, i.e. tgt[..p]
        for p in 0..=t + 1 {
            assert_eq!(base.row(p), pert.row(p), "position {p} changed (edit after {t})");
        }
    }
}

#[test]
fn padding_does_not_change_valid_rows() {
    let mut rng = seeded_rng(9);
    let model = Seq2SeqModel::build(cfg(), &mut rng).unwrap();
    let (s1, s2) = (vec![4, 5, 6, 7], vec![8, 9]);
    let (d1, d2) = (vec![1, 3, 4], vec![2, 5, 6, 7, 8]);
    let run = |srcs: &[&[usize]], decs: &[&[usize]], tags: &[usize]| {
        let mut g = Graph::new();
        let enc = model.encode_graph(&mut g, None, srcs, tags, &mut Mode::Eval, None).unwrap();
        let dec = model.decode_graph(&mut g, None, &enc, decs, &mut Mode::Eval, None).unwrap();
        (g.value(dec.logits).clone(), dec.max_len)
    };
    let (joint, jl) = run(&[&s1, &s2], &[&d1, &d2], &[1, 2]);
    let (alone, _) = run(&[&s2], &[&d2], &[2]);
    for p in 0..d2.len() {
        let j = joint.row(jl + p);
        let a = alone.row(p);
        for (x, y) in j.iter().zip(a) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn placement_controls_feed_forward_input() {
    let mut rng = seeded_rng(10);
    let src = random_ids(&mut rng, 5, 11);
    for (placement, ff_sees_adapter) in [(Placement::BeforeFf, true), (Placement::AfterFf, false)] {
        let c = ModelConfig { adapter_placement: placement, use_embedding_adapters: false, ..cfg() };
        let model = Seq2SeqModel::build(c.clone(), &mut seeded_rng(1)).unwrap();
        let mut set = AdapterSet::fresh(&c, &AdapterConfig::new(8, 2).unwrap(), "g", &mut rng).unwrap();
        for p in set.get_mut(&enc_layer_slot(0)).unwrap().params_mut() {
            for x in p.tensor.data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        let probe_ff0 = |set: Option<&AdapterSet>| {
            let mut g = Graph::new();
            let mut probe = Probe::new();
            model.encode_graph(&mut g, set, &[&src], &[1], &mut Mode::Eval, Some(&mut probe)).unwrap();
            let (_, v) = probe.iter().find(|(n, _)| n == "enc.0.ff_input").unwrap();
            g.value(*v).clone()
        };
        let bare = probe_ff0(None);
        let adapted = probe_ff0(Some(&set));
        assert_eq!(bare.max_abs_diff(&adapted) > 1e-9, ff_sees_adapter, "{placement:?}");
    }
}

/// Finite-difference check of named parameters through the whole model.
fn model_grad_error(model: &mut Seq2SeqModel, names: &[&str]) -> f64 {
    let src = [4usize, 5, 6];
    let tgt = [7usize, 8, 9, 2];
    let loss_of = |m: &Seq2SeqModel, g: &mut Graph| -> Var {
        let enc = m.encode_graph(g, m.active_adapters(), &[&src], &[1], &mut Mode::Eval, None).unwrap();
        let input = [1usize, 7, 8, 9];
        let dec = m.decode_graph(g, m.active_adapters(), &enc, &[&input], &mut Mode::Eval, None).unwrap();
        g.label_smoothed_nll(dec.logits, &tgt, 0.2, 0).unwrap()
    };
    let mut g = Graph::new();
    let l = loss_of(model, &mut g);
    g.backward(l).unwrap();
    model.zero_grad();
    g.accumulate_into(model.all_params_mut());
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = model.all_params().find(|p| p.name == *name).unwrap().grad.clone().unwrap();
        for i in 0..analytic.numel() {
            let mut eval = |delta: f64| {
                let p = model.all_params_mut().find(|p| p.name == *name).unwrap();
                p.tensor.data_mut()[i] += delta;
                let mut g = Graph::new();
                let l = loss_of(model, &mut g);
                let v = g.value(l).item();
                let p = model.all_params_mut().find(|p| p.name == *name).unwrap();
                p.tensor.data_mut()[i] -= delta;
                v
            };
            let numeric = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8));
        }
    }
    worst
}

#[test]
fn end_to_end_gradient_one_layer_model() {
    let c = ModelConfig { enc_layers: 1, dec_layers: 1, dropout: 0.0, ..cfg() };
    let mut rng = seeded_rng(12);
    let mut model = Seq2SeqModel::build(c.clone(), &mut rng).unwrap();
    let mut set = AdapterSet::fresh(&c, &AdapterConfig::new(8, 3).unwrap(), "g", &mut rng).unwrap();
    randomize(&mut set, &mut rng);
    model.attach_adapter_set(set).unwrap();
    let err = model_grad_error(
        &mut model,
        &[
            "embed.tokens",
            "enc.0.self_attn.q.weight",
            "dec.0.cross_attn.k.weight",
            "dec.0.ff.out.weight",
            "dec.final_ln.scale",
            "adapter.enc.embed.down.weight",
            "adapter.dec.layer.0.up.weight",
            "adapter.enc.layer.0.ln.offset",
        ],
    );
    assert!(err < 1e-3, "relative error {err}");
}
