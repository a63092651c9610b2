use rand::Rng as _;

use super::*;
use crate::{seeded_rng, Error, Rng};

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Random linear functional `sum(w ⊙ y)` so no gradient coordinate is structurally zero.
fn project(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var, Error> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = g.constant(mat(&[&[3.0], &[4.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c), &mat(&[&[3.0], &[4.0]]));

    let a = g.constant(mat(&[&[1.0, 2.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[11.0]);

    let a = g.constant(rand_tensor(&mut seeded_rng(1), &[3, 4]));
    let z = g.constant(Tensor::zeros(&[4, 2]));
    let c = g.matmul(a, z).unwrap();
    assert!(g.value(c).data().iter().all(|&x| x == 0.0));

    let bad = g.constant(Tensor::zeros(&[3, 2]));
    match g.matmul(a, bad) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![3, 4]);
            assert_eq!(right, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::filled(&[2], 1.0));
    let zero = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(mat(&[&[5.0, 5.0]]));
    let y = g.layer_norm(x, one, zero, LAYER_NORM_EPS).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);

    let x = g.constant(mat(&[&[0.0, 2.0]]));
    let y = g.layer_norm(x, one, zero, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12);

    let two = g.constant(Tensor::filled(&[2], 2.0));
    let y = g.layer_norm(x, two, one, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 3.0).abs() < 1e-12);

    let three = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.layer_norm(x, three, zero, 1e-5), Err(Error::Shape { .. })));
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let x = g.constant(Tensor::vector(vec![-1.0, -0.5]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    let x = g.constant(Tensor::vector(vec![0.25, 3.0]));
    let y = g.relu(x);
    assert_eq!(g.value(y).data(), &[0.25, 3.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::vector(vec![2f64.ln(), 0.0]));
    let y = g.softmax(x);
    let d = g.value(y).data();
    assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);

    let base = rand_tensor(&mut seeded_rng(4), &[3, 5]);
    let shifted = Tensor::new(vec![3, 5], base.data().iter().map(|v| v + 123.0).collect()).unwrap();
    let a = g.constant(base);
    let b = g.constant(shifted);
    let (ya, yb) = (g.softmax(a), g.softmax(b));
    assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
}

#[test]
fn embedding_examples() {
    let table = Tensor::new(vec![4, 2], (0..8).map(f64::from).collect()).unwrap();
    let mut g = Graph::new();
    let t = g.leaf(table.clone(), true);
    let e = g.embedding(t, &[2, 0]).unwrap();
    assert_eq!(g.value(e).data(), &[4.0, 5.0, 0.0, 1.0]);

    let e = g.embedding(t, &[1, 1]).unwrap();
    assert_eq!(g.value(e).data(), &[2.0, 3.0, 2.0, 3.0]);
    let s = g.sum(e);
    g.backward(s).unwrap();
    assert_eq!(g.grad(t).unwrap(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0]);

    let e = g.embedding(t, &[]).unwrap();
    assert_eq!(g.value(e).shape(), &[0, 2]);

    assert!(matches!(g.embedding(t, &[4]), Err(Error::Index { id: 4, bound: 4 })));
}

#[test]
fn label_smoothed_nll_examples() {
    let mut g = Graph::new();
    for eps in [0.0, 0.1, 0.2, 0.7] {
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.label_smoothed_nll(x, &[0, 1, 3], eps, 99).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }
    let x = g.constant(mat(&[&[60.0, 0.0, 0.0], &[0.0, 0.0, 60.0]]));
    let l = g.label_smoothed_nll(x, &[0, 2], 0.0, 99).unwrap();
    assert!(g.value(l).item() < 1e-20);

    let x = g.constant(mat(&[&[0.0, 0.0]]));
    let l = g.label_smoothed_nll(x, &[0], 0.2, 99).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.label_smoothed_nll(x, &[1, 1], 0.1, 1), Err(Error::EmptyBatch)));
}

#[test]
fn pad_positions_are_excluded() {
    let mut rng = seeded_rng(8);
    let logits = rand_tensor(&mut rng, &[3, 5]);
    let mut g = Graph::new();
    let full = g.leaf(logits.clone(), true);
    let l = g.label_smoothed_nll(full, &[1, 0, 4], 0.2, 0).unwrap();
    let two = Tensor::new(vec![2, 5], [logits.row(0), logits.row(2)].concat()).unwrap();
    let x2 = g.constant(two);
    let l2 = g.label_smoothed_nll(x2, &[1, 4], 0.2, 0).unwrap();
    assert!((g.value(l).item() - g.value(l2).item()).abs() < 1e-14);
    g.backward(l).unwrap();
    assert!(g.grad(full).unwrap()[5..10].iter().all(|&x| x == 0.0));
}

#[test]
fn backward_examples() {
    let mut rng = seeded_rng(2);
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&mut rng, &[2, 3]), true);
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

    let b = rand_tensor(&mut rng, &[3, 2]);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let err = grad_check(
        |g, v| {
            let b = g.constant(b.clone());
            let c = g.matmul(v, b)?;
            Ok(g.sum(c))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");

    let mut frozen = Parameter::new("w", rand_tensor(&mut rng, &[3, 2]));
    frozen.frozen = true;
    let mut live = Parameter::new("a", a);
    let mut g = Graph::new();
    let wv = g.param(&frozen);
    let av = g.param(&live);
    let c = g.matmul(av, wv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert!(g.grad(wv).is_none());
    g.accumulate_into([&mut frozen, &mut live]);
    assert!(frozen.grad.is_none());
    assert!(live.grad.is_some());

    let c = g.matmul(av, av);
    assert!(c.is_err());
    let nonscalar = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(nonscalar), Err(Error::Contract(_))));
}

#[test]
fn two_backward_passes_double_gradients() {
    let mut rng = seeded_rng(3);
    let mut g = Graph::new();
    let x = g.leaf(rand_tensor(&mut rng, &[2, 4]), true);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let wv = g.constant(w);
    let y = g.matmul(x, wv).unwrap();
    let y = g.softmax(y);
    let s = project(&mut g, y, &rand_tensor(&mut rng, &[2, 3])).unwrap();
    g.backward(s).unwrap();
    let once = g.grad(x).unwrap().to_vec();
    g.backward(s).unwrap();
    let twice = g.grad(x).unwrap();
    for (a, b) in once.iter().zip(twice) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn grad_check_examples() {
    let mut rng = seeded_rng(4);
    let x = rand_tensor(&mut rng, &[3, 3]);
    let err = grad_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
    let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(3.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn adam_freeze_contract_through_graph() {
    let mut rng = seeded_rng(6);
    let mut frozen = Parameter::new("f", rand_tensor(&mut rng, &[2, 2]));
    frozen.frozen = true;
    frozen.grad = Some(Tensor::filled(&[2, 2], 3.0));
    let before = frozen.tensor.clone();
    let mut opt = Adam::new(AdamConfig::default());
    for _ in 0..25 {
        opt.step([&mut frozen], 0.5);
    }
    assert_eq!(frozen.tensor, before);
}

#[test]
fn dropout_masks_and_scales() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::filled(&[1, 1000], 1.0), true);
    let mut rng = seeded_rng(0);
    let y = g.dropout(x, 0.25, &mut rng);
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-15));
    let kept = vals.iter().filter(|&&v| v > 0.0).count();
    assert!((650..850).contains(&kept), "{kept}");
    assert_eq!(g.dropout(x, 0.0, &mut rng), x);
}

#[test]
fn attention_respects_causal_and_padding_masks() {
    let mut rng = seeded_rng(12);
    let layout = AttnLayout {
        batch: 2,
        q_len: 3,
        k_len: 3,
        key_valid: vec![3, 2],
        causal: true,
    };
    let q = rand_tensor(&mut rng, &[6, 4]);
    let k = rand_tensor(&mut rng, &[6, 4]);
    let v = rand_tensor(&mut rng, &[6, 4]);
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let o = g.attention(qv, kv, vv, 2, &layout).unwrap();
        g.value(o).clone()
    };
    let base = run(&v);
    // future value row of sequence 0 and the padded row of sequence 1
    let mut v2 = v.clone();
    for c in 0..4 {
        v2.data_mut()[2 * 4 + c] += 10.0;
        v2.data_mut()[5 * 4 + c] += 10.0;
    }
    let pert = run(&v2);
    assert_eq!(base.row(0), pert.row(0));
    assert_eq!(base.row(1), pert.row(1));
    assert_ne!(base.row(2), pert.row(2));
    assert_eq!(&base.data()[12..], &pert.data()[12..]);
    // the first query sees only the first key, so it returns that value row
    for c in 0..4 {
        assert!((base.at(0, c) - v.at(0, c)).abs() < 1e-15);
    }
}

mod fd_properties {
    use super::*;
    use proptest::prelude::*;

    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;

    fn check<F: Fn(&mut Graph, Var) -> Result<Var, Error>>(f: F, x: &Tensor) {
        let err = grad_check(f, x, STEP).unwrap();
        assert!(err < TOL, "relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn matmul_both_sides(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let a = rand_tensor(&mut rng, &[3, 4]);
            let b = rand_tensor(&mut rng, &[4, 2]);
            let w = rand_tensor(&mut rng, &[3, 2]);
            check(|g, v| { let b = g.constant(b.clone()); let c = g.matmul(v, b)?; project(g, c, &w) }, &a);
            check(|g, v| { let a = g.constant(a.clone()); let c = g.matmul(a, v)?; project(g, c, &w) }, &b);
            let bt = rand_tensor(&mut rng, &[2, 4]);
            check(|g, v| { let b = g.constant(bt.clone()); let c = g.matmul_nt(v, b)?; project(g, c, &w) }, &a);
            check(|g, v| { let a = g.constant(a.clone()); let c = g.matmul_nt(a, v)?; project(g, c, &w) }, &bt);
        }

        #[test]
        fn elementwise_ops(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let x = rand_tensor(&mut rng, &[3, 4]);
            let other = rand_tensor(&mut rng, &[3, 4]);
            let bias = rand_tensor(&mut rng, &[4]);
            let w = rand_tensor(&mut rng, &[3, 4]);
            check(|g, v| { let r = g.relu(v); project(g, r, &w) }, &x);
            check(|g, v| { let o = g.constant(other.clone()); let r = g.add(v, o)?; project(g, r, &w) }, &x);
            check(|g, v| { let o = g.constant(other.clone()); let r = g.mul(v, o)?; project(g, r, &w) }, &x);
            check(|g, v| { let r = g.scale(v, -1.7); project(g, r, &w) }, &x);
            check(|g, v| { let b = g.constant(bias.clone()); let r = g.add_row(v, b)?; project(g, r, &w) }, &x);
            check(|g, v| { let o = g.constant(x.clone()); let r = g.add_row(o, v)?; project(g, r, &w) }, &bias);
            check(|g, v| { let r = g.softmax(v); project(g, r, &w) }, &x);
        }

        #[test]
        fn layer_norm_all_inputs(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let x = rand_tensor(&mut rng, &[3, 5]);
            let s = rand_tensor(&mut rng, &[5]);
            let o = rand_tensor(&mut rng, &[5]);
            let w = rand_tensor(&mut rng, &[3, 5]);
            check(|g, v| { let (s, o) = (g.constant(s.clone()), g.constant(o.clone())); let y = g.layer_norm(v, s, o, LAYER_NORM_EPS)?; project(g, y, &w) }, &x);
            check(|g, v| { let (xv, o) = (g.constant(x.clone()), g.constant(o.clone())); let y = g.layer_norm(xv, v, o, LAYER_NORM_EPS)?; project(g, y, &w) }, &s);
            check(|g, v| { let (xv, s) = (g.constant(x.clone()), g.constant(s.clone())); let y = g.layer_norm(xv, s, v, LAYER_NORM_EPS)?; project(g, y, &w) }, &o);
        }

        #[test]
        fn embedding_and_nll(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let table = rand_tensor(&mut rng, &[5, 3]);
            let ids = [4usize, 1, 1, 0];
            let w = rand_tensor(&mut rng, &[4, 3]);
            check(|g, v| { let e = g.embedding(v, &ids)?; project(g, e, &w) }, &table);
            let logits = rand_tensor(&mut rng, &[4, 6]);
            let eps = rng.gen_range(0.0..0.5);
            check(|g, v| g.label_smoothed_nll(v, &[2, 0, 5, 3], eps, 0), &logits);
            check(|g, v| g.label_smoothed_nll_scaled(v, &[2, 1, 5, 3], eps, 7, 3.5), &logits);
        }

        #[test]
        fn attention_inputs(seed in any::<u64>(), causal in any::<bool>()) {
            let mut rng = seeded_rng(seed);
            let layout = AttnLayout { batch: 2, q_len: 3, k_len: 4, key_valid: vec![4, 2], causal };
            let q = rand_tensor(&mut rng, &[6, 4]);
            let k = rand_tensor(&mut rng, &[8, 4]);
            let val = rand_tensor(&mut rng, &[8, 4]);
            let w = rand_tensor(&mut rng, &[6, 4]);
            check(|g, v| { let (k, val) = (g.constant(k.clone()), g.constant(val.clone())); let o = g.attention(v, k, val, 2, &layout)?; project(g, o, &w) }, &q);
            check(|g, v| { let (q, val) = (g.constant(q.clone()), g.constant(val.clone())); let o = g.attention(q, v, val, 2, &layout)?; project(g, o, &w) }, &k);
            check(|g, v| { let (q, k) = (g.constant(q.clone()), g.constant(k.clone())); let o = g.attention(q, k, v, 2, &layout)?; project(g, o, &w) }, &val);
        }

        #[test]
        fn dropout_fixed_mask(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let x = rand_tensor(&mut rng, &[2, 5]);
            let w = rand_tensor(&mut rng, &[2, 5]);
            check(|g, v| { let mut r = seeded_rng(seed ^ 1); let d = g.dropout(v, 0.3, &mut r); project(g, d, &w) }, &x);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let x = Tensor::new(vec![4, 7], (0..28).map(|_| rng.gen_range(-50.0..50.0)).collect()).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x);
            let y = g.softmax(xv);
            for r in 0..4 {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
