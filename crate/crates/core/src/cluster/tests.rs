use super::*;
use crate::model::ModelConfig;
use crate::seeded_rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

fn gaussian_blob(rng: &mut crate::Rng, center: &[f64], std: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            center
                .iter()
                .map(|c| {
                    let z: f64 = StandardNormal.sample(rng);
                    c + std * z
                })
                .collect()
        })
        .collect()
}

fn rows(t: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(t).unwrap()
}

#[test]
fn mean_pool_examples() {
    let mut rng = seeded_rng(0);
    let model = Seq2SeqModel::build(ModelConfig::toy(20), &mut rng).unwrap();
    let single = mean_pool_embed(&model, &[vec![7]], 4).unwrap();
    let states = model.encode(&[7], 4, Mode::Eval).unwrap();
    assert_eq!(single.row(0), states.row(1));
    let sents = vec![vec![5, 6, 7], vec![5, 6, 7], vec![9]];
    let v = mean_pool_embed(&model, &sents, 4).unwrap();
    assert_eq!(v.shape(), [3, 32]);
    assert_eq!(v.row(0), v.row(1));
    let full = model.encode(&[5, 6, 7], 4, Mode::Eval).unwrap();
    for j in 0..32 {
        let m = (full.at(1, j) + full.at(2, j) + full.at(3, j)) / 3.0;
        assert!((v.at(0, j) - m).abs() < 1e-12);
    }
    assert!(mean_pool_embed(&model, &[vec![]], 4).is_err());
}

#[test]
fn pca_examples() {
    let line: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
    let m = pca_fit(&rows(&line), 1).unwrap();
    assert!((m.explained_ratio()[0] - 1.0).abs() < 1e-12);
    let mut rng = seeded_rng(1);
    let basis = [vec![1.0, 2.0, 0.0, -1.0, 0.5], vec![0.0, 1.0, 3.0, 1.0, -2.0]];
    let data: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let (a, b): (f64, f64) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            (0..5).map(|j| 4.0 + a * basis[0][j] + b * basis[1][j]).collect()
        })
        .collect();
    let x = rows(&data);
    let m = pca_fit(&x, 2).unwrap();
    let z = pca_project(&m, &x).unwrap();
    assert!(m.reconstruct(&z).unwrap().max_abs_diff(&x) < 1e-8);
    for a in 0..2 {
        let mean: f64 = (0..30).map(|i| z.at(i, a)).sum::<f64>() / 30.0;
        assert!(mean.abs() < 1e-10);
    }
    for i in 0..30 {
        for j in 0..30 {
            let dx: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            let dz: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            assert!((dx.sqrt() - dz.sqrt()).abs() < 1e-8);
        }
    }
    assert!(matches!(pca_fit(&x, 6), Err(Error::Domain(_))));
    assert!(matches!(pca_fit(&rows(&data[..3]), 3), Err(Error::Domain(_))));
}

proptest! {
    #[test]
    fn pca_axes_are_orthonormal(seed in 0u64..500, n in 4usize..30, d in 2usize..8) {
        let mut rng = seeded_rng(seed);
        let data: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let k = (n - 1).min(d);
        let m = pca_fit(&rows(&data), k).unwrap();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = m.axes.row(a).iter().zip(m.axes.row(b)).map(|(x, y)| x * y).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                prop_assert!((dot - want).abs() < 1e-8);
            }
        }
        for w in m.explained_variance.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn em_log_likelihood_is_monotone(seed in 0u64..10_000, k in 1usize..5, n in 8usize..40) {
        let mut rng = seeded_rng(seed);
        let data: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
        let m = gmm_fit_em(&rows(&data), k, &mut rng, 100, 1e-10).unwrap();
        for w in m.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
        }
        prop_assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(m.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn majority_ignores_sentence_order(seed in 0u64..1000) {
        let mut rng = seeded_rng(seed);
        let n = 30;
        let resp: Vec<Vec<f64>> = (0..n).map(|_| {
            let r: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|v| v / s).collect()
        }).collect();
        let langs: Vec<String> = (0..n).map(|i| format!("l{}", i % 4)).collect();
        let a = hard_assign_majority(&rows(&resp), &langs).unwrap();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let r2: Vec<Vec<f64>> = order.iter().map(|&i| resp[i].clone()).collect();
        let l2: Vec<String> = order.iter().map(|&i| langs[i].clone()).collect();
        prop_assert_eq!(a, hard_assign_majority(&rows(&r2), &l2).unwrap());
    }
}

#[test]
fn single_component_is_closed_form() {
    let mut rng = seeded_rng(2);
    let data = gaussian_blob(&mut rng, &[1.0, -2.0, 3.0], 2.0, 50);
    let m = gmm_fit_em(&rows(&data), 1, &mut rng, 50, 1e-12).unwrap();
    for j in 0..3 {
        let mean: f64 = data.iter().map(|r| r[j]).sum::<f64>() / 50.0;
        let var: f64 = data.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 50.0;
        assert!((m.means[0][j] - mean).abs() < 1e-12);
        assert!((m.variances[0][j] - var).abs() < 1e-10);
    }
    let r = gmm_soft_assign(&m, &rows(&data)).unwrap();
    assert!(r.data().iter().all(|&v| v == 1.0));
    assert!(matches!(gmm_fit_em(&rows(&data[..2]), 3, &mut rng, 10, 1e-8), Err(Error::Domain(_))));
}

#[test]
fn planted_two_clusters_recovered() {
    let mut rng = seeded_rng(3);
    let (a, b) = ([0.0, 0.0], [20.0, 0.0]);
    let mut data = gaussian_blob(&mut rng, &a, 1.0, 1000);
    data.extend(gaussian_blob(&mut rng, &b, 1.0, 1000));
    let x = rows(&data);
    let m = gmm_fit_em(&x, 2, &mut rng, 200, 1e-8).unwrap();
    let mut found = m.means.clone();
    found.sort_by(|p, q| p[0].total_cmp(&q[0]));
    for (got, want) in found.iter().zip([a, b]) {
        let d = ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
        assert!(d < 0.1, "mean {got:?} vs {want:?}");
    }
    let r = gmm_soft_assign(&m, &rows(&[a.to_vec(), b.to_vec()])).unwrap();
    for i in 0..2 {
        assert!((r.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(r.row(i).iter().cloned().fold(0.0, f64::max) > 0.99);
    }
}

pub(crate) fn planted_three(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = seeded_rng(seed);
    let centers = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 5.0]];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        data.extend(gaussian_blob(&mut rng, center, 1.0, 100));
        labels.extend(std::iter::repeat_n(c, 100));
    }
    (rows(&data), labels)
}

#[test]
fn planted_three_clusters_exact_across_seeds() {
    for seed in 0..10 {
        let (x, labels) = planted_three(seed);
        let m = gmm_fit_em(&x, 3, &mut seeded_rng(seed + 50), 200, 1e-8).unwrap();
        let r = gmm_soft_assign(&m, &x).unwrap();
        let mut map = [None; 3];
        for (i, &l) in labels.iter().enumerate() {
            let row = r.row(i);
            let c = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            match map[l] {
                None => map[l] = Some(c),
                Some(prev) => assert_eq!(prev, c, "seed {seed}"),
            }
        }
        let mut used: Vec<usize> = map.iter().map(|m| m.unwrap()).collect();
        used.sort_unstable();
        assert_eq!(used, [0, 1, 2]);
    }
}

#[test]
fn majority_examples() {
    let r = rows(&[vec![0.1, 0.2, 0.7], vec![0.0, 0.1, 0.9]]);
    let a = hard_assign_majority(&r, &["x".into(), "x".into()]).unwrap();
    assert_eq!(a["x"], 2);
    let r = rows(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]]);
    assert_eq!(hard_assign_majority(&r, &["x".into(), "x".into(), "x".into()]).unwrap()["x"], 0);
    let r = rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
    assert_eq!(hard_assign_majority(&r, &["x".into(), "x".into()]).unwrap()["x"], 0);
    let r = rows(&[vec![0.5, 0.5]]);
    assert_eq!(hard_assign_majority(&r, &["x".into()]).unwrap()["x"], 0);
}

#[test]
fn report_against_families() {
    let reg = LanguageRegistry::bundled_ted();
    let fams = reg.families();
    let mut exact: BTreeMap<String, usize> = BTreeMap::new();
    for l in reg.languages() {
        let f = fams.iter().position(|x| *x == l.family).unwrap();
        exact.insert(l.code.clone(), (f + 1) % 3);
    }
    let rep = cluster_report(&exact, &reg).unwrap();
    assert_eq!(rep.off_diagonal(), 0);
    assert!(rep.misallocated.is_empty());
    rep.scheme.check_partition(&reg).unwrap();
    let mut moved = exact.clone();
    let to = (moved["ku"] + 1) % 3;
    moved.insert("ku".into(), to);
    let rep = cluster_report(&moved, &reg).unwrap();
    assert_eq!(rep.off_diagonal(), 1);
    assert_eq!(rep.misallocated, ["ku"]);
    rep.scheme.check_partition(&reg).unwrap();
    assert!(rep.to_text().contains("misallocated\tku"));
    moved.remove("bg");
    assert!(matches!(cluster_report(&moved, &reg), Err(Error::Coverage(_))));
}

#[test]
fn external_vectors_round_trip() {
    let (x, _) = planted_three(0);
    let batch = EmbeddingBatch::new(
        vec![
            ("aa".into(), Tensor::from_rows(&(0..4).map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap()),
            ("bb".into(), Tensor::from_rows(&(4..7).map(|i| x.row(i).to_vec()).collect::<Vec<_>>()).unwrap()),
        ],
        Provenance::OwnEncoder,
    )
    .unwrap();
    let back = EmbeddingBatch::parse(&batch.to_text(), Provenance::OwnEncoder).unwrap();
    assert_eq!(back, batch);
    assert!(matches!(EmbeddingBatch::parse("2 2\n#lang a\n1 2\n", Provenance::OwnEncoder), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(EmbeddingBatch::parse("2 2\n1 2\n", Provenance::OwnEncoder), Err(Error::Parse { line: 2, .. })));
    assert!(EmbeddingBatch::parse("2 2\n#lang a\n1 2\n3 4 5\n", Provenance::OwnEncoder).is_err());
    assert!(EmbeddingBatch::parse("1 2\n#lang a\n1 2\n", Provenance::OwnEncoder).is_err());
}

#[test]
fn pipeline_recovers_planted_languages() {
    let (x, labels) = planted_three(4);
    let mut langs: Vec<(String, Tensor)> = Vec::new();
    for l in 0..6 {
        let family = l % 3;
        let idx: Vec<Vec<f64>> = labels
            .iter()
            .enumerate()
            .filter(|(_, &lab)| lab == family)
            .skip((l / 3) * 50)
            .take(50)
            .map(|(i, _)| x.row(i).to_vec())
            .collect();
        langs.push((format!("l{l}"), Tensor::from_rows(&idx).unwrap()));
    }
    let batch = EmbeddingBatch::new(langs, Provenance::OwnEncoder).unwrap();
    let run = cluster_languages(&batch, 100, 3, &mut seeded_rng(9), 200, 1e-8).unwrap();
    assert_eq!(run.pca.k(), 3);
    for l in 0..3 {
        assert_eq!(run.assignment[&format!("l{l}")], run.assignment[&format!("l{}", l + 3)]);
    }
    let mut distinct: Vec<usize> = (0..3).map(|l| run.assignment[&format!("l{l}")]).collect();
    distinct.sort_unstable();
    distinct.dedup();
    assert_eq!(distinct.len(), 3);
}
