use rand::Rng as _;

use crate::numcore::Tensor;
use crate::{Error, Result, Rng};

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const RESTARTS: usize = 5;

/// Diagonal-covariance Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Total data log-likelihood at each E-step of the retained restart.
    pub loglik_trace: Vec<f64>,
}

impl GmmModel {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// `log(w_k · N(x | μ_k, diag σ²_k))` per component.
    fn log_joint(&self, x: &[f64], out: &mut [f64]) {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        for k in 0..self.components() {
            let mut s = self.weights[k].ln();
            for ((v, mu), var) in x.iter().zip(&self.means[k]).zip(&self.variances[k]) {
                let d = v - mu;
                s -= 0.5 * (ln2pi + var.ln() + d * d / var);
            }
            out[k] = s;
        }
    }

    /// Responsibilities (in place of `lj`) and the row's log-likelihood.
    fn posterior(&self, x: &[f64], lj: &mut [f64]) -> f64 {
        self.log_joint(x, lj);
        let top = lj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lj.iter().map(|l| (l - top).exp()).sum();
        let lse = top + z.ln();
        for l in lj.iter_mut() {
            *l = (*l - lse).exp();
        }
        lse
    }

    pub fn log_likelihood(&self, x: &Tensor) -> f64 {
        let mut buf = vec![0.0; self.components()];
        (0..x.rows()).map(|i| self.posterior(x.row(i), &mut buf)).sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeanspp(x: &Tensor, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centers = vec![x.row(rng.gen_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.gen_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centers.push(c);
    }
    centers
}

fn m_step(x: &Tensor, resp: &[f64], model: &mut GmmModel) {
    let (n, d, kk) = (x.rows(), x.cols(), model.components());
    for k in 0..kk {
        let nk: f64 = (0..n).map(|i| resp[i * kk + k]).sum();
        model.weights[k] = nk / n as f64;
        if nk <= 0.0 {
            continue;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            let r = resp[i * kk + k];
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += r * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nk);
        let mut var = vec![0.0; d];
        for i in 0..n {
            let r = resp[i * kk + k];
            for ((s, v), mu) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += r * (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / nk).max(VARIANCE_FLOOR));
        model.means[k] = mean;
        model.variances[k] = var;
    }
}

fn fit_once(x: &Tensor, k: usize, rng: &mut Rng, max_iter: usize, tol: f64) -> GmmModel {
    let (n, d) = (x.rows(), x.cols());
    let mut global = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((g, v), m) in global.iter_mut().zip(x.row(i)).zip(&mean) {
            *g += (v - m) * (v - m) / n as f64;
        }
    }
    global.iter_mut().for_each(|g| *g = g.max(VARIANCE_FLOOR));
    let mut model = GmmModel {
        weights: vec![1.0 / k as f64; k],
        means: kmeanspp(x, k, rng),
        variances: vec![global; k],
        loglik_trace: Vec::new(),
    };
    let mut resp = vec![0.0; n * k];
    for _ in 0..max_iter.max(1) {
        let ll: f64 = (0..n)
            .map(|i| model.posterior(x.row(i), &mut resp[i * k..(i + 1) * k]))
            .sum();
        let prev = model.loglik_trace.last().copied();
        model.loglik_trace.push(ll);
        if prev.is_some_and(|p| ll - p < tol) {
            break;
        }
        m_step(x, &resp, &mut model);
    }
    model
}

/// EM for a diagonal GMM: k-means++ seeding, best of several restarts by
/// final log-likelihood, variances floored at [`VARIANCE_FLOOR`].
pub fn gmm_fit_em(x: &Tensor, k: usize, rng: &mut Rng, max_iter: usize, tol: f64) -> Result<GmmModel> {
    if x.shape().len() != 2 || x.cols() == 0 {
        return Err(Error::Domain("gmm needs a non-empty matrix".into()));
    }
    if k == 0 || x.rows() < k {
        return Err(Error::Domain(format!("cannot fit {k} components to {} points", x.rows())));
    }
    let mut best: Option<GmmModel> = None;
    for _ in 0..RESTARTS {
        let m = fit_once(x, k, rng, max_iter, tol);
        let ll = *m.loglik_trace.last().expect("at least one E-step");
        if best.as_ref().is_none_or(|b| ll > *b.loglik_trace.last().expect("non-empty")) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Posterior component probabilities `[n × K]`.
pub fn gmm_soft_assign(m: &GmmModel, x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || x.cols() != m.dim() {
        return Err(Error::Shape {
            op: "gmm_soft_assign",
            left: x.shape().to_vec(),
            right: vec![m.dim()],
        });
    }
    let k = m.components();
    let mut out = vec![0.0; x.rows() * k];
    for i in 0..x.rows() {
        m.posterior(x.row(i), &mut out[i * k..(i + 1) * k]);
    }
    Tensor::new(vec![x.rows(), k], out)
}
