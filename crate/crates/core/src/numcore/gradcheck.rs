use super::{Graph, Tensor, Var};
use crate::Result;

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences with the given step.
///
/// The relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t.clone(), false);
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = f(&mut g, v)?;
    g.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = g.grad(v).unwrap_or(&zeros).to_vec();

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
