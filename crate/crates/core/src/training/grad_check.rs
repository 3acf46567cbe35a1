//! Central finite-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - c| / max(|a|, |c|, 1e-8)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation moved a ReLU input across zero.
    pub excluded: usize,
    /// Checked coordinates where both gradients are below [`ZERO_FLOOR`];
    /// they count as agreeing and do not enter `max_rel_error`.
    pub zero: usize,
    /// `(input, coordinate, analytic, numeric)` at the maximum error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Up to `limit` evenly spaced coordinates of a tensor with `n` entries.
fn sample_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|i| i * n / limit).collect()
    }
}

/// Gradients below this are zero up to central-difference round-off.
pub const ZERO_FLOOR: f64 = 1e-8;

fn relative_error(a: f64, c: f64) -> f64 {
    (a - c).abs() / a.abs().max(c.abs()).max(ZERO_FLOOR)
}

fn eval_scalar(g: &Graph, loss: Var) -> Result<f64> {
    let v = g.value(loss);
    if v.numel() != 1 {
        return Err(Error::ShapeMismatch("grad_check needs a scalar function".into()));
    }
    Ok(v.item())
}

struct Probe<'a> {
    analytic: &'a [Tensor],
    base_signature: u64,
    eps: f64,
    samples: usize,
}

impl Probe<'_> {
    fn run(&self, mut eval: impl FnMut(usize, usize, f64) -> Result<(f64, u64)>) -> Result<GradCheckReport> {
        let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded: 0, zero: 0, worst: None };
        for (t, grad) in self.analytic.iter().enumerate() {
            for i in sample_indices(grad.numel(), self.samples) {
                let (fp, sp) = eval(t, i, self.eps)?;
                let (fm, sm) = eval(t, i, -self.eps)?;
                if sp != self.base_signature || sm != self.base_signature {
                    report.excluded += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * self.eps);
                let a = grad.data()[i];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::NonFiniteGradient);
                }
                report.checked += 1;
                if a.abs() < ZERO_FLOOR && numeric.abs() < ZERO_FLOOR {
                    report.zero += 1;
                    continue;
                }
                let e = relative_error(a, numeric);
                if e > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(e);
                    report.worst = Some((t, i, a, numeric));
                }
            }
        }
        if report.checked == 0 && report.excluded > 0 {
            return Err(Error::NearKink(self.eps));
        }
        Ok(report)
    }
}

/// Checks the gradient of `f` with respect to free input tensors. `f`
/// receives one gradient-carrying leaf per input and returns a scalar.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, samples_per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let build = |values: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss) = build(inputs)?;
    eval_scalar(&g, loss)?;
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let probe = Probe { analytic: &analytic, base_signature: g.relu_signature(), eps, samples: samples_per_input };
    probe.run(|t, i, delta| {
        let mut values = inputs.to_vec();
        values[t].data_mut()[i] += delta;
        let (g, _, loss) = build(&values)?;
        Ok((eval_scalar(&g, loss)?, g.relu_signature()))
    })
}

/// Checks the gradient of `f` with respect to stored parameters `ids`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    f: F,
    eps: f64,
    samples_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    eval_scalar(&g, loss)?;
    let grads = g.backward(loss);
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|&id| grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
        .collect();
    let probe = Probe { analytic: &analytic, base_signature: g.relu_signature(), eps, samples: samples_per_param };
    let mut work = store.clone();
    probe.run(|t, i, delta| {
        let id = ids[t];
        let orig = work.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + delta;
        let mut g = Graph::new();
        let r = f(&mut g, &work).and_then(|loss| eval_scalar(&g, loss));
        work.get_mut(id).data_mut()[i] = orig;
        Ok((r?, g.relu_signature()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn affine_quadratic_is_exact() {
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]);
        let w = Tensor::from_vec(&[3, 2], vec![0.7, -0.3, 0.2, 0.9, -1.1, 0.4]);
        let b = Tensor::from_vec(&[2], vec![0.05, -0.2]);
        let r = grad_check(
            |g, v| {
                let y = g.linear(v[0], v[1], v[2]);
                let sq = g.mul(y, y);
                Ok(g.sum(sq))
            },
            &[x, w, b],
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked, 14);
    }

    #[test]
    fn wrong_backward_is_detected() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 0.5, 2.0]);
        let r = grad_check(
            |g, v| {
                let y = g.wrong_identity(v[0]);
                let sq = g.mul(y, y);
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
            64,
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn kink_crossings_are_excluded() {
        let x = Tensor::from_vec(&[3], vec![1e-6, 0.5, -0.7]);
        let r = grad_check(
            |g, v| {
                let y = g.relu(v[0]);
                Ok(g.sum(y))
            },
            &[x],
            1e-5,
            64,
        )
        .unwrap();
        assert_eq!((r.checked, r.excluded), (2, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn structural_zeros_are_counted_not_scored() {
        // a per-row shift before layer norm has zero gradient
        let x = Tensor::from_vec(&[2, 3], vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4]);
        let shift = Tensor::from_vec(&[2, 1], vec![0.7, -3.0]);
        let r = grad_check(
            |g, v| {
                let ones = g.constant(Tensor::full(&[1, 3], 1.0));
                let s = g.matmul(v[1], ones);
                let y = g.add(v[0], s);
                let gam = g.constant(Tensor::full(&[3], 1.0));
                let bet = g.constant(Tensor::zeros(&[3]));
                let n = g.layer_norm(y, gam, bet);
                let w = g.constant(Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.9, -1.1]));
                let p = g.mul(n, w);
                Ok(g.sum(p))
            },
            &[x, shift],
            1e-5,
            64,
        )
        .unwrap();
        assert_eq!(r.zero, 2, "{r:?}");
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
