//! Central finite-difference verification of analytic gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Outcome of one [`grad_check`] run.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of a scalar computation against central
/// differences `(f(x + eps) − f(x − eps)) / (2·eps)` for every element of
/// every input with `requires_grad` set.
///
/// The computation is rebuilt from scratch on a fresh verification-precision
/// graph for every evaluation.
pub fn grad_check<F>(inputs: &[Tensor<f64>], eps: f64, computation: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Usage(format!("grad_check eps must lie in (0, 1e-3], got {eps}")));
    }
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.input_ref(t)).collect();
        let out = computation(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::Usage(format!(
                "grad_check needs a scalar computation, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok((g, ids, out))
    };

    let (mut g, ids, out) = eval(inputs)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = ids.iter().map(|&id| g.grad_or_zeros(id)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        for ei in 0..input.len() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            let f_plus = plus.0.value(plus.2).item();
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            let f_minus = minus.0.value(minus.2).item();
            work[ti].data_mut()[ei] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[ti].data()[ei];
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_layer_gradients_are_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(&[3, 5], &mut rng).with_requires_grad(true);
        let w = Tensor::<f64>::randn(&[4, 5], &mut rng).with_requires_grad(true);
        let b = Tensor::<f64>::randn(&[4], &mut rng).with_requires_grad(true);
        let probe = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let report = grad_check(&[x, w, b], 1e-5, |g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2])?;
            g.weighted_sum(y, probe.data())
        })
        .unwrap();
        assert_eq!(report.elements_checked, 15 + 20 + 4);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_computation_has_zero_gradients() {
        let p = Tensor::<f64>::ones(&[3]).with_requires_grad(true);
        let c = Tensor::<f64>::full(&[2], 4.0);
        let report = grad_check(&[p, c], 1e-5, |g, ids| g.sum(ids[1])).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.analytic_at_worst, 0.0);
        assert_eq!(report.numeric_at_worst, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar_output() {
        let p = Tensor::<f64>::ones(&[3]).with_requires_grad(true);
        assert!(matches!(
            grad_check(&[p.clone()], 1e-2, |g, ids| g.sum(ids[0])),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            grad_check(&[p], 1e-5, |_, ids| Ok(ids[0])),
            Err(Error::Usage(_))
        ));
    }
}
