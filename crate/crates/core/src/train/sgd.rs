use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Momentum buffers, one per parameter tensor, created on first use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T: Real> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Real> SgdState<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }
}

/// `v ← m·v + (g + wd·p)`, `p ← p − lr·v`, element-wise in `T`.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[&[T]],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState<T>,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::validation(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() {
            return Err(Error::validation(format!(
                "gradient {i} has {} elements, parameter {:?} has {}",
                g.len(),
                p.shape(),
                p.len()
            )));
        }
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    } else if state.velocity.len() != params.len()
        || state.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
    {
        return Err(Error::validation("optimizer state does not match the parameters"));
    }
    let lr = T::from_f64_lossy(lr);
    let m = T::from_f64_lossy(momentum);
    let wd = T::from_f64_lossy(weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((pj, &gj), vj) in p.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vj = m * *vj + (gj + wd * *pj);
            *pj -= lr * *vj;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut st = SgdState::new();
        sgd_step(&mut p, &[&[0.5]], 1.0, 0.0, 0.0, &mut st).unwrap();
        assert_eq!(p[0].item(), 0.5);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = SgdState::new();
        for _ in 0..2 {
            sgd_step(&mut p, &[&[2.0]], 0.1, 0.9, 0.0, &mut st).unwrap();
        }
        assert!((st.velocity[0][0] - 1.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = SgdState::new();
        let err = sgd_step(&mut p, &[&[1.0]], 0.1, 0.9, 0.0, &mut st).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
