use crate::error::Result;

use super::{Scalar, Tape, Tensor, TensorId};

/// Central-difference step used throughout the test suites.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Coordinates whose gradient magnitude sits below this floor are compared
/// at the floor's scale instead of relatively, so round-off in a tiny
/// gradient does not dominate the reported error.
const SCALE_FLOOR: f64 = 1e-3;

/// Verify tape gradients against central finite differences.
///
/// `build` records the scalar function under test on a fresh tape given
/// leaves for `params` (every entry must be flagged trainable). The harness
/// runs one forward+backward for the analytic gradients, then re-evaluates
/// the function forward-only at `x ± h` per coordinate. Returns the worst
/// relative error over all coordinates.
pub fn finite_difference_check<F, B>(mut build: B, params: &[Tensor<F>], h: f64) -> Result<f64>
where
    F: Scalar,
    B: FnMut(&mut Tape<F>, &[TensorId]) -> Result<TensorId>,
{
    debug_assert!(params.iter().all(Tensor::requires_grad));

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &ids)?;
        tape.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| match tape.grad(id) {
                Some(g) => g.iter().map(|v| v.into_f64()).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect()
    };

    let mut eval = |perturbed: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &ids)?;
        Ok(tape.value(loss)[0].into_f64())
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<F>> = params.to_vec();
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &an) in grads.iter().enumerate() {
            let original = work[pi].data()[ci];
            work[pi].data_mut()[ci] = original + F::from_f64(h);
            let plus = eval(&work)?;
            work[pi].data_mut()[ci] = original - F::from_f64(h);
            let minus = eval(&work)?;
            work[pi].data_mut()[ci] = original;

            let fd = (plus - minus) / (2.0 * h);
            let denom = an.abs().max(fd.abs()).max(SCALE_FLOOR);
            worst = worst.max((fd - an).abs() / denom);
        }
    }
    Ok(worst)
}
