use super::tape::{Tape, Var};
use super::tensor::NumError;

/// Runs `steps` plain gradient-descent updates of `params0` against the
/// loss built by `loss_fn`, entirely on the tape.
///
/// The returned parameter node participates in the tape, so any scalar
/// computed from it can be differentiated with respect to whatever leaves
/// the loss reads - in particular the learnable dataset tensors a matching
/// loss is optimizing.
///
/// `steps` must be >= 1. A zero learning rate short-circuits: the loss is
/// still evaluated once for the finiteness check, but `params0` is returned
/// unchanged so the result is bit-identical to the input.
pub fn unrolled_sgd<E: From<NumError>>(
    tape: &Tape,
    params0: Var,
    steps: usize,
    lr: f64,
    mut loss_fn: impl FnMut(&Tape, Var) -> Result<Var, E>,
) -> Result<Var, E> {
    if steps == 0 {
        return Err(NumError::ZeroSteps.into());
    }
    if lr == 0.0 {
        let loss = loss_fn(tape, params0)?;
        if !tape.value_item(loss).is_finite() {
            return Err(NumError::NonFiniteLoss { step: 0 }.into());
        }
        return Ok(params0);
    }
    let mut w = params0;
    for step in 0..steps {
        let loss = loss_fn(tape, w)?;
        if !tape.value_item(loss).is_finite() {
            return Err(NumError::NonFiniteLoss { step }.into());
        }
        let g = tape.grad_vars(loss, &[w]).map_err(E::from)?[0];
        let update = tape.scale(g, lr);
        w = tape.sub(w, update).map_err(E::from)?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::Tensor;

    /// loss(w) = (w - 1)^2 built from tape primitives.
    fn quadratic(tape: &Tape, w: Var) -> Result<Var, NumError> {
        let one = tape.constant(Tensor::scalar(1.0));
        let d = tape.sub(w, one)?;
        tape.mul(d, d)
    }

    #[test]
    fn one_step_from_zero() {
        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::scalar(0.0));
        let w = unrolled_sgd(&tape, w0, 1, 0.1, quadratic).unwrap();
        assert!((tape.value_item(w) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_steps_from_zero() {
        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::scalar(0.0));
        let w = unrolled_sgd(&tape, w0, 2, 0.1, quadratic).unwrap();
        assert!((tape.value_item(w) - 0.36).abs() < 1e-15);
    }

    #[test]
    fn zero_steps_rejected() {
        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::scalar(0.0));
        assert!(matches!(
            unrolled_sgd(&tape, w0, 0, 0.1, quadratic),
            Err(NumError::ZeroSteps)
        ));
    }

    #[test]
    fn zero_lr_returns_params_bitwise() {
        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::new(vec![3], vec![-0.0, 1.5, -2.25]).unwrap());
        let w = unrolled_sgd(&tape, w0, 3, 0.0, |t, w| {
            let s = t.sum(w);
            t.mul(s, s)
        })
        .unwrap();
        let out = tape.value(w);
        let inp = tape.value(w0);
        for (a, b) in out.data().iter().zip(inp.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn non_finite_loss_carries_step_index() {
        let tape = Tape::new();
        let w0 = tape.leaf(Tensor::scalar(2.0));
        // The huge learning rate makes the iterate diverge geometrically
        // until the squared loss overflows to infinity.
        let err = unrolled_sgd(&tape, w0, 60, 1e6, quadratic).unwrap_err();
        match err {
            NumError::NonFiniteLoss { step } => assert!(step > 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        // loss(w; target) = (w - target)^2, two unrolled steps from w0 = 0.
        // d(final w)/d(target) compared against central differences.
        let run = |target: f64| -> (f64, f64) {
            let tape = Tape::new();
            let tgt = tape.leaf(Tensor::scalar(target));
            let w0 = tape.constant(Tensor::scalar(0.0));
            let w = unrolled_sgd(&tape, w0, 2, 0.1, |t, w| {
                let d = t.sub(w, tgt)?;
                t.mul(d, d)
            })
            .unwrap();
            let g = tape.grad(w, &[tgt]).unwrap();
            (tape.value_item(w), g[0].item())
        };
        let (_, analytic) = run(1.0);
        let h = 1e-4;
        let (wp, _) = run(1.0 + h);
        let (wm, _) = run(1.0 - h);
        let numeric = (wp - wm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-12);
        assert!(rel < 1e-4, "analytic {analytic} vs numeric {numeric}");
    }
}
