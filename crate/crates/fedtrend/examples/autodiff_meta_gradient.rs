//! Tour of the reverse-mode tape: plain gradients, gradients-of-gradients,
//! and differentiating through an unrolled run of gradient descent.

use fedtrend::numcore::{unrolled_sgd, NumError, Tape, Tensor};

fn main() -> Result<(), NumError> {
    // plain reverse-mode: d(x^2)/dx at x = 3
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x)?;
    let g = tape.grad(y, &[x])?;
    println!("d(x^2)/dx at 3 = {}", g[0].item());

    // the backward pass can itself be recorded, so gradients compose:
    // f(x) = x^3, f'(x) = 3x^2, f''(x) = 6x
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let x2 = tape.mul(x, x)?;
    let f = tape.mul(x2, x)?;
    let f1 = tape.grad_vars(f, &[x])?[0];
    let f2 = tape.grad(f1, &[x])?;
    println!(
        "f = x^3 at 2: f' = {} (expect 12), f'' = {} (expect 12)",
        tape.value_item(f1),
        f2[0].item()
    );

    // meta-gradient: run two SGD steps of loss(w) = (w - target)^2 from
    // w0 = 0 and differentiate the final iterate with respect to target
    let run = |target: f64| -> Result<(f64, f64), NumError> {
        let tape = Tape::new();
        let tgt = tape.leaf(Tensor::scalar(target));
        let w0 = tape.constant(Tensor::scalar(0.0));
        let w = unrolled_sgd::<NumError>(&tape, w0, 2, 0.1, |t, w| {
            let d = t.sub(w, tgt)?;
            t.mul(d, d)
        })?;
        let g = tape.grad(w, &[tgt])?;
        Ok((tape.value_item(w), g[0].item()))
    };
    let (w_final, analytic) = run(1.0)?;
    let h = 1e-4;
    let numeric = (run(1.0 + h)?.0 - run(1.0 - h)?.0) / (2.0 * h);
    println!("two unrolled steps toward target 1.0 -> w = {w_final}");
    println!("d(final w)/d(target): tape {analytic} vs central differences {numeric}");
    Ok(())
}
