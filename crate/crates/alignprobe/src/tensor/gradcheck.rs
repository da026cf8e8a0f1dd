//! Gradient checking against central finite differences.

use super::tape::{Tape, ValueId};
use super::{TensorError, TensorF};

/// Floor for the relative-error denominator, so that near-zero gradient
/// entries compare on an absolute scale instead of dividing by noise.
const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient of a scalar-valued function `f` at `x`
/// against central finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise,
/// and returns the worst relative error.
///
/// `f` receives a fresh tape and the id of `x` on it, and must return the id
/// of a scalar node.
pub fn grad_check<F>(f: F, x: &TensorF, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, ValueId) -> Result<ValueId, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::Contract {
            op: "grad_check",
            reason: format!("step h must be positive, got {h}"),
        });
    }

    let eval = |t: &TensorF| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let id = tape.input(t);
        let out = f(&mut tape, id)?;
        if tape.values(out).len() != 1 {
            return Err(TensorError::Contract {
                op: "grad_check",
                reason: "function under test must produce a scalar".into(),
            });
        }
        Ok(tape.values(out)[0])
    };

    // analytic gradient
    let mut tape = Tape::new();
    let id = tape.input(x);
    let out = f(&mut tape, id)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = match grads.get(id) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.values()[i];
        probe.values_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.values_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.values_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn linear_function_is_exact() {
        let x = TensorF::new(vec![4], vec![0.3, -1.0, 2.0, 7.5]).unwrap();
        let err = grad_check(|tape, id| Ok(tape.sum(id)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err={err}");
    }

    #[test]
    fn quadratic_closed_form() {
        // f(x) = sum(x^2), grad = 2x = [2, 4]
        let x = TensorF::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = grad_check(
            |tape, id| {
                let sq = tape.mul(id, id)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err={err}");

        let mut tape = Tape::new();
        let id = tape.input(&x);
        let sq = tape.mul(id, id).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(id).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_of_matmul_on_random_input() {
        let mut rng = rng_for(11, "gradcheck/ce-matmul");
        let x = TensorF::new(
            vec![3, 4],
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = TensorF::new(
            vec![4, 5],
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check(
            |tape, id| {
                let wid = tape.constant(&w);
                let logits = tape.matmul(id, wid)?;
                tape.cross_entropy_mean(logits, &[Some(0), Some(3), Some(2)])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err={err}");
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = TensorF::zeros(vec![2]);
        assert!(grad_check(|tape, id| Ok(tape.sum(id)), &x, 0.0).is_err());
    }
}
