//! Central-difference gradient verification.
//!
//! The checker re-evaluates a scalar loss with each input element nudged by
//! +/- `FD_STEP` and compares the quotient against the analytic adjoint. It
//! never looks at how the analytic side was produced, so it stays a valid
//! oracle for any backward implementation. Checks are f64 only; float32
//! differencing loses too many digits to say anything useful.

use crate::error::Result;
use crate::numerics::tensor::Tensor;

/// Perturbation used for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Largest acceptable relative error `|a - n| / (|a| + |n|)`.
pub const FD_REL_TOL: f64 = 1e-4;
/// Elements with `|a| + |n|` at or below this are skipped; the quotient is
/// all round-off there.
pub const FD_SKIP_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Input/element position of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_REL_TOL
    }
}

/// Compares `analytic` gradients of `loss_fn` at `inputs` against central
/// finite differences. `analytic[i]` must have the shape of `inputs[i]`.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut loss_fn: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let base = input.data()[ei];
            let mut data = input.data().to_vec();

            data[ei] = base + FD_STEP;
            work[ti] = Tensor::from_vec(input.shape().to_vec(), data.clone())?;
            let plus = loss_fn(&work)?;

            data[ei] = base - FD_STEP;
            work[ti] = Tensor::from_vec(input.shape().to_vec(), data)?;
            let minus = loss_fn(&work)?;

            work[ti] = input.clone();

            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[ti].data()[ei];
            if a.abs() + numeric.abs() <= FD_SKIP_FLOOR {
                report.skipped += 1;
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs());
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn accepts_a_correct_gradient() {
        // loss = sum(3 x); analytic gradient is 3 everywhere.
        let x = Tensor::from_rows(&[vec![0.4, -1.2, 2.0]]).unwrap();
        let mut tape = Tape::new();
        let vx = tape.input(&x);
        let s = tape.scale(vx, 3.0).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        let report = check_gradients(
            &[x.clone()],
            &[grads.get(vx).unwrap().clone()],
            |ins| {
                let mut t = Tape::new();
                let v = t.input(&ins[0]);
                let s = t.scale(v, 3.0)?;
                let l = t.sum_all(s)?;
                t.value(l)?.item()
            },
        )
        .unwrap();
        assert!(report.passes(), "max rel err {}", report.max_rel_err);
        assert_eq!(report.checked, 3);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let wrong = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let report = check_gradients(&[x], &[wrong], |ins| {
            // True gradient of sum(x^2) is 2x = [2, 4], so the second
            // element disagrees harder: 3/5 relative error against 1/3.
            Ok(ins[0].data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(!report.passes());
        assert_eq!(report.worst, Some((0, 1)));
    }

    #[test]
    fn skips_elements_below_the_floor() {
        let x = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let zero = Tensor::from_rows(&[vec![0.0]]).unwrap();
        let report = check_gradients(&[x], &[zero], |_| Ok(42.0)).unwrap();
        assert_eq!(report.checked, 0);
        assert_eq!(report.skipped, 1);
    }
}
