//! Central finite-difference validation of analytic gradients.
//!
//! Each check perturbs one input entry at a time at f64, so it is only
//! meaningful on the `f64` instantiation of the tape.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Max relative error between an analytic gradient and the central-difference
/// estimate of `f` around `x`: `max |analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    x: &Tensor<f64>,
    h: f64,
    analytic: &Tensor<f64>,
) -> Result<f64> {
    if analytic.shape() != x.shape() {
        return Err(Error::Shape(format!(
            "finite_diff_check: analytic {:?} vs x {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[idx] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[idx] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic.data()[idx] - numeric).abs() / numeric.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Run forward + backward for a scalar-valued graph builder and compare the
/// gradient of its single differentiable input against finite differences.
pub fn check_grad(
    build: impl Fn(&mut super::Tape<f64>, super::Var) -> Result<super::Var>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<f64> {
    let mut tape = super::Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = build(&mut tape, xv)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::Tape("check_grad: builder must produce a scalar".into()));
    }
    tape.backward(loss)?;
    let analytic =
        tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
    finite_diff_check(
        |probe| {
            let mut t = super::Tape::new();
            let v = t.leaf(probe.clone(), false);
            let l = build(&mut t, v)?;
            t.scalar(l)
        },
        x,
        h,
        &analytic,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_near_exact() {
        // f(x) = sum(x*x): central differences are exact for quadratics up to rounding.
        let x = Tensor::from_vec(1, 4, vec![0.8, -1.3, 2.0, 0.1]).unwrap();
        let err = check_grad(
            |t, v| {
                let sq = t.mul_elem(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn layer_norm_composite_under_1e4() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x = Tensor::<f64>::randn(3, 5, 1.0, &mut rng);
            let gain = Tensor::<f64>::randn(1, 5, 0.3, &mut rng);
            let bias = Tensor::<f64>::randn(1, 5, 0.3, &mut rng);
            let err = check_grad(
                |t, v| {
                    let g = t.constant(gain.clone());
                    let b = t.constant(bias.clone());
                    let y = t.layer_norm(v, g, b, 1e-5)?;
                    let sq = t.mul_elem(y, y)?;
                    Ok(t.sum_all(sq))
                },
                &x,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "relative error {err}");
        }
    }
}
