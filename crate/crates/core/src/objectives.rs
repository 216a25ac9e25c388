//! Training objectives: projection (mean squared error to the target vision
//! embedding), text-conditioned contrastive regularization, their weighted
//! combination, and the denoising objective for the time-conditioned
//! baseline.
//!
//! Reductions follow one convention throughout: squared errors are summed
//! over embedding dimensions and averaged over the batch. Contrastive
//! log-sum-exp terms are computed with max subtraction and accumulated at
//! f64 even when similarities are f32.

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoiseSchedule};
use crate::grad::{Real, Tape, Tensor, Var};
use crate::prior::PriorBinding;
use crate::{Error, Result};

fn default_lambda() -> f64 {
    0.2
}

fn default_tau() -> f64 {
    0.07
}

/// Loss hyperparameters: the contrastive weight and temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: default_lambda(), tau: default_tau() }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config(format!("loss config: tau {} must be positive", self.tau)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "loss config: lambda {} must be nonnegative",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Squared L2 distance to the target, summed over dimensions and averaged
/// over the batch.
pub fn proj_loss<F: Real>(tape: &mut Tape<F>, pred: Var, target: Var) -> Result<Var> {
    tape.mean_sum_sq(pred, target)
}

/// Text-conditioned contrastive loss: for each predicted vision embedding,
/// a softmax over cosine similarities to every text embedding in the batch,
/// with the matching text as the positive.
pub fn contrastive_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    z_y: Var,
    tau: f64,
) -> Result<Var> {
    contrastive_loss_with_offset(tape, pred, z_y, tau, None)
}

/// Contrastive loss with a per-row logit offset — a test hook for asserting
/// softmax shift invariance; `None` is the production path.
pub fn contrastive_loss_with_offset<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    z_y: Var,
    tau: f64,
    row_offset: Option<&[f64]>,
) -> Result<Var> {
    if tape.shape(pred) != tape.shape(z_y) {
        return Err(Error::Shape(format!(
            "contrastive_loss: pred {:?} vs z_y {:?}",
            tape.shape(pred),
            tape.shape(z_y)
        )));
    }
    let pn = tape.l2_normalize_rows(pred, L2_EPS);
    let yn = tape.l2_normalize_rows(z_y, L2_EPS);
    let sims = tape.matmul_nt(pn, yn)?;
    tape.nce_diag_loss(sims, tau, row_offset)
}

const L2_EPS: f64 = 1e-12;

/// The three scalars of the combined objective.
pub struct EclipseLoss {
    pub total: Var,
    pub proj: Var,
    pub cls: Var,
}

/// Combined objective `proj + lambda * contrastive`. At `lambda = 0` the
/// total IS the projection node, so values and gradients are bitwise those
/// of the projection objective; the contrastive term is still evaluated for
/// logging but stays outside the backward path.
pub fn eclipse_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: Var,
    z_x: Var,
    z_y: Var,
    config: &LossConfig,
) -> Result<EclipseLoss> {
    config.validate()?;
    let proj = proj_loss(tape, pred, z_x)?;
    let cls = contrastive_loss(tape, pred, z_y, config.tau)?;
    let total = if config.lambda == 0.0 {
        proj
    } else {
        let scaled = tape.scale(cls, config.lambda);
        tape.add(proj, scaled)?
    };
    Ok(EclipseLoss { total, proj, cls })
}

/// Denoising objective for the time-conditioned baseline: noise the clean
/// vision embedding to `z_t = q(t, z_x)`, predict the clean sample, and
/// take the squared error against it. `z_y` is passed as a tape var so the
/// caller can route it through condition dropout first.
pub fn diffusion_prior_loss<F: Real>(
    tape: &mut Tape<F>,
    binding: &PriorBinding,
    schedule: &NoiseSchedule,
    z_x: &Tensor<F>,
    z_y: Var,
    t: &[usize],
    epsilon: &Tensor<F>,
) -> Result<Var> {
    let z_t = q_sample(schedule, z_x, t, epsilon)?;
    let z_t = tape.constant(z_t);
    let pred = binding.forward_diffusion(tape, z_t, t, z_y)?;
    let target = tape.constant(z_x.clone());
    tape.mean_sum_sq(pred, target)
}

/// Convenience: evaluate the contrastive loss on plain tensors (f64 result).
pub fn contrastive_loss_value<F: Real>(pred: &Tensor<F>, z_y: &Tensor<F>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let y = tape.constant(z_y.clone());
    let l = contrastive_loss(&mut tape, p, y, tau)?;
    tape.scalar(l)
}

/// Convenience: evaluate the projection loss on plain tensors (f64 result).
pub fn proj_loss_value<F: Real>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = proj_loss(&mut tape, p, t)?;
    tape.scalar(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;

    fn t64(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn proj_loss_identity_is_zero() {
        let x = t64(2, 3, &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        assert_eq!(proj_loss_value(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn proj_loss_unit_square_distance() {
        // zhat = (0,1), z = (1,0): squared distance 2.
        let p = t64(1, 2, &[0.0, 1.0]);
        let t = t64(1, 2, &[1.0, 0.0]);
        assert_eq!(proj_loss_value(&p, &t).unwrap(), 2.0);
    }

    #[test]
    fn proj_loss_batch_mean() {
        // rows with squared distances {2, 0} -> mean 1.
        let p = t64(2, 2, &[0.0, 1.0, 0.5, 0.5]);
        let t = t64(2, 2, &[1.0, 0.0, 0.5, 0.5]);
        assert_eq!(proj_loss_value(&p, &t).unwrap(), 1.0);
    }

    #[test]
    fn contrastive_single_row_is_zero() {
        let p = t64(1, 3, &[0.3, 0.4, 0.5]);
        let y = t64(1, 3, &[-0.1, 0.9, 0.2]);
        assert_eq!(contrastive_loss_value(&p, &y, 0.07).unwrap(), 0.0);
    }

    #[test]
    fn contrastive_identity_cosine_case() {
        // N=2, tau=1, cosine matrix [[1,0],[0,1]] -> ln(1 + e^{-1}).
        let p = t64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = t64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let got = contrastive_loss_value(&p, &y, 1.0).unwrap();
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn contrastive_rejects_bad_inputs() {
        let p = t64(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y3 = t64(2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(contrastive_loss_value(&p, &y3, 1.0).is_err());
        assert!(contrastive_loss_value(&p, &p, 0.0).is_err());
    }

    #[test]
    fn contrastive_is_invariant_to_row_rescaling() {
        let mut rng = derive(&[1, 2, 3]);
        let p = Tensor::<f64>::randn(4, 6, 1.0, &mut rng);
        let y = Tensor::<f64>::randn(4, 6, 1.0, &mut rng);
        let base = contrastive_loss_value(&p, &y, 0.07).unwrap();
        let mut scaled = p.clone();
        for (r, c) in [(0usize, 3.5f64), (2, 0.01)] {
            for v in scaled.row_mut(r).iter_mut() {
                *v *= c;
            }
        }
        let got = contrastive_loss_value(&scaled, &y, 0.07).unwrap();
        assert!((got - base).abs() < 1e-6);
    }

    #[test]
    fn contrastive_shift_invariance_via_offset_hook() {
        let mut rng = derive(&[4, 5, 6]);
        let p = Tensor::<f64>::randn(5, 4, 1.0, &mut rng);
        let y = Tensor::<f64>::randn(5, 4, 1.0, &mut rng);
        let eval = |off: Option<&[f64]>| {
            let mut tape = Tape::new();
            let pv = tape.constant(p.clone());
            let yv = tape.constant(y.clone());
            let l = contrastive_loss_with_offset(&mut tape, pv, yv, 0.07, off).unwrap();
            tape.scalar(l).unwrap()
        };
        let base = eval(None);
        let shifted = eval(Some(&[3.0, -2.0, 0.5, 100.0, -7.0]));
        assert!((shifted - base).abs() < 1e-9, "{shifted} vs {base}");
    }

    #[test]
    fn contrastive_strictly_positive_for_n_ge_2() {
        for seed in 0..5u64 {
            let mut rng = derive(&[seed, 77]);
            let p = Tensor::<f64>::randn(6, 8, 1.0, &mut rng);
            let y = Tensor::<f64>::randn(6, 8, 1.0, &mut rng);
            assert!(contrastive_loss_value(&p, &y, 0.07).unwrap() > 0.0);
        }
    }

    #[test]
    fn eclipse_lambda_zero_is_projection_bitwise() {
        let mut rng = derive(&[9, 8]);
        let p = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let zx = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let zy = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = tape.leaf(p, true);
        let xv = tape.constant(zx);
        let yv = tape.constant(zy);
        let parts =
            eclipse_loss(&mut tape, pv, xv, yv, &LossConfig { lambda: 0.0, tau: 0.07 }).unwrap();
        assert_eq!(parts.total, parts.proj);
        let proj_value = tape.scalar(parts.proj).unwrap();
        assert_eq!(tape.scalar(parts.total).unwrap(), proj_value);
    }

    #[test]
    fn eclipse_combination_arithmetic() {
        // proj=1.0, cls=0.5, lambda=0.2 -> total=1.1; checked through the
        // real composition on constructed inputs is fragile, so check the
        // combination rule itself on synthetic component values.
        let mut tape = Tape::<f64>::new();
        let proj = tape.constant(Tensor::scalar(1.0));
        let cls = tape.constant(Tensor::scalar(0.5));
        let scaled = tape.scale(cls, 0.2);
        let total = tape.add(proj, scaled).unwrap();
        assert!((tape.scalar(total).unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn eclipse_single_row_total_is_projection_alone() {
        let mut rng = derive(&[3, 1]);
        let p = Tensor::<f64>::randn(1, 4, 1.0, &mut rng);
        let zx = Tensor::<f64>::randn(1, 4, 1.0, &mut rng);
        let zy = Tensor::<f64>::randn(1, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let pv = tape.constant(p.clone());
        let xv = tape.constant(zx.clone());
        let yv = tape.constant(zy);
        let parts = eclipse_loss(&mut tape, pv, xv, yv, &LossConfig::default()).unwrap();
        assert_eq!(tape.scalar(parts.cls).unwrap(), 0.0);
        let total = tape.scalar(parts.total).unwrap();
        let proj = proj_loss_value(&p, &zx).unwrap();
        assert!((total - proj).abs() < 1e-15);
    }

    #[test]
    fn eclipse_gradient_is_linear_combination() {
        // grad(total) = grad(proj) + lambda * grad(cls), elementwise.
        let mut rng = derive(&[6, 6]);
        let p = Tensor::<f64>::randn(4, 5, 1.0, &mut rng);
        let zx = Tensor::<f64>::randn(4, 5, 1.0, &mut rng);
        let zy = Tensor::<f64>::randn(4, 5, 1.0, &mut rng);
        let lambda = 0.2;

        let grad_of = |which: u8| -> Tensor<f64> {
            let mut tape = Tape::new();
            let pv = tape.leaf(p.clone(), true);
            let xv = tape.constant(zx.clone());
            let yv = tape.constant(zy.clone());
            let parts =
                eclipse_loss(&mut tape, pv, xv, yv, &LossConfig { lambda, tau: 0.07 }).unwrap();
            let node = match which {
                0 => parts.total,
                1 => parts.proj,
                _ => parts.cls,
            };
            tape.backward(node).unwrap();
            tape.grad(pv).cloned().unwrap()
        };
        let g_total = grad_of(0);
        let g_proj = grad_of(1);
        let g_cls = grad_of(2);
        for i in 0..g_total.len() {
            let want = g_proj.data()[i] + lambda * g_cls.data()[i];
            assert!((g_total.data()[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn diffusion_loss_zero_for_oracle_prediction() {
        // A perfect prediction gives zero loss at any t; emulate the oracle
        // by feeding pred = z_x straight into the reduction.
        let mut rng = derive(&[2, 9]);
        let zx = Tensor::<f64>::randn(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(zx.clone());
        let t = tape.constant(zx);
        let l = tape.mean_sum_sq(p, t).unwrap();
        assert_eq!(tape.scalar(l).unwrap(), 0.0);
    }
}
