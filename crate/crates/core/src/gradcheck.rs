//! Finite-difference verification of tape gradients.
//!
//! [`finite_difference_check`] compares the analytic gradient of a scalar
//! function against central differences, coordinate by coordinate, and returns
//! the worst relative error. [`op_suite`] runs that check over every
//! differentiable tape operation on seeded random inputs.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{ComputationTape, TensorError, TensorId};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const FD_EPSILON: f64 = 1e-5;

/// Per-operation tolerance on the max relative error.
pub const OP_TOLERANCE: f64 = 1e-6;

/// Tolerance for full-model compositions.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Max over coordinates of `|analytic - central_difference| / max(1, |analytic|)`
/// for the scalar function `f` at `x`. Non-finite coordinates of `x` (mask
/// sentinels) are skipped. `f` receives a fresh tape each evaluation and must
/// return a scalar output id.
pub fn finite_difference_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut ComputationTape, TensorId) -> Result<TensorId, TensorError>,
{
    let analytic = {
        let mut tape = ComputationTape::new();
        let id = tape.param(x.clone());
        let out = f(&mut tape, id)?;
        if tape.value(out)?.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: tape.value(out)?.shape().to_vec(),
            });
        }
        tape.backward(out)?;
        match tape.grad(id)? {
            Some(g) => g.to_vec(),
            None => vec![0.0; x.numel()],
        }
    };

    let eval = |probe: &Tensor| -> Result<f64, TensorError> {
        let mut tape = ComputationTape::new();
        let id = tape.constant(probe.clone());
        let out = f(&mut tape, id)?;
        Ok(tape.value(out)?.data()[0])
    };

    let mut worst = 0.0f64;
    // Index loop: i coordinates the perturbed copies with the analytic slice.
    #[allow(clippy::needless_range_loop)]
    for i in 0..x.numel() {
        if !x.data()[i].is_finite() {
            continue;
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = x.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * epsilon);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// One line of gradient-check output.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// [`OP_TOLERANCE`] for single ops, [`MODEL_TOLERANCE`] for compositions.
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Uniform values in [-2, 2], pushed away from the listed kink points so the
/// central difference never straddles a non-smooth point.
fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, kinks: &[f64]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-2.0..2.0);
            for &kink in kinks {
                if (v - kink).abs() < 0.05 {
                    v = kink + if v >= kink { 0.1 } else { -0.1 };
                }
            }
            v
        })
        .collect();
    Tensor::new(shape, data).expect("random tensor shape is valid")
}

fn positive_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(0.5..2.5)).collect();
    Tensor::new(shape, data).expect("random tensor shape is valid")
}

/// Reduces `x` to a scalar through fixed random weights so every output
/// coordinate influences the result independently.
fn weighted_sum(
    tape: &mut ComputationTape,
    x: TensorId,
    weights: &Tensor,
) -> Result<TensorId, TensorError> {
    let w = tape.constant(weights.clone());
    let prod = tape.multiply(x, w)?;
    tape.sum(prod)
}

fn weights_for(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(0.5..1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("weight shape is valid")
}

/// Gradient-checks every differentiable operation and returns one report per
/// checked input. All inputs derive from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckReport>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let push = |reports: &mut Vec<GradCheckReport>, name: &str, err: f64| {
        reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance: OP_TOLERANCE,
        });
    };

    // matmul, both operands.
    {
        let a = random_tensor(&mut rng, vec![3, 4], &[]);
        let b = random_tensor(&mut rng, vec![4, 2], &[]);
        let w = weights_for(&mut rng, &[3, 2]);
        let (bc, wc) = (b.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, x| {
                let b = tape.constant(bc.clone());
                let y = tape.matmul(x, b)?;
                weighted_sum(tape, y, &wc)
            },
            &a,
            FD_EPSILON,
        )?;
        push(&mut reports, "matmul_lhs", err);
        let (ac, wc) = (a.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, x| {
                let a = tape.constant(ac.clone());
                let y = tape.matmul(a, x)?;
                weighted_sum(tape, y, &wc)
            },
            &b,
            FD_EPSILON,
        )?;
        push(&mut reports, "matmul_rhs", err);
    }

    // masked_softmax over a mask with at least one open entry per row.
    {
        let x = random_tensor(&mut rng, vec![4, 5], &[]);
        let mut mask_data = vec![0.0; 20];
        for r in 0..4 {
            for c in 1..5 {
                if rng.gen_bool(0.3) {
                    mask_data[r * 5 + c] = f64::NEG_INFINITY;
                }
            }
        }
        let mask = Tensor::new(vec![4, 5], mask_data).expect("mask shape is valid");
        let w = weights_for(&mut rng, &[4, 5]);
        let err = finite_difference_check(
            move |tape, x| {
                let m = tape.constant(mask.clone());
                let y = tape.masked_softmax(x, m)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "masked_softmax", err);
    }

    // causal_conv1d, all three operands.
    {
        let x = random_tensor(&mut rng, vec![5, 3], &[]);
        let kernel = random_tensor(&mut rng, vec![2, 3, 4], &[]);
        let bias = random_tensor(&mut rng, vec![4], &[]);
        let w = weights_for(&mut rng, &[5, 4]);

        let (kc, bc, wc) = (kernel.clone(), bias.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, x| {
                let k = tape.constant(kc.clone());
                let b = tape.constant(bc.clone());
                let y = tape.causal_conv1d(x, k, b)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "causal_conv1d_input", err);

        let (xc, bc, wc) = (x.clone(), bias.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, k| {
                let x = tape.constant(xc.clone());
                let b = tape.constant(bc.clone());
                let y = tape.causal_conv1d(x, k, b)?;
                weighted_sum(tape, y, &wc)
            },
            &kernel,
            FD_EPSILON,
        )?;
        push(&mut reports, "causal_conv1d_kernel", err);

        let (xc, kc, wc) = (x.clone(), kernel.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, b| {
                let x = tape.constant(xc.clone());
                let k = tape.constant(kc.clone());
                let y = tape.causal_conv1d(x, k, b)?;
                weighted_sum(tape, y, &wc)
            },
            &bias,
            FD_EPSILON,
        )?;
        push(&mut reports, "causal_conv1d_bias", err);
    }

    // Unary pointwise kinds.
    {
        let shape = vec![3, 4];
        let w = weights_for(&mut rng, &shape);

        let x = random_tensor(&mut rng, shape.clone(), &[0.0]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.leaky_relu(x, 0.2)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "leaky_relu", err);

        let x = random_tensor(&mut rng, shape.clone(), &[0.0]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.elu(x)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "elu", err);

        let x = random_tensor(&mut rng, shape.clone(), &[]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.sigmoid(x)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "sigmoid", err);

        let x = random_tensor(&mut rng, shape.clone(), &[]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.exp(x)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "exp", err);

        let x = positive_tensor(&mut rng, shape.clone());
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.log(x)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "log", err);

        let x = random_tensor(&mut rng, shape.clone(), &[]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.negate(x)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "negate", err);

        let x = random_tensor(&mut rng, shape.clone(), &[]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.scale(x, 1.7)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "scale", err);

        let x = random_tensor(&mut rng, shape.clone(), &[-0.5]);
        let wc = w.clone();
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.clamp_min(x, -0.5)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "clamp_min", err);
    }

    // Binary pointwise kinds.
    {
        let shape = vec![3, 4];
        let x = random_tensor(&mut rng, shape.clone(), &[]);
        let other = random_tensor(&mut rng, shape.clone(), &[]);
        let w = weights_for(&mut rng, &shape);

        let (oc, wc) = (other.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, x| {
                let o = tape.constant(oc.clone());
                let y = tape.add(x, o)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "add", err);

        let (oc, wc) = (other.clone(), w.clone());
        let err = finite_difference_check(
            move |tape, x| {
                let o = tape.constant(oc.clone());
                let y = tape.multiply(x, o)?;
                weighted_sum(tape, y, &wc)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "multiply", err);
    }

    // Structural plumbing: concat, sum, transpose, gathers, pair scores.
    {
        let x = random_tensor(&mut rng, vec![3, 2], &[]);
        let other = random_tensor(&mut rng, vec![3, 3], &[]);
        let w = weights_for(&mut rng, &[3, 5]);
        let err = finite_difference_check(
            move |tape, x| {
                let o = tape.constant(other.clone());
                let y = tape.concat(&[x, o], 1)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "concat", err);

        let x = random_tensor(&mut rng, vec![4, 3], &[]);
        let err = finite_difference_check(|tape, x| tape.sum(x), &x, FD_EPSILON)?;
        push(&mut reports, "sum", err);

        let x = random_tensor(&mut rng, vec![3, 4], &[]);
        let w = weights_for(&mut rng, &[4, 3]);
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.transpose(x)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "transpose", err);

        let x = random_tensor(&mut rng, vec![4, 3], &[]);
        let w = weights_for(&mut rng, &[3, 3]);
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.gather_rows(x, &[2, 0, 2])?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "gather_rows", err);

        let x = random_tensor(&mut rng, vec![3, 4], &[]);
        let other = random_tensor(&mut rng, vec![2, 4], &[]);
        let w = weights_for(&mut rng, &[3, 4]);
        let err = finite_difference_check(
            move |tape, x| {
                let o = tape.constant(other.clone());
                let y = tape.stack_rows(&[(x, 1), (o, 0), (x, 2)])?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "stack_rows", err);

        let x = random_tensor(&mut rng, vec![4, 3], &[]);
        let w = weights_for(&mut rng, &[3]);
        let err = finite_difference_check(
            move |tape, x| {
                let y = tape.pair_scores(x, &[(0, 1), (2, 3), (1, 1)])?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_EPSILON,
        )?;
        push(&mut reports, "pair_scores", err);
    }

    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_exactly() {
        let x = Tensor::new(vec![3], vec![0.4, -1.1, 2.0]).unwrap();
        let err = finite_difference_check(|tape, x| tape.sum(x), &x, FD_EPSILON).unwrap();
        assert!(err < 1e-10, "linear case reported {err}");
    }

    #[test]
    fn sigmoid_sum_checks_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, vec![4, 4], &[]);
        let err = finite_difference_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                tape.sum(s)
            },
            &x,
            FD_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-7, "sigmoid sum reported {err}");
    }

    #[test]
    fn non_finite_coordinates_are_skipped() {
        // A -inf sentinel coordinate must not be perturbed; the check still
        // covers the finite coordinates.
        let x = Tensor::new(vec![3, 1], vec![0.5, f64::NEG_INFINITY, 1.0]).unwrap();
        let err = finite_difference_check(
            |tape, x| {
                let finite = tape.gather_rows(x, &[0, 2])?;
                tape.sum(finite)
            },
            &x,
            FD_EPSILON,
        )
        .unwrap();
        assert!(err < 1e-9, "finite rows reported {err}");
    }

    #[test]
    fn every_op_passes_at_1e6() {
        let reports = op_suite(7).unwrap();
        assert!(reports.len() >= 20);
        for r in &reports {
            assert!(
                r.passes(),
                "{} failed gradient check with max rel err {}",
                r.name,
                r.max_rel_err
            );
        }
    }
}
