//! Central-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seed of the projection used to reduce non-scalar outputs.
const PROJECTION_SEED: u64 = 0x9e37_79b9;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over all entries of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat entry)` where the max was attained.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

fn scalar_output<F>(build: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let n = tape.value(out).numel();
    let loss = if n == 1 {
        out
    } else {
        // a fixed random projection; a plain sum would hide e.g. softmax gradients
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let coeffs = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        tape.weighted_sum(out, coeffs)?
    };
    Ok((tape, vars, loss))
}

/// Compares tape gradients of `build` against central differences.
///
/// `build` receives one leaf per entry of `inputs` and returns the output
/// node. Outputs with more than one element are reduced with a fixed random
/// weighted sum. The numeric side evaluates the loss in 64 bits. The step
/// is snapped to the nearest power of two so that `x +- h` is exact for
/// inputs on a binary grid.
pub fn grad_check<F>(build: F, inputs: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&epsilon) {
        return Err(Error::InvalidInput(format!("epsilon {epsilon} outside [1e-4, 1e-2]")));
    }
    let h = 2f64.powi(epsilon.log2().round() as i32) as f32;
    let (tape, vars, loss) = scalar_output(&build, inputs)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut probe = inputs.to_vec();
    let eval = |probe: &[Tensor]| -> Result<f64> {
        let (t, _, l) = scalar_output(&build, probe)?;
        t.scalar(l)
    };
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data[j];
            let hi = x + h;
            let lo = x - h;
            probe[i].data[j] = hi;
            let f_hi = eval(&probe)?;
            probe[i].data[j] = lo;
            let f_lo = eval(&probe)?;
            probe[i].data[j] = x;
            // divide by the step actually taken in f32
            let numeric = (f_hi - f_lo) / (hi as f64 - lo as f64);
            let a = analytic.data[j] as f64;
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::ConvParams;
    use crate::tensor::FeatureMap;

    /// Values on a 1/64 grid keep every f32 product and sum exact.
    fn dyadic(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-64i32..=64) as f32 / 64.0).collect()
    }

    #[test]
    fn linear_conv_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = ConvParams::new(3, 2, 3, dyadic(54, &mut rng), Some(dyadic(3, &mut rng))).unwrap();
        let x = FeatureMap::from_vec(2, 4, 5, dyadic(40, &mut rng)).unwrap();
        let r = grad_check(
            |t, v| {
                let pv = t.param(&p);
                let y = t.conv(v[0], &pv)?;
                t.sum(y)
            },
            &[x.into_tensor()],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");

        // off the grid, f32 rounding of the outputs dominates but stays small
        let x = FeatureMap::random_uniform(2, 4, 5, -1.0, 1.0, &mut rng);
        let r = grad_check(
            |t, v| {
                let pv = t.param(&p);
                let y = t.conv(v[0], &pv)?;
                t.sum(y)
            },
            &[x.into_tensor()],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }

    #[test]
    fn softmax_sum_of_squares_33() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = FeatureMap::random_uniform(33, 1, 1, -1.0, 1.0, &mut rng);
        let mut mask = vec![true; 33];
        mask[5] = false;
        let r = grad_check(
            |t, v| {
                let y = t.softmax_masked(v[0], &mask)?;
                t.sum_squares(y)
            },
            &[x.into_tensor()],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let x = Tensor::new(vec![4], vec![0.3, -0.2, 0.9, 1.4]).unwrap();
        let r = grad_check(
            |t, v| {
                let d: Vec<f32> = t.value(v[0]).data.iter().map(|a| a * a).collect();
                let y = t.custom(
                    &[v[0]],
                    Tensor { shape: vec![4], data: d },
                    // true derivative is 2x
                    Box::new(|ins, _, g| {
                        vec![Tensor {
                            shape: vec![4],
                            data: ins[0].data.iter().zip(&g.data).map(|(x, g)| 3.0 * x * g).collect(),
                        }]
                    }),
                );
                t.sum(y)
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn epsilon_range_enforced() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, v| t.sum(v[0]), &[x.clone()], 0.5).is_err());
        assert!(grad_check(|t, v| t.sum(v[0]), &[x], 1e-3).is_ok());
    }
}
