use super::matrix::Matrix;
use super::params::{Gradients, ParameterSet};
use crate::error::Result;

/// Denominator floor for coordinates whose true gradient is near zero.
const RELATIVE_FLOOR: f64 = 1e-3;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-3)`.
pub fn max_relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

impl GradientCheck {
    /// Perturbs every coordinate of every parameter by `±h` and compares the
    /// central difference of `loss` with the gradients returned by `analytic`.
    pub fn run(
        params: &ParameterSet<f64>,
        h: f64,
        loss: impl Fn(&ParameterSet<f64>) -> Result<f64>,
        analytic: impl Fn(&ParameterSet<f64>) -> Result<Gradients<f64>>,
    ) -> Result<GradientCheck> {
        let grads = analytic(params)?;
        let mut worst = 0.0f64;
        let mut coordinates = 0;
        let mut probe = params.clone();
        for idx in 0..params.len() {
            let shape = params.value(idx).shape();
            let dense: Matrix<f64> = grads.dense(idx, shape);
            for k in 0..shape.0 * shape.1 {
                let original = params.value(idx).as_slice()[k];
                probe.value_mut(idx).as_mut_slice()[k] = original + h;
                let up = loss(&probe)?;
                probe.value_mut(idx).as_mut_slice()[k] = original - h;
                let down = loss(&probe)?;
                probe.value_mut(idx).as_mut_slice()[k] = original;
                let numeric = (up - down) / (2.0 * h);
                worst = worst.max(max_relative_error(dense.as_slice()[k], numeric));
                coordinates += 1;
            }
        }
        Ok(GradientCheck {
            max_relative_error: worst,
            coordinates,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Tape;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Exercises every recorded kernel in one composition.
    fn composite(params: &ParameterSet<f64>) -> Result<(Tape<f64>, crate::numerics::Var)> {
        let mut t = Tape::new();
        let table = t.param(params, 0);
        let w = t.param(params, 1);
        let gain = t.param(params, 2);
        let bias = t.param(params, 3);
        let row = t.param(params, 4);
        let x = t.gather(table, &[2, 0, 2, 1])?;
        let x = t.add_constant(x, &Matrix::from_fn(4, 3, |r, c| 0.1 * (r + c) as f64))?;
        let q = t.matmul(x, w)?;
        let scores = t.matmul_transposed(q, x)?;
        let scores = t.scale(scores, 0.7)?;
        let attn = t.softmax_rows(scores)?;
        let mixed = t.matmul(attn, x)?;
        let both = t.concat_cols(&[mixed, q])?;
        let both = t.add_row(both, row)?;
        let left = t.row_slice(both, 1, 2)?;
        let wide = t.relu(left)?;
        let proj = t.param(params, 5);
        let narrow = t.matmul(wide, proj)?;
        let normed = t.layer_norm(narrow, gain, bias, 1e-5)?;
        let resid = t.add(normed, narrow)?;
        let first = t.row_slice(resid, 0, 1)?;
        let ce = t.cross_entropy(first, 1)?;
        let total = t.sum(resid)?;
        let total = t.scale(total, 0.05)?;
        let loss = t.add(ce, total)?;
        Ok((t, loss))
    }

    #[test]
    fn every_kernel_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParameterSet::new();
        params.insert("table", random(&mut rng, 3, 3)).unwrap();
        params.insert("w", random(&mut rng, 3, 3)).unwrap();
        params.insert("gain", random(&mut rng, 1, 3)).unwrap();
        params.insert("bias", random(&mut rng, 1, 3)).unwrap();
        params.insert("row", random(&mut rng, 1, 6)).unwrap();
        params.insert("proj", random(&mut rng, 6, 3)).unwrap();

        let check = GradientCheck::run(
            &params,
            1e-3,
            |p| {
                let (t, loss) = composite(p)?;
                Ok(t.value(loss).get(0, 0))
            },
            |p| {
                let (t, loss) = composite(p)?;
                t.gradients(loss)
            },
        )
        .unwrap();
        assert_eq!(check.coordinates, 9 + 9 + 3 + 3 + 6 + 18);
        assert!(check.max_relative_error <= 1e-3, "{check:?}");
    }
}
