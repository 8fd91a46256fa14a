//! Central finite-difference gradient checking, f64 only.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of one gradient check: max relative error per input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares analytic gradients of a scalar-valued tensor function against
/// central finite differences.
///
/// `f` must be deterministic. Every input is treated as a gradient leaf; a
/// leaf the loss does not reach checks against an all-zero gradient. For
/// large inputs at most `max_coords` coordinates per tensor are probed,
/// spread evenly over the buffer.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::Contract("grad_check function must return a scalar".into()));
        }
        Ok(tape.value(loss).item())
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let mut per_input = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|c| c * n / max_coords).collect()
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic[i][c];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
        per_input.push(worst);
    }
    Ok(GradCheckReport { per_input })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Xoshiro256;

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        // dyadic values and a power-of-two step keep every FD evaluation
        // exactly representable, so the linear function checks to error 0
        let x = Tensor::from_f64_slice(&[4], &[0.5, 1.25, -0.75, 2.0]).unwrap();
        let report = grad_check(|tape, vars| Ok(tape.sum(vars[0])), &[x], 0.25, 64).unwrap();
        assert_eq!(report.max_rel_err(), 0.0);
    }

    #[test]
    fn softmax_dot_fixed_vector() {
        let mut rng = Xoshiro256::seed_from_u64(21);
        let x = Tensor::<f64>::fill_normal(&[6], &mut rng);
        let w = Tensor::<f64>::fill_normal(&[6], &mut rng);
        let report = grad_check(
            |tape, vars| {
                let probs = tape.masked_softmax(vars[0], None)?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(probs, wv)?;
                Ok(tape.sum(prod))
            },
            &[x],
            1e-5,
            64,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "err {}", report.max_rel_err());
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = Xoshiro256::seed_from_u64(33);
        let x = Tensor::<f64>::fill_normal(&[2, 3], &mut rng);
        let w1 = Tensor::<f64>::fill_normal(&[3, 4], &mut rng);
        let b1 = Tensor::<f64>::fill_normal(&[4], &mut rng);
        let w2 = Tensor::<f64>::fill_normal(&[4, 1], &mut rng);
        // 3*4 + 4 + 4*1 = 20 parameters
        let report = grad_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let h = tape.matmul(xv, vars[0])?;
                let h = tape.add(h, vars[1])?;
                let h = tape.gelu(h);
                let out = tape.matmul(h, vars[2])?;
                let sq = tape.mul(out, out)?;
                Ok(tape.mean(sq))
            },
            &[w1, b1, w2],
            1e-5,
            64,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "err {}", report.max_rel_err());
    }

    #[test]
    fn unused_leaf_checks_as_zero() {
        let x = Tensor::from_f64_slice(&[2], &[1.0, 2.0]).unwrap();
        let y = Tensor::from_f64_slice(&[2], &[3.0, 4.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                let _ = vars[1];
                Ok(tape.sum(sq))
            },
            &[x, y],
            1e-5,
            64,
        )
        .unwrap();
        assert!(report.per_input[1] < 1e-6);
    }
}
