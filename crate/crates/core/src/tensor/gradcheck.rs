use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Central-difference check of the recorded gradient of a scalar function
/// of one tensor. Returns the largest elementwise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |tape, vars| f(tape, vars[0]),
        std::slice::from_ref(x),
        epsilon,
    )
}

/// As [`finite_diff_check`], for a function of several inputs. Every input
/// is differentiated and perturbed.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("finite difference epsilon must be > 0".into()));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(&x.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        for i in 0..inputs[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + epsilon;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - epsilon;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[5], 1.0, &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let x = Tensor::zeros(&[2]);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 0.0).is_err());
    }
}
