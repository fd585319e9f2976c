use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected adaptive-moment optimiser over a fixed, named list of
/// tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed updates.
    pub t: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[(String, usize)]) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            names: params.iter().map(|(n, _)| n.clone()).collect(),
            m: params.iter().map(|(_, n)| vec![0.0; *n]).collect(),
            v: params.iter().map(|(_, n)| vec![0.0; *n]).collect(),
        }
    }

    /// One update of `params` (same order as `names`) with `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>]) -> Result<()> {
        adam_step(params, grads, self)
    }
}

/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `θ ← θ − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
///
/// Every gradient is checked before any parameter moves, so a NaN leaves
/// the state untouched.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], st: &mut Adam) -> Result<()> {
    if params.len() != st.names.len() || grads.len() != st.names.len() {
        return Err(Error::Contract(format!(
            "optimiser holds {} tensors, got {} params and {} grads",
            st.names.len(),
            params.len(),
            grads.len()
        )));
    }
    for ((p, g), name) in params.iter().zip(grads).zip(&st.names) {
        if p.numel() != g.len() {
            return Err(Error::Dimension {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    st.t += 1;
    let t = st.t as i32;
    let c1 = 1.0 - st.beta1.powi(t);
    let c2 = 1.0 - st.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v, g) = (&mut st.m[i], &mut st.v[i], &grads[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
            v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= st.lr * mh / (vh.sqrt() + st.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(lr: f64, n: usize) -> Adam {
        Adam::new(lr, 0.9, 0.999, 1e-8, &[("x".into(), n)])
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut x = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let mut fresh = opt(0.1, 2);
        fresh.step(&mut [&mut x], &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(x.data(), &[1.0, -2.0]);

        let mut a = opt(0.1, 2);
        a.step(&mut [&mut x], &[vec![1.0, 3.0]]).unwrap();
        let (m0, v0) = (a.m[0].clone(), a.v[0].clone());
        a.step(&mut [&mut x], &[vec![0.0, 0.0]]).unwrap();
        for j in 0..2 {
            assert_eq!(a.m[0][j], 0.9 * m0[j]);
            assert_eq!(a.v[0][j], 0.999 * v0[j]);
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let mut x = Tensor::new(&[2], vec![0.5, 0.5]).unwrap();
        let mut a = opt(0.01, 2);
        a.step(&mut [&mut x], &[vec![2.0, -0.5]]).unwrap();
        let e0 = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        let e1 = 0.5 + 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((x.data()[0] - e0).abs() < 1e-15);
        assert!((x.data()[1] - e1).abs() < 1e-15);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut x = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut a = opt(0.1, 1);
        for _ in 0..200 {
            let g = vec![2.0 * x.data()[0]];
            a.step(&mut [&mut x], &[g]).unwrap();
        }
        let f = x.data()[0] * x.data()[0];
        assert!(f < 1e-3, "{f}");
    }

    #[test]
    fn nan_gradient_names_the_tensor() {
        let mut x = Tensor::new(&[1], vec![1.0]).unwrap();
        let mut a = opt(0.1, 1);
        match a.step(&mut [&mut x], &[vec![f64::NAN]]) {
            Err(Error::Numeric(msg)) => assert!(msg.contains('x')),
            other => panic!("{other:?}"),
        }
        assert_eq!(x.data()[0], 1.0);
        assert_eq!(a.t, 0);
    }
}
