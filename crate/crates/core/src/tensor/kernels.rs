// Plain row-major kernels shared by the forward and backward passes.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cij) in c_row.iter_mut().enumerate() {
            *cij += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        let a_row = &a[p * m..(p + 1) * m];
        for (i, &api) in a_row.iter().enumerate() {
            if api != 0.0 {
                axpy(api, b_row, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Row-wise softmax with max subtraction. Rows that are entirely `-inf`
/// cannot occur in this crate (every query sees at least itself).
pub fn softmax_rows_into(x: &[f64], out: &mut [f64], cols: usize) {
    for (xr, yr) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        let inv = 1.0 / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        let b = vec![1.0; 7];
        assert_eq!(dot(&a, &b), 21.0);
    }

    #[test]
    fn three_matmul_layouts_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        let bt = transpose(&b, 3, 2);
        let mut c2 = vec![0.0; 4];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        let at = transpose(&a, 2, 3);
        let mut c3 = vec![0.0; 4];
        matmul_tn_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c2);
        assert_eq!(c, c3);
        assert_eq!(c, vec![-1.0, 7.5, -1.0, 18.0]);
    }
}
