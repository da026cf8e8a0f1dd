//! Raw numeric kernels shared by the tape and by analysis code.
//!
//! All kernels are sequential and allocation-free over caller-provided
//! buffers, so results are bitwise identical regardless of thread count.

/// `out += op(a) * op(b)` where `op` optionally transposes. `a` is `ar x ac`
/// and `b` is `br x bc` as stored; the caller guarantees the contracted
/// dimensions agree and `out` has the product shape.
pub fn gemm_acc(
    out: &mut [f64],
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
) {
    let (n, k) = if ta { (ac, ar) } else { (ar, ac) };
    let m = if tb { br } else { bc };
    debug_assert_eq!(if tb { bc } else { br }, k);
    debug_assert_eq!(out.len(), n * m);

    match (ta, tb) {
        (false, false) => {
            // C[i,j] += sum_p A[i,p] B[p,j]; row-of-B streaming vectorizes well.
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut out[i * m..(i + 1) * m];
                for (p, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let brow = &b[p * m..(p + 1) * m];
                        for (c, &bv) in crow.iter_mut().zip(brow) {
                            *c += av * bv;
                        }
                    }
                }
            }
        }
        (false, true) => {
            // C[i,j] += dot(A[i,:], B[j,:])
            for i in 0..n {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut out[i * m..(i + 1) * m];
                for (j, c) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc += av * bv;
                    }
                    *c += acc;
                }
            }
        }
        (true, false) => {
            // C[i,j] += sum_p A[p,i] B[p,j]; rank-1 updates over rows of A/B.
            for p in 0..k {
                let arow = &a[p * n..(p + 1) * n];
                let brow = &b[p * m..(p + 1) * m];
                for (i, &av) in arow.iter().enumerate() {
                    if av != 0.0 {
                        let crow = &mut out[i * m..(i + 1) * m];
                        for (c, &bv) in crow.iter_mut().zip(brow) {
                            *c += av * bv;
                        }
                    }
                }
            }
        }
        (true, true) => {
            // Rare: C = A^T B^T  <=>  C[i,j] = dot(A[:,i], B[j,:]).
            for i in 0..n {
                let crow = &mut out[i * m..(i + 1) * m];
                for (j, c) in crow.iter_mut().enumerate() {
                    let brow = &b[j * bc..(j + 1) * bc];
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * n + i] * brow[p];
                    }
                    *c += acc;
                }
            }
        }
    }
}

/// Numerically stable softmax of one slice, in place: subtracts the max,
/// exponentiates, normalizes to sum 1.
pub fn softmax_slice(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// log(sum(exp(xs))) with max-subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Mean and population variance of a slice.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gemm_naive(a: &[f64], n: usize, k: usize, b: &[f64], m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = a[i * cols + j];
            }
        }
        out
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.25 - 1.0).collect(); // 3x4
        let expect = gemm_naive(&a, 2, 3, &b, 4);
        let at = transposed(&a, 2, 3); // 3x2
        let bt = transposed(&b, 3, 4); // 4x3

        for (lhs, ta, rhs, tb) in [
            (&a, false, &b, false),
            (&at, true, &b, false),
            (&a, false, &bt, true),
            (&at, true, &bt, true),
        ] {
            let (ar, ac) = if ta { (3, 2) } else { (2, 3) };
            let (br, bc) = if tb { (4, 3) } else { (3, 4) };
            let mut c = vec![0.0; 8];
            gemm_acc(&mut c, lhs, ar, ac, ta, rhs, br, bc, tb);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = vec![1.0, -2.0, 400.0, 3.5];
        softmax_slice(&mut xs);
        let sum: f64 = xs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(xs.iter().all(|&x| x.is_finite()));
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert!(gelu(0.0).abs() < 1e-15);
        // large positive ~ identity, large negative ~ 0
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
        // derivative by finite differences
        for &x in &[-2.0, -0.3, 0.0, 0.7, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_deriv(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
