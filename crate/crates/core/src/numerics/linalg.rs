//! Dense f32 kernels. Loop orders are fixed so results are bit-identical run
//! to run; inner loops are written to autovectorize on a single core.

/// C = A·B with A [m×k], B [k×n], C [m×n], all row-major.
pub fn matmul(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(0.0);
    matmul_acc(a, b, c, m, k, n);
}

/// C += A·B. Four-row blocking keeps each B row in registers for four
/// accumulator rows; the j-loop vectorizes.
pub fn matmul_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (a0, a1, a2, a3) = (&a[i * k..], &a[(i + 1) * k..], &a[(i + 2) * k..], &a[(i + 3) * k..]);
        // split_at_mut to get four disjoint C rows
        let (c01, c23) = c[i * n..(i + 4) * n].split_at_mut(2 * n);
        let (c0, c1) = c01.split_at_mut(n);
        let (c2, c3) = c23.split_at_mut(n);
        for p in 0..k {
            let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = br[j];
                c0[j] = bv.mul_add(x0, c0[j]);
                c1[j] = bv.mul_add(x1, c1[j]);
                c2[j] = bv.mul_add(x2, c2[j]);
                c3[j] = bv.mul_add(x3, c3[j]);
            }
        }
        i += 4;
    }
    while i < m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ar[p];
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] = br[j].mul_add(x, cr[j]);
            }
        }
        i += 1;
    }
}

/// C = A·Bᵀ with A [m×k], B [n×k], C [m×n]. Rows of both operands are
/// contiguous, so each entry is a dot product over k.
pub fn matmul_bt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            cr[j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C += Aᵀ·B with A [m×k], B [m×n], C [k×n]. Used for weight gradients.
pub fn matmul_at_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let x = ar[p];
            let cr = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                cr[j] = br[j].mul_add(x, cr[j]);
            }
        }
    }
}

/// Dot product with a fixed 8-lane reassociation (deterministic, vectorizes).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let ar = &a[c * 8..c * 8 + 8];
        let br = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = ar[l].mul_add(br[l], acc[l]);
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let s0 = (acc[0] + acc[4]) + (acc[1] + acc[5]);
    let s1 = (acc[2] + acc[6]) + (acc[3] + acc[7]);
    (s0 + s1) + tail
}

/// y += x * alpha
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi = xi.mul_add(alpha, *yi);
    }
}

use crate::numerics::tensor::Tensor;

fn d2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    debug_assert_eq!(s.len(), 2);
    (s[0], s[1])
}

/// Tensor form of A·B.
pub fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = d2(a);
    let (k2, n) = d2(b);
    debug_assert_eq!(k, k2);
    let mut c = Tensor::zeros(&[m, n]);
    matmul_acc(a.data(), b.data(), c.data_mut(), m, k, n);
    c
}

/// Tensor form of A·Bᵀ with B stored [n×k].
pub fn mm_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = d2(a);
    let (n, k2) = d2(b);
    debug_assert_eq!(k, k2);
    let mut c = Tensor::zeros(&[m, n]);
    matmul_bt(a.data(), b.data(), c.data_mut(), m, k, n);
    c
}

/// Tensor form of C += Aᵀ·B with A [m×k], B [m×n], C [k×n].
pub fn mm_at_acc(c: &mut Tensor, a: &Tensor, b: &Tensor) {
    let (m, k) = d2(a);
    let (m2, n) = d2(b);
    debug_assert_eq!(m, m2);
    debug_assert_eq!(c.shape(), [k, n]);
    matmul_at_acc(a.data(), b.data(), c.data_mut(), m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, next_uniform};

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += f64::from(a[i * k + p]) * f64::from(b[p * n + j]);
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    fn randvec(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = stream(seed, "linalg");
        (0..len).map(|_| next_uniform(&mut rng, -1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive_oracle() {
        for (m, k, n) in [(1, 1, 1), (3, 4, 5), (7, 13, 9), (16, 32, 8), (5, 64, 257)] {
            let a = randvec(m * k, 11 + m as u64);
            let b = randvec(k * n, 23 + n as u64);
            let mut c = vec![0.0f32; m * n];
            matmul(&a, &b, &mut c, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(want.iter()) {
                assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn matmul_bt_and_at_match_transposed_naive() {
        let (m, k, n) = (6, 19, 11);
        let a = randvec(m * k, 5);
        let b = randvec(n * k, 6);
        let mut c = vec![0.0f32; m * n];
        matmul_bt(&a, &b, &mut c, m, k, n);
        // oracle: transpose b then naive
        let mut bt = vec![0.0f32; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        let want = naive(&a, &bt, m, k, n);
        for (x, y) in c.iter().zip(want.iter()) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }

        let b2 = randvec(m * n, 7);
        let mut c2 = vec![0.0f32; k * n];
        matmul_at_acc(&a, &b2, &mut c2, m, k, n);
        let mut at = vec![0.0f32; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want2 = naive(&at, &b2, k, m, n);
        for (x, y) in c2.iter().zip(want2.iter()) {
            assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn identity_matmul() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0f32; 4];
        matmul(&eye, &x, &mut c, 2, 2, 2);
        assert_eq!(c, x);
    }

    #[test]
    #[ignore = "manual throughput probe"]
    fn throughput_probe() {
        let (m, k, n) = (278, 256, 256);
        let a = randvec(m * k, 1);
        let b = randvec(k * n, 2);
        let mut c = vec![0.0f32; m * n];
        let reps = 200;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            matmul(&a, &b, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        eprintln!("matmul {m}x{k}x{n}: {gflops:.2} GFLOP/s");
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            matmul_bt(&a, &b, &mut c, m, k, n);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        eprintln!("matmul_bt {m}x{k}x{n}: {gflops:.2} GFLOP/s");
    }
}
