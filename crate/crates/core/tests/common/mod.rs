//! Brute-force reference implementations shared by the integration tests.
//! None of these touch the tape or the gemm path.
#![allow(dead_code)]

use rand::Rng;
use sgn_core::Tensor64;

pub fn rand_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor64 {
    Tensor64::uniform(shape, -1.0, 1.0, rng)
}

/// `c[i][j] = sum_l a[i][l] b[l][j]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Explicit sliding window over `x: [T, C_in]` with zero padding.
pub fn naive_conv1d(x: &[f64], t: usize, c_in: usize, kernel: &[f64], c_out: usize, ks: usize) -> Vec<f64> {
    let pad = (ks as isize - 1) / 2;
    let mut y = vec![0.0; t * c_out];
    for ti in 0..t as isize {
        for o in 0..c_out {
            let mut s = 0.0;
            for c in 0..c_in {
                for j in 0..ks as isize {
                    let src = ti + j - pad;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    s += kernel[(o * c_in + c) * ks + j as usize] * x[src as usize * c_in + c];
                }
            }
            y[ti as usize * c_out + o] = s;
        }
    }
    y
}

/// Scan along `axis`, returning values and first-wins argmax.
pub fn naive_max_axis(x: &Tensor64, axis: usize) -> (Vec<f64>, Vec<usize>) {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut vals = Vec::new();
    let mut idx = Vec::new();
    for o in 0..outer {
        for i in 0..inner {
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0;
            for j in 0..len {
                let v = x.data()[(o * len + j) * inner + i];
                if v > best {
                    best = v;
                    bi = j;
                }
            }
            vals.push(best);
            idx.push(bi);
        }
    }
    (vals, idx)
}

pub fn naive_mean_axis(x: &Tensor64, axis: usize) -> Vec<f64> {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            for j in 0..len {
                out[o * inner + i] += x.data()[(o * len + j) * inner + i];
            }
            out[o * inner + i] /= len as f64;
        }
    }
    out
}

/// `S(i, j) = theta(z_i) . phi(z_j)`, row softmax, for one frame `z: [J, d]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_adjacency(
    z: &[f64],
    joints: usize,
    d: usize,
    w_theta: &[f64],
    b_theta: &[f64],
    w_phi: &[f64],
    b_phi: &[f64],
    c2: usize,
) -> Vec<f64> {
    let fc = |w: &[f64], b: &[f64], row: &[f64]| -> Vec<f64> {
        (0..c2)
            .map(|o| b[o] + (0..d).map(|i| w[o * d + i] * row[i]).sum::<f64>())
            .collect()
    };
    let th: Vec<Vec<f64>> = (0..joints).map(|j| fc(w_theta, b_theta, &z[j * d..(j + 1) * d])).collect();
    let ph: Vec<Vec<f64>> = (0..joints).map(|j| fc(w_phi, b_phi, &z[j * d..(j + 1) * d])).collect();
    let mut g = vec![0.0; joints * joints];
    for i in 0..joints {
        let s: Vec<f64> = (0..joints)
            .map(|j| th[i].iter().zip(&ph[j]).map(|(a, b)| a * b).sum())
            .collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
        let tot: f64 = e.iter().sum();
        for j in 0..joints {
            g[i * joints + j] = e[j] / tot;
        }
    }
    g
}

/// Central difference of a scalar function of one flat vector.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + eps;
            let up = f(&work);
            work[i] = orig - eps;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `relu(W x + b)` for `W: [d_out, d_in]` stored row-major.
pub fn naive_dense_relu(x: &[f64], w: &[f64], b: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|o| (b[o] + (0..d_in).map(|i| w[o * d_in + i] * x[i]).sum::<f64>()).max(0.0))
        .collect()
}

/// Reorders axis `axis` of a row-major tensor so that output slot `k` holds
/// input slot `perm[k]`.
pub fn permute_axis(x: &Tensor64, axis: usize, perm: &[usize]) -> Tensor64 {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    assert_eq!(perm.len(), len);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for (k, &src) in perm.iter().enumerate() {
            let d = (o * len + k) * inner;
            let s = (o * len + src) * inner;
            out[d..d + inner].copy_from_slice(&x.data()[s..s + inner]);
        }
    }
    Tensor64::new(shape.to_vec(), out).unwrap()
}

pub fn random_perm<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}
