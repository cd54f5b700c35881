//! Register-blocked dense kernels for the small layers used here.
//!
//! Matrices are row-major. Fixed-width lane arrays let the compiler keep
//! accumulators in vector registers.

const L: usize = 8;

#[inline(always)]
fn fma_block<const C: usize>(x: &[f64], w: &[f64], n: usize, j: usize, z: &mut [f64]) {
    // Two interleaved accumulator sets halve the dependency chain length.
    let mut even = [[0.0f64; L]; C];
    let mut odd = [[0.0f64; L]; C];
    let pairs = x.len() / 2;
    for p in 0..pairs {
        let (i0, i1) = (2 * p, 2 * p + 1);
        let (x0, x1) = (x[i0], x[i1]);
        let r0 = &w[i0 * n + j..i0 * n + j + L * C];
        let r1 = &w[i1 * n + j..i1 * n + j + L * C];
        for c in 0..C {
            let s0: &[f64; L] = r0[c * L..c * L + L].try_into().expect("tile");
            let s1: &[f64; L] = r1[c * L..c * L + L].try_into().expect("tile");
            for l in 0..L {
                even[c][l] = x0.mul_add(s0[l], even[c][l]);
                odd[c][l] = x1.mul_add(s1[l], odd[c][l]);
            }
        }
    }
    if x.len() % 2 == 1 {
        let i = x.len() - 1;
        let r = &w[i * n + j..i * n + j + L * C];
        for c in 0..C {
            let s: &[f64; L] = r[c * L..c * L + L].try_into().expect("tile");
            for l in 0..L {
                even[c][l] = x[i].mul_add(s[l], even[c][l]);
            }
        }
    }
    for c in 0..C {
        for l in 0..L {
            z[j + c * L + l] += even[c][l] + odd[c][l];
        }
    }
}

/// `z[j] += sum_i x[i] * w[i * n + j]` for `j < n`.
#[inline]
pub(crate) fn gemv_acc(x: &[f64], w: &[f64], n: usize, z: &mut [f64]) {
    debug_assert!(w.len() >= x.len() * n && z.len() >= n);
    let mut j = 0;
    while j + 4 * L <= n {
        fma_block::<4>(x, w, n, j, z);
        j += 4 * L;
    }
    while j + 2 * L <= n {
        fma_block::<2>(x, w, n, j, z);
        j += 2 * L;
    }
    while j + L <= n {
        fma_block::<1>(x, w, n, j, z);
        j += L;
    }
    gemv_tail(x, w, n, j, z);
}

/// Columns `j0..n` of [`gemv_acc`] without vector blocking.
#[inline]
fn gemv_tail(x: &[f64], w: &[f64], n: usize, j0: usize, z: &mut [f64]) {
    for jj in j0..n {
        let mut acc = [0.0f64; L];
        let blocks = x.len() / L;
        for b in 0..blocks {
            for l in 0..L {
                let i = b * L + l;
                acc[l] = x[i].mul_add(w[i * n + jj], acc[l]);
            }
        }
        let mut tail = 0.0;
        for i in blocks * L..x.len() {
            tail = x[i].mul_add(w[i * n + jj], tail);
        }
        z[jj] += acc.iter().sum::<f64>() + tail;
    }
}

/// Transpose of a row-major `rows x cols` matrix.
pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// `sum_j a[j] * b[j]`.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let ca = a.chunks_exact(2 * L);
    let cb = b.chunks_exact(2 * L);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0f64; 2 * L];
    for (x, y) in ca.zip(cb) {
        let x: &[f64; 2 * L] = x.try_into().expect("exact chunk");
        let y: &[f64; 2 * L] = y.try_into().expect("exact chunk");
        for l in 0..2 * L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = 0.0;
    for l in 0..L {
        s += acc[l] + acc[l + L];
    }
    s + tail
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `g[i * n + j] += sum_k x[k * m + i] * d[k * n + j]`, i.e. `G += X^T D` for
/// `X: rows x m` and `D: rows x n`.
pub(crate) fn gemm_tn_acc(rows: usize, x: &[f64], m: usize, d: &[f64], n: usize, g: &mut [f64]) {
    debug_assert!(x.len() >= rows * m && d.len() >= rows * n && g.len() >= m * n);
    const MI: usize = 4;
    const NJ: usize = 2 * L;
    let mut i = 0;
    while i < m {
        let bi = if i + MI <= m { MI } else { 1 };
        let mut j = 0;
        while j + NJ <= n {
            if bi == MI {
                let mut acc = [[0.0f64; NJ]; MI];
                for k in 0..rows {
                    let dr: &[f64; NJ] = d[k * n + j..k * n + j + NJ].try_into().expect("tile");
                    let xr: &[f64; MI] = x[k * m + i..k * m + i + MI].try_into().expect("tile");
                    for r in 0..MI {
                        for l in 0..NJ {
                            acc[r][l] = xr[r].mul_add(dr[l], acc[r][l]);
                        }
                    }
                }
                for r in 0..MI {
                    let gr = &mut g[(i + r) * n + j..(i + r) * n + j + NJ];
                    for l in 0..NJ {
                        gr[l] += acc[r][l];
                    }
                }
            } else {
                let mut acc = [0.0f64; NJ];
                for k in 0..rows {
                    let dr: &[f64; NJ] = d[k * n + j..k * n + j + NJ].try_into().expect("tile");
                    let xv = x[k * m + i];
                    for l in 0..NJ {
                        acc[l] = xv.mul_add(dr[l], acc[l]);
                    }
                }
                let gr = &mut g[i * n + j..i * n + j + NJ];
                for l in 0..NJ {
                    gr[l] += acc[l];
                }
            }
            j += NJ;
        }
        for r in i..i + bi {
            for jj in j..n {
                let mut acc = 0.0;
                for k in 0..rows {
                    acc = x[k * m + r].mul_add(d[k * n + jj], acc);
                }
                g[r * n + jj] += acc;
            }
        }
        i += bi;
    }
}

/// `c[r * n + j] += sum_p a[r * k + p] * b[p * n + j]`, i.e. `C += A B` for
/// `A: rows x k`, `B: k x n`.
pub(crate) fn gemm_nn_acc(rows: usize, a: &[f64], k: usize, b: &[f64], n: usize, c: &mut [f64]) {
    debug_assert!(a.len() >= rows * k && b.len() >= k * n && c.len() >= rows * n);
    const RI: usize = 4;
    const NJ: usize = 2 * L;
    let mut r = 0;
    while r < rows {
        let br = if r + RI <= rows { RI } else { 1 };
        let mut j = 0;
        while j + NJ <= n {
            if br == RI {
                let mut acc = [[0.0f64; NJ]; RI];
                for p in 0..k {
                    let bp: &[f64; NJ] = b[p * n + j..p * n + j + NJ].try_into().expect("tile");
                    for (q, row) in acc.iter_mut().enumerate() {
                        let av = a[(r + q) * k + p];
                        for l in 0..NJ {
                            row[l] = av.mul_add(bp[l], row[l]);
                        }
                    }
                }
                for (q, row) in acc.iter().enumerate() {
                    let cr = &mut c[(r + q) * n + j..(r + q) * n + j + NJ];
                    for l in 0..NJ {
                        cr[l] += row[l];
                    }
                }
            } else {
                let mut acc = [0.0f64; NJ];
                for p in 0..k {
                    let bp: &[f64; NJ] = b[p * n + j..p * n + j + NJ].try_into().expect("tile");
                    let av = a[r * k + p];
                    for l in 0..NJ {
                        acc[l] = av.mul_add(bp[l], acc[l]);
                    }
                }
                let cr = &mut c[r * n + j..r * n + j + NJ];
                for l in 0..NJ {
                    cr[l] += acc[l];
                }
            }
            j += NJ;
        }
        if j < n {
            for q in r..r + br {
                gemv_tail(&a[q * k..(q + 1) * k], b, n, j, &mut c[q * n..(q + 1) * n]);
            }
        }
        r += br;
    }
}
