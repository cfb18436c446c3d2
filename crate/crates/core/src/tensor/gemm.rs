use super::Element;

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major.
///
/// Every output element accumulates its `k` products in increasing `k`
/// order onto its initial value, so results do not depend on the tiling.
pub(crate) fn gemm_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        unsafe { gemm_avx2(m, k, n, a, b, c) };
        return;
    }
    gemm_kernel(m, k, n, a, b, c);
}

/// Same kernel compiled with wider vectors. Multiplies and adds stay
/// separate instructions, so results are bit-identical to the portable path.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_kernel(m, k, n, a, b, c);
}

#[inline(always)]
fn gemm_kernel<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    const MR: usize = 4;
    const NR: usize = 8;
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (m_main, n_main) = (m - m % MR, n - n % NR);
    for i in (0..m_main).step_by(MR) {
        let arows: [&[T]; MR] = std::array::from_fn(|ii| &a[(i + ii) * k..(i + ii + 1) * k]);
        for j in (0..n_main).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for (ii, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i + ii) * n + j..(i + ii) * n + j + NR]);
            }
            for r in 0..k {
                let bv: &[T; NR] = b[r * n + j..r * n + j + NR].try_into().unwrap();
                for ii in 0..MR {
                    let av = arows[ii][r];
                    for jj in 0..NR {
                        acc[ii][jj] += av * bv[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                c[(i + ii) * n + j..(i + ii) * n + j + NR].copy_from_slice(row);
            }
        }
    }
    // ragged right edge and bottom rows
    for i in 0..m {
        let j0 = if i < m_main { n_main } else { 0 };
        for j in j0..n {
            let mut acc = c[i * n + j];
            for r in 0..k {
                acc += a[i * k + r] * b[r * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

pub(crate) fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_triple_loop() {
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 7), (9, 17, 300), (4, 2, 513)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 31 % 17) as f64 - 8.0) / 3.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64 - 5.0) / 7.0).collect();
            let mut c = vec![0.5; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.5;
                    for r in 0..k {
                        acc += a[i * k + r] * b[r * n + j];
                    }
                    assert_eq!(c[i * n + j], acc);
                }
            }
        }
    }
}
