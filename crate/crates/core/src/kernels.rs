//! Raw numeric kernels shared by the autodiff ops.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the callers.

/// Layout of a matrix operand for [`gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as given (rows × cols, row-major).
    Normal,
    /// Stored transposed: the slice holds cols × rows row-major.
    Transposed,
}

/// `c = beta * c + a · b` where `a` is m×k and `b` is k×n after applying
/// their layouts. `beta` must be 0 or 1.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_layout: Layout,
    b: &[f64],
    b_layout: Layout,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = match a_layout {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match b_layout {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: the debug assertions above are the layout contract; every
    // caller passes slices sized exactly m·k, k·n and m·n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds a `B×H×W×C` tensor into a `(B·H·W) × (9·C)` patch matrix for a
/// 3×3 cross-correlation with wrap-around padding. Column order is
/// `(ky, kx, c)`, matching a `3×3×C×D` weight viewed as `(9C) × D`.
pub(crate) fn im2col_circular(input: &[f64], b: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * h * w * 9 * c);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ky in 0..3 {
                    let sy = (y + h + ky - 1) % h;
                    for kx in 0..3 {
                        let sx = (x + w + kx - 1) % w;
                        let src = ((n * h + sy) * w + sx) * c;
                        out.extend_from_slice(&input[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_circular`]: scatters patch gradients back onto the
/// input positions they were gathered from, accumulating into `grad`.
pub(crate) fn col2im_circular(cols: &[f64], b: usize, h: usize, w: usize, c: usize, grad: &mut [f64]) {
    let width = 9 * c;
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                let row = ((n * h + y) * w + x) * width;
                for ky in 0..3 {
                    let sy = (y + h + ky - 1) % h;
                    for kx in 0..3 {
                        let sx = (x + w + kx - 1) % w;
                        let dst = ((n * h + sy) * w + sx) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for (g, v) in grad[dst..dst + c].iter_mut().zip(&cols[src..src + c]) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn gemm_layouts_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, la, bb, lb, &mut c, 0.0);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (b, h, w, c) = (2, 3, 4, 2);
        let x: Vec<f64> = (0..b * h * w * c).map(|i| (i as f64).sin()).collect();
        let cols = im2col_circular(&x, b, h, w, c);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(p, q)| p * q).sum();
        let mut back = vec![0.0; x.len()];
        col2im_circular(&y, b, h, w, c, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
