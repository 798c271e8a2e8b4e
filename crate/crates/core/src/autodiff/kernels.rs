//! Dense numeric kernels shared by the tape operations.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `a` is logically `m × k` and `b` is `k × n`; the transpose flags say the
/// slice holds the transposed storage instead.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches
    // for the given extents and strides; `c` does not alias `a` or `b`.
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

/// Unfold one `c × h × w` image into a `(c·k·k) × (ho·wo)` patch matrix.
pub(crate) fn im2col(img: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let src = &img[ch * h * w + (y + ky) * w + kx..];
                    dst[y * wo..(y + 1) * wo].copy_from_slice(&src[..wo]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, img: &mut [f64]) {
    let (ho, wo) = (h - k + 1, w - k + 1);
    let plane = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for y in 0..ho {
                    let dst = &mut img[ch * h * w + (y + ky) * w + kx..];
                    for (d, s) in dst[..wo].iter_mut().zip(&src[y * wo..(y + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
