//! Raw buffer kernels shared by the tape ops.

/// `C = A·B + beta·C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == 0.0 { 0.0 } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserts above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Range of output columns `ox` whose input column `ox*stride + kx - pad` lies in `[0, w)`.
fn valid_span(wo: usize, w: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one `[cin, h, w]` image into `[cin*kh*kw, ho*wo]` columns.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    img: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_span(wo, w, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[ci * h * w + iy as usize * w..][..w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let x0 = lo * stride + kx - pad;
                    if stride == 1 {
                        line[lo..hi].copy_from_slice(&src[x0..x0 + (hi - lo)]);
                    } else {
                        for (v, s) in line[lo..hi].iter_mut().zip(src[x0..].iter().step_by(stride)) {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add(
    cols: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    img: &mut [f64],
) {
    let hw = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_span(wo, w, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut img[ci * h * w + iy as usize * w..][..w];
                    let line = &src[oy * wo + lo..oy * wo + hi];
                    let x0 = lo * stride + kx - pad;
                    if stride == 1 {
                        dst[x0..x0 + line.len()].iter_mut().zip(line).for_each(|(d, s)| *d += s);
                    } else {
                        for (d, s) in dst[x0..].iter_mut().step_by(stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}
