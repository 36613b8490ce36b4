//! Cross-correlation via im2col and a dense matrix product.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Rows are `(channel, ky, kx)` triples, columns are output positions.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return input.to_vec();
    }
    let n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * n];
    for c in 0..g.in_c {
        let plane = &input[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let n = g.out_len();
    let mut out = vec![0.0; g.in_c * g.in_h * g.in_w];
    for c in 0..g.in_c {
        let plane = &mut out[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, s) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c (m x n) += a (m x k) * b (k x n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
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
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given dimensions and strides; `c` is row-major m x n.
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[oc, p] = sum_r kernel[oc, r] * cols[r, p]
pub(crate) fn forward(kernel: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, k, n) = (g.out_c, g.patch_len(), g.out_len());
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, kernel, k, 1, cols, n, 1, &mut out);
    out
}

/// dkernel[oc, r] = sum_p dout[oc, p] * cols[r, p]
pub(crate) fn kernel_grad(grad_out: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, k, n) = (g.out_c, g.patch_len(), g.out_len());
    let mut dk = vec![0.0; m * k];
    gemm(m, n, k, grad_out, n, 1, cols, 1, n, &mut dk);
    dk
}

/// dcols[r, p] = sum_oc kernel[oc, r] * dout[oc, p]
pub(crate) fn cols_grad(kernel: &[f64], grad_out: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (m, k, n) = (g.out_c, g.patch_len(), g.out_len());
    let mut dcols = vec![0.0; k * n];
    gemm(k, m, n, kernel, 1, k, grad_out, n, 1, &mut dcols);
    dcols
}
