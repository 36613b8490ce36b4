//! Separable bilinear interpolation with half-pixel-center alignment.
//!
//! Output sample `i` maps to source coordinate `(i + 0.5) * in / out - 0.5`,
//! clamped to `[0, in - 1]`. Each axis blends its two neighbours as
//! `a + t * (b - a)`, which keeps constant maps exactly constant.

#[derive(Debug, Clone, PartialEq)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f64>,
}

impl AxisPlan {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut t = Vec::with_capacity(dst);
        for i in 0..dst {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            t.push(pos - i0 as f64);
        }
        AxisPlan { lo, hi, t }
    }
}

/// Precomputed interpolation tables for one `(in_h, in_w) -> (out_h, out_w)` resize.
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub(crate) in_h: usize,
    pub(crate) in_w: usize,
    pub(crate) out_h: usize,
    pub(crate) out_w: usize,
    rows: AxisPlan,
    cols: AxisPlan,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            rows: AxisPlan::new(in_h, out_h),
            cols: AxisPlan::new(in_w, out_w),
        }
    }

    /// Resizes `channels` stacked planes.
    pub fn forward(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut tmp = vec![0.0; channels * ih * ow];
        for c in 0..channels {
            for y in 0..ih {
                let src = &input[(c * ih + y) * iw..(c * ih + y + 1) * iw];
                let dst = &mut tmp[(c * ih + y) * ow..(c * ih + y + 1) * ow];
                for (x, d) in dst.iter_mut().enumerate() {
                    let a = src[self.cols.lo[x]];
                    let b = src[self.cols.hi[x]];
                    *d = a + self.cols.t[x] * (b - a);
                }
            }
        }
        let mut out = vec![0.0; channels * oh * ow];
        for c in 0..channels {
            for y in 0..oh {
                let t = self.rows.t[y];
                let r0 = (c * ih + self.rows.lo[y]) * ow;
                let r1 = (c * ih + self.rows.hi[y]) * ow;
                let dst = &mut out[(c * oh + y) * ow..(c * oh + y + 1) * ow];
                for (x, d) in dst.iter_mut().enumerate() {
                    let a = tmp[r0 + x];
                    let b = tmp[r1 + x];
                    *d = a + t * (b - a);
                }
            }
        }
        out
    }

    /// Vector-Jacobian product of [`ResizePlan::forward`].
    pub fn backward(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut tmp = vec![0.0; channels * ih * ow];
        for c in 0..channels {
            for y in 0..oh {
                let t = self.rows.t[y];
                let r0 = (c * ih + self.rows.lo[y]) * ow;
                let r1 = (c * ih + self.rows.hi[y]) * ow;
                let g = &grad_out[(c * oh + y) * ow..(c * oh + y + 1) * ow];
                for (x, gv) in g.iter().enumerate() {
                    tmp[r0 + x] += (1.0 - t) * gv;
                    tmp[r1 + x] += t * gv;
                }
            }
        }
        let mut grad_in = vec![0.0; channels * ih * iw];
        for c in 0..channels {
            for y in 0..ih {
                let g = &tmp[(c * ih + y) * ow..(c * ih + y + 1) * ow];
                let dst = &mut grad_in[(c * ih + y) * iw..(c * ih + y + 1) * iw];
                for (x, gv) in g.iter().enumerate() {
                    let t = self.cols.t[x];
                    dst[self.cols.lo[x]] += (1.0 - t) * gv;
                    dst[self.cols.hi[x]] += t * gv;
                }
            }
        }
        grad_in
    }
}
