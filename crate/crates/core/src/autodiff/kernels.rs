//! Numeric kernels shared by the forward and backward passes.

/// `C = A B + beta C` where `A` is `m x k`, `B` is `k x n` and `C` is a
/// row-major `m x n` buffer. Strides are `(row, col)` in elements, so
/// transposed operands cost nothing.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax over the whole slice.
pub(crate) fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Option<Self> {
        if x.len() != 3 || w.len() != 4 || w[2] != x[2] || stride == 0 {
            return None;
        }
        let (h, wd, cin) = (x[0], x[1], x[2]);
        let (kh, kw, cout) = (w[0], w[1], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return None;
        }
        Some(Self {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input offset of `(out_row, out_col, k_row, k_col)`, or `None` in padding.
    #[inline]
    fn source(&self, oi: usize, oj: usize, ki: usize, kj: usize) -> Option<usize> {
        let r = (oi * self.stride + ki).checked_sub(self.pad)?;
        let c = (oj * self.stride + kj).checked_sub(self.pad)?;
        (r < self.h && c < self.w).then(|| (r * self.w + c) * self.cin)
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let mut cols = vec![0.0; g.out_positions() * k];
    for oi in 0..g.ho {
        for oj in 0..g.wo {
            let row = &mut cols[(oi * g.wo + oj) * k..][..k];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    if let Some(src) = g.source(oi, oj, ki, kj) {
                        let dst = (ki * g.kw + kj) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let k = g.patch_len();
    let mut x = vec![0.0; g.h * g.w * g.cin];
    for oi in 0..g.ho {
        for oj in 0..g.wo {
            let row = &cols[(oi * g.wo + oj) * k..][..k];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    if let Some(src) = g.source(oi, oj, ki, kj) {
                        let off = (ki * g.kw + kj) * g.cin;
                        for (d, v) in x[src..src + g.cin].iter_mut().zip(&row[off..off + g.cin]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Interpolation corners for one coordinate along an axis of extent `n`,
/// after clamping to `[0, n - 1]`: `(lo, hi, frac, clamped)`.
#[inline]
fn axis_cell(v: f64, n: usize) -> (usize, usize, f64, bool) {
    let max = (n - 1) as f64;
    let clamped = !(0.0..=max).contains(&v);
    let y = v.clamp(0.0, max);
    let lo = (y.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, y - lo as f64, clamped)
}

pub(crate) fn bilinear_forward(map: &[f64], shape: &[usize], points: &[f64]) -> Vec<f64> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let k = points.len() / 2;
    let mut out = vec![0.0; k * c];
    for p in 0..k {
        let (y0, y1, wy, _) = axis_cell(points[2 * p], h);
        let (x0, x1, wx, _) = axis_cell(points[2 * p + 1], w);
        let (a, b, cc, d) = (
            (1.0 - wy) * (1.0 - wx),
            (1.0 - wy) * wx,
            wy * (1.0 - wx),
            wy * wx,
        );
        let m00 = &map[(y0 * w + x0) * c..][..c];
        let m01 = &map[(y0 * w + x1) * c..][..c];
        let m10 = &map[(y1 * w + x0) * c..][..c];
        let m11 = &map[(y1 * w + x1) * c..][..c];
        for (ch, o) in out[p * c..(p + 1) * c].iter_mut().enumerate() {
            *o = a * m00[ch] + b * m01[ch] + cc * m10[ch] + d * m11[ch];
        }
    }
    out
}

/// Returns `(d map, d points)`. The coordinate gradient is zero along an
/// axis whose coordinate was clamped.
pub(crate) fn bilinear_backward(
    map: &[f64],
    shape: &[usize],
    points: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let k = points.len() / 2;
    let mut dmap = vec![0.0; map.len()];
    let mut dpts = vec![0.0; points.len()];
    for p in 0..k {
        let (y0, y1, wy, cy) = axis_cell(points[2 * p], h);
        let (x0, x1, wx, cx) = axis_cell(points[2 * p + 1], w);
        let weights = [
            (y0, x0, (1.0 - wy) * (1.0 - wx)),
            (y0, x1, (1.0 - wy) * wx),
            (y1, x0, wy * (1.0 - wx)),
            (y1, x1, wy * wx),
        ];
        let gp = &g[p * c..(p + 1) * c];
        for &(yy, xx, wt) in &weights {
            let base = (yy * w + xx) * c;
            for ch in 0..c {
                dmap[base + ch] += wt * gp[ch];
            }
        }
        let m = |yy: usize, xx: usize, ch: usize| map[(yy * w + xx) * c + ch];
        let (mut dy, mut dx) = (0.0, 0.0);
        for (ch, &gc) in gp.iter().enumerate() {
            dy += gc
                * ((1.0 - wx) * (m(y1, x0, ch) - m(y0, x0, ch))
                    + wx * (m(y1, x1, ch) - m(y0, x1, ch)));
            dx += gc
                * ((1.0 - wy) * (m(y0, x1, ch) - m(y0, x0, ch))
                    + wy * (m(y1, x1, ch) - m(y1, x0, ch)));
        }
        dpts[2 * p] = if cy { 0.0 } else { dy };
        dpts[2 * p + 1] = if cx { 0.0 } else { dx };
    }
    (dmap, dpts)
}
