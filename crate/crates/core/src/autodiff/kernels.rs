//! Raw-slice kernels shared by the forward and backward passes.

use crate::tensor::numel;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mirror index into `0..n` without repeating the edge.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for (k, slot) in out.iter_mut().enumerate() {
        let da = if k + a.len() >= nd { a[k + a.len() - nd] } else { 1 };
        let db = if k + b.len() >= nd { b[k + b.len() - nd] } else { 1 };
        *slot = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` when read as a broadcast of itself to `out`.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut running = 1;
    for k in (0..shape.len()).rev() {
        if shape[k] != 1 {
            strides[k + offset] = running;
        }
        running *= shape[k];
    }
    strides
}

/// Visits every output index of a broadcast together with the matching
/// flat indices into operands of shape `sa` and `sb`.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if sa == out && sb == out {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    let ra = broadcast_strides(sa, out);
    let rb = broadcast_strides(sb, out);
    let nd = out.len();
    let last = out[nd - 1];
    let (la, lb) = (ra[nd - 1], rb[nd - 1]);
    let mut idx = vec![0usize; nd];
    let (mut o, mut ia, mut ib) = (0, 0, 0);
    loop {
        for j in 0..last {
            f(o + j, ia + j * la, ib + j * lb);
        }
        o += last;
        if o >= n {
            return;
        }
        let mut d = nd - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            ia += ra[d];
            ib += rb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= ra[d] * out[d];
            ib -= rb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `C = A B + beta C` for strided row/column layouts given as `(row, col)` strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    if k > 0 {
        assert!(a.len() >= span(m, k, rsa, csa));
        assert!(b.len() >= span(k, n, rsb, csb));
    }
    assert!(c.len() >= span(m, n, rsc, csc));
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is exclusively borrowed so it cannot alias `a` or `b`.
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

pub(crate) fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new([c, h, w]: [usize; 3], [kh, kw]: [usize; 2], stride: usize, pad: usize) -> Self {
        ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        }
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_pixels(&self) -> usize {
        self.h * self.w
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kj`, and the
    /// source column of `lo`.
    #[inline]
    fn col_span(&self, kj: usize) -> (usize, usize, usize) {
        // source column j = oj * stride + kj - pad must lie in [0, w)
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride).min(self.out_w);
        let hi = if self.w + self.pad > kj {
            ((self.w + self.pad - kj - 1) / self.stride + 1).min(self.out_w)
        } else {
            0
        };
        let hi = hi.max(lo);
        (lo, hi, (lo * self.stride + kj).saturating_sub(self.pad))
    }

    /// Source row of output row `oi` under kernel row `ki`, if inside the image.
    #[inline]
    fn src_row(&self, oi: usize, ki: usize) -> Option<usize> {
        (oi * self.stride + ki).checked_sub(self.pad).filter(|&i| i < self.h)
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let pix = self.out_pixels();
        let (ow, s) = (self.out_w, self.stride);
        for ci in 0..self.c {
            let plane = &img[ci * self.in_pixels()..(ci + 1) * self.in_pixels()];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * pix;
                    let (lo, hi, j0) = self.col_span(kj);
                    for oi in 0..self.out_h {
                        let dst = &mut cols[row + oi * ow..row + (oi + 1) * ow];
                        let Some(i) = self.src_row(oi, ki) else {
                            dst.fill(0.0);
                            continue;
                        };
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        let src = &plane[i * self.w..(i + 1) * self.w];
                        if s == 1 {
                            dst[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
                        } else {
                            for (k, d) in dst[lo..hi].iter_mut().enumerate() {
                                *d = src[j0 + k * s];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], img: &mut [f64]) {
        let pix = self.out_pixels();
        let (ow, s) = (self.out_w, self.stride);
        for ci in 0..self.c {
            let base = ci * self.in_pixels();
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((ci * self.kh + ki) * self.kw + kj) * pix;
                    let (lo, hi, j0) = self.col_span(kj);
                    for oi in 0..self.out_h {
                        let Some(i) = self.src_row(oi, ki) else { continue };
                        let src = &cols[row + oi * ow + lo..row + oi * ow + hi];
                        let dst = &mut img[base + i * self.w..base + (i + 1) * self.w];
                        if s == 1 {
                            dst[j0..j0 + hi - lo].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        } else {
                            for (k, v) in src.iter().enumerate() {
                                dst[j0 + k * s] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

/// Runs `f` with two reusable buffers of at least `a` and `b` elements.
/// Contents are unspecified; callers overwrite what they read.
fn with_scratch<R>(a: usize, b: usize, f: impl FnOnce(&mut [f64], &mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut bufs = cell.borrow_mut();
        let (x, y) = &mut *bufs;
        if x.len() < a {
            x.resize(a, 0.0);
        }
        if y.len() < b {
            y.resize(b, 0.0);
        }
        f(&mut x[..a], &mut y[..b])
    })
}

/// Channel-pair count at or below which convolutions skip im2col and
/// accumulate tap by tap. Small channel counts make the gemm panels
/// mostly padding, and the tap order gives exact sequential sums.
const DIRECT_CONV_MAX_PAIRS: usize = 8;

impl ConvGeom {
    fn use_direct(&self, out_ch: usize) -> bool {
        self.c * out_ch <= DIRECT_CONV_MAX_PAIRS
    }

    /// Calls `f(tap, src_row, out_row, lo, hi, j0)` for every kernel tap and
    /// every output row that reads a valid source row.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let tap = (ci * self.kh + ki) * self.kw + kj;
                    let (lo, hi, j0) = self.col_span(kj);
                    if lo == hi {
                        continue;
                    }
                    for oi in 0..self.out_h {
                        if let Some(i) = self.src_row(oi, ki) {
                            f(tap, ci * self.in_pixels() + i * self.w, oi * self.out_w, lo, hi, j0);
                        }
                    }
                }
            }
        }
    }
}

fn direct_forward(geom: &ConvGeom, out_ch: usize, x: &[f64], weight: &[f64], y: &mut [f64]) {
    let (pix, patch, s) = (geom.out_pixels(), geom.patch_len(), geom.stride);
    for o in 0..out_ch {
        let yo = &mut y[o * pix..(o + 1) * pix];
        let wo = &weight[o * patch..(o + 1) * patch];
        geom.for_each_tap(|tap, src, dst, lo, hi, j0| {
            let wv = wo[tap];
            let out = &mut yo[dst + lo..dst + hi];
            if s == 1 {
                let inp = &x[src + j0..src + j0 + (hi - lo)];
                out.iter_mut().zip(inp).for_each(|(d, v)| *d += wv * v);
            } else {
                for (k, d) in out.iter_mut().enumerate() {
                    *d += wv * x[src + j0 + k * s];
                }
            }
        });
    }
}

fn direct_backward(
    geom: &ConvGeom,
    out_ch: usize,
    x: &[f64],
    weight: &[f64],
    g: &[f64],
    mut gw: Option<&mut [f64]>,
    mut gx: Option<&mut [f64]>,
) {
    let (pix, patch, s) = (geom.out_pixels(), geom.patch_len(), geom.stride);
    for o in 0..out_ch {
        let go = &g[o * pix..(o + 1) * pix];
        let wo = &weight[o * patch..(o + 1) * patch];
        geom.for_each_tap(|tap, src, dst, lo, hi, j0| {
            let grow = &go[dst + lo..dst + hi];
            if let Some(gw) = gw.as_deref_mut() {
                let acc = &mut gw[o * patch + tap];
                if s == 1 {
                    let inp = &x[src + j0..src + j0 + (hi - lo)];
                    *acc += grow.iter().zip(inp).map(|(a, b)| a * b).sum::<f64>();
                } else {
                    *acc += grow.iter().enumerate().map(|(k, a)| a * x[src + j0 + k * s]).sum::<f64>();
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let wv = wo[tap];
                if s == 1 {
                    let dx = &mut gx[src + j0..src + j0 + (hi - lo)];
                    dx.iter_mut().zip(grow).for_each(|(d, v)| *d += wv * v);
                } else {
                    for (k, v) in grow.iter().enumerate() {
                        gx[src + j0 + k * s] += wv * v;
                    }
                }
            }
        });
    }
}

pub(crate) fn conv2d_forward(
    geom: &ConvGeom,
    batch: usize,
    out_ch: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let (pix, patch) = (geom.out_pixels(), geom.patch_len());
    let in_len = geom.c * geom.in_pixels();
    let direct = geom.use_direct(out_ch);
    let scratch = if geom.is_pointwise() || direct { 0 } else { patch * pix };
    with_scratch(scratch, 0, |cols, _| {
        for img in 0..batch {
            let x = &input[img * in_len..(img + 1) * in_len];
            let y = &mut out[img * out_ch * pix..(img + 1) * out_ch * pix];
            match bias {
                Some(b) => b.iter().enumerate().for_each(|(ch, &bv)| y[ch * pix..(ch + 1) * pix].fill(bv)),
                None => y.fill(0.0),
            }
            if direct {
                direct_forward(geom, out_ch, x, weight, y);
                continue;
            }
            let cols: &[f64] = if geom.is_pointwise() {
                x
            } else {
                geom.im2col(x, cols);
                cols
            };
            gemm(out_ch, patch, pix, weight, (patch, 1), cols, (pix, 1), y, (pix, 1), 1.0);
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    geom: &ConvGeom,
    batch: usize,
    out_ch: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_weight: Option<&mut [f64]>,
    mut grad_input: Option<&mut [f64]>,
) {
    let (pix, patch) = (geom.out_pixels(), geom.patch_len());
    let in_len = geom.c * geom.in_pixels();
    if geom.use_direct(out_ch) {
        for img in 0..batch {
            direct_backward(
                geom,
                out_ch,
                &input[img * in_len..(img + 1) * in_len],
                weight,
                &grad_out[img * out_ch * pix..(img + 1) * out_ch * pix],
                grad_weight.as_deref_mut(),
                grad_input.as_deref_mut().map(|gx| &mut gx[img * in_len..(img + 1) * in_len]),
            );
        }
        return;
    }
    let cols_len = if geom.is_pointwise() || grad_weight.is_none() { 0 } else { patch * pix };
    let gcols_len = if geom.is_pointwise() || grad_input.is_none() { 0 } else { patch * pix };
    with_scratch(cols_len, gcols_len, |cols, gcols| {
        for img in 0..batch {
            let x = &input[img * in_len..(img + 1) * in_len];
            let g = &grad_out[img * out_ch * pix..(img + 1) * out_ch * pix];
            if let Some(gw) = grad_weight.as_deref_mut() {
                let cols: &[f64] = if geom.is_pointwise() {
                    x
                } else {
                    geom.im2col(x, cols);
                    cols
                };
                gemm(out_ch, pix, patch, g, (pix, 1), cols, (1, pix), gw, (patch, 1), 1.0);
            }
            if let Some(gx) = grad_input.as_deref_mut() {
                let gx = &mut gx[img * in_len..(img + 1) * in_len];
                if geom.is_pointwise() {
                    gemm(patch, out_ch, pix, weight, (1, patch), g, (pix, 1), gx, (pix, 1), 1.0);
                } else {
                    gemm(patch, out_ch, pix, weight, (1, patch), g, (pix, 1), gcols, (pix, 1), 0.0);
                    geom.col2im_add(gcols, gx);
                }
            }
        }
    })
}
