//! Raw numeric kernels behind the differentiable operations.
//!
//! All kernels work on flat row-major slices and take their extents
//! explicitly. Loop orders are fixed so results are bit-reproducible.

use crate::tensor::{gemm, Element, Mat};

/// Target number of columns per batched GEMM in the convolution kernels.
const CONV_COLUMNS: usize = 2048;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    /// Number of independent images (`N * T`).
    pub images: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn chunk(&self) -> usize {
        (CONV_COLUMNS / self.plane()).clamp(1, self.images.max(1))
    }
}

/// Valid output columns `[lo, hi)` for horizontal tap `kx`, and the source
/// offset added to an output column.
fn tap_span(w: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx);
    let hi = (w + pad).saturating_sub(kx).min(w);
    (lo, hi.max(lo))
}

/// Unfold `nb` images starting at `b0` into a `[c_in*k*k, nb*H*W]` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, b0: usize, nb: usize, col: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = g.plane();
    let cols = nb * plane;
    let pad = k / 2;
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = tap_span(w, kx, pad);
                for b in 0..nb {
                    let src = &x[((b0 + b) * g.c_in + ci) * plane..][..plane];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for y in 0..h {
                        let drow = &mut dst[y * w..(y + 1) * w];
                        let sy = (y + ky).wrapping_sub(pad);
                        if sy >= h {
                            drow.fill(T::zero());
                            continue;
                        }
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let s0 = sy * w + lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx`.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, b0: usize, nb: usize, dx: &mut [T]) {
    let (h, w, k) = (g.height, g.width, g.kernel);
    let plane = g.plane();
    let cols = nb * plane;
    let pad = k / 2;
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = tap_span(w, kx, pad);
                for b in 0..nb {
                    let dst = &mut dx[((b0 + b) * g.c_in + ci) * plane..][..plane];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for y in 0..h {
                        let sy = (y + ky).wrapping_sub(pad);
                        if sy >= h {
                            continue;
                        }
                        let d0 = sy * w + lo + kx - pad;
                        let drow = &mut dst[d0..d0 + hi - lo];
                        for (d, s) in drow.iter_mut().zip(&src[y * w + lo..y * w + hi]) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Gather `nb` images of `channels` planes into `[channels, nb*plane]`.
fn pack<T: Element>(x: &[T], channels: usize, plane: usize, b0: usize, nb: usize, out: &mut [T]) {
    let cols = nb * plane;
    for b in 0..nb {
        for c in 0..channels {
            out[c * cols + b * plane..][..plane]
                .copy_from_slice(&x[((b0 + b) * channels + c) * plane..][..plane]);
        }
    }
}

fn unpack_add<T: Element>(buf: &[T], channels: usize, plane: usize, b0: usize, nb: usize, out: &mut [T]) {
    let cols = nb * plane;
    for b in 0..nb {
        for c in 0..channels {
            let dst = &mut out[((b0 + b) * channels + c) * plane..][..plane];
            for (d, s) in dst.iter_mut().zip(&buf[c * cols + b * plane..][..plane]) {
                *d += *s;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let plane = g.plane();
    let mut out = vec![T::zero(); g.images * g.c_out * plane];
    let chunk = g.chunk();
    let mut col = vec![T::zero(); g.patch() * chunk * plane];
    let mut buf = vec![T::zero(); g.c_out * chunk * plane];
    let w = Mat::new(weight, g.c_out, g.patch());
    let mut b0 = 0;
    while b0 < g.images {
        let nb = chunk.min(g.images - b0);
        let cols = nb * plane;
        let col = &mut col[..g.patch() * cols];
        if g.kernel == 1 {
            pack(x, g.c_in, plane, b0, nb, col);
        } else {
            im2col(x, g, b0, nb, col);
        }
        let buf = &mut buf[..g.c_out * cols];
        gemm(w, Mat::new(col, g.patch(), cols), buf, false);
        unpack_add(buf, g.c_out, plane, b0, nb, &mut out);
        b0 += nb;
    }
    if let Some(bias) = bias {
        for img in out.chunks_mut(g.c_out * plane) {
            for (co, p) in img.chunks_mut(plane).enumerate() {
                let b = bias[co];
                p.iter_mut().for_each(|v| *v += b);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let plane = g.plane();
    let chunk = g.chunk();
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); weight.len()]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        for img in dy.chunks(g.c_out * plane) {
            for (co, p) in img.chunks(plane).enumerate() {
                db[co] += p.iter().copied().sum::<T>();
            }
        }
        db
    });
    if need_x || need_w {
        let w = Mat::new(weight, g.c_out, g.patch());
        let mut col = vec![T::zero(); g.patch() * chunk * plane];
        let mut dyc = vec![T::zero(); g.c_out * chunk * plane];
        let mut b0 = 0;
        while b0 < g.images {
            let nb = chunk.min(g.images - b0);
            let cols = nb * plane;
            let dyc = &mut dyc[..g.c_out * cols];
            pack(dy, g.c_out, plane, b0, nb, dyc);
            let col = &mut col[..g.patch() * cols];
            if let Some(dw) = dw.as_mut() {
                if g.kernel == 1 {
                    pack(x, g.c_in, plane, b0, nb, col);
                } else {
                    im2col(x, g, b0, nb, col);
                }
                gemm(Mat::new(dyc, g.c_out, cols), Mat::new(col, g.patch(), cols).t(), dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                gemm(w.t(), Mat::new(dyc, g.c_out, cols), col, false);
                if g.kernel == 1 {
                    unpack_add(col, g.c_in, plane, b0, nb, dx);
                } else {
                    col2im(col, g, b0, nb, dx);
                }
            }
            b0 += nb;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Extents `[N, T, C, H*W]` of a video tensor flattened over space.
#[derive(Clone, Copy, Debug)]
pub(crate) struct VideoGeom {
    pub n: usize,
    pub t: usize,
    pub c: usize,
    pub plane: usize,
}

impl VideoGeom {
    #[inline]
    fn base(&self, n: usize, t: usize, c: usize) -> usize {
        ((n * self.t + t) * self.c + c) * self.plane
    }
}

/// `out[n,t,c] = sum_j k[c,j] * x[n,t+j-1,c]`, zero outside `[0, T)`.
pub(crate) fn temporal_depthwise_forward<T: Element>(x: &[T], k: &[T], g: &VideoGeom) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for n in 0..g.n {
        for t in 0..g.t {
            for c in 0..g.c {
                let dst = g.base(n, t, c);
                let taps = [k[c * 3], k[c * 3 + 1], k[c * 3 + 2]];
                let prev = (t > 0).then(|| g.base(n, t - 1, c));
                let cur = g.base(n, t, c);
                let next = (t + 1 < g.t).then(|| g.base(n, t + 1, c));
                for p in 0..g.plane {
                    let mut acc = T::zero();
                    if let Some(s) = prev {
                        acc += taps[0] * x[s + p];
                    }
                    acc += taps[1] * x[cur + p];
                    if let Some(s) = next {
                        acc += taps[2] * x[s + p];
                    }
                    out[dst + p] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_depthwise_backward<T: Element>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &VideoGeom,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = need_k.then(|| vec![T::zero(); k.len()]);
    for n in 0..g.n {
        for t in 0..g.t {
            for c in 0..g.c {
                let out = g.base(n, t, c);
                for j in 0..3 {
                    let s = t as isize + j as isize - 1;
                    if s < 0 || s >= g.t as isize {
                        continue;
                    }
                    let src = g.base(n, s as usize, c);
                    if let Some(dk) = dk.as_mut() {
                        let mut acc = T::zero();
                        for p in 0..g.plane {
                            acc += dy[out + p] * x[src + p];
                        }
                        dk[c * 3 + j] += acc;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let tap = k[c * 3 + j];
                        for p in 0..g.plane {
                            dx[src + p] += tap * dy[out + p];
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// Tap `j` of a `[C_out, C_in, 3]` temporal kernel as a contiguous matrix.
fn temporal_tap<T: Element>(w: &[T], c_out: usize, c_in: usize, j: usize) -> Vec<T> {
    (0..c_out * c_in).map(|i| w[i * 3 + j]).collect()
}

/// Channel-mixing temporal convolution with a `[C_out, C_in, 3]` kernel.
pub(crate) fn temporal_full_forward<T: Element>(x: &[T], w: &[T], g: &VideoGeom, c_out: usize) -> Vec<T> {
    let taps: Vec<Vec<T>> = (0..3).map(|j| temporal_tap(w, c_out, g.c, j)).collect();
    let mut out = vec![T::zero(); g.n * g.t * c_out * g.plane];
    let in_frame = g.c * g.plane;
    let out_frame = c_out * g.plane;
    for n in 0..g.n {
        for t in 0..g.t {
            let dst = &mut out[(n * g.t + t) * out_frame..][..out_frame];
            for (j, tap) in taps.iter().enumerate() {
                let s = t as isize + j as isize - 1;
                if s < 0 || s >= g.t as isize {
                    continue;
                }
                let src = &x[(n * g.t + s as usize) * in_frame..][..in_frame];
                gemm(Mat::new(tap, c_out, g.c), Mat::new(src, g.c, g.plane), dst, true);
            }
        }
    }
    out
}

pub(crate) fn temporal_full_backward<T: Element>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &VideoGeom,
    c_out: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let taps: Vec<Vec<T>> = (0..3).map(|j| temporal_tap(w, c_out, g.c, j)).collect();
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dtaps = vec![vec![T::zero(); c_out * g.c]; 3];
    let in_frame = g.c * g.plane;
    let out_frame = c_out * g.plane;
    for n in 0..g.n {
        for t in 0..g.t {
            let d = &dy[(n * g.t + t) * out_frame..][..out_frame];
            for j in 0..3 {
                let s = t as isize + j as isize - 1;
                if s < 0 || s >= g.t as isize {
                    continue;
                }
                let off = (n * g.t + s as usize) * in_frame;
                if need_w {
                    let src = &x[off..off + in_frame];
                    gemm(Mat::new(d, c_out, g.plane), Mat::new(src, g.c, g.plane).t(), &mut dtaps[j], true);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        Mat::new(&taps[j], c_out, g.c).t(),
                        Mat::new(d, c_out, g.plane),
                        &mut dx[off..off + in_frame],
                        true,
                    );
                }
            }
        }
    }
    let dw = need_w.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        for (j, tap) in dtaps.iter().enumerate() {
            for (i, v) in tap.iter().enumerate() {
                dw[i * 3 + j] = *v;
            }
        }
        dw
    });
    (dx, dw)
}

/// Spatial average pooling with a square window of `factor` and equal stride.
pub(crate) fn avg_pool2d_forward<T: Element>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::one() / T::of((factor * factor) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += src[(oy * factor + dy) * w + ox * factor + dx];
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2d_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h / factor, w / factor);
    let scale = T::one() / T::of((factor * factor) as f64);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                dx[p * h * w + y * w + x] = dy[p * oh * ow + (y / factor) * ow + x / factor] * scale;
            }
        }
    }
    dx
}

/// Per-channel batch statistics over `(N, T, H, W)`: (mean, biased variance).
pub(crate) fn channel_stats<T: Element>(x: &[T], g: &VideoGeom) -> (Vec<T>, Vec<T>) {
    let count = T::of((g.n * g.t * g.plane) as f64);
    let mut mean = vec![T::zero(); g.c];
    for n in 0..g.n {
        for t in 0..g.t {
            for (c, m) in mean.iter_mut().enumerate() {
                let b = g.base(n, t, c);
                *m += x[b..b + g.plane].iter().copied().sum::<T>();
            }
        }
    }
    mean.iter_mut().for_each(|m| *m = *m / count);
    let mut var = vec![T::zero(); g.c];
    for n in 0..g.n {
        for t in 0..g.t {
            for c in 0..g.c {
                let b = g.base(n, t, c);
                let m = mean[c];
                var[c] += x[b..b + g.plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
        }
    }
    var.iter_mut().for_each(|v| *v = *v / count);
    (mean, var)
}
