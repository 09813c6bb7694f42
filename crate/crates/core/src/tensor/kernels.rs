//! Forward and backward kernels over raw row-major slices.

use super::Real;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[Cin, H, W]` sample into `[Cin·kH·kW, H'·W']` columns.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        dst[oy * g.wo + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            img[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        img[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let k = g.patch();
    let p = g.out_plane();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_sample];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..g.n {
        let img = &input[b * in_sample..(b + 1) * in_sample];
        let cols_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let dst = &mut out[b * out_sample..(b + 1) * out_sample];
        for (c, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[c]);
        }
        T::gemm(g.cout, k, p, weight, k as isize, 1, cols_ref, p as isize, 1, T::one(), dst);
    }
    out
}

/// Returns `(d_input, d_weight, d_bias)`; `d_input` is empty when not requested.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    d_out: &[T],
    want_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = g.patch();
    let p = g.out_plane();
    let in_sample = g.cin * g.h * g.w;
    let out_sample = g.cout * p;
    let mut d_input = if want_input { vec![T::zero(); g.n * in_sample] } else { Vec::new() };
    let mut d_weight = vec![T::zero(); g.cout * k];
    let mut d_bias = vec![T::zero(); g.cout];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut d_cols = vec![T::zero(); k * p];
    for b in 0..g.n {
        let img = &input[b * in_sample..(b + 1) * in_sample];
        let dy = &d_out[b * out_sample..(b + 1) * out_sample];
        for (c, row) in dy.chunks(p).enumerate() {
            d_bias[c] += row.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        // dW += dY · colsᵀ
        T::gemm(g.cout, p, k, dy, p as isize, 1, cols_ref, 1, p as isize, T::one(), &mut d_weight);
        if want_input {
            let dst = &mut d_input[b * in_sample..(b + 1) * in_sample];
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, weight, 1, k as isize, dy, p as isize, 1, T::one(), dst);
            } else {
                // dcols = Wᵀ · dY
                T::gemm(k, g.cout, p, weight, 1, k as isize, dy, p as isize, 1, T::zero(), &mut d_cols);
                col2im(g, &d_cols, dst);
            }
        }
    }
    (d_input, d_weight, d_bias)
}

/// Max pooling over `[N·C]` planes; returns values and the flat input index of each max.
pub(crate) fn maxpool_forward<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = base + (oy * stride) * w + ox * stride;
                let mut best = input[best_idx];
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        // strict comparison keeps the first maximum in row-major order
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (out, argmax)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `ln Σ exp(row)`, stabilized.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// `out[N, Dout] = x[N, Din] · wᵀ + bias`.
pub(crate) fn linear_forward<T: Real>(x: &[T], w: &[T], bias: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * dout);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    T::gemm(n, din, dout, x, din as isize, 1, w, 1, din as isize, T::one(), &mut out);
    out
}

pub(crate) fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    want_input: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = Vec::new();
    if want_input {
        dx = vec![T::zero(); n * din];
        T::gemm(n, dout, din, dy, dout as isize, 1, w, din as isize, 1, T::zero(), &mut dx);
    }
    let mut dw = vec![T::zero(); dout * din];
    T::gemm(dout, n, din, dy, 1, dout as isize, x, din as isize, 1, T::zero(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for row in dy.chunks(dout) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (dx, dw, db)
}
