//! Raw forward/backward kernels over row-major slices.

use super::{Scalar, Tensor, TensorError};

/// Output extent of a convolution along one axis.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn in_image(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Pointwise convolution reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` is inside
/// the image.
fn valid_columns(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx { (g.pad - kx).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kx { ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &image[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (slot, &v) in line[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *slot = v;
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_columns(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let line = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let dst = &mut image[base + first..base + g.w];
                    if g.stride == 1 {
                        for (d, &v) in dst.iter_mut().zip(line) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(g.stride).zip(line) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.o * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * plane]
    };
    for n in 0..g.n {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let dst = &mut out[n * g.o * plane..(n + 1) * g.o * plane];
        for (o, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias[o]);
        }
        let b: &[T] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        T::gemm(g.o, g.patch(), plane, weight, false, b, false, T::one(), dst);
    }
    out
}

pub(crate) struct ConvGrads<'a, T> {
    pub input: Option<&'a mut [T]>,
    pub weight: Option<&'a mut [T]>,
    pub bias: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    dout: &[T],
    mut grads: ConvGrads<'_, T>,
) {
    let plane = g.out_plane();
    let patch = g.patch();
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise || grads.weight.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let mut dcols = if grads.input.is_some() && !pointwise {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.n {
        let dy = &dout[n * g.o * plane..(n + 1) * g.o * plane];
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        if let Some(db) = grads.bias.as_deref_mut() {
            for (o, row) in dy.chunks(plane).enumerate() {
                db[o] = row.iter().fold(db[o], |acc, &v| acc + v);
            }
        }
        if let Some(dw) = grads.weight.as_deref_mut() {
            let b: &[T] = if pointwise {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            T::gemm(g.o, plane, patch, dy, false, b, true, T::one(), dw);
        }
        if let Some(dx) = grads.input.as_deref_mut() {
            let dst = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            if pointwise {
                T::gemm(patch, g.o, plane, weight, true, dy, false, T::one(), dst);
            } else {
                T::gemm(patch, g.o, plane, weight, true, dy, false, T::zero(), &mut dcols);
                col2im_add(g, &dcols, dst);
            }
        }
    }
}

/// 3×3 max filter, stride 1, out-of-bounds neighbours treated as −∞.
///
/// Returns the filtered values and, per output cell, the flat input index of the
/// maximum. Ties resolve to the lowest row-major index in the window.
pub(crate) fn max_pool3x3_raw<T: Scalar>(shape: &[usize], data: &[T]) -> (Vec<T>, Vec<usize>) {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); data.len()];
    let mut arg = vec![0usize; data.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for x in 0..w {
                let mut best = base + y * w + x;
                let mut best_v = T::neg_infinity();
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let idx = base + yy * w + xx;
                        if data[idx] > best_v {
                            best_v = data[idx];
                            best = idx;
                        }
                    }
                }
                out[base + y * w + x] = best_v;
                arg[base + y * w + x] = best;
            }
        }
    }
    (out, arg)
}

/// Non-differentiable 3×3 max filter over an NCHW tensor; see [`Tape::max_pool3x3`](super::Tape::max_pool3x3).
pub fn max_pool3x3<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
    if input.shape().len() != 4 {
        return Err(super::shape_err("max_pool3x3", "rank", format!("expected NCHW, got {:?}", input.shape())));
    }
    let (v, arg) = max_pool3x3_raw(input.shape(), input.data());
    Ok((Tensor::new(input.shape().to_vec(), v)?, arg))
}

pub(crate) fn upsample2x_raw<T: Scalar>(shape: &[usize], data: &[T]) -> Vec<T> {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let mut out = vec![T::zero(); planes * 4 * h * w];
    for p in 0..planes {
        for y in 0..2 * h {
            for x in 0..2 * w {
                out[(p * 2 * h + y) * 2 * w + x] = data[(p * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(shape: &[usize], dout: &[T], dx: &mut [T]) {
    let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    for p in 0..planes {
        for y in 0..2 * h {
            for x in 0..2 * w {
                let i = (p * h + y / 2) * w + x / 2;
                dx[i] = dx[i] + dout[(p * 2 * h + y) * 2 * w + x];
            }
        }
    }
}

pub(crate) fn channel_softmax_raw<T: Scalar>(shape: &[usize], data: &[T]) -> Vec<T> {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[base + ch * plane + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                total = total + e;
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                out[i] = out[i] / total;
            }
        }
    }
    out
}

pub(crate) fn channel_softmax_backward<T: Scalar>(shape: &[usize], y: &[T], dout: &[T], dx: &mut [T]) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot = dot + dout[i] * y[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                dx[i] = dx[i] + y[i] * (dout[i] - dot);
            }
        }
    }
}
