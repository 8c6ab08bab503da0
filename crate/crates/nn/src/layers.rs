//! Batched forward/backward kernels. Activations are `[batch, ...item]`
//! row-major buffers; convolutions run as im2col + GEMM per batch item.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            plane[iy as usize * g.in_w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * g.out_len()];
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let hw = g.col_cols();
    for n in 0..batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut col);
        let y = &mut out[n * g.out_len()..(n + 1) * g.out_len()];
        T::gemm(g.out_c, g.col_rows(), hw, weight, false, &col, false, y, false);
        for (c, &b) in bias.iter().enumerate() {
            y[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
    }
    out
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeom,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); batch * g.in_len()];
    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
    let mut dcol = vec![T::zero(); g.col_rows() * g.col_cols()];
    let hw = g.col_cols();
    for n in 0..batch {
        im2col(&x[n * g.in_len()..(n + 1) * g.in_len()], g, &mut col);
        let dyn_ = &dy[n * g.out_len()..(n + 1) * g.out_len()];
        T::gemm(g.out_c, hw, g.col_rows(), dyn_, false, &col, true, dweight, true);
        for (c, db) in dbias.iter_mut().enumerate() {
            *db += dyn_[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
        }
        T::gemm(g.col_rows(), g.out_c, hw, weight, true, dyn_, false, &mut dcol, false);
        col2im(&dcol, g, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
    }
    dx
}

pub(crate) fn dense_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    inputs: usize,
    units: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * units];
    T::gemm(batch, inputs, units, x, false, weight, true, &mut y, false);
    for row in y.chunks_mut(units) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    inputs: usize,
    units: usize,
    weight: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
) -> Vec<T> {
    T::gemm(units, batch, inputs, dy, true, x, false, dweight, true);
    for row in dy.chunks(units) {
        for (db, &g) in dbias.iter_mut().zip(row) {
            *db += g;
        }
    }
    let mut dx = vec![T::zero(); batch * inputs];
    T::gemm(batch, units, inputs, dy, false, weight, false, &mut dx, false);
    dx
}

pub(crate) fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

pub(crate) fn relu_backward<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

/// Returns pooled values and, per output, the flat input index of the max.
pub(crate) fn max_pool_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    shape: [usize; 3],
    size: usize,
) -> (Vec<T>, Vec<usize>) {
    let [c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for n in 0..batch {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let i = base + (oy * size + dy) * w + ox * size + dx;
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<T: Scalar>(dy: &[T], arg: &[usize], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

pub(crate) fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(width) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - m).exp()));
        let s: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / s);
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(y: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(width).zip(dy.chunks(width)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    dx
}

/// Per-channel spatial mean.
pub(crate) fn global_avg_pool_forward<T: Scalar>(x: &[T], plane: usize) -> Vec<T> {
    let scale = T::from_f64(1.0 / plane as f64);
    x.chunks(plane).map(|c| c.iter().copied().sum::<T>() * scale).collect()
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(dy: &[T], plane: usize) -> Vec<T> {
    let scale = T::from_f64(1.0 / plane as f64);
    dy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, plane)).collect()
}
