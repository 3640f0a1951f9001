//! im2col/GEMM convolution kernels.
//!
//! Every routine is expressed in terms of one forward cross-correlation
//! geometry: `c_in x h x w` input, `c_out x c_in x k x k` weight, output
//! `c_out x oh x ow`. The transposed convolution reuses the same geometry
//! read backwards, which is what makes it the exact adjoint.
//!
//! Batch items are processed independently (optionally in parallel);
//! reductions over the batch run sequentially in item order so results do
//! not depend on the worker count.

use rayon::prelude::*;

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent of a cross-correlation, `None` if it would be empty.
    pub fn out_dim(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < k || stride == 0 {
            None
        } else {
            Some((padded - k) / stride + 1)
        }
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Rows of the unfolded patch matrix.
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Range of output columns whose tap `kj` lands inside `[0, len)`.
    fn valid_range(&self, tap: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if tap >= self.pad {
            0
        } else {
            (self.pad - tap).div_ceil(s)
        };
        let hi = if len + self.pad > tap {
            ((len + self.pad - tap).div_ceil(s)).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

/// Unfold one item `c_in x h x w` into `(c_in k k) x (oh ow)`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c_in {
        let plane = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.ow);
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if oy < oy_lo || oy >= oy_hi {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    if ox_lo == ox_hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let ix0 = ox_lo + kj - g.pad;
                        line[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            line[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `(c_in k k) x (oh ow)` back onto one item, accumulating.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.out_plane();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (oy_lo, oy_hi) = g.valid_range(ki, g.h, g.oh);
            for kj in 0..g.k {
                let (ox_lo, ox_hi) = g.valid_range(kj, g.w, g.ow);
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ki - g.pad;
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * g.stride + kj - g.pad] += line[ox];
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], channels: usize, plane: usize, batch: usize, db: &mut [T]) {
    for n in 0..batch {
        for c in 0..channels {
            let start = (n * channels + c) * plane;
            db[c] += dout[start..start + plane].iter().copied().sum::<T>();
        }
    }
}

/// Sum per-item buffers in item order into `acc`.
fn reduce_in_order<T: Real>(parts: Vec<Vec<T>>, acc: &mut [T]) {
    for part in parts {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
}

/// Cross-correlation forward. `x` holds `batch` items of `c_in x h x w`.
pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let out_len = g.c_out * g.out_plane();
    let in_len = g.c_in * g.in_plane();
    let mut out = vec![T::zero(); batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xn)| {
            if g.is_pointwise() {
                T::gemm(
                    g.c_out,
                    g.c_in,
                    g.out_plane(),
                    T::one(),
                    w,
                    false,
                    xn,
                    false,
                    T::zero(),
                    y,
                );
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                im2col(g, xn, &mut cols);
                T::gemm(
                    g.c_out,
                    g.patch_len(),
                    g.out_plane(),
                    T::one(),
                    w,
                    false,
                    &cols,
                    false,
                    T::zero(),
                    y,
                );
            }
            add_bias(y, b, g.out_plane());
        });
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of [`conv2d_forward`] given the output gradient.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_dx, need_dw, need_db] = need;
    let out_len = g.c_out * g.out_plane();
    let in_len = g.c_in * g.in_plane();
    let w_len = g.c_out * g.patch_len();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dy = &dout[n * out_len..(n + 1) * out_len];
            let pointwise = g.is_pointwise();
            let cols = if need_dw && !pointwise {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                im2col(g, xn, &mut cols);
                Some(cols)
            } else {
                None
            };
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); w_len];
                let patches = cols.as_deref().unwrap_or(xn);
                T::gemm(
                    g.c_out,
                    g.out_plane(),
                    g.patch_len(),
                    T::one(),
                    dy,
                    false,
                    patches,
                    true,
                    T::zero(),
                    &mut dw,
                );
                dw
            });
            let dx = need_dx.then(|| {
                if pointwise {
                    let mut dx = vec![T::zero(); in_len];
                    T::gemm(
                        g.c_in,
                        g.c_out,
                        g.out_plane(),
                        T::one(),
                        w,
                        true,
                        dy,
                        false,
                        T::zero(),
                        &mut dx,
                    );
                    dx
                } else {
                    let mut dcols = vec![T::zero(); g.patch_len() * g.out_plane()];
                    T::gemm(
                        g.patch_len(),
                        g.c_out,
                        g.out_plane(),
                        T::one(),
                        w,
                        true,
                        dy,
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    let mut dx = vec![T::zero(); in_len];
                    col2im(g, &dcols, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_len));
    let mut dw_parts = Vec::with_capacity(batch);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        if let Some(dw) = dw {
            dw_parts.push(dw);
        }
    }
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); w_len];
        reduce_in_order(dw_parts, &mut acc);
        acc
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_out];
        bias_grad(dout, g.c_out, g.out_plane(), batch, &mut db);
        db
    });
    ConvGrads { dx: dx_all, dw, db }
}

/// Transposed convolution: the adjoint of the conv described by `g`, mapping
/// `c_out x oh x ow` items back to `c_in x h x w`. The weight keeps the
/// conv layout `(c_out, c_in, k, k)`; `b` has `c_in` entries.
pub(crate) fn conv_transpose_forward<T: Real>(g: &ConvGeom, batch: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let in_len = g.c_out * g.out_plane();
    let out_len = g.c_in * g.in_plane();
    let mut out = vec![T::zero(); batch * out_len];
    out.par_chunks_mut(out_len)
        .zip(x.par_chunks(in_len))
        .for_each(|(y, xn)| {
            if g.is_pointwise() {
                T::gemm(
                    g.c_in,
                    g.c_out,
                    g.out_plane(),
                    T::one(),
                    w,
                    true,
                    xn,
                    false,
                    T::zero(),
                    y,
                );
            } else {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                T::gemm(
                    g.patch_len(),
                    g.c_out,
                    g.out_plane(),
                    T::one(),
                    w,
                    true,
                    xn,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im(g, &cols, y);
            }
            add_bias(y, b, g.in_plane());
        });
    out
}

pub(crate) fn conv_transpose_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    w: &[T],
    dout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let [need_dx, need_dw, need_db] = need;
    let in_len = g.c_out * g.out_plane();
    let out_len = g.c_in * g.in_plane();
    let w_len = g.c_out * g.patch_len();

    let per_item: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let dy = &dout[n * out_len..(n + 1) * out_len];
            let cols = if (need_dx || need_dw) && !g.is_pointwise() {
                let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
                im2col(g, dy, &mut cols);
                Some(cols)
            } else {
                None
            };
            let patches = cols.as_deref().unwrap_or(dy);
            let dx = need_dx.then(|| {
                let mut dx = vec![T::zero(); in_len];
                T::gemm(
                    g.c_out,
                    g.patch_len(),
                    g.out_plane(),
                    T::one(),
                    w,
                    false,
                    patches,
                    false,
                    T::zero(),
                    &mut dx,
                );
                dx
            });
            let dw = need_dw.then(|| {
                let mut dw = vec![T::zero(); w_len];
                T::gemm(
                    g.c_out,
                    g.out_plane(),
                    g.patch_len(),
                    T::one(),
                    xn,
                    false,
                    patches,
                    true,
                    T::zero(),
                    &mut dw,
                );
                dw
            });
            (dx, dw)
        })
        .collect();

    let mut dx_all = need_dx.then(|| Vec::with_capacity(batch * in_len));
    let mut dw_parts = Vec::with_capacity(batch);
    for (dx, dw) in per_item {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend(dx);
        }
        if let Some(dw) = dw {
            dw_parts.push(dw);
        }
    }
    let dw = need_dw.then(|| {
        let mut acc = vec![T::zero(); w_len];
        reduce_in_order(dw_parts, &mut acc);
        acc
    });
    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.c_in];
        bias_grad(dout, g.c_in, g.in_plane(), batch, &mut db);
        db
    });
    ConvGrads { dx: dx_all, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ci in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((co * g.c_in + ci) * g.k + ki) * g.k + kj];
                            }
                        }
                    }
                    out[(co * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_loops() {
        for &(k, stride, pad, h, w) in &[
            (3, 1, 1, 5, 7),
            (3, 2, 1, 8, 6),
            (1, 1, 0, 4, 4),
            (2, 2, 0, 4, 6),
            (3, 2, 0, 7, 7),
        ] {
            let oh = ConvGeom::out_dim(h, k, stride, pad).unwrap();
            let ow = ConvGeom::out_dim(w, k, stride, pad).unwrap();
            let g = ConvGeom {
                c_in: 2,
                h,
                w,
                c_out: 3,
                k,
                stride,
                pad,
                oh,
                ow,
            };
            let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let wt: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
            let got = conv2d_forward(&g, 1, &x, &wt, &[0.0; 3]);
            let want = naive_conv(&g, &x, &wt);
            assert_eq!(got, want, "k={k} s={stride} p={pad}");
        }
    }
}
