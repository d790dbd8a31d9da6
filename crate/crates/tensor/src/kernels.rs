//! Raw forward/backward kernels over flat NCHW buffers.

use crate::scalar::{MatMut, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    #[cfg(test)]
    fn cols_len(&self) -> usize {
        self.col_rows() * self.positions()
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

impl ConvGeom {
    /// Output rows per tile, sized so one tile's columns stay cache-resident.
    fn tile_rows(&self) -> usize {
        const TILE_ELEMS: usize = 1 << 17;
        (TILE_ELEMS / (self.col_rows() * self.out_w).max(1)).clamp(1, self.out_h)
    }
}

/// Output columns `lo..hi` whose input column `ox*stride + kx - pad` is in range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(g.out_w);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold output rows `oy0..oy1` of one `in_c x h x w` image into a
/// `(in_c*k*k) x ((oy1-oy0)*out_w)` matrix.
pub(crate) fn im2col_rows<T: Real>(img: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let p = (oy1 - oy0) * g.out_w;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[(oy - oy0) * g.out_w..(oy - oy0 + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::ZERO);
                    out_row[hi..].fill(T::ZERO);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o = src[start + j * g.stride];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col_rows`]: scatter-add columns back into an image gradient.
pub(crate) fn col2im_rows<T: Real>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, img: &mut [T]) {
    let p = (oy1 - oy0) * g.out_w;
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let (lo, hi) = valid_cols(g, kx);
                let src = &cols[row * p..(row + 1) * p];
                for oy in oy0..oy1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[(oy - oy0) * g.out_w + lo..(oy - oy0) * g.out_w + hi];
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        let d = &mut dst[start..start + srow.len()];
                        d.iter_mut().zip(srow).for_each(|(d, &v)| *d += v);
                    } else {
                        for (j, &v) in srow.iter().enumerate() {
                            dst[start + j * g.stride] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn row_tiles(g: &ConvGeom) -> impl Iterator<Item = (usize, usize)> {
    let step = g.tile_rows();
    let oh = g.out_h;
    (0..oh).step_by(step).map(move |a| (a, (a + step).min(oh)))
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let img_len = g.in_c * g.h * g.w;
    let p = g.positions();
    let out_len = g.out_c * p;
    let kr = g.col_rows();
    let mut out = vec![T::ZERO; g.batch * out_len];
    let mut cols = vec![T::ZERO; kr * g.tile_rows() * g.out_w];
    for n in 0..g.batch {
        let img = &x[n * img_len..(n + 1) * img_len];
        let o = &mut out[n * out_len..(n + 1) * out_len];
        for (f, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(bias[f]);
        }
        for (oy0, oy1) in row_tiles(g) {
            let pt = (oy1 - oy0) * g.out_w;
            im2col_rows(img, g, oy0, oy1, &mut cols);
            T::gemm_view(
                g.out_c,
                pt,
                kr,
                T::ONE,
                MatRef::new(weight, kr, 1),
                MatRef::new(&cols[..kr * pt], pt, 1),
                T::ONE,
                MatMut::new(&mut o[oy0 * g.out_w..], p, 1),
            );
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// The unfolded input is recomputed tile by tile rather than stored by the
/// forward pass.
pub(crate) fn conv2d_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_w, need_b) = need;
    let img_len = g.in_c * g.h * g.w;
    let p = g.positions();
    let out_len = g.out_c * p;
    let kr = g.col_rows();

    let mut dx = need_x.then(|| vec![T::ZERO; g.batch * img_len]);
    let mut dw = need_w.then(|| vec![T::ZERO; weight.len()]);
    let mut db = need_b.then(|| vec![T::ZERO; g.out_c]);
    let mut cols = vec![T::ZERO; kr * g.tile_rows() * g.out_w];

    for n in 0..g.batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (f, chunk) in go.chunks(p).enumerate() {
                db[f] += chunk.iter().copied().sum::<T>();
            }
        }
        if !(need_x || need_w) {
            continue;
        }
        let img = &x[n * img_len..(n + 1) * img_len];
        for (oy0, oy1) in row_tiles(g) {
            let pt = (oy1 - oy0) * g.out_w;
            let go_tile = &go[oy0 * g.out_w..];
            if let Some(dw) = dw.as_mut() {
                im2col_rows(img, g, oy0, oy1, &mut cols);
                // dW += dOut_tile (out_c x pt) * cols^T (pt x kr)
                T::gemm_view(
                    g.out_c,
                    kr,
                    pt,
                    T::ONE,
                    MatRef::new(go_tile, p, 1),
                    MatRef::new(&cols[..kr * pt], 1, pt),
                    T::ONE,
                    MatMut::new(dw, kr, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = W^T (kr x out_c) * dOut_tile (out_c x pt)
                T::gemm_view(
                    kr,
                    pt,
                    g.out_c,
                    T::ONE,
                    MatRef::new(weight, 1, kr),
                    MatRef::new(go_tile, p, 1),
                    T::ZERO,
                    MatMut::new(&mut cols[..kr * pt], pt, 1),
                );
                col2im_rows(&cols, g, oy0, oy1, &mut dx[n * img_len..(n + 1) * img_len]);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Max over `window x window` patches. Ties resolve to the first element in
/// row-major order. Returns outputs and the flat input index of each max.
pub(crate) fn maxpool_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for dy in 0..window {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..window {
                        let v = x[row + dx];
                        if v > best_v {
                            best_v = v;
                            best = row + dx;
                        }
                    }
                }
                out.push(best_v);
                idx.push(best);
            }
        }
    }
    (out, idx, oh, ow)
}

pub(crate) fn upsample_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::ZERO; planes * oh * ow];
    for pl in 0..planes {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        let dst = &mut out[pl * oh * ow..(pl + 1) * oh * ow];
        for oy in 0..oh {
            let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                *d = srow[ox / factor];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![T::ZERO; planes * h * w];
    for pl in 0..planes {
        let src = &grad_out[pl * oh * ow..(pl + 1) * oh * ow];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for oy in 0..oh {
            let drow = &mut dst[(oy / factor) * w..(oy / factor + 1) * w];
            for (ox, g) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                drow[ox / factor] += *g;
            }
        }
    }
    dx
}
