//! Raw slice kernels behind the graph operations.
//!
//! Convolutions lower to im2col + GEMM. The im2col buffer is built for a band
//! of output rows at a time so full-resolution pseudo-images do not need a
//! multi-gigabyte scratch matrix.

use super::Scalar;

/// Largest im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 22;

/// `floor((size + 2·pad − kernel) / stride) + 1`, or `None` when the kernel does not fit.
pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || size + 2 * pad < kernel {
        return None;
    }
    Some((size + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_band(&self) -> usize {
        (COLS_BUDGET / (self.patch() * self.w_out).max(1)).clamp(1, self.h_out)
    }

    /// Input column range `[lo, hi)` of output columns whose tap `kx` lands inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, pad, w) = (self.stride, self.pad, self.w);
        // ox·s + kx − pad ∈ [0, w)
        let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
        let hi = if w + pad > kx { (w + pad - kx).div_ceil(s) } else { 0 };
        (lo.min(self.w_out), hi.min(self.w_out))
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], oy0: usize, oy1: usize, cols: &mut [T]) {
    let npx = (oy1 - oy0) * g.w_out;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    for c in 0..g.c_in {
        let plane = &img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npx..(row + 1) * npx];
                let (lo, hi) = g.valid_cols(kx);
                for (i, oy) in (oy0..oy1).enumerate() {
                    let d = &mut dst[i * g.w_out..(i + 1) * g.w_out];
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        d.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    d[..lo].fill(T::zero());
                    d[hi..].fill(T::zero());
                    if s == 1 {
                        let start = lo + kx - pad;
                        d[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            d[ox] = src[ox * s + kx - pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], oy0: usize, oy1: usize, img: &mut [T]) {
    let npx = (oy1 - oy0) * g.w_out;
    let (k, s, pad) = (g.k, g.stride, g.pad);
    let plane_len = g.in_plane();
    for c in 0..g.c_in {
        let plane = &mut img[c * plane_len..(c + 1) * plane_len];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npx..(row + 1) * npx];
                let (lo, hi) = g.valid_cols(kx);
                for (i, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let sl = &src[i * g.w_out..(i + 1) * g.w_out];
                    for ox in lo..hi {
                        let ix = ox * s + kx - pad;
                        line[ix] = line[ix] + sl[ox];
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. `out` must have `n·c_out·h_out·w_out` elements.
pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let kk = g.patch();
    let plane = g.out_plane();
    let mut cols = Vec::new();
    for b in 0..g.n {
        let img = &x[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
        let dst = &mut out[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        if g.is_pointwise() {
            T::gemm(g.c_out, kk, plane, w, kk, 1, img, plane, 1, T::zero(), dst, plane, 1);
        } else {
            let band = g.rows_per_band();
            let mut oy0 = 0;
            while oy0 < g.h_out {
                let oy1 = (oy0 + band).min(g.h_out);
                let npx = (oy1 - oy0) * g.w_out;
                cols.resize(kk * npx, T::zero());
                im2col(g, img, oy0, oy1, &mut cols);
                T::gemm(
                    g.c_out,
                    kk,
                    npx,
                    w,
                    kk,
                    1,
                    &cols,
                    npx,
                    1,
                    T::zero(),
                    &mut dst[oy0 * g.w_out..],
                    plane,
                    1,
                );
                oy0 = oy1;
            }
        }
        if let Some(bias) = bias {
            for (co, chan) in dst.chunks_exact_mut(plane).enumerate() {
                chan.iter_mut().for_each(|v| *v = *v + bias[co]);
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]. `dw` and `db` are accumulated into; `dx`
/// is overwritten.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let kk = g.patch();
    let plane = g.out_plane();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    for b in 0..g.n {
        let img = &x[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
        let gy = &dy[b * g.c_out * plane..(b + 1) * g.c_out * plane];
        if g.is_pointwise() {
            if let Some(dw) = dw.as_deref_mut() {
                T::gemm(g.c_out, plane, kk, gy, plane, 1, img, 1, plane, T::one(), dw, kk, 1);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let gx = &mut dx[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
                T::gemm(kk, g.c_out, plane, w, 1, kk, gy, plane, 1, T::zero(), gx, plane, 1);
            }
            continue;
        }
        if let Some(dx) = dx.as_deref_mut() {
            dx[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()].fill(T::zero());
        }
        let band = g.rows_per_band();
        let mut oy0 = 0;
        while oy0 < g.h_out {
            let oy1 = (oy0 + band).min(g.h_out);
            let npx = (oy1 - oy0) * g.w_out;
            let gy_band = &gy[oy0 * g.w_out..];
            if let Some(dw) = dw.as_deref_mut() {
                cols.resize(kk * npx, T::zero());
                im2col(g, img, oy0, oy1, &mut cols);
                T::gemm(g.c_out, npx, kk, gy_band, plane, 1, &cols, 1, npx, T::one(), dw, kk, 1);
            }
            if let Some(dx) = dx.as_deref_mut() {
                dcols.resize(kk * npx, T::zero());
                T::gemm(kk, g.c_out, npx, w, 1, kk, gy_band, plane, 1, T::zero(), &mut dcols, npx, 1);
                let gx = &mut dx[b * g.c_in * g.in_plane()..(b + 1) * g.c_in * g.in_plane()];
                col2im_add(g, &dcols, oy0, oy1, gx);
            }
            oy0 = oy1;
        }
    }
    if let Some(db) = db {
        for b in 0..g.n {
            for (co, chan) in dy[b * g.c_out * plane..(b + 1) * g.c_out * plane]
                .chunks_exact(plane)
                .enumerate()
            {
                db[co] = db[co] + chan.iter().copied().sum::<T>();
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeconvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    /// Kernel size, equal to the stride.
    pub k: usize,
}

impl DeconvGeom {
    fn rows(&self) -> usize {
        self.c_out * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h * self.k * self.w * self.k
    }

    /// Maps column-matrix entry `(r, p)` to its output index within one image.
    fn out_index(&self, r: usize, p: usize) -> usize {
        let k = self.k;
        let co = r / (k * k);
        let ky = (r / k) % k;
        let kx = r % k;
        let iy = p / self.w;
        let ix = p % self.w;
        co * self.out_plane() + (iy * k + ky) * (self.w * k) + ix * k + kx
    }
}

/// Transposed convolution with kernel == stride and no padding.
pub(crate) fn deconv_forward<T: Scalar>(g: &DeconvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let hw = g.h * g.w;
    let rows = g.rows();
    let mut ycols = vec![T::zero(); rows * hw];
    for b in 0..g.n {
        let img = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        T::gemm(rows, g.c_in, hw, w, 1, rows, img, hw, 1, T::zero(), &mut ycols, hw, 1);
        let dst = &mut out[b * g.c_out * g.out_plane()..(b + 1) * g.c_out * g.out_plane()];
        for r in 0..rows {
            for p in 0..hw {
                dst[g.out_index(r, p)] = ycols[r * hw + p];
            }
        }
    }
}

pub(crate) fn deconv_backward<T: Scalar>(
    g: &DeconvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let rows = g.rows();
    let mut gcols = vec![T::zero(); rows * hw];
    for b in 0..g.n {
        let gy = &dy[b * g.c_out * g.out_plane()..(b + 1) * g.c_out * g.out_plane()];
        for r in 0..rows {
            for p in 0..hw {
                gcols[r * hw + p] = gy[g.out_index(r, p)];
            }
        }
        let img = &x[b * g.c_in * hw..(b + 1) * g.c_in * hw];
        if let Some(dw) = dw.as_deref_mut() {
            T::gemm(g.c_in, hw, rows, img, hw, 1, &gcols, 1, hw, T::one(), dw, rows, 1);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let gx = &mut dx[b * g.c_in * hw..(b + 1) * g.c_in * hw];
            T::gemm(g.c_in, rows, hw, w, rows, 1, &gcols, hw, 1, T::zero(), gx, hw, 1);
        }
    }
}

/// 2×2 average pooling with stride 2 over `[planes, h, w]`.
pub(crate) fn avg_pool2_forward<T: Scalar>(planes: usize, h: usize, w: usize, x: &[T], out: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for oy in 0..ho {
            let r0 = &src[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &src[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..wo {
                dst[oy * wo + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
            }
        }
    }
}

pub(crate) fn avg_pool2_backward<T: Scalar>(planes: usize, h: usize, w: usize, dy: &[T], dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / 2) * wo + x / 2] * quarter;
            }
        }
    }
}
