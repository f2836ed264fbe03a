//! Convolution lowering (im2col / col2im) and the GEMM entry point.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }
}

/// Unfolds `x: [cin, h, w]` into a `[cin*k*k, oh*ow]` matrix.
pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let n = g.cols();
    let mut cols = vec![0.0f32; g.rows() * n];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[r * n..(r + 1) * n];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    row[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                }
            }
        }
    }
    cols
}

/// Scatters a `[cin*k*k, oh*ow]` column gradient back onto `dx: [cin, h, w]`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let n = g.cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let r = (ci * g.k + ky) * g.k + kx;
                let src = &cols[r * n..(r + 1) * n];
                let (lo, hi) = g.valid_ox(kx);
                for oy in 0..g.oh {
                    let iy = oy + ky;
                    if iy < g.pad || iy - g.pad >= g.h {
                        continue;
                    }
                    let iy = iy - g.pad;
                    let dst = &mut plane[iy * g.w + lo + kx - g.pad..iy * g.w + hi + kx - g.pad];
                    let row = &src[oy * g.ow + lo..oy * g.ow + hi];
                    for (d, s) in dst.iter_mut().zip(row) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Strided matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f32], ncols: usize) -> Self {
        Self { data, rs: ncols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `ncols` columns.
    pub fn transposed(data: &'a [f32], ncols: usize) -> Self {
        Self { data, rs: 1, cs: ncols }
    }
}

/// `c[m, n] = beta * c + a[m, k] * b[k, n]` with row-major `c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    assert!(k == 0 || a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
    assert!(k == 0 || b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
