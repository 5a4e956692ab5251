//! Raw slice kernels shared by the differentiable ops.

use crate::par::{self, Exec};

/// `out[m,n] = a[m,k] · b[k,n]`, row-major.
pub fn gemm(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm_into(exec, a, b, m, k, n, &mut out);
    out
}

/// Accumulating variant: `out += a · b`.
pub fn gemm_into(exec: Exec, a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    par::for_each_chunk(exec, out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
}

/// Transpose of a row-major `[rows, cols]` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Geometry of a 2-D convolution window over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kw) / self.stride + 1
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Unfold one `[c,H,W]` image into `[c·kh·kw, H'·W']` columns.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.channels * g.kh * g.kw * oh * ow];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `[c,H,W]` image.
pub fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
