//! Raw numeric kernels over flat row-major buffers.
//!
//! Work is split per sample where it helps; every reduction that crosses
//! samples is summed sequentially in sample order so results do not depend
//! on the worker count.

use rayon::prelude::*;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub fn matmul_grad_lhs(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_grad_rhs(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; rows * cols];
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let r = (c * g.k + kh) * g.k + kw;
                let dst = &mut out[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols = g.cols();
    for c in 0..g.c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let r = (c * g.k + kh) * g.k + kw;
                let src = &dcols[r * cols..(r + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation, no bias.
pub fn conv2d_forward(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0.0; g.n * g.oc * cols];
    out.par_chunks_mut(g.oc * cols)
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(out_n, x_n)| {
            let colbuf = im2col(x_n, g);
            for o in 0..g.oc {
                let dst = &mut out_n[o * cols..(o + 1) * cols];
                for r in 0..rows {
                    let wv = w[o * rows + r];
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &colbuf[r * cols..(r + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        });
    out
}

/// Returns `(dx, dw)`; `dx` is skipped when `need_dx` is false.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let (rows, cols) = (g.rows(), g.cols());
    let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>)> = x
        .par_chunks(g.in_len())
        .zip(dout.par_chunks(g.oc * cols))
        .map(|(x_n, d_n)| {
            let colbuf = im2col(x_n, g);
            let mut dw = vec![0.0; g.oc * rows];
            for o in 0..g.oc {
                let drow = &d_n[o * cols..(o + 1) * cols];
                for r in 0..rows {
                    let src = &colbuf[r * cols..(r + 1) * cols];
                    dw[o * rows + r] = drow.iter().zip(src).map(|(a, b)| a * b).sum();
                }
            }
            let dx = need_dx.then(|| {
                let mut dcols = vec![0.0; rows * cols];
                for o in 0..g.oc {
                    let drow = &d_n[o * cols..(o + 1) * cols];
                    for r in 0..rows {
                        let wv = w[o * rows + r];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut dcols[r * cols..(r + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(drow) {
                            *d += wv * s;
                        }
                    }
                }
                let mut dx = vec![0.0; g.in_len()];
                col2im(&dcols, g, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let mut dw = vec![0.0; g.oc * rows];
    let mut dx = need_dx.then(|| Vec::with_capacity(x.len()));
    for (dx_n, dw_n) in per_sample {
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a += b;
        }
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx.extend_from_slice(&dx_n);
        }
    }
    (dx, dw)
}

/// Non-overlapping average pooling with window `k`.
pub fn avg_pool_forward(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / k) * ow + xx / k] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    out
}

pub fn avg_pool_backward(
    dout: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let src = &dout[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
            }
        }
    }
    dx
}

/// Non-overlapping max pooling; also returns the flat argmax per output.
pub fn max_pool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![f64::NEG_INFINITY; n * c * oh * ow];
    let mut arg = vec![0usize; out.len()];
    for plane in 0..n * c {
        for y in 0..h {
            for xx in 0..w {
                let src = plane * h * w + y * w + xx;
                let dst = plane * oh * ow + (y / k) * ow + xx / k;
                if x[src] > out[dst] {
                    out[dst] = x[src];
                    arg[dst] = src;
                }
            }
        }
    }
    (out, arg)
}
