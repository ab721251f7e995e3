//! im2col convolution kernels (cross-correlation, no kernel flip).

use rayon::prelude::*;

use super::kernels::{axpy, dot, gemm_acc};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.c * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Per-sample `(dW, db)` partial sums.
type WeightBiasGrads = (Vec<f64>, Vec<f64>);

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let p = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_acc(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let p = g.out_plane();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let p = g.out_plane();
    let q = g.patch();
    let mut out = vec![0.0; g.n * g.k * p];
    out.par_chunks_mut(g.k * p).enumerate().for_each(|(n, out_n)| {
        for (k, row) in out_n.chunks_mut(p).enumerate() {
            row.fill(bias[k]);
        }
        let x_n = &x[n * g.in_sample()..(n + 1) * g.in_sample()];
        if g.is_pointwise() {
            gemm_acc(weight, x_n, out_n, g.k, q, p);
        } else {
            let mut cols = vec![0.0; q * p];
            im2col(g, x_n, &mut cols);
            gemm_acc(weight, &cols, out_n, g.k, q, p);
        }
    });
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    d_out: &[f64],
    want_input: bool,
) -> ConvGrads {
    let p = g.out_plane();
    let q = g.patch();
    let in_sz = g.in_sample();

    let per_sample = |n: usize, dx_n: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let x_n = &x[n * in_sz..(n + 1) * in_sz];
        let dy_n = &d_out[n * g.k * p..(n + 1) * g.k * p];
        let owned_cols;
        let cols: &[f64] = if g.is_pointwise() {
            x_n
        } else {
            let mut c = vec![0.0; q * p];
            im2col(g, x_n, &mut c);
            owned_cols = c;
            &owned_cols
        };
        let mut dw = vec![0.0; g.k * q];
        let mut db = vec![0.0; g.k];
        for k in 0..g.k {
            let dy_k = &dy_n[k * p..(k + 1) * p];
            db[k] = dy_k.iter().sum();
            for r in 0..q {
                dw[k * q + r] = dot(dy_k, &cols[r * p..(r + 1) * p]);
            }
        }
        if let Some(dx_n) = dx_n {
            let mut dcols = vec![0.0; q * p];
            for k in 0..g.k {
                let dy_k = &dy_n[k * p..(k + 1) * p];
                for r in 0..q {
                    let w = weight[k * q + r];
                    if w != 0.0 {
                        axpy(&mut dcols[r * p..(r + 1) * p], w, dy_k);
                    }
                }
            }
            if g.is_pointwise() {
                for (d, s) in dx_n.iter_mut().zip(&dcols) {
                    *d += s;
                }
            } else {
                col2im_acc(g, &dcols, dx_n);
            }
        }
        (dw, db)
    };

    let (input, partials): (Option<Vec<f64>>, Vec<WeightBiasGrads>) = if want_input {
        let mut dx = vec![0.0; g.n * in_sz];
        let partials = dx
            .par_chunks_mut(in_sz.max(1))
            .take(g.n)
            .enumerate()
            .map(|(n, dx_n)| per_sample(n, Some(dx_n)))
            .collect();
        (Some(dx), partials)
    } else {
        let partials = (0..g.n).into_par_iter().map(|n| per_sample(n, None)).collect();
        (None, partials)
    };

    // Sequential, sample-ordered reduction keeps results thread-count independent.
    let mut weight_grad = vec![0.0; g.k * q];
    let mut bias_grad = vec![0.0; g.k];
    for (dw, db) in &partials {
        for (a, b) in weight_grad.iter_mut().zip(dw) {
            *a += b;
        }
        for (a, b) in bias_grad.iter_mut().zip(db) {
            *a += b;
        }
    }
    ConvGrads { input, weight: weight_grad, bias: bias_grad }
}
