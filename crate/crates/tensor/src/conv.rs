//! 2-D convolution by im2col + GEMM.

use std::sync::Arc;

use crate::linalg::{matmul, Layout};
use crate::{grad_enabled, shape_err, Result, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Appends the `[ci·k·k, ho·wo]` patch matrix of one image to `cols`.
/// `padded` is scratch space for one zero-padded plane.
fn im2col(x: &[f32], g: &Geometry, cols: &mut Vec<f32>, padded: &mut Vec<f32>) {
    let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
    padded.clear();
    padded.resize(hp * wp, 0.0);
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for (y, row) in plane.chunks_exact(g.w).enumerate() {
            let at = (y + g.pad) * wp + g.pad;
            padded[at..at + g.w].copy_from_slice(row);
        }
        for ky in 0..g.k {
            for kx in 0..g.k {
                for oy in 0..g.ho {
                    let at = (oy * g.stride + ky) * wp + kx;
                    if g.stride == 1 {
                        cols.extend_from_slice(&padded[at..at + g.wo]);
                    } else {
                        cols.extend((0..g.wo).map(|ox| padded[at + ox * g.stride]));
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let n = g.cols();
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((c * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let shift = kx as isize - g.pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wo as isize)).max(lo as isize) as usize;
                        let d = &mut dst[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                        d.iter_mut().zip(&src[lo..hi]).for_each(|(d, v)| *d += v);
                    } else {
                        for (ox, v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [B, Ci, H, W]` with `w: [Co, Ci, k, k]`, plus optional `bias: [Co]`.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, ci, h, wd) = x.dims4()?;
    let (co, wci, k, k2) = w.dims4()?;
    if wci != ci || k != k2 || stride == 0 {
        return Err(shape_err("conv2d", format!("input {:?}, weight {:?}", x.shape(), w.shape())));
    }
    if let Some(bias) = bias {
        if bias.shape() != [co] {
            return Err(shape_err("conv2d", format!("bias {:?} for {co} outputs", bias.shape())));
        }
    }
    if h + 2 * pad < k || wd + 2 * pad < k {
        return Err(shape_err("conv2d", format!("kernel {k} larger than padded input {h}x{wd}")));
    }
    let g = Geometry {
        ci,
        h,
        w: wd,
        k,
        stride,
        pad,
        ho: (h + 2 * pad - k) / stride + 1,
        wo: (wd + 2 * pad - k) / stride + 1,
    };
    let (kk, n) = (g.rows(), g.cols());
    let in_plane = ci * h * wd;
    let track = grad_enabled() && (x.requires_grad() || w.requires_grad() || bias.is_some_and(|b| b.requires_grad()));

    let mut out = Vec::with_capacity(b * co * n);
    for _ in 0..b {
        for o in 0..co {
            let v = bias.map_or(0.0, |bias| bias.data()[o]);
            out.extend(std::iter::repeat_n(v, n));
        }
    }
    let mut saved_cols = Vec::with_capacity(if track && !g.is_pointwise() { b * kk * n } else { 0 });
    let mut scratch = Vec::with_capacity(if !track && !g.is_pointwise() { kk * n } else { 0 });
    let mut padded = Vec::new();
    for bi in 0..b {
        let xb = &x.data()[bi * in_plane..(bi + 1) * in_plane];
        let cols: &[f32] = if g.is_pointwise() {
            xb
        } else if track {
            im2col(xb, &g, &mut saved_cols, &mut padded);
            &saved_cols[bi * kk * n..]
        } else {
            scratch.clear();
            im2col(xb, &g, &mut scratch, &mut padded);
            &scratch
        };
        matmul(
            co,
            n,
            kk,
            &mut out[bi * co * n..(bi + 1) * co * n],
            Layout::rows(n),
            true,
            w.data(),
            Layout::rows(kk),
            cols,
            Layout::rows(n),
        );
    }

    let mut inputs = vec![x, w];
    if let Some(bias) = bias {
        inputs.push(bias);
    }
    let (xc, wc) = (x.clone(), w.clone());
    let saved_cols = Arc::new(saved_cols);
    Ok(Tensor::from_op(vec![b, co, g.ho, g.wo], out, &inputs, move || {
        Box::new(move |grad: &[f32], needs: &[bool]| {
            let mut dw = needs[1].then(|| vec![0f32; co * kk]);
            let mut dx = needs[0].then(|| vec![0f32; b * in_plane]);
            let db = needs.get(2).copied().unwrap_or(false).then(|| {
                let mut db = vec![0f32; co];
                for (i, chunk) in grad.chunks_exact(n).enumerate() {
                    db[i % co] += chunk.iter().sum::<f32>();
                }
                db
            });
            let mut dcols = if dx.is_some() && !g.is_pointwise() { vec![0f32; kk * n] } else { Vec::new() };
            for bi in 0..b {
                let gb = &grad[bi * co * n..(bi + 1) * co * n];
                if let Some(dw) = dw.as_mut() {
                    let cols: &[f32] = if g.is_pointwise() {
                        &xc.data()[bi * in_plane..(bi + 1) * in_plane]
                    } else {
                        &saved_cols[bi * kk * n..(bi + 1) * kk * n]
                    };
                    // dW[co, kk] += g[co, n] · cols[kk, n]ᵀ
                    matmul(co, kk, n, dw, Layout::rows(kk), true, gb, Layout::rows(n), cols, Layout::t(n));
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * in_plane..(bi + 1) * in_plane];
                    if g.is_pointwise() {
                        matmul(kk, n, co, dxb, Layout::rows(n), true, wc.data(), Layout::t(kk), gb, Layout::rows(n));
                    } else {
                        // dcols[kk, n] = Wᵀ[kk, co] · g[co, n]
                        matmul(kk, n, co, &mut dcols, Layout::rows(n), false, wc.data(), Layout::t(kk), gb, Layout::rows(n));
                        col2im(&dcols, &g, dxb);
                    }
                }
            }
            let mut grads = vec![dx, dw];
            if needs.len() > 2 {
                grads.push(db);
            }
            grads
        })
    }))
}
