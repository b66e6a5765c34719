use crate::linalg::{matmul, Layout};
use crate::{shape_err, Result, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Polynomial `exp` that vectorizes; relative error below 2e-7 on [-87, 88].
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // Adding 1.5·2^23 rounds to the nearest integer, which then sits in the low mantissa bits.
    let shifted = x * std::f32::consts::LOG2_E + 12_582_912.0;
    let n = shifted - 12_582_912.0;
    let ni = shifted.to_bits().wrapping_sub(0x4B40_0000);
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.987_569_1e-4f32;
    let p = p * r + 1.398_199_9e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 1.666_666_5e-1;
    let p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    p * f32::from_bits(ni.wrapping_add(127) << 23)
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

/// `a·x + b·y` for equally shaped tensors.
pub fn lincomb(a: f32, x: &Tensor, b: f32, y: &Tensor) -> Result<Tensor> {
    same_shape("lincomb", x, y)?;
    let data = x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect();
    Ok(Tensor::from_op(x.shape().to_vec(), data, &[x, y], move || {
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.iter().map(|v| a * v).collect()),
                needs[1].then(|| g.iter().map(|v| b * v).collect()),
            ]
        })
    }))
}

/// Concatenation along `axis`.
pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("cat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(shape_err("cat", format!("axis {axis} for rank {rank}")));
    }
    for p in parts {
        if p.rank() != rank || (0..rank).any(|d| d != axis && p.shape()[d] != first.shape()[d]) {
            return Err(shape_err("cat", format!("{:?} vs {:?} along {axis}", first.shape(), p.shape())));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let row: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (p, &s) in parts.iter().zip(&sizes) {
            data.extend_from_slice(&p.data()[o * s..(o + 1) * s]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = sizes.iter().sum::<usize>() / inner.max(1);
    if inner == 0 {
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    }
    Ok(Tensor::from_op(shape, data, parts, move || {
        Box::new(move |g, needs| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&s, &need)| {
                    let start = offset;
                    offset += s;
                    need.then(|| {
                        let mut out = Vec::with_capacity(outer * s);
                        for o in 0..outer {
                            out.extend_from_slice(&g[o * row + start..o * row + start + s]);
                        }
                        out
                    })
                })
                .collect()
        })
    }))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        lincomb(1.0, self, 1.0, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        lincomb(1.0, self, -1.0, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, other], move || {
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().zip(b.data()).map(|(g, v)| g * v).collect()),
                    needs[1].then(|| g.iter().zip(a.data()).map(|(g, v)| g * v).collect()),
                ]
            })
        }))
    }

    /// `mul·x + add`
    pub fn affine(&self, mul: f32, add: f32) -> Tensor {
        let data = self.data().iter().map(|v| mul * v + add).collect();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |g, _| vec![Some(g.iter().map(|v| mul * v).collect())])
        })
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn silu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |g, _| {
                vec![Some(
                    g.iter()
                        .zip(x.data())
                        .map(|(g, &x)| {
                            let s = sigmoid(x);
                            g * s * (1.0 + x * (1.0 - s))
                        })
                        .collect(),
                )]
            })
        })
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        let x = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, &[self], move || {
            Box::new(move |g, _| vec![Some(g.iter().zip(x.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect())])
        })
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let n = self.numel();
        Tensor::from_op(vec![], vec![s], &[self], move || Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f32;
        self.sum().scale(1.0 / n)
    }

    /// `Σ wᵢ·xᵢ` against constant weights.
    pub fn weighted_sum(&self, weights: &[f32]) -> Result<Tensor> {
        if weights.len() != self.numel() {
            return Err(shape_err("weighted_sum", format!("{} weights for {} values", weights.len(), self.numel())));
        }
        let s = self.data().iter().zip(weights).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() as f32;
        let w = weights.to_vec();
        Ok(Tensor::from_op(vec![], vec![s], &[self], move || Box::new(move |g, _| vec![Some(w.iter().map(|w| w * g[0]).collect())])))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mse", self, other)?;
        let n = self.numel() as f64;
        let s = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(vec![], vec![s as f32], &[self, other], move || {
            Box::new(move |g, needs| {
                let k = (2.0 / n) as f32 * g[0];
                let d: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| k * (x - y)).collect();
                vec![needs[0].then(|| d.clone()), needs[1].then(|| d.iter().map(|v| -v).collect())]
            })
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err("narrow", format!("{start}+{len} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[o * full + start * inner..o * full + (start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(out_shape, data, &[self], move || {
            Box::new(move |g, _| {
                let mut d = vec![0f32; n];
                for o in 0..outer {
                    d[o * full + start * inner..o * full + (start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(d)]
            })
        }))
    }

    /// `x·Wᵀ + b` for `x: [B, In]`, `w: [Out, In]`, `b: [Out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (bn, din) = self.dims2()?;
        let (dout, win) = w.dims2()?;
        if win != din || b.shape() != [dout] {
            return Err(shape_err("linear", format!("x {:?}, w {:?}, b {:?}", self.shape(), w.shape(), b.shape())));
        }
        let mut out = vec![0f32; bn * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(b.data());
        }
        matmul(bn, dout, din, &mut out, Layout::rows(dout), true, self.data(), Layout::rows(din), w.data(), Layout::t(din));
        let (x, wc) = (self.clone(), w.clone());
        Ok(Tensor::from_op(vec![bn, dout], out, &[self, w, b], move || {
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0f32; bn * din];
                    matmul(bn, din, dout, &mut dx, Layout::rows(din), false, g, Layout::rows(dout), wc.data(), Layout::rows(din));
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0f32; dout * din];
                    matmul(dout, din, bn, &mut dw, Layout::rows(din), false, g, Layout::t(dout), x.data(), Layout::rows(din));
                    dw
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0f32; dout];
                    for row in g.chunks_exact(dout) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    db
                });
                vec![dx, dw, db]
            })
        }))
    }

    /// `x + v` with `v: [B, C]` broadcast over the spatial axes of `x: [B, C, H, W]`.
    pub fn add_channel(&self, v: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if v.shape() != [b, c] {
            return Err(shape_err("add_channel", format!("{:?} onto {:?}", v.shape(), self.shape())));
        }
        let hw = h * w;
        let mut data = self.to_vec();
        for (chunk, &a) in data.chunks_exact_mut(hw).zip(v.data()) {
            chunk.iter_mut().for_each(|x| *x += a);
        }
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, v], move || {
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.to_vec()),
                    needs[1].then(|| g.chunks_exact(hw).map(|c| c.iter().sum()).collect()),
                ]
            })
        }))
    }

    /// `(1 + α)·x + β` with `α, β: [B, C]` broadcast over the spatial axes.
    pub fn film(&self, alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if alpha.shape() != [b, c] || beta.shape() != [b, c] {
            return Err(shape_err(
                "film",
                format!("alpha {:?}, beta {:?} for {:?}", alpha.shape(), beta.shape(), self.shape()),
            ));
        }
        let hw = h * w;
        let mut data = self.to_vec();
        for ((chunk, &a), &bt) in data.chunks_exact_mut(hw).zip(alpha.data()).zip(beta.data()) {
            let s = 1.0 + a;
            chunk.iter_mut().for_each(|x| *x = s * *x + bt);
        }
        let (x, al) = (self.clone(), alpha.clone());
        Ok(Tensor::from_op(self.shape().to_vec(), data, &[self, alpha, beta], move || {
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut d = g.to_vec();
                    for (chunk, &a) in d.chunks_exact_mut(hw).zip(al.data()) {
                        chunk.iter_mut().for_each(|v| *v *= 1.0 + a);
                    }
                    d
                });
                let dalpha = needs[1].then(|| {
                    g.chunks_exact(hw)
                        .zip(x.data().chunks_exact(hw))
                        .map(|(g, x)| g.iter().zip(x).map(|(g, x)| g * x).sum())
                        .collect()
                });
                let dbeta = needs[2].then(|| g.chunks_exact(hw).map(|c| c.iter().sum()).collect());
                vec![dx, dalpha, dbeta]
            })
        }))
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0f32; b * c * h2 * w2];
        for (src, dst) in self.data().chunks_exact(h * w).zip(data.chunks_exact_mut(h2 * w2)) {
            for y in 0..h2 {
                for x in 0..w2 {
                    dst[y * w2 + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        Ok(Tensor::from_op(vec![b, c, h2, w2], data, &[self], move || {
            Box::new(move |g, _| {
                let mut d = vec![0f32; b * c * h * w];
                for (src, dst) in g.chunks_exact(h2 * w2).zip(d.chunks_exact_mut(h * w)) {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                        }
                    }
                }
                vec![Some(d)]
            })
        }))
    }

    /// Mean over the spatial axes: `[B, C, H, W] → [B, C]`.
    pub fn spatial_mean(&self) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        let hw = h * w;
        let data = self.data().chunks_exact(hw).map(|p| p.iter().sum::<f32>() / hw as f32).collect();
        Ok(Tensor::from_op(vec![b, c], data, &[self], move || {
            Box::new(move |g, _| {
                let mut d = Vec::with_capacity(b * c * hw);
                for &v in g {
                    d.extend(std::iter::repeat_n(v / hw as f32, hw));
                }
                vec![Some(d)]
            })
        }))
    }
}
