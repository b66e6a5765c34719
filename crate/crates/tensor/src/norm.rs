use std::sync::Arc;

use crate::{shape_err, Result, Tensor};

/// Group normalization over `[B, C, H, W]` with per-channel affine `gamma`, `beta`.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f32) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "group_norm",
            format!("{c} channels, {groups} groups, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let hw = h * w;
    let cg = c / groups;
    let m = cg * hw;
    let mut xhat = vec![0f32; x.numel()];
    let mut rstd = vec![0f32; b * groups];
    let mut out = vec![0f32; x.numel()];
    for (gi, (src, dst)) in x.data().chunks_exact(m).zip(xhat.chunks_exact_mut(m)).enumerate() {
        let mean = src.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
        let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
        let r = (1.0 / (var + eps as f64).sqrt()) as f32;
        let mean = mean as f32;
        rstd[gi] = r;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
    }
    for (i, (o, xh)) in out.chunks_exact_mut(hw).zip(xhat.chunks_exact(hw)).enumerate() {
        let ch = i % c;
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for (o, &v) in o.iter_mut().zip(xh) {
            *o = v * gm + bt;
        }
    }
    let xhat = Arc::new(xhat);
    let gc = gamma.clone();
    Ok(Tensor::from_op(x.shape().to_vec(), out, &[x, gamma, beta], move || {
        Box::new(move |grad: &[f32], needs: &[bool]| {
            let mut dgamma = vec![0f32; c];
            let mut dbeta = vec![0f32; c];
            for (i, (g, xh)) in grad.chunks_exact(hw).zip(xhat.chunks_exact(hw)).enumerate() {
                let ch = i % c;
                let mut sg = 0f32;
                let mut sgx = 0f32;
                for (&g, &v) in g.iter().zip(xh) {
                    sg += g;
                    sgx += g * v;
                }
                dbeta[ch] += sg;
                dgamma[ch] += sgx;
            }
            let dx = needs[0].then(|| {
                let mut dx = vec![0f32; grad.len()];
                for (gi, &r) in rstd.iter().enumerate().take(b * groups) {
                    let base = gi * m;
                    let ch0 = (gi % groups) * cg;
                    // dx̂ = g·γ; dx = rstd·(dx̂ − mean(dx̂) − x̂·mean(dx̂·x̂))
                    let mut s1 = 0f64;
                    let mut s2 = 0f64;
                    for k in 0..cg {
                        let gm = gc.data()[ch0 + k];
                        let off = base + k * hw;
                        let (mut a1, mut a2) = (0f32, 0f32);
                        for (&g, &v) in grad[off..off + hw].iter().zip(&xhat[off..off + hw]) {
                            a1 += g;
                            a2 += g * v;
                        }
                        s1 += (a1 * gm) as f64;
                        s2 += (a2 * gm) as f64;
                    }
                    let (m1, m2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
                    for k in 0..cg {
                        let gm = gc.data()[ch0 + k];
                        let off = base + k * hw;
                        for ((d, &g), &v) in dx[off..off + hw].iter_mut().zip(&grad[off..off + hw]).zip(&xhat[off..off + hw]) {
                            *d = r * (g * gm - m1 - v * m2);
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        })
    }))
}
