//! Training objectives: the v-space diffusion loss, a differentiable soft
//! histogram, smoothed KL divergence and the histogram-matching refine loss.

use std::sync::Arc;

use guidnoise_tensor::{lincomb, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which values the refine-loss histograms are taken over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramDomain {
    /// `image - clean`
    #[default]
    Residual,
    /// Raw pixel values.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda: f64,
    pub gamma: f64,
    pub t_split: usize,
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub eps_h: f64,
    pub domain: HistogramDomain,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            gamma: 0.1,
            t_split: 2,
            bins: 256,
            lo: -1.0,
            hi: 1.0,
            eps_h: 1e-10,
            domain: HistogramDomain::Residual,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, steps: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) {
            return bad(format!("lambda and gamma must be >= 0, got {} and {}", self.lambda, self.gamma));
        }
        if self.t_split < 1 || self.t_split > steps {
            return bad(format!("t_split must lie in [1, {steps}], got {}", self.t_split));
        }
        if self.bins < 2 {
            return bad(format!("need at least 2 bins, got {}", self.bins));
        }
        if !(self.lo < self.hi) {
            return bad(format!("histogram range [{}, {}] is empty", self.lo, self.hi));
        }
        if !(self.eps_h > 0.0) {
            return bad(format!("eps_h must be > 0, got {}", self.eps_h));
        }
        Ok(())
    }

    fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.bins - 1) as f64
    }
}

/// Normalized soft histogram over `bins` uniformly spaced centers spanning `[lo, hi]`.
#[derive(Clone, Debug)]
pub struct HistogramDist {
    lo: f64,
    hi: f64,
    /// `[bins]`, differentiable with respect to the binned values.
    pub probs: Tensor,
}

impl HistogramDist {
    pub fn bins(&self) -> usize {
        self.probs.numel()
    }

    pub fn centers(&self) -> Vec<f64> {
        let b = self.bins();
        let d = (self.hi - self.lo) / (b - 1) as f64;
        (0..b).map(|k| self.lo + k as f64 * d).collect()
    }

    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    fn same_support(&self, other: &HistogramDist) -> bool {
        self.lo == other.lo && self.hi == other.hi && self.bins() == other.bins()
    }
}

/// Mean squared error between predicted and target v.
pub fn diffusion_loss(v_hat: &Tensor, v: &Tensor) -> Result<Tensor> {
    if v_hat.shape() != v.shape() {
        return Err(Error::shape(v.shape(), v_hat.shape()));
    }
    Ok(v_hat.mse(v)?)
}

/// Splits each value between its two nearest centers with a triangular kernel.
///
/// Values outside `[lo, hi]` are clamped and receive zero gradient.
pub fn soft_histogram(values: &Tensor, w: &LossWeights) -> Result<HistogramDist> {
    let n = values.numel();
    if n == 0 {
        return Err(Error::Empty("histogram input"));
    }
    if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite histogram input at index {i}")));
    }
    let b = w.bins;
    let (lo, hi) = (w.lo, w.hi);
    let d = w.spacing();
    let mut mass = vec![0f64; b];
    // Per value: left bin index, or usize::MAX when clamped.
    let mut left = Vec::with_capacity(n);
    for &v in values.data() {
        let v = v as f64;
        let inside = v > lo && v < hi;
        let pos = (v.clamp(lo, hi) - lo) / d;
        let k = (pos.floor() as usize).min(b - 2);
        let frac = (pos - k as f64).clamp(0.0, 1.0);
        mass[k] += 1.0 - frac;
        mass[k + 1] += frac;
        left.push(if inside { k } else { usize::MAX });
    }
    let probs: Vec<f32> = mass.iter().map(|m| (m / n as f64) as f32).collect();
    let left = Arc::new(left);
    let scale = (1.0 / (d * n as f64)) as f32;
    let probs = Tensor::from_op(vec![b], probs, &[values], move || {
        Box::new(move |g, _| {
            vec![Some(
                left.iter()
                    .map(|&k| if k == usize::MAX { 0.0 } else { (g[k + 1] - g[k]) * scale })
                    .collect(),
            )]
        })
    });
    Ok(HistogramDist { lo, hi, probs })
}

/// `Σ p'ₖ ln(p'ₖ / q'ₖ)` in nats, with `p' = (p + ε) / Σ(p + ε)` and likewise for `q`.
pub fn kl_divergence(p: &HistogramDist, q: &HistogramDist, eps_h: f64) -> Result<Tensor> {
    if !p.same_support(q) {
        return Err(Error::shape(q.centers().len(), p.centers().len()));
    }
    if !(eps_h > 0.0) {
        return Err(Error::InvalidConfig(format!("eps_h must be > 0, got {eps_h}")));
    }
    let smooth = |t: &Tensor| {
        let v: Vec<f64> = t.data().iter().map(|&x| x as f64 + eps_h).collect();
        let s: f64 = v.iter().sum();
        (v.into_iter().map(|x| x / s).collect::<Vec<_>>(), s)
    };
    let (ps, s) = smooth(&p.probs);
    let (qs, t) = smooth(&q.probs);
    let logr: Vec<f64> = ps.iter().zip(&qs).map(|(a, b)| (a / b).ln()).collect();
    let d: f64 = ps.iter().zip(&logr).map(|(a, l)| a * l).sum();
    Ok(Tensor::from_op(vec![], vec![d as f32], &[&p.probs, &q.probs], move || {
        Box::new(move |g, needs| {
            let g = g[0] as f64;
            vec![
                needs[0].then(|| logr.iter().map(|l| (g * (l - d) / s) as f32).collect()),
                needs[1].then(|| ps.iter().zip(&qs).map(|(a, b)| (g * (1.0 - a / b) / t) as f32).collect()),
            ]
        })
    }))
}

/// `KL(H(x̂ − c) ‖ H(x − c)) + γ·MSE(x̂, x)`, differentiable in `x_hat`.
pub fn refine_loss(x_hat: &Tensor, x_real: &Tensor, c: &Tensor, w: &LossWeights) -> Result<Tensor> {
    for t in [x_real, c] {
        if t.shape() != x_hat.shape() {
            return Err(Error::shape(x_hat.shape(), t.shape()));
        }
    }
    let (fake, real) = match w.domain {
        HistogramDomain::Residual => (x_hat.sub(c)?, x_real.sub(c)?),
        HistogramDomain::Image => (x_hat.clone(), x_real.clone()),
    };
    let kl = kl_divergence(&soft_histogram(&fake, w)?, &soft_histogram(&real, w)?, w.eps_h)?;
    let mse = x_hat.mse(x_real)?;
    Ok(lincomb(1.0, &kl, w.gamma as f32, &mse)?)
}

/// `l_diff + λ·l_refine`
pub fn total_loss(l_diff: &Tensor, l_refine: &Tensor, w: &LossWeights) -> Result<Tensor> {
    Ok(lincomb(1.0, l_diff, w.lambda as f32, l_refine)?)
}
