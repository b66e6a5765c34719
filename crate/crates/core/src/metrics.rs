//! Noise-histogram KLD, AKLD, PSNR, SSIM and the per-item report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{GuidancePair, ImagePatch};

pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub bins: usize,
    pub lo: f64,
    pub hi: f64,
    pub eps: f64,
    pub akld_window: usize,
    pub akld_samples: usize,
    pub variance_floor: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            lo: -1.0,
            hi: 1.0,
            eps: 1e-10,
            akld_window: 7,
            akld_samples: 4,
            variance_floor: 1e-6,
        }
    }
}

impl MetricConfig {
    pub fn full_scale() -> Self {
        Self {
            akld_samples: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 || !(self.lo < self.hi) || !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("histogram needs bins >= 2, lo < hi, eps > 0".into()));
        }
        if self.akld_window.is_multiple_of(2) || self.akld_samples == 0 || !(self.variance_floor > 0.0) {
            return Err(Error::InvalidConfig("akld needs an odd window, at least one sample and a positive floor".into()));
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        let d = (self.hi - self.lo) / (self.bins - 1) as f64;
        (0..self.bins).map(|k| self.lo + k as f64 * d).collect()
    }
}

/// Nearest-center histogram over `[lo, hi]`; out-of-range values land in the end bins.
pub fn hard_histogram(values: &[f32], cfg: &MetricConfig) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("histogram input"));
    }
    let d = (cfg.hi - cfg.lo) / (cfg.bins - 1) as f64;
    let mut counts = vec![0f64; cfg.bins];
    for &v in values {
        let k = ((v as f64 - cfg.lo) / d).round().clamp(0.0, (cfg.bins - 1) as f64);
        counts[k as usize] += 1.0;
    }
    let n = values.len() as f64;
    Ok(counts.into_iter().map(|c| c / n).collect())
}

/// `D_KL(p ‖ q)` after adding `eps` to every bin and renormalizing.
pub fn discrete_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let norm = |v: &[f64]| {
        let s: f64 = v.iter().map(|x| x + eps).sum();
        v.iter().map(|x| (x + eps) / s).collect::<Vec<_>>()
    };
    let (p, q) = (norm(p), norm(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// KLD between residual histograms, synthesized against real.
pub fn residual_kld(fake_residual: &[f32], real_residual: &[f32], cfg: &MetricConfig) -> Result<f64> {
    let p = hard_histogram(fake_residual, cfg)?;
    let q = hard_histogram(real_residual, cfg)?;
    Ok(discrete_kl(&p, &q, cfg.eps))
}

pub fn noise_kld(real: &GuidancePair, fake_noisy: &ImagePatch, cfg: &MetricConfig) -> Result<f64> {
    residual_kld(&fake_noisy.residual(&real.clean)?, &real.residual(), cfg)
}

/// `(bin_center, real_prob, fake_prob)` rows for plotting.
pub fn histogram_rows(real_residual: &[f32], fake_residual: &[f32], cfg: &MetricConfig) -> Result<Vec<(f64, f64, f64)>> {
    let (q, p) = (hard_histogram(real_residual, cfg)?, hard_histogram(fake_residual, cfg)?);
    Ok(cfg.centers().into_iter().zip(q).zip(p).map(|((c, q), p)| (c, q, p)).collect())
}

/// Local noise variance: box mean of squared residuals per channel, truncated at borders.
pub fn local_variance(residual: &[f32], h: usize, w: usize, ch: usize, win: usize, floor: f64) -> Result<Vec<f64>> {
    if win.is_multiple_of(2) || win > h || win > w {
        return Err(Error::InvalidConfig(format!("window {win} must be odd and fit a {h}x{w} image")));
    }
    let r = win / 2;
    // Summed-area table over squared residuals, one per channel.
    let mut out = vec![0f64; h * w * ch];
    for c in 0..ch {
        let mut sat = vec![0f64; (h + 1) * (w + 1)];
        for y in 0..h {
            for x in 0..w {
                let v = residual[(y * w + x) * ch + c] as f64;
                sat[(y + 1) * (w + 1) + x + 1] = v * v + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let s = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                out[(y * w + x) * ch + c] = (s / ((y1 - y0) * (x1 - x0)) as f64).max(floor);
            }
        }
    }
    Ok(out)
}

/// `KL(N(0, a) ‖ N(0, b))`
pub fn gaussian_kl(var_a: f64, var_b: f64) -> f64 {
    let r = var_a / var_b;
    0.5 * (r - r.ln() - 1.0)
}

/// Average per-pixel Gaussian KLD between local variance maps of `samples`
/// synthesized images and the real noisy image.
pub fn akld(
    clean: &ImagePatch,
    real_noisy: &ImagePatch,
    mut synthesizer: impl FnMut(usize) -> Result<ImagePatch>,
    cfg: &MetricConfig,
) -> Result<f64> {
    cfg.validate()?;
    let (h, w, ch) = clean.shape();
    let win = cfg.akld_window;
    let real = local_variance(&real_noisy.residual(clean)?, h, w, ch, win, cfg.variance_floor)?;
    let mut total = 0.0;
    for l in 0..cfg.akld_samples {
        let fake = synthesizer(l)?;
        let fake = local_variance(&fake.residual(clean)?, h, w, ch, win, cfg.variance_floor)?;
        total += fake.iter().zip(&real).map(|(&f, &r)| gaussian_kl(f, r)).sum::<f64>() / real.len() as f64;
    }
    Ok(total / cfg.akld_samples as f64)
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let r = a.residual(b)?;
    Ok(r.iter().map(|&d| (d as f64) * (d as f64)).sum::<f64>() / r.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range; infinite for identical images.
pub fn psnr(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Single-scale SSIM: 11×11 Gaussian window (σ = 1.5), valid region only, channel mean.
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    const WIN: usize = 11;
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    let (h, w, ch) = a.shape();
    if h < WIN || w < WIN {
        return Err(Error::InvalidConfig(format!("ssim needs at least {WIN}x{WIN}, got {h}x{w}")));
    }
    let g = gaussian_window(WIN, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (h - WIN + 1, w - WIN + 1);
    // Separable filtering of one plane: rows then columns, valid mode.
    let filter = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let mut rows = vec![0f64; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..WIN).map(|k| g[k] * f(y, x + k)).sum();
            }
        }
        let mut out = vec![0f64; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..WIN).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let mut total = 0.0;
    for c in 0..ch {
        let pa = |y: usize, x: usize| a.get(y, x, c) as f64;
        let pb = |y: usize, x: usize| b.get(y, x, c) as f64;
        let mu_a = filter(&pa);
        let mu_b = filter(&pb);
        let aa = filter(&|y, x| pa(y, x) * pa(y, x));
        let bb = filter(&|y, x| pb(y, x) * pb(y, x));
        let ab = filter(&|y, x| pa(y, x) * pb(y, x));
        let mut s = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let (va, vb, cov) = (aa[i] - ma * ma, bb[i] - mb * mb, ab[i] - ma * mb);
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / (oh * ow) as f64;
    }
    Ok((total / ch as f64).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub item_id: String,
    pub kld: Option<f64>,
    pub akld: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub items: Vec<MetricRow>,
    pub config: MetricConfig,
}

fn mean_of(rows: &[MetricRow], f: impl Fn(&MetricRow) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Uniform mean over items of each metric that is present; PSNR uses the capped value.
    pub fn mean(&self) -> MetricRow {
        MetricRow {
            item_id: "__mean__".into(),
            kld: mean_of(&self.items, |r| r.kld),
            akld: mean_of(&self.items, |r| r.akld),
            psnr: mean_of(&self.items, |r| r.psnr.map(|p| p.min(PSNR_CAP))),
            ssim: mean_of(&self.items, |r| r.ssim),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for row in self.items.iter().cloned().chain(std::iter::once(self.mean())) {
            w.serialize(MetricRow {
                psnr: row.psnr.map(|p| p.min(PSNR_CAP)),
                ..row
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
    }
}
