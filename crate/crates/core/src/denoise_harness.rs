//! A small residual CNN denoiser for indirect evaluation of synthetic data
//! and for the self-augmentation study.

use std::io::Write;
use std::path::Path;

use guidnoise_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, TensorRecord};
use crate::error::{Error, Result};
use crate::image::{GuidancePair, ImagePatch};
use crate::metrics::{psnr, ssim, MetricConfig, MetricReport, MetricRow};
use crate::model::layers::Conv;
use crate::model::{ParamStore, Scope};
use crate::optim::{clip_scale, grad_norm, AdamW, AdamWConfig};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub channels: usize,
    pub lr: f64,
    pub iters: u64,
    pub batch: usize,
    pub patch: usize,
    pub seed: u64,
    /// Real and synthetic shares of each batch when synthetic data is given.
    pub mix_real: usize,
    pub mix_synth: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            channels: 32,
            lr: 1e-3,
            iters: 2000,
            batch: 8,
            patch: 32,
            seed: 0,
            mix_real: 1,
            mix_synth: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.channels == 0 || self.batch == 0 || self.patch == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("denoiser needs depth >= 2 and positive sizes and rate".into()));
        }
        if self.mix_real + self.mix_synth == 0 {
            return Err(Error::InvalidConfig("mix ratio needs a positive total".into()));
        }
        Ok(())
    }

    /// Real and synthetic counts of one batch.
    pub fn split(&self, with_synth: bool) -> (usize, usize) {
        if !with_synth {
            return (self.batch, 0);
        }
        let real = self.batch * self.mix_real / (self.mix_real + self.mix_synth);
        (real, self.batch - real)
    }
}

/// `conv → relu → (conv → relu)* → conv`, predicting the noise to subtract.
pub struct Denoiser {
    pub config: DenoiserConfig,
    store: ParamStore,
    convs: Vec<Conv>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::derived(config.seed, &[0x646e]);
        let mut root = Scope::root(&mut store, &mut rng);
        let ch = config.channels;
        let convs = (0..config.depth)
            .map(|i| {
                let cin = if i == 0 { 3 } else { ch };
                let cout = if i + 1 == config.depth { 3 } else { ch };
                Conv::new(&mut root.pp(format!("conv{i}")), cin, cout, 3, 1)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, store, convs })
    }

    /// A denoiser whose residual branch outputs zero.
    pub fn identity(config: DenoiserConfig) -> Result<Self> {
        let mut d = Self::new(config)?;
        let last = format!("conv{}.", d.config.depth - 1);
        let names: Vec<String> = d.store.names().filter(|n| n.starts_with(&last)).map(str::to_string).collect();
        for n in names {
            let len = d.store.get(&n).map_or(0, |t| t.numel());
            d.store.set(&n, vec![0.0; len])?;
        }
        Ok(d)
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, 3, H, W]` noisy to denoised.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&self.store, &h)?;
            if i + 1 < self.convs.len() {
                h = h.relu();
            }
        }
        Ok(x.sub(&h)?)
    }

    pub fn denoise(&self, noisy: &ImagePatch) -> Result<ImagePatch> {
        let _g = no_grad();
        Ok(ImagePatch::from_tensor(&self.forward(&noisy.to_tensor()?)?)?.clamp01())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self
            .store
            .export()
            .into_iter()
            .map(|(name, shape, data)| TensorRecord { name, shape, data })
            .collect();
        Container {
            meta: serde_json::json!({ "kind": "denoiser", "config": self.config }),
            tensors,
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?;
        if c.meta.get("kind").and_then(|k| k.as_str()) != Some("denoiser") {
            return Err(Error::Checkpoint(format!("{}: not a denoiser checkpoint", path.display())));
        }
        let config: DenoiserConfig = serde_json::from_value(c.meta["config"].clone())?;
        let mut d = Self::new(config)?;
        let map = c.tensors.into_iter().map(|t| (t.name, (t.shape, t.data))).collect();
        d.store.import(&map)?;
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserStep {
    pub iter: u64,
    pub loss: f32,
    pub real: usize,
    pub synthetic: usize,
}

fn crop_pair(p: &GuidancePair, size: usize, rng: &mut SeededRng) -> Result<(ImagePatch, ImagePatch)> {
    let (h, w, _) = p.clean.shape();
    if h < size || w < size {
        return Err(Error::InvalidConfig(format!("pair {h}x{w} smaller than denoiser patch {size}")));
    }
    let (y, x) = (rng.below(h - size + 1), rng.below(w - size + 1));
    Ok((p.noisy.crop(y, x, size, size)?, p.clean.crop(y, x, size, size)?))
}

/// Residual-learning MSE training on `real`, mixing in `synth` per the configured ratio.
pub fn train_denoiser(
    cfg: &DenoiserConfig,
    real: &[GuidancePair],
    synth: Option<&[GuidancePair]>,
    log: Option<&Path>,
) -> Result<(Denoiser, Vec<DenoiserStep>)> {
    if real.is_empty() {
        return Err(Error::Empty("real training pairs"));
    }
    let synth = synth.filter(|s| !s.is_empty());
    let mut d = Denoiser::new(cfg.clone())?;
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        },
        &d.store,
    );
    let mut rng = SeededRng::derived(cfg.seed, &[0x7472]);
    let (n_real, n_synth) = cfg.split(synth.is_some());
    let mut steps = Vec::with_capacity(cfg.iters as usize);
    for iter in 1..=cfg.iters {
        let mut noisy = Vec::with_capacity(cfg.batch);
        let mut clean = Vec::with_capacity(cfg.batch);
        let sources = std::iter::repeat_n(real, n_real).chain(synth.into_iter().flat_map(|s| std::iter::repeat_n(s, n_synth)));
        for pool in sources {
            let (x, c) = crop_pair(&pool[rng.below(pool.len())], cfg.patch, &mut rng)?;
            noisy.push(x);
            clean.push(c);
        }
        let x = ImagePatch::batch_to_tensor(&noisy.iter().collect::<Vec<_>>())?;
        let c = ImagePatch::batch_to_tensor(&clean.iter().collect::<Vec<_>>())?;
        let loss = d.forward(&x)?.mse(&c)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                iter,
                phase: 0,
                t: Vec::new(),
                items: Vec::new(),
            });
        }
        let grads = loss.backward()?;
        let scale = clip_scale(grad_norm(&d.store, &grads), 1.0);
        opt.step(&mut d.store, &grads, cfg.lr, scale)?;
        steps.push(DenoiserStep {
            iter,
            loss: value,
            real: n_real,
            synthetic: n_synth,
        });
    }
    if let Some(path) = log {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(f, "iter,loss,real,synthetic")?;
            for s in &steps {
                writeln!(f, "{},{},{},{}", s.iter, s.loss, s.real, s.synthetic)?;
            }
            f.flush()
        };
        write().map_err(|e| Error::io(path, e))?;
    }
    Ok((d, steps))
}

/// Per-item PSNR and SSIM of the denoised outputs against the clean images.
pub fn eval_denoiser(d: &Denoiser, test: &[(String, GuidancePair)]) -> Result<MetricReport> {
    let items = test
        .iter()
        .map(|(id, p)| {
            let out = d.denoise(&p.noisy)?;
            Ok(MetricRow {
                item_id: id.clone(),
                psnr: Some(psnr(&out, &p.clean)?),
                ssim: Some(ssim(&out, &p.clean)?),
                ..Default::default()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport {
        items,
        config: MetricConfig::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_split() {
        let c = DenoiserConfig::default();
        assert_eq!(c.split(true), (4, 4));
        assert_eq!(c.split(false), (8, 0));
        let c = DenoiserConfig { mix_real: 3, mix_synth: 1, ..c };
        assert_eq!(c.split(true), (6, 2));
    }

    #[test]
    fn identity_denoiser_returns_input() {
        let d = Denoiser::identity(DenoiserConfig::default()).unwrap();
        let x = crate::data::procedural_clean(16, 16, 2);
        assert_eq!(d.denoise(&x).unwrap(), x);
    }
}
