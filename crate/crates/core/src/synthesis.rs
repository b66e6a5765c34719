//! Noisy-image generation from a clean image and one guidance pair, tiled
//! synthesis for large images, and the N² self-augmentation protocol.

use std::path::{Path, PathBuf};

use guidnoise_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, PairDataset};
use crate::error::{Error, Result};
use crate::image::{GuidancePair, ImagePatch};
use crate::model::GuidedUNet;
use crate::rng::{mix_seed, SeededRng};
use crate::schedule::{ddim_sigma, ddim_step_v_at, DiffusionSchedule};
use crate::training::{from_model_space, to_model_space};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SigmaMode {
    #[default]
    Deterministic,
    Stochastic { eta: f64 },
}

#[derive(Clone, Debug)]
pub struct SynthesisRequest {
    pub clean: ImagePatch,
    pub guidance: GuidancePair,
    pub seed: u64,
    /// Sampling steps; `None` uses every step of the schedule.
    pub steps: Option<usize>,
    pub sigma_mode: SigmaMode,
}

impl SynthesisRequest {
    pub fn new(clean: ImagePatch, guidance: GuidancePair, seed: u64) -> Self {
        Self {
            clean,
            guidance,
            seed,
            steps: None,
            sigma_mode: SigmaMode::Deterministic,
        }
    }
}

/// Descending timesteps `T = τ_k > … > τ_0 = 0` spread evenly over the schedule.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidConfig(format!("steps must lie in 1..={total}, got {steps}")));
    }
    Ok((0..=steps).rev().map(|i| (i * total + steps / 2) / steps).collect())
}

/// Synthesizes each request; requests must agree in step count and mode.
///
/// Every item draws its latent and step noise from its own seed, so the
/// result does not depend on how requests are grouped.
pub fn synthesize_batch(model: &GuidedUNet, schedule: &DiffusionSchedule, reqs: &[SynthesisRequest]) -> Result<Vec<ImagePatch>> {
    let Some(first) = reqs.first() else {
        return Ok(Vec::new());
    };
    if reqs.iter().any(|r| r.steps != first.steps || r.sigma_mode != first.sigma_mode) {
        return Err(Error::InvalidConfig("batched requests must share steps and sigma mode".into()));
    }
    let p = model.config().patch_size;
    for r in reqs {
        for img in [&r.clean, &r.guidance.noisy, &r.guidance.clean] {
            if img.shape() != (p, p, model.config().in_channels) {
                return Err(Error::shape((p, p, model.config().in_channels), img.shape()));
            }
        }
    }
    let _guard = no_grad();
    let ts = timesteps(schedule.steps(), first.steps.unwrap_or(schedule.steps()))?;
    let eta = match first.sigma_mode {
        SigmaMode::Deterministic => 0.0,
        SigmaMode::Stochastic { eta } => eta,
    };
    let c = to_model_space(&reqs.iter().map(|r| &r.clean).collect::<Vec<_>>())?;
    let x_r = to_model_space(&reqs.iter().map(|r| &r.guidance.noisy).collect::<Vec<_>>())?;
    let c_r = to_model_space(&reqs.iter().map(|r| &r.guidance.clean).collect::<Vec<_>>())?;
    let per = p * p * model.config().in_channels;
    let mut rngs: Vec<SeededRng> = reqs.iter().map(|r| SeededRng::new(r.seed)).collect();
    let draw = |rngs: &mut Vec<SeededRng>| -> Result<Tensor> {
        let data = rngs.iter_mut().flat_map(|g| g.gaussian_vec(per)).collect();
        Ok(Tensor::new(data, c.shape())?)
    };
    let mut x = draw(&mut rngs)?;
    for w in ts.windows(2) {
        let (t, t_prev) = (w[0], w[1]);
        let v_hat = model.predict(&x, &c, &x_r, &c_r, &vec![t; reqs.len()])?;
        let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let sigma = ddim_sigma(eta, a, ap);
        let noise = if sigma > 0.0 { Some(draw(&mut rngs)?) } else { None };
        x = ddim_step_v_at(&x, &v_hat, a, ap, sigma, noise.as_ref())?;
    }
    Ok(ImagePatch::batch_from_tensor(&from_model_space(&x))?
        .into_iter()
        .map(ImagePatch::clamp01)
        .collect())
}

pub fn synthesize(model: &GuidedUNet, schedule: &DiffusionSchedule, req: &SynthesisRequest) -> Result<ImagePatch> {
    Ok(synthesize_batch(model, schedule, std::slice::from_ref(req))?.remove(0))
}

/// Tile origins along one axis of length `n`; the last tile is flush with the edge.
pub fn tile_origins(n: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if n <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut v: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile < n).collect();
    v.push(n - tile);
    v
}

/// Reduces or pads a guidance pair to a `tile`-sized patch.
fn fit_guidance(g: &GuidancePair, tile: usize) -> Result<GuidancePair> {
    let fit = |img: &ImagePatch| -> Result<ImagePatch> {
        let padded = img.pad_to(tile, tile);
        let (top, left) = ((padded.height() - tile) / 2, (padded.width() - tile) / 2);
        padded.crop(top, left, tile, tile)
    };
    GuidancePair::new(fit(&g.noisy)?, fit(&g.clean)?)
}

#[derive(Clone, Debug)]
pub struct TileOptions {
    pub overlap: usize,
    pub steps: Option<usize>,
    pub sigma_mode: SigmaMode,
    /// Tiles synthesized per network call.
    pub batch: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self {
            overlap: 8,
            steps: None,
            sigma_mode: SigmaMode::Deterministic,
            batch: 8,
        }
    }
}

/// Synthesizes an image of any size from model-sized tiles.
///
/// Tile residuals are blended with linear feathering, normalized by the root
/// of the summed squared weights so independent tile noise keeps its variance
/// across seams.
pub fn synthesize_tiled(
    model: &GuidedUNet,
    schedule: &DiffusionSchedule,
    clean: &ImagePatch,
    guidance: &GuidancePair,
    seed: u64,
    opts: &TileOptions,
) -> Result<ImagePatch> {
    let tile = model.config().patch_size;
    if 2 * opts.overlap >= tile {
        return Err(Error::InvalidConfig(format!("overlap {} must be below half the tile {tile}", opts.overlap)));
    }
    let guidance = fit_guidance(guidance, tile)?;
    let (h, w, ch) = clean.shape();
    let padded = clean.pad_to(tile, tile);
    let (ys, xs) = (tile_origins(padded.height(), tile, opts.overlap), tile_origins(padded.width(), tile, opts.overlap));
    let mut reqs = Vec::with_capacity(ys.len() * xs.len());
    for (r, &y) in ys.iter().enumerate() {
        for (c, &x) in xs.iter().enumerate() {
            reqs.push(SynthesisRequest {
                clean: padded.crop(y, x, tile, tile)?,
                guidance: guidance.clone(),
                seed: mix_seed(seed, &[r as u64, c as u64]),
                steps: opts.steps,
                sigma_mode: opts.sigma_mode,
            });
        }
    }
    if reqs.len() == 1 && (h, w) == (tile, tile) {
        return synthesize(model, schedule, &reqs[0]);
    }
    let ramp = |i: usize| -> f32 {
        let o = opts.overlap as f32 + 1.0;
        (((i + 1) as f32 / o).min((tile - i) as f32 / o)).min(1.0)
    };
    let (ph, pw) = (padded.height(), padded.width());
    let mut acc = vec![0f32; ph * pw * ch];
    let mut wsq = vec![0f32; ph * pw];
    let mut k = 0;
    for chunk in reqs.chunks(opts.batch.max(1)) {
        for (req, out) in chunk.iter().zip(synthesize_batch(model, schedule, chunk)?) {
            let (y0, x0) = (ys[k / xs.len()], xs[k % xs.len()]);
            k += 1;
            for y in 0..tile {
                for x in 0..tile {
                    let wt = ramp(y) * ramp(x);
                    let pix = (y0 + y) * pw + x0 + x;
                    wsq[pix] += wt * wt;
                    for c in 0..ch {
                        acc[pix * ch + c] += wt * (out.get(y, x, c) - req.clean.get(y, x, c));
                    }
                }
            }
        }
    }
    let mut result = padded;
    for (pix, &s) in wsq.iter().enumerate() {
        let norm = 1.0 / s.sqrt();
        for c in 0..ch {
            result.data_mut()[pix * ch + c] += acc[pix * ch + c] * norm;
        }
    }
    Ok(result.crop(0, 0, h, w)?.clamp01())
}

/// Which guidance pairs each clean image is crossed with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentStrategy {
    /// Every guidance pair, including the image's own (N² outputs).
    #[default]
    AllPairs,
    /// Every other pair (N(N-1) outputs).
    CrossOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRow {
    pub index: usize,
    pub clean_path: String,
    pub guidance_noisy_path: String,
    pub guidance_clean_path: String,
    pub seed: u64,
    pub out_path: String,
}

pub const AUGMENT_MANIFEST: &str = "augment_manifest.csv";

/// Crosses every clean image of `ds` with guidance pairs per `strategy`,
/// writing a dataset under `out` that mirrors the input layout.
pub fn self_augment(
    model: &GuidedUNet,
    schedule: &DiffusionSchedule,
    ds: &PairDataset,
    seed: u64,
    out: &Path,
    strategy: AugmentStrategy,
    opts: &TileOptions,
) -> Result<(PairDataset, Vec<AugmentRow>)> {
    if ds.is_empty() {
        return Err(Error::Empty("self-augmentation input"));
    }
    let pairs = ds.load_all()?;
    for sub in ["clean", "noisy"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let rel = |p: &Path| p.display().to_string();
    let mut rows = Vec::new();
    for (i, target) in pairs.iter().enumerate() {
        for (j, guide) in pairs.iter().enumerate() {
            if strategy == AugmentStrategy::CrossOnly && i == j {
                continue;
            }
            let item_seed = mix_seed(seed, &[i as u64, j as u64]);
            let fake = synthesize_tiled(model, schedule, &target.clean, guide, item_seed, opts)?;
            let name = format!("{i:04}_{j:04}.png");
            let out_path: PathBuf = ["noisy", &name].iter().collect();
            let clean_path: PathBuf = ["clean", &name].iter().collect();
            target.clean.write_png(&out.join(&clean_path))?;
            fake.write_png(&out.join(&out_path))?;
            fake.write_raw(&out.join(&out_path).with_extension("f32"))?;
            rows.push(AugmentRow {
                index: rows.len(),
                clean_path: rel(&ds.entries[i].clean),
                guidance_noisy_path: rel(&ds.entries[j].noisy),
                guidance_clean_path: rel(&ds.entries[j].clean),
                seed: item_seed,
                out_path: rel(&out_path),
            });
        }
    }
    let manifest = out.join(AUGMENT_MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok((load_dataset(out)?, rows))
}
