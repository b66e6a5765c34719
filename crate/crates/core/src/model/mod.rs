//! The conditional v-predictor.
//!
//! One shared encoder embeds every input stream (`x_t`, `c`, `x_r`, `c_r`).
//! The deepest guidance features pass through the noise-aware guidance
//! module to form `h`; per-block MLPs turn `(h, t)` into channel-wise affine
//! coefficients that modulate the cascade decoder.

pub(crate) mod layers;
mod params;

use guidnoise_tensor::{cat, Tensor};
use serde::{Deserialize, Serialize};

use self::layers::{Conv, GroupNorm, Linear, ResBlock};
pub use self::params::{Init, ParamId, ParamStore};
pub(crate) use self::params::Scope;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_levels: usize,
    pub layers_per_block: usize,
    pub time_embed_dim: usize,
    pub guidance_embed_dim: usize,
    pub patch_size: usize,
    /// Upper bound on group-norm groups per layer.
    pub norm_groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_channels: 32,
            num_levels: 3,
            layers_per_block: 2,
            time_embed_dim: 128,
            guidance_embed_dim: 256,
            patch_size: 32,
            norm_groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.base_channels,
            self.num_levels,
            self.time_embed_dim,
            self.guidance_embed_dim,
            self.patch_size,
            self.norm_groups,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if self.layers_per_block < 2 {
            return Err(Error::InvalidConfig(
                "layers_per_block must be >= 2 (one modulated layer plus the transition)".into(),
            ));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidConfig("time_embed_dim must be even".into()));
        }
        if !self.patch_size.is_multiple_of(1 << (self.num_levels - 1)) {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} not divisible by 2^(N-1) = {}",
                self.patch_size,
                1 << (self.num_levels - 1)
            )));
        }
        Ok(())
    }

    /// Channel width at encoder level `level` (0-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial size at encoder level `level` (0-based).
    pub fn spatial(&self, level: usize) -> usize {
        self.patch_size >> level
    }
}

/// Sinusoidal table: half sines, half cosines, `t / 10^(4k/(half-1))` for `k < half`.
pub fn sinusoidal_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let denom = (half.max(2) - 1) as f64;
    let args: Vec<f64> = (0..half)
        .map(|k| t as f64 * (-(10_000f64.ln()) * k as f64 / denom).exp())
        .collect();
    args.iter()
        .map(|a| a.sin() as f32)
        .chain(args.iter().map(|a| a.cos() as f32))
        .collect()
}

/// Intermediate features of one encoder pass, shallowest first.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub features: Vec<Tensor>,
}

impl EncoderOutput {
    /// The deepest feature map.
    pub fn z(&self) -> &Tensor {
        self.features.last().expect("encoder has at least one level")
    }

    pub fn narrow_batch(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            features: self
                .features
                .iter()
                .map(|f| f.narrow(0, start, len))
                .collect::<std::result::Result<_, _>>()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GuidanceEmbedding(pub Tensor);

/// Per-channel `(α, β)` for one decoder block, each `[B, C]`.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub alpha: Tensor,
    pub beta: Tensor,
}

/// `(1 + α) · feature + β`, broadcast over the spatial axes.
pub fn gafm_modulate(feature: &Tensor, p: &AffineParams) -> Result<Tensor> {
    let (b, c, _, _) = feature.dims4()?;
    for coeff in [&p.alpha, &p.beta] {
        if coeff.shape() != [b, c] {
            return Err(Error::shape((b, c), coeff.shape()));
        }
    }
    Ok(feature.film(&p.alpha, &p.beta)?)
}

#[derive(Debug)]
struct EncoderLevel {
    down: Option<Conv>,
    block: ResBlock,
}

#[derive(Debug)]
struct DecoderBlock {
    level: usize,
    modulated: Vec<ResBlock>,
    transition: ResBlock,
    up: Option<Conv>,
    head: Option<(GroupNorm, Conv)>,
}

#[derive(Debug)]
struct AffineMlp {
    hidden: Linear,
    out: Linear,
    channels: usize,
}

/// The full network `η(x_t, c, x_r, c_r, t) → v̂`.
#[derive(Debug)]
pub struct GuidedUNet {
    config: ModelConfig,
    store: ParamStore,
    time_mlp: (Linear, Linear),
    stem: Conv,
    encoder: Vec<EncoderLevel>,
    guidance: (Linear, Linear, Linear),
    affine: Vec<AffineMlp>,
    decoder: Vec<DecoderBlock>,
}

impl GuidedUNet {
    /// Builds a freshly initialized network; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::derived(seed, &[0x6d6f64656c]);
        let cfg = &config;
        let n = cfg.num_levels;
        let td = cfg.time_embed_dim;
        let gd = cfg.guidance_embed_dim;
        let groups = cfg.norm_groups;

        let mut root = Scope::root(&mut store, &mut rng);
        let time_mlp = {
            let mut s = root.pp("time");
            (Linear::new(&mut s.pp("fc1"), td, td, false)?, Linear::new(&mut s.pp("fc2"), td, td, false)?)
        };

        let (stem, encoder) = {
            let mut s = root.pp("enc");
            let stem = Conv::new(&mut s.pp("stem"), cfg.in_channels, cfg.channels(0), 3, 1)?;
            let mut levels = Vec::with_capacity(n);
            for l in 0..n {
                let mut ls = s.pp(format!("l{l}"));
                let down = if l > 0 {
                    Some(Conv::new(&mut ls.pp("down"), cfg.channels(l - 1), cfg.channels(l), 3, 2)?)
                } else {
                    None
                };
                let block = ResBlock::new(&mut ls.pp("block"), cfg.channels(l), cfg.channels(l), td, groups)?;
                levels.push(EncoderLevel { down, block });
            }
            (stem, levels)
        };

        let guidance = {
            let mut s = root.pp("tau");
            (
                Linear::new(&mut s.pp("fc1"), 2 * cfg.channels(n - 1), gd, false)?,
                Linear::new(&mut s.pp("time"), td, gd, false)?,
                Linear::new(&mut s.pp("fc2"), gd, gd, false)?,
            )
        };

        let mut affine = Vec::with_capacity(n);
        for i in 1..=n {
            let level = n - i;
            let channels = cfg.channels(level);
            let mut s = root.pp(format!("affine{i}"));
            affine.push(AffineMlp {
                hidden: Linear::new(&mut s.pp("fc1"), gd + td, td, false)?,
                out: Linear::new(&mut s.pp("fc2"), td, 2 * channels, true)?,
                channels,
            });
        }

        let mut decoder = Vec::with_capacity(n);
        for i in 1..=n {
            let level = n - i;
            let ch = cfg.channels(level);
            let mut s = root.pp(format!("dec{i}"));
            let mut modulated = Vec::with_capacity(cfg.layers_per_block - 1);
            for j in 1..cfg.layers_per_block {
                modulated.push(ResBlock::new(&mut s.pp(format!("layer{j}")), ch + 2 * ch, ch, td, groups)?);
            }
            let transition = ResBlock::new(&mut s.pp("transition"), ch, ch, gd + td, groups)?;
            let (up, head) = if level > 0 {
                (Some(Conv::new(&mut s.pp("up"), ch, cfg.channels(level - 1), 3, 1)?), None)
            } else {
                let norm = GroupNorm::new(&mut s.pp("head_norm"), ch, groups)?;
                let conv = Conv::new(&mut s.pp("head"), ch, cfg.in_channels, 3, 1)?;
                (None, Some((norm, conv)))
            };
            decoder.push(DecoderBlock {
                level,
                modulated,
                transition,
                up,
                head,
            });
        }
        drop(root);

        Ok(Self {
            config,
            store,
            time_mlp,
            stem,
            encoder,
            guidance,
            affine,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_image(&self, x: &Tensor) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        let p = self.config.patch_size;
        if c != self.config.in_channels || h != p || w != p {
            return Err(Error::shape((b, self.config.in_channels, p, p), x.shape()));
        }
        Ok(b)
    }

    /// `[B, time_embed_dim]` time embedding for per-example steps.
    pub fn time_embed(&self, t: &[usize]) -> Result<Tensor> {
        let dim = self.config.time_embed_dim;
        let table: Vec<f32> = t.iter().flat_map(|&t| sinusoidal_embedding(t, dim)).collect();
        let x = Tensor::new(table, &[t.len(), dim])?;
        let x = self.time_mlp.0.forward(&self.store, &x)?.silu();
        self.time_mlp.1.forward(&self.store, &x)
    }

    /// Shared encoder pass; `temb` must have one row per image.
    pub fn encode(&self, img: &Tensor, temb: &Tensor) -> Result<EncoderOutput> {
        let b = self.check_image(img)?;
        if temb.shape() != [b, self.config.time_embed_dim] {
            return Err(Error::shape((b, self.config.time_embed_dim), temb.shape()));
        }
        let p = &self.store;
        let mut x = self.stem.forward(p, img)?;
        let mut features = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            if let Some(down) = &level.down {
                x = down.forward(p, &x)?;
            }
            x = level.block.forward(p, &x, temb)?;
            features.push(x.clone());
        }
        Ok(EncoderOutput { features })
    }

    /// Noise-aware guidance module over the ordered concatenation `(z_xr, z_cr)`.
    pub fn guidance_from_latents(&self, z_xr: &Tensor, z_cr: &Tensor, temb: &Tensor) -> Result<GuidanceEmbedding> {
        let p = &self.store;
        let pooled = cat(&[z_xr, z_cr], 1)?.spatial_mean()?;
        let (fc1, time, fc2) = &self.guidance;
        let x = fc1.forward(p, &pooled)?.add(&time.forward(p, &temb.silu())?)?.silu();
        Ok(GuidanceEmbedding(fc2.forward(p, &x)?))
    }

    pub fn guidance_embed(&self, x_r: &Tensor, c_r: &Tensor, temb: &Tensor) -> Result<GuidanceEmbedding> {
        let b = self.check_image(x_r)?;
        self.check_image(c_r)?;
        let both = cat(&[x_r, c_r], 0)?;
        let enc = self.encode(&both, &cat(&[temb, temb], 0)?)?;
        let z = enc.z();
        self.guidance_from_latents(&z.narrow(0, 0, b)?, &z.narrow(0, b, b)?, temb)
    }

    /// `(α_i, β_i) = M_i(h, t)` for decoder block `i ∈ 1..=N` (1 is the deepest).
    pub fn affine_params(&self, h: &GuidanceEmbedding, temb: &Tensor, i: usize) -> Result<AffineParams> {
        let n = self.config.num_levels;
        if i == 0 || i > n {
            return Err(Error::IndexOutOfRange { index: i, max: n });
        }
        let mlp = &self.affine[i - 1];
        let x = cat(&[&h.0, temb], 1)?;
        let x = mlp.hidden.forward(&self.store, &x)?.silu();
        let out = mlp.out.forward(&self.store, &x)?;
        Ok(AffineParams {
            alpha: out.narrow(1, 0, mlp.channels)?,
            beta: out.narrow(1, mlp.channels, mlp.channels)?,
        })
    }

    /// Cascade decoder. Skip features are matched to each block by resolution.
    pub fn decode(
        &self,
        z: &Tensor,
        f_xt: &[Tensor],
        f_c: &[Tensor],
        h: &GuidanceEmbedding,
        temb: &Tensor,
    ) -> Result<Tensor> {
        self.decode_inner(z, f_xt, f_c, h, temb, true)
    }

    /// The decoder with every modulation replaced by the identity.
    pub fn decode_unmodulated(
        &self,
        z: &Tensor,
        f_xt: &[Tensor],
        f_c: &[Tensor],
        h: &GuidanceEmbedding,
        temb: &Tensor,
    ) -> Result<Tensor> {
        self.decode_inner(z, f_xt, f_c, h, temb, false)
    }

    fn decode_inner(
        &self,
        z: &Tensor,
        f_xt: &[Tensor],
        f_c: &[Tensor],
        h: &GuidanceEmbedding,
        temb: &Tensor,
        modulate: bool,
    ) -> Result<Tensor> {
        let n = self.config.num_levels;
        if f_xt.len() != n || f_c.len() != n {
            return Err(Error::shape(n, (f_xt.len(), f_c.len())));
        }
        let p = &self.store;
        let cond = cat(&[&h.0, temb], 1)?;
        let mut g = z.clone();
        for (idx, block) in self.decoder.iter().enumerate() {
            let (fx, fc) = (&f_xt[block.level], &f_c[block.level]);
            if fx.shape() != g.shape() || fc.shape() != g.shape() {
                return Err(Error::shape(g.shape(), (fx.shape(), fc.shape())));
            }
            let params = if modulate {
                Some(self.affine_params(h, temb, idx + 1)?)
            } else {
                None
            };
            for layer in &block.modulated {
                let x = cat(&[&g, fx, fc], 1)?;
                g = layer.forward(p, &x, temb)?;
                if let Some(p) = &params {
                    g = gafm_modulate(&g, p)?;
                }
            }
            g = block.transition.forward(p, &g, &cond)?;
            if let Some(up) = &block.up {
                g = up.forward(p, &g.upsample2()?)?;
            }
            if let Some((norm, conv)) = &block.head {
                g = conv.forward(p, &norm.forward(p, &g)?.silu())?;
            }
        }
        Ok(g)
    }

    /// `v̂ = η(x_t, c, x_r, c_r, t)` for a batch; `t` holds one step per example.
    pub fn predict(&self, x_t: &Tensor, c: &Tensor, x_r: &Tensor, c_r: &Tensor, t: &[usize]) -> Result<Tensor> {
        let b = self.check_image(x_t)?;
        for other in [c, x_r, c_r] {
            if self.check_image(other)? != b {
                return Err(Error::shape(x_t.shape(), other.shape()));
            }
        }
        if t.len() != b {
            return Err(Error::shape(b, t.len()));
        }
        let temb = self.time_embed(t)?;
        // All four streams share the encoder, so run them as one batch.
        let stacked = cat(&[x_t, c, x_r, c_r], 0)?;
        let temb4 = cat(&[&temb, &temb, &temb, &temb], 0)?;
        let enc = self.encode(&stacked, &temb4)?;
        let (e_xt, e_c, e_xr, e_cr) = (
            enc.narrow_batch(0, b)?,
            enc.narrow_batch(b, b)?,
            enc.narrow_batch(2 * b, b)?,
            enc.narrow_batch(3 * b, b)?,
        );
        let h = self.guidance_from_latents(e_xr.z(), e_cr.z(), &temb)?;
        self.decode(e_xt.z(), &e_xt.features, &e_c.features, &h, &temb)
    }
}
