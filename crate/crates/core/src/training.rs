//! Two-phase optimization: plain diffusion-loss training, then refine
//! training through the last `t_split` steps of a sampled trajectory.
//!
//! Images enter the network rescaled from [0, 1] to [-1, 1]; the refine loss
//! is computed back in [0, 1] pixel units.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use guidnoise_tensor::{no_grad, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Container, TensorRecord};
use crate::data::PairDataset;
use crate::error::{Error, Result};
use crate::image::{GuidancePair, ImagePatch};
use crate::losses::{diffusion_loss, refine_loss, total_loss, LossWeights};
use crate::model::{GuidedUNet, ModelConfig};
use crate::optim::{clip_scale, grad_norm, AdamW, AdamWConfig};
use crate::rng::{RngState, SeededRng};
use crate::schedule::{DiffusionSchedule, ScheduleKind};

pub const LOG_HEADER: &str = "iter,phase,loss_diffusion,loss_refine,loss_total,seconds";

/// How the guidance pair is drawn for a training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceSampling {
    /// Any pair of the training split, uniformly.
    #[default]
    Uniform,
    /// Uniformly among pairs sharing the target's noise group.
    SameGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_phase1: usize,
    pub batch_phase2: usize,
    pub iters_phase1: u64,
    pub iters_phase2: u64,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub steps: usize,
    /// DDIM stochasticity; 0 is the deterministic sampler.
    pub eta: f64,
    pub guidance: GuidanceSampling,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_phase1: 1e-5,
            lr_phase2: 1e-5,
            batch_phase1: 4,
            batch_phase2: 1,
            iters_phase1: 20_000,
            iters_phase2: 5_000,
            adamw: AdamWConfig::default(),
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
            steps: 50,
            eta: 0.0,
            guidance: GuidanceSampling::Uniform,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Iteration counts used for full-scale runs.
    pub fn full_scale() -> Self {
        Self {
            iters_phase1: 300_000,
            iters_phase2: 50_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lr_phase1 > 0.0 && self.lr_phase2 > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.batch_phase1 == 0 || self.batch_phase2 == 0 {
            return bad("batch sizes must be positive");
        }
        if self.iters_phase1 + self.iters_phase2 == 0 {
            return bad("at least one training iteration is required");
        }
        if self.steps < 2 {
            return bad("steps must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad("eta must lie in [0, 1]");
        }
        if self.clip_norm < 0.0 {
            return bad("clip_norm must be >= 0");
        }
        self.loss.validate(self.steps)?;
        self.model.validate()
    }

    pub fn total_iters(&self) -> u64 {
        self.iters_phase1 + self.iters_phase2
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::build(self.steps, ScheduleKind::default())?.with_eta(self.eta)
    }
}

/// In-memory training pairs with an optional noise-group label per pair.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pairs: Vec<GuidancePair>,
    groups: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl TrainingSet {
    /// Every pair in one group.
    pub fn new(pairs: Vec<GuidancePair>) -> Result<Self> {
        let groups = vec![0; pairs.len()];
        Self::with_groups(pairs, groups)
    }

    pub fn with_groups(pairs: Vec<GuidancePair>, groups: Vec<usize>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if groups.len() != pairs.len() {
            return Err(Error::shape(pairs.len(), groups.len()));
        }
        let mut members = vec![Vec::new(); groups.iter().max().map_or(0, |m| m + 1)];
        for (i, &g) in groups.iter().enumerate() {
            members[g].push(i);
        }
        Ok(Self { pairs, groups, members })
    }

    /// Loads every pair; groups come from the manifest's noise spec when present.
    pub fn from_dataset(ds: &PairDataset) -> Result<Self> {
        let pairs = ds.load_all()?;
        let manifest = ds.root.join(crate::data::MANIFEST);
        if !manifest.exists() {
            return Self::new(pairs);
        }
        let rows = crate::data::read_manifest(&ds.root)?;
        let by_clean: BTreeMap<PathBuf, String> = rows
            .iter()
            .map(|r| (ds.root.join(&r.clean_path), format!("{}:{}", r.spec_kind, r.spec_params)))
            .collect();
        let mut labels: BTreeMap<String, usize> = BTreeMap::new();
        let mut groups = Vec::with_capacity(pairs.len());
        for e in &ds.entries {
            let key = by_clean.get(&e.clean).cloned().unwrap_or_default();
            let next = labels.len();
            groups.push(*labels.entry(key).or_insert(next));
        }
        Self::with_groups(pairs, groups)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, i: usize) -> &GuidancePair {
        &self.pairs[i]
    }

    pub fn group(&self, i: usize) -> usize {
        self.groups[i]
    }
}

/// One training item: target `(c, x)` and guidance `(x_r, c_r)`, patch-sized.
#[derive(Clone, Debug)]
pub struct Example {
    pub clean: ImagePatch,
    pub noisy: ImagePatch,
    pub guide_noisy: ImagePatch,
    pub guide_clean: ImagePatch,
    pub target_id: usize,
    pub guide_id: usize,
}

fn random_crop(pair: &GuidancePair, size: usize, rng: &mut SeededRng) -> Result<(ImagePatch, ImagePatch)> {
    let (h, w, _) = pair.clean.shape();
    if h < size || w < size {
        return Err(Error::InvalidConfig(format!("pair {h}x{w} smaller than patch size {size}")));
    }
    let top = rng.below(h - size + 1);
    let left = rng.below(w - size + 1);
    Ok((pair.clean.crop(top, left, size, size)?, pair.noisy.crop(top, left, size, size)?))
}

/// Draws a target pair and an independent guidance pair, each cropped to `patch`.
pub fn sample_training_example(
    set: &TrainingSet,
    strategy: GuidanceSampling,
    patch: usize,
    rng: &mut SeededRng,
) -> Result<Example> {
    if set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let target_id = rng.below(set.len());
    let guide_id = match strategy {
        GuidanceSampling::Uniform => rng.below(set.len()),
        GuidanceSampling::SameGroup => {
            let m = &set.members[set.groups[target_id]];
            m[rng.below(m.len())]
        }
    };
    let (clean, noisy) = random_crop(&set.pairs[target_id], patch, rng)?;
    let (guide_clean, guide_noisy) = random_crop(&set.pairs[guide_id], patch, rng)?;
    Ok(Example {
        clean,
        noisy,
        guide_noisy,
        guide_clean,
        target_id,
        guide_id,
    })
}

/// `[0, 1]` pixels to the network's `[-1, 1]` range.
pub fn to_model_space(patches: &[&ImagePatch]) -> Result<Tensor> {
    Ok(ImagePatch::batch_to_tensor(patches)?.affine(2.0, -1.0))
}

pub fn from_model_space(t: &Tensor) -> Tensor {
    t.affine(0.5, 0.5)
}

struct Conditioning {
    c: Tensor,
    x_r: Tensor,
    c_r: Tensor,
}

fn conditioning(batch: &[Example]) -> Result<(Tensor, Conditioning)> {
    let pick = |f: fn(&Example) -> &ImagePatch| to_model_space(&batch.iter().map(f).collect::<Vec<_>>());
    Ok((
        pick(|e| &e.noisy)?,
        Conditioning {
            c: pick(|e| &e.clean)?,
            x_r: pick(|e| &e.guide_noisy)?,
            c_r: pick(|e| &e.guide_clean)?,
        },
    ))
}

/// Samples from `x_t` at step T down to `x̂_0` and scores it with the refine loss.
///
/// Only the last `w.t_split` predictions are recorded for backpropagation;
/// `rng` supplies step noise when the schedule is stochastic. Returns the
/// loss and the number of tracked predictions.
pub fn refine_objective(
    model: &GuidedUNet,
    schedule: &DiffusionSchedule,
    batch: &[Example],
    x_t: Tensor,
    w: &LossWeights,
    rng: &mut SeededRng,
) -> Result<(Tensor, usize)> {
    let (x0, cond) = conditioning(batch)?;
    if x_t.shape() != x0.shape() {
        return Err(Error::shape(x0.shape(), x_t.shape()));
    }
    let b = x0.shape()[0];
    let mut x = x_t;
    let mut tracked = 0;
    for t in (1..=schedule.steps()).rev() {
        let track = t <= w.t_split;
        let _guard = (!track).then(no_grad);
        let v_hat = model.predict(&x, &cond.c, &cond.x_r, &cond.c_r, &vec![t; b])?;
        if track {
            tracked += 1;
        }
        let noise = if schedule.sigma(t) > 0.0 {
            Some(Tensor::new(rng.gaussian_vec(x.numel()), x.shape())?)
        } else {
            None
        };
        x = schedule.ddim_step_v(&x, &v_hat, t, t - 1, noise.as_ref())?;
    }
    let loss = refine_loss(&from_model_space(&x), &from_model_space(&x0), &from_model_space(&cond.c), w)?;
    Ok((loss, tracked))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iter: u64,
    pub phase: u8,
    pub loss_diffusion: f32,
    pub loss_refine: f32,
    pub loss_total: f32,
    /// Predictor evaluations recorded in the gradient graph.
    pub tracked_predicts: usize,
}

/// Model, optimizer and RNG stream of one training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: GuidedUNet,
    pub schedule: DiffusionSchedule,
    pub opt: AdamW,
    pub rng: SeededRng,
    /// Completed iterations.
    pub iter: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = GuidedUNet::new(config.model.clone(), config.seed)?;
        let opt = AdamW::new(config.adamw.clone(), model.params());
        Ok(Self {
            schedule: config.schedule()?,
            rng: SeededRng::derived(config.seed, &[0x747261696e]),
            opt,
            model,
            config,
            iter: 0,
        })
    }

    /// Phase of the next iteration.
    pub fn phase(&self) -> u8 {
        if self.iter < self.config.iters_phase1 {
            1
        } else {
            2
        }
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.config.total_iters()
    }

    fn apply(&mut self, loss: &Tensor, lr: f64) -> Result<()> {
        let grads = loss.backward()?;
        let scale = clip_scale(grad_norm(self.model.params(), &grads), self.config.clip_norm);
        self.opt.step(self.model.params_mut(), &grads, lr, scale)
    }

    fn non_finite(&self, phase: u8, t: Vec<usize>, items: Vec<usize>) -> Error {
        Error::NonFinite {
            iter: self.iter + 1,
            phase,
            t,
            items,
        }
    }

    /// Random-t diffusion loss on a batch, recorded for backpropagation.
    fn diffusion_term(&mut self, x0: &Tensor, cond: &Conditioning) -> Result<(Tensor, Vec<usize>)> {
        let b = x0.shape()[0];
        let steps = self.schedule.steps();
        let t: Vec<usize> = (0..b).map(|_| self.rng.inclusive(1, steps)).collect();
        let eps = Tensor::new(self.rng.gaussian_vec(x0.numel()), x0.shape())?;
        let per = x0.numel() / b;
        let (mut xt, mut v) = (Vec::with_capacity(x0.numel()), Vec::with_capacity(x0.numel()));
        for (i, &ti) in t.iter().enumerate() {
            let a = self.schedule.alpha_bar(ti);
            let (sa, sb) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
            let x = &x0.data()[i * per..(i + 1) * per];
            let e = &eps.data()[i * per..(i + 1) * per];
            xt.extend(x.iter().zip(e).map(|(x, e)| sa * x + sb * e));
            v.extend(x.iter().zip(e).map(|(x, e)| sa * e - sb * x));
        }
        let x_t = Tensor::new(xt, x0.shape())?;
        let v = Tensor::new(v, x0.shape())?;
        let v_hat = self.model.predict(&x_t, &cond.c, &cond.x_r, &cond.c_r, &t)?;
        Ok((diffusion_loss(&v_hat, &v)?, t))
    }

    /// One diffusion-loss update on `batch`; returns the loss.
    pub fn phase1_step(&mut self, batch: &[Example]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let (x0, cond) = conditioning(batch)?;
        let (loss, t) = self.diffusion_term(&x0, &cond)?;
        let value = loss.item();
        if !value.is_finite() {
            return Err(self.non_finite(1, t, batch.iter().map(|e| e.target_id).collect()));
        }
        self.apply(&loss, self.config.lr_phase1)?;
        Ok(value)
    }

    /// One refine update: diffusion term plus λ·refine loss on the sampled output.
    pub fn phase2_step(&mut self, batch: &[Example]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let w = self.config.loss.clone();
        let (x0, cond) = conditioning(batch)?;
        let x_t = Tensor::new(self.rng.gaussian_vec(x0.numel()), x0.shape())?;
        let (l_refine, tracked) = refine_objective(&self.model, &self.schedule, batch, x_t, &w, &mut self.rng)?;
        let (l_diff, t) = self.diffusion_term(&x0, &cond)?;
        let total = total_loss(&l_diff, &l_refine, &w)?;
        let report = StepReport {
            iter: self.iter + 1,
            phase: 2,
            loss_diffusion: l_diff.item(),
            loss_refine: l_refine.item(),
            loss_total: total.item(),
            tracked_predicts: tracked,
        };
        if !report.loss_total.is_finite() {
            return Err(self.non_finite(2, t, batch.iter().map(|e| e.target_id).collect()));
        }
        self.apply(&total, self.config.lr_phase2)?;
        Ok(report)
    }

    /// Draws the next batch and runs one iteration of the current phase.
    pub fn step(&mut self, set: &TrainingSet) -> Result<StepReport> {
        let phase = self.phase();
        let n = if phase == 1 {
            self.config.batch_phase1
        } else {
            self.config.batch_phase2
        };
        let patch = self.config.model.patch_size;
        let batch = (0..n)
            .map(|_| sample_training_example(set, self.config.guidance, patch, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let report = if phase == 1 {
            let loss = self.phase1_step(&batch)?;
            StepReport {
                iter: self.iter + 1,
                phase: 1,
                loss_diffusion: loss,
                loss_refine: 0.0,
                loss_total: loss,
                tracked_predicts: 1,
            }
        } else {
            self.phase2_step(&batch)?
        };
        self.iter += 1;
        Ok(report)
    }

    pub fn to_container(&self) -> Result<Container> {
        let meta = serde_json::to_value(CheckpointMeta {
            kind: "train".into(),
            iter: self.iter,
            adam_step: self.opt.step,
            rng: Some(self.rng.state()),
            config: self.config.clone(),
        })?;
        let mut tensors = Vec::with_capacity(3 * self.model.params().len());
        for (i, (name, shape, data)) in self.model.params().export().into_iter().enumerate() {
            for (prefix, d) in [("adam_m/", &self.opt.m[i]), ("adam_v/", &self.opt.v[i])] {
                tensors.push(TensorRecord {
                    name: format!("{prefix}{name}"),
                    shape: shape.clone(),
                    data: d.clone(),
                });
            }
            tensors.push(TensorRecord {
                name: format!("param/{name}"),
                shape,
                data,
            });
        }
        Ok(Container { meta, tensors })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let mut t = Self::new(meta.config)?;
        t.model.params_mut().import(&section(c, "param/"))?;
        let (m, v) = (section(c, "adam_m/"), section(c, "adam_v/"));
        let names: Vec<String> = t.model.params().names().map(str::to_string).collect();
        for (i, name) in names.iter().enumerate() {
            for (src, dst) in [(&m, &mut t.opt.m[i]), (&v, &mut t.opt.v[i])] {
                match src.get(name) {
                    Some((_, d)) if d.len() == dst.len() => dst.clone_from(d),
                    _ => return Err(Error::Checkpoint(format!("optimizer state for {name} missing or misshapen"))),
                }
            }
        }
        t.opt.step = meta.adam_step;
        t.iter = meta.iter;
        if let Some(state) = &meta.rng {
            t.rng = SeededRng::from_state(state).ok_or_else(|| Error::Checkpoint("bad rng state".into()))?;
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    iter: u64,
    adam_step: u64,
    rng: Option<RngState>,
    config: TrainConfig,
}

fn section(c: &Container, prefix: &str) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
    c.tensors
        .iter()
        .filter_map(|t| {
            t.name
                .strip_prefix(prefix)
                .map(|n| (n.to_string(), (t.shape.clone(), t.data.clone())))
        })
        .collect()
}

/// Loads a network from any checkpoint written by [`Trainer`].
pub fn load_model(path: &Path) -> Result<(GuidedUNet, TrainConfig)> {
    let c = Container::read(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::Checkpoint(format!("{}: metadata: {e}", path.display())))?;
    let mut model = GuidedUNet::new(meta.config.model.clone(), meta.config.seed)?;
    model.params_mut().import(&section(&c, "param/"))?;
    Ok((model, meta.config))
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.csv")
    }

    pub fn checkpoint(&self, iter: u64) -> PathBuf {
        self.dir.join(format!("ckpt_{iter:07}.gnck"))
    }

    /// Last checkpoint of phase 1.
    pub fn phase1(&self) -> PathBuf {
        self.dir.join("phase1.gnck")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last.gnck")
    }
}

/// Runs the trainer until it is done or `until` iterations have completed.
///
/// With `paths`, appends to the CSV log and writes checkpoints at the
/// configured cadence, at the phase boundary, and at the end.
pub fn run(trainer: &mut Trainer, set: &TrainingSet, paths: Option<&RunPaths>, until: Option<u64>) -> Result<Vec<StepReport>> {
    let stop = until.unwrap_or(u64::MAX).min(trainer.config.total_iters());
    let mut log = match paths {
        Some(p) => {
            std::fs::create_dir_all(&p.dir).map_err(|e| Error::io(&p.dir, e))?;
            let path = p.log();
            let fresh = !path.exists() || trainer.iter == 0;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((std::io::BufWriter::new(f), path))
        }
        None => None,
    };
    let start = Instant::now();
    let mut reports = Vec::new();
    while trainer.iter < stop {
        let r = trainer.step(set)?;
        if let Some((f, path)) = log.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{:.3}",
                r.iter,
                r.phase,
                r.loss_diffusion,
                r.loss_refine,
                r.loss_total,
                start.elapsed().as_secs_f64()
            )
            .map_err(|e| Error::io(&*path, e))?;
        }
        if r.iter % 500 == 0 {
            log::info!("iter {} phase {} loss {:.5}", r.iter, r.phase, r.loss_total);
        }
        if let Some(p) = paths {
            let every = trainer.config.checkpoint_every;
            if every > 0 && r.iter % every == 0 {
                trainer.save(&p.checkpoint(r.iter))?;
            }
            if r.iter == trainer.config.iters_phase1 {
                trainer.save(&p.phase1())?;
            }
        }
        reports.push(r);
    }
    if let Some((mut f, path)) = log {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(p) = paths {
        trainer.save(&p.last())?;
    }
    Ok(reports)
}

/// Trains from scratch on `set` per `config`.
pub fn train(config: TrainConfig, set: &TrainingSet, paths: Option<&RunPaths>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config)?;
    run(&mut trainer, set, paths, None)?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::procedural_clean;

    pub(crate) fn micro_config() -> TrainConfig {
        TrainConfig {
            lr_phase1: 2e-3,
            lr_phase2: 1e-3,
            iters_phase1: 4,
            iters_phase2: 2,
            steps: 6,
            model: ModelConfig {
                base_channels: 4,
                num_levels: 2,
                time_embed_dim: 8,
                guidance_embed_dim: 8,
                patch_size: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn toy_set(n: usize) -> TrainingSet {
        let mut rng = SeededRng::new(5);
        let pairs = (0..n)
            .map(|i| {
                let clean = procedural_clean(12, 12, i as u64);
                let noisy = crate::data::apply_toy_noise(&clean, &crate::data::ToyNoiseSpec::Awgn { sigma: 20.0 }, &mut rng).unwrap();
                GuidancePair::new(noisy, clean).unwrap()
            })
            .collect();
        TrainingSet::new(pairs).unwrap()
    }

    #[test]
    fn single_pair_guides_itself() {
        let set = toy_set(1);
        let mut rng = SeededRng::new(0);
        for _ in 0..5 {
            let e = sample_training_example(&set, GuidanceSampling::Uniform, 8, &mut rng).unwrap();
            assert_eq!((e.target_id, e.guide_id), (0, 0));
        }
    }

    #[test]
    fn same_group_sampling_stays_in_group() {
        let set = toy_set(6);
        let set = TrainingSet::with_groups((0..6).map(|i| set.pair(i).clone()).collect(), vec![0, 1, 0, 1, 2, 2]).unwrap();
        let mut rng = SeededRng::new(1);
        for _ in 0..200 {
            let e = sample_training_example(&set, GuidanceSampling::SameGroup, 8, &mut rng).unwrap();
            assert_eq!(set.group(e.target_id), set.group(e.guide_id));
        }
    }

    #[test]
    fn phase2_tracks_exactly_t_split_predictions() {
        let set = toy_set(2);
        for t_split in [1, 2, 6] {
            let mut cfg = micro_config();
            cfg.iters_phase1 = 0;
            cfg.loss.t_split = t_split;
            let mut tr = Trainer::new(cfg).unwrap();
            let r = tr.step(&set).unwrap();
            assert_eq!((r.phase, r.tracked_predicts), (2, t_split));
            assert!(r.loss_refine >= 0.0 && r.loss_diffusion >= 0.0);
            let want = r.loss_diffusion + 0.1 * r.loss_refine;
            assert!((r.loss_total - want).abs() < 1e-5 * want.max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let set = toy_set(2);
        let mut tr = Trainer::new(micro_config()).unwrap();
        run(&mut tr, &set, None, Some(3)).unwrap();
        let back = Trainer::from_container(&Container::decode(&tr.to_container().unwrap().encode().unwrap()).unwrap()).unwrap();
        assert_eq!(back.iter, 3);
        assert_eq!(back.opt, tr.opt);
        assert_eq!(back.rng.state(), tr.rng.state());
        assert_eq!(back.model.params().export(), tr.model.params().export());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = micro_config();
        c.lr_phase1 = 0.0;
        assert!(Trainer::new(c).is_err());
        let mut c = micro_config();
        c.loss.t_split = 7;
        assert!(Trainer::new(c).is_err());
        let mut c = micro_config();
        c.iters_phase1 = 0;
        c.iters_phase2 = 0;
        assert!(Trainer::new(c).is_err());
    }
}
