use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guidnoise::config::RunConfig;
use guidnoise::data::{load_dataset, make_toy_dataset, procedural_clean, PairDataset, ToyDatasetSpec};
use guidnoise::denoise_harness::{eval_denoiser, train_denoiser};
use guidnoise::image::{GuidancePair, ImagePatch};
use guidnoise::metrics::{akld, histogram_rows, noise_kld, psnr, ssim, MetricReport, MetricRow};
use guidnoise::rng::mix_seed;
use guidnoise::synthesis::{self_augment, synthesize_tiled, TileOptions};
use guidnoise::training::{load_model, run, RunPaths, Trainer, TrainingSet};
use guidnoise::Error;

#[derive(Parser)]
#[command(name = "guidnoise", version, about = "Single-pair guided noise synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; created if missing and locked for the duration of the command.
    #[arg(long)]
    out: PathBuf,
    /// Only `cpu` is supported.
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write toy train/val datasets with known noise.
    MakeToyData {
        #[command(flatten)]
        common: Common,
    },
    /// Diffusion-loss training (phase 1); resumes from `--checkpoint` when given.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Refine training (phase 2) starting from a phase-1 checkpoint.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Synthesize noisy versions of clean PNGs from one guidance pair.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        guidance_noisy: PathBuf,
        #[arg(long)]
        guidance_clean: PathBuf,
        /// A clean PNG or a directory of them.
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Cross every clean image of the training set with every guidance pair.
    SelfAugment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// KLD/AKLD/PSNR/SSIM of synthetic noise against the validation set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Generator used to synthesize; ignored when `--fake` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Existing synthetic dataset with the validation layout.
        #[arg(long)]
        fake: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the small denoiser on real data, optionally mixed with synthetic data.
    DenoiseBench {
        #[command(flatten)]
        common: Common,
        /// Synthetic dataset to mix into each batch.
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Residual histogram CSVs for plotting, per validation noise group.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fake: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

type Result<T> = std::result::Result<T, Error>;

fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidConfig(_) | Error::InvalidSigma(_) => "config",
        Error::Parse { .. } => "parse",
        Error::Shape { .. } | Error::Tensor(_) => "shape",
        Error::IndexOutOfRange { .. } => "range",
        Error::Empty(_) => "empty",
        Error::NonFinite { .. } => "non_finite",
        Error::Io { .. } => "io",
        Error::Dataset { .. } => "dataset",
        Error::Checkpoint(_) => "checkpoint",
        Error::Image { .. } => "image",
        Error::Csv(_) => "csv",
        Error::Json(_) => "json",
    }
}

/// Exclusive ownership of a run directory, released on drop.
struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::io(&path, std::io::Error::other("run directory is locked by another process"))
            } else {
                Error::io(&path, e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn threads() -> usize {
    std::env::var("GUIDNOISE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Maps `f` over `items` on up to `GUIDNOISE_THREADS` threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let n = threads().min(items.len()).max(1);
    if n == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(n);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || part.iter().enumerate().map(|(i, x)| f(c * chunk + i, x)).collect::<Result<Vec<R>>>())
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

fn resolve(common: &Common) -> Result<RunConfig> {
    if common.device != "cpu" {
        return Err(Error::InvalidConfig(format!("device {:?} is not available; only cpu is supported", common.device)));
    }
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_resolved(cfg: &RunConfig, out: &Path) -> Result<()> {
    let path = out.join("resolved.cfg");
    std::fs::write(&path, cfg.to_text()?).map_err(|e| Error::io(&path, e))
}

fn dataset(path: &Option<PathBuf>, what: &str) -> Result<PairDataset> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig(format!("data.{what} is not set")))?;
    load_dataset(p)
}

fn png_inputs(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut v: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    v.sort();
    Ok(v)
}

fn tile_opts(cfg: &RunConfig, steps: Option<usize>) -> TileOptions {
    let mut t = cfg.synth.tile_options();
    if steps.is_some() {
        t.steps = steps;
    }
    t
}

/// Validation pairs with a guidance partner from the same noise group.
fn val_items(cfg: &RunConfig) -> Result<(PairDataset, TrainingSet, Vec<usize>)> {
    let ds = dataset(&cfg.data.val, "val")?;
    let set = TrainingSet::from_dataset(&ds)?;
    let partners = (0..set.len())
        .map(|i| {
            let same: Vec<usize> = (0..set.len()).filter(|&j| set.group(j) == set.group(i)).collect();
            let k = same.iter().position(|&j| j == i).expect("item is in its own group");
            same[(k + 1) % same.len()]
        })
        .collect();
    Ok((ds, set, partners))
}

/// Synthesized counterpart of each validation item, from a checkpoint or an existing dataset.
fn fakes(cfg: &RunConfig, checkpoint: &Option<PathBuf>, fake: &Option<PathBuf>, steps: Option<usize>) -> Result<(PairDataset, TrainingSet, Vec<ImagePatch>)> {
    let (ds, set, partners) = val_items(cfg)?;
    let out = if let Some(dir) = fake {
        let f = load_dataset(dir)?;
        ds.entries
            .iter()
            .map(|e| ImagePatch::read_png(&dir.join("noisy").join(&e.name)))
            .collect::<Result<Vec<_>>>()
            .map_err(|err| match err {
                Error::Image { path, .. } => Error::Dataset {
                    path,
                    msg: format!("fake set {} lacks a validation item", f.root.display()),
                },
                other => other,
            })?
    } else {
        let ck = checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("either --checkpoint or --fake is required".into()))?;
        let (model, tc) = load_model(ck)?;
        let schedule = tc.schedule()?;
        let opts = tile_opts(cfg, steps);
        let idx: Vec<usize> = (0..set.len()).collect();
        par_map(&idx, |_, &i| {
            let p = set.pair(i);
            synthesize_tiled(&model, &schedule, &p.clean, set.pair(partners[i]), mix_seed(cfg.seed, &[i as u64]), &opts)
        })?
    };
    Ok((ds, set, out))
}

fn cmd_make_toy_data(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let d = &cfg.data;
    let specs = d.toy_specs()?;
    let sources = |split: u64| -> Result<Vec<ImagePatch>> {
        match &d.clean_sources {
            Some(dir) => png_inputs(dir)?.iter().map(|p| ImagePatch::read_png(p)).collect(),
            None => Ok((0..d.num_sources)
                .map(|k| procedural_clean(d.source_size, d.source_size, mix_seed(cfg.seed, &[split, k as u64])))
                .collect()),
        }
    };
    for (split, name, n) in [(0u64, "train", d.patches_per_spec), (1, "val", d.val_patches_per_spec)] {
        let spec = ToyDatasetSpec {
            specs: specs.clone(),
            patches_per_spec: n,
            patch_size: cfg.model.patch_size,
            seed: mix_seed(cfg.seed, &[split]),
        };
        let ds = make_toy_dataset(&common.out.join(name), &sources(split)?, &spec)?;
        println!("{name}: {} pairs in {}", ds.len(), ds.root.display());
    }
    Ok(())
}

fn train_paths(common: &Common) -> RunPaths {
    RunPaths::new(&common.out)
}

fn cmd_train(common: &Common, checkpoint: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let set = TrainingSet::from_dataset(&dataset(&cfg.data.train, "train")?)?;
    let mut trainer = match checkpoint {
        Some(p) => Trainer::load(p)?,
        None => Trainer::new(cfg.train_config())?,
    };
    let stop = trainer.config.iters_phase1;
    run(&mut trainer, &set, Some(&train_paths(common)), Some(stop))?;
    println!("phase 1 done at iteration {}: {}", trainer.iter, train_paths(common).last().display());
    Ok(())
}

fn cmd_refine(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    let set = TrainingSet::from_dataset(&dataset(&cfg.data.train, "train")?)?;
    let mut trainer = Trainer::load(checkpoint)?;
    if common.config.is_some() {
        let t = cfg.train_config();
        trainer.config.lr_phase2 = t.lr_phase2;
        trainer.config.batch_phase2 = t.batch_phase2;
        trainer.config.iters_phase2 = t.iters_phase2;
        trainer.config.loss = t.loss;
        trainer.config.validate()?;
    }
    if trainer.iter < trainer.config.iters_phase1 {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is at iteration {}, before the end of phase 1 ({})",
            trainer.iter, trainer.config.iters_phase1
        )));
    }
    let mut resolved = cfg.clone();
    resolved.train.lr_phase2 = trainer.config.lr_phase2;
    resolved.train.iters_phase2 = trainer.config.iters_phase2;
    write_resolved(&resolved, &common.out)?;
    run(&mut trainer, &set, Some(&train_paths(common)), None)?;
    println!("phase 2 done at iteration {}: {}", trainer.iter, train_paths(common).last().display());
    Ok(())
}

fn cmd_synthesize(common: &Common, checkpoint: &Path, gn: &Path, gc: &Path, clean: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let (model, tc) = load_model(checkpoint)?;
    let schedule = tc.schedule()?;
    let guidance = GuidancePair::new(ImagePatch::read_png(gn)?, ImagePatch::read_png(gc)?)?;
    let opts = tile_opts(&cfg, steps);
    let inputs = png_inputs(clean)?;
    if inputs.is_empty() {
        return Err(Error::Empty("clean inputs"));
    }
    let dir = common.out.join("synth");
    par_map(&inputs, |i, p| {
        let c = ImagePatch::read_png(p)?;
        let out = synthesize_tiled(&model, &schedule, &c, &guidance, mix_seed(cfg.seed, &[i as u64]), &opts)?;
        let name = p.file_name().expect("png path has a file name");
        out.write_png(&dir.join(name))?;
        out.write_raw(&dir.join(name).with_extension("f32"))
    })?;
    println!("{} images in {}", inputs.len(), dir.display());
    Ok(())
}

fn cmd_self_augment(common: &Common, checkpoint: &Path, steps: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let ds = dataset(&cfg.data.train, "train")?;
    let (model, tc) = load_model(checkpoint)?;
    let schedule = tc.schedule()?;
    let out = common.out.join("augmented");
    let (aug, _) = self_augment(&model, &schedule, &ds, cfg.seed, &out, cfg.synth.strategy, &tile_opts(&cfg, steps))?;
    println!("{} synthetic pairs in {}", aug.len(), out.display());
    Ok(())
}

fn cmd_evaluate(common: &Common, checkpoint: &Option<PathBuf>, fake: &Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let (ds, set, fakes) = fakes(&cfg, checkpoint, fake, steps)?;
    let generator = match (fake, checkpoint) {
        (None, Some(ck)) => Some(load_model(ck)?),
        _ => None,
    };
    let (_, _, partners) = val_items(&cfg)?;
    let opts = tile_opts(&cfg, steps);
    let idx: Vec<usize> = (0..set.len()).collect();
    let items = par_map(&idx, |_, &i| {
        let real = set.pair(i);
        let first = &fakes[i];
        // The first AKLD sample is the synthesized item itself; further samples reseed.
        let synth = |l: usize| -> Result<ImagePatch> {
            match (&generator, l) {
                (_, 0) | (None, _) => Ok(first.clone()),
                (Some((model, tc)), l) => synthesize_tiled(
                    model,
                    &tc.schedule()?,
                    &real.clean,
                    set.pair(partners[i]),
                    mix_seed(cfg.seed, &[i as u64, l as u64]),
                    &opts,
                ),
            }
        };
        Ok(MetricRow {
            item_id: ds.entries[i].name.clone(),
            kld: Some(noise_kld(real, first, &cfg.metrics)?),
            akld: Some(akld(&real.clean, &real.noisy, synth, &cfg.metrics)?),
            psnr: Some(psnr(first, &real.clean)?),
            ssim: Some(ssim(first, &real.clean)?),
        })
    })?;
    let report = MetricReport {
        items,
        config: cfg.metrics.clone(),
    };
    let path = common.out.join("report.csv");
    report.write_csv(&path)?;
    let m = report.mean();
    println!(
        "kld {:.5} akld {:.5} psnr {:.3} ssim {:.4} ({} items) -> {}",
        m.kld.unwrap_or(f64::NAN),
        m.akld.unwrap_or(f64::NAN),
        m.psnr.unwrap_or(f64::NAN),
        m.ssim.unwrap_or(f64::NAN),
        report.items.len(),
        path.display()
    );
    Ok(())
}

fn cmd_denoise_bench(common: &Common, synthetic: &Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let real = dataset(&cfg.data.train, "train")?.load_all()?;
    let val = dataset(&cfg.data.val, "val")?;
    let test: Vec<(String, GuidancePair)> = val.entries.iter().map(|e| e.name.clone()).zip(val.load_all()?).collect();
    let synth = synthetic.as_ref().map(|p| load_dataset(p)?.load_all()).transpose()?;
    let mut dc = cfg.denoise.clone();
    dc.seed = cfg.seed;
    let mut rows = Vec::new();
    for (label, extra) in [("real_only", None), ("mixed", synth.as_deref())] {
        if label == "mixed" && extra.is_none() {
            continue;
        }
        let (d, _) = train_denoiser(&dc, &real, extra, Some(&common.out.join(format!("denoise_{label}_log.csv"))))?;
        d.save(&common.out.join(format!("denoise_{label}.gnck")))?;
        let rep = eval_denoiser(&d, &test)?;
        rep.write_csv(&common.out.join(format!("denoise_{label}.csv")))?;
        let m = rep.mean();
        println!("{label}: psnr {:.3} ssim {:.4}", m.psnr.unwrap_or(f64::NAN), m.ssim.unwrap_or(f64::NAN));
        rows.push(MetricRow {
            item_id: label.to_string(),
            ..m
        });
    }
    let noisy = MetricReport {
        items: test
            .iter()
            .map(|(id, p)| {
                Ok(MetricRow {
                    item_id: id.clone(),
                    psnr: Some(psnr(&p.noisy, &p.clean)?),
                    ssim: Some(ssim(&p.noisy, &p.clean)?),
                    ..Default::default()
                })
            })
            .collect::<Result<Vec<_>>>()?,
        config: cfg.metrics.clone(),
    };
    rows.push(MetricRow {
        item_id: "noisy_input".into(),
        ..noisy.mean()
    });
    let path = common.out.join("denoise_summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn cmd_report(common: &Common, checkpoint: &Option<PathBuf>, fake: &Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let cfg = resolve(common)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_resolved(&cfg, &common.out)?;
    let (ds, set, fakes) = fakes(&cfg, checkpoint, fake, steps)?;
    let manifest = guidnoise::data::read_manifest(&ds.root).ok();
    let mut groups: std::collections::BTreeMap<usize, (Vec<f32>, Vec<f32>)> = Default::default();
    for (i, f) in fakes.iter().enumerate() {
        let g = groups.entry(set.group(i)).or_default();
        g.0.extend(set.pair(i).residual());
        g.1.extend(f.residual(&set.pair(i).clean)?);
    }
    let dir = common.out.join("histograms");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (g, (real, fake)) in &groups {
        let label = manifest
            .as_ref()
            .and_then(|rows| {
                let i = (0..set.len()).find(|&i| set.group(i) == *g)?;
                let clean = &ds.entries[i].clean;
                rows.iter().find(|r| ds.root.join(&r.clean_path) == *clean)
            })
            .map_or(format!("group{g}"), |r| format!("{}_{}", r.spec_kind, r.spec_params.replace([';', '='], "_")));
        let path = dir.join(format!("hist_{label}.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["bin_center", "real_prob", "fake_prob"])?;
        for (c, q, p) in histogram_rows(real, fake, &cfg.metrics)? {
            w.write_record([c.to_string(), q.to_string(), p.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let kld = guidnoise::metrics::residual_kld(fake, real, &cfg.metrics)?;
        println!("{label}: pooled kld {kld:.5} -> {}", path.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::MakeToyData { common } => cmd_make_toy_data(common),
        Command::Train { common, checkpoint } => cmd_train(common, checkpoint),
        Command::Refine { common, checkpoint } => cmd_refine(common, checkpoint),
        Command::Synthesize {
            common,
            checkpoint,
            guidance_noisy,
            guidance_clean,
            clean,
            steps,
        } => cmd_synthesize(common, checkpoint, guidance_noisy, guidance_clean, clean, *steps),
        Command::SelfAugment { common, checkpoint, steps } => cmd_self_augment(common, checkpoint, *steps),
        Command::Evaluate {
            common,
            checkpoint,
            fake,
            steps,
        } => cmd_evaluate(common, checkpoint, fake, *steps),
        Command::DenoiseBench { common, synthetic } => cmd_denoise_bench(common, synthetic),
        Command::Report {
            common,
            checkpoint,
            fake,
            steps,
        } => cmd_report(common, checkpoint, fake, *steps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error kind={} msg={msg:?}", kind(&e));
            ExitCode::from(if matches!(e, Error::InvalidConfig(_) | Error::Parse { .. }) { 2 } else { 1 })
        }
    }
}
