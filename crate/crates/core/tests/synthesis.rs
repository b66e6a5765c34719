use std::sync::OnceLock;

use guidnoise::data::{apply_toy_noise, make_toy_dataset, procedural_clean, ToyDatasetSpec, ToyNoiseSpec};
use guidnoise::image::{GuidancePair, ImagePatch};
use guidnoise::model::{GuidedUNet, ModelConfig};
use guidnoise::rng::SeededRng;
use guidnoise::schedule::DiffusionSchedule;
use guidnoise::synthesis::{
    self_augment, synthesize, synthesize_tiled, tile_origins, AugmentStrategy, SynthesisRequest, TileOptions, AUGMENT_MANIFEST,
};
use guidnoise::training::{train, TrainConfig, TrainingSet};

const SIGMA: f32 = 25.0;

fn noisy_pair(clean: ImagePatch, seed: u64) -> GuidancePair {
    let mut rng = SeededRng::new(seed);
    let noisy = apply_toy_noise(&clean, &ToyNoiseSpec::Awgn { sigma: SIGMA as f64 }, &mut rng).unwrap();
    GuidancePair::new(noisy, clean).unwrap()
}

fn gray(h: usize, w: usize) -> ImagePatch {
    ImagePatch::filled(h, w, 3, 0.5)
}

/// A micro model trained briefly on AWGN pairs, shared across tests.
fn trained() -> &'static (GuidedUNet, DiffusionSchedule) {
    static MODEL: OnceLock<(GuidedUNet, DiffusionSchedule)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let pairs = (0..6).map(|i| noisy_pair(procedural_clean(16, 16, 50 + i), 60 + i)).collect();
        let cfg = TrainConfig {
            lr_phase1: 3e-3,
            iters_phase1: 400,
            iters_phase2: 0,
            steps: 10,
            seed: 8,
            model: ModelConfig {
                base_channels: 4,
                num_levels: 2,
                time_embed_dim: 8,
                guidance_embed_dim: 8,
                patch_size: 8,
                norm_groups: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let schedule = cfg.schedule().unwrap();
        let tr = train(cfg, &TrainingSet::new(pairs).unwrap(), None).unwrap();
        (tr.model, schedule)
    })
}

fn std(v: &[f32]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[test]
fn same_seed_is_bitwise_reproducible() {
    let (m, s) = trained();
    let guide = noisy_pair(gray(8, 8), 1);
    let req = SynthesisRequest::new(procedural_clean(8, 8, 2), guide, 77);
    let a = synthesize(m, s, &req).unwrap();
    assert_eq!(a.shape(), (8, 8, 3));
    let b = synthesize(m, s, &req).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let c = synthesize(m, s, &SynthesisRequest { seed: 78, ..req }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn exact_tile_equals_direct_synthesis() {
    let (m, s) = trained();
    let guide = noisy_pair(gray(8, 8), 2);
    let clean = procedural_clean(8, 8, 3);
    let opts = TileOptions {
        overlap: 2,
        ..Default::default()
    };
    let tiled = synthesize_tiled(m, s, &clean, &guide, 5, &opts).unwrap();
    let seed = guidnoise::rng::mix_seed(5, &[0, 0]);
    assert_eq!(tiled, synthesize(m, s, &SynthesisRequest::new(clean, guide, seed)).unwrap());
}

#[test]
fn tile_grid_covers_image() {
    let ys = tile_origins(64, 32, 8);
    assert_eq!(ys.len() * ys.len(), 9);
    assert_eq!(*ys.last().unwrap() + 32, 64);
    for w in ys.windows(2) {
        assert!(w[1] - w[0] <= 32 - 8);
    }
}

#[test]
fn tiled_output_has_no_seams() {
    let (m, s) = trained();
    let guide = noisy_pair(gray(8, 8), 3);
    let (h, w) = (20, 20);
    let clean = gray(h, w);
    let opts = TileOptions {
        overlap: 2,
        ..Default::default()
    };
    let out = synthesize_tiled(m, s, &clean, &guide, 9, &opts).unwrap();
    let r = out.residual(&clean).unwrap();
    // Mean absolute horizontal step between columns x and x + 1.
    let step = |x: usize| {
        let mut acc = 0.0;
        for y in 0..h {
            for c in 0..3 {
                acc += (r[(y * w + x + 1) * 3 + c] - r[(y * w + x) * 3 + c]).abs() as f64;
            }
        }
        acc / (3 * h) as f64
    };
    let steps: Vec<f64> = (0..w - 1).map(step).collect();
    let mut sorted = steps.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let origins = tile_origins(w, 8, 2);
    for &o in &origins[1..] {
        for x in [o - 1, o + 1] {
            assert!(steps[x] < 3.0 * median, "seam near column {x}: {} vs median {median}", steps[x]);
        }
    }
}

#[test]
fn synthetic_noise_level_tracks_guidance() {
    let (m, s) = trained();
    let guide = noisy_pair(gray(8, 8), 4);
    let target = std(&guide.residual());
    let clean = gray(16, 16);
    let out = synthesize_tiled(m, s, &clean, &guide, 12, &TileOptions { overlap: 2, ..Default::default() }).unwrap();
    let got = std(&out.residual(&clean).unwrap());
    assert!((0.5 * target..=2.0 * target).contains(&got), "residual std {got} vs guidance {target}");
}

#[test]
fn self_augment_crosses_every_pair() {
    let (m, s) = trained();
    let dir = tempfile::tempdir().unwrap();
    let sources: Vec<_> = (0..5).map(|i| procedural_clean(16, 16, 200 + i)).collect();
    let spec = |n| ToyDatasetSpec {
        specs: vec![ToyNoiseSpec::Awgn { sigma: 25.0 }],
        patches_per_spec: n,
        patch_size: 8,
        seed: 13,
    };
    let opts = TileOptions {
        overlap: 2,
        ..Default::default()
    };
    for (n, want) in [(1, 1), (5, 25)] {
        let ds = make_toy_dataset(&dir.path().join(format!("in{n}")), &sources, &spec(n)).unwrap();
        assert_eq!(ds.len(), n);
        let out = dir.path().join(format!("out{n}"));
        let (aug, rows) = self_augment(m, s, &ds, 4, &out, AugmentStrategy::AllPairs, &opts).unwrap();
        assert_eq!((aug.len(), rows.len()), (want, want));
        assert!(out.join(AUGMENT_MANIFEST).exists());
        for row in &rows {
            assert!(out.join(&row.out_path).exists(), "{} missing", row.out_path);
        }
    }
    let ds = make_toy_dataset(&dir.path().join("cross"), &sources, &spec(3)).unwrap();
    let (_, rows) = self_augment(m, s, &ds, 4, &dir.path().join("cross_out"), AugmentStrategy::CrossOnly, &opts).unwrap();
    assert_eq!(rows.len(), 6);
}
