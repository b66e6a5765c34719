use guidnoise::data::{apply_toy_noise, procedural_clean, ToyNoiseSpec};
use guidnoise::denoise_harness::{eval_denoiser, train_denoiser, Denoiser, DenoiserConfig};
use guidnoise::image::GuidancePair;
use guidnoise::metrics::psnr;
use guidnoise::rng::SeededRng;

fn pairs(n: usize, size: usize, seed: u64) -> Vec<GuidancePair> {
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let clean = procedural_clean(size, size, seed * 100 + i as u64);
            let noisy = apply_toy_noise(&clean, &ToyNoiseSpec::Awgn { sigma: 25.0 }, &mut rng).unwrap();
            GuidancePair::new(noisy, clean).unwrap()
        })
        .collect()
}

fn small(iters: u64) -> DenoiserConfig {
    DenoiserConfig {
        depth: 4,
        channels: 16,
        iters,
        patch: 16,
        seed: 2,
        ..Default::default()
    }
}

fn mean_psnr(report: &guidnoise::metrics::MetricReport) -> f64 {
    report.mean().psnr.unwrap()
}

#[test]
fn without_synthetic_data_training_is_the_real_baseline() {
    let real = pairs(3, 24, 1);
    let (a, sa) = train_denoiser(&small(5), &real, None, None).unwrap();
    let (b, sb) = train_denoiser(&small(5), &real, Some(&[]), None).unwrap();
    assert_eq!(sa, sb);
    assert!(sa.iter().all(|s| (s.real, s.synthetic) == (8, 0)));
    assert_eq!(a.params().export(), b.params().export());
}

#[test]
fn one_to_one_mix_splits_every_batch() {
    let real = pairs(3, 24, 1);
    let synth = pairs(3, 24, 2);
    let (_, steps) = train_denoiser(&small(4), &real, Some(&synth), None).unwrap();
    assert_eq!(steps.len(), 4);
    assert!(steps.iter().all(|s| (s.real, s.synthetic) == (4, 4)));
}

#[test]
fn overfits_a_single_pair() {
    let real = pairs(1, 16, 3);
    let cfg = DenoiserConfig { batch: 1, ..small(500) };
    let (_, steps) = train_denoiser(&cfg, &real, None, None).unwrap();
    let avg = |s: &[guidnoise::denoise_harness::DenoiserStep]| s.iter().map(|x| x.loss).sum::<f32>() / s.len() as f32;
    let (start, end) = (avg(&steps[..10]), avg(&steps[490..]));
    assert!(end <= 0.5 * start, "loss {start} -> {end}");
}

#[test]
fn identity_denoiser_scores_the_noisy_input() {
    let test: Vec<_> = pairs(3, 24, 4).into_iter().enumerate().map(|(i, p)| (i.to_string(), p)).collect();
    let d = Denoiser::identity(small(1)).unwrap();
    let report = eval_denoiser(&d, &test).unwrap();
    for ((_, p), row) in test.iter().zip(&report.items) {
        let want = psnr(&p.noisy.clone().clamp01(), &p.clean).unwrap();
        assert!((row.psnr.unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn trained_denoiser_beats_identity() {
    let real = pairs(8, 48, 5);
    let test: Vec<_> = pairs(4, 48, 6).into_iter().enumerate().map(|(i, p)| (i.to_string(), p)).collect();
    let cfg = DenoiserConfig { iters: 600, ..small(0) };
    let (d, _) = train_denoiser(&cfg, &real, None, None).unwrap();
    let base = mean_psnr(&eval_denoiser(&Denoiser::identity(cfg.clone()).unwrap(), &test).unwrap());
    let got = mean_psnr(&eval_denoiser(&d, &test).unwrap());
    assert!(got >= base + 3.0, "{got:.2} dB vs identity {base:.2} dB");
}

#[test]
fn checkpoint_round_trip() {
    let real = pairs(2, 24, 7);
    let (d, _) = train_denoiser(&small(3), &real, None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.gnck");
    d.save(&path).unwrap();
    let back = Denoiser::load(&path).unwrap();
    assert_eq!(back.config, d.config);
    assert_eq!(back.denoise(&real[0].noisy).unwrap(), d.denoise(&real[0].noisy).unwrap());
}
