use std::path::Path;

use guidnoise::checkpoint::{Container, TensorRecord};
use guidnoise::config::RunConfig;
use guidnoise::image::ImagePatch;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = TensorRecord> {
    ("[a-z][a-z0-9_.]{0,15}", prop::collection::vec(1usize..4, 0..4)).prop_flat_map(|(name, shape)| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(-1e3f32..1e3, n).prop_map(move |data| TensorRecord {
            name: name.clone(),
            shape: shape.clone(),
            data,
        })
    })
}

proptest! {
    #[test]
    fn checkpoint_round_trip(tensors in prop::collection::vec(record(), 0..5), iter in 0u64..1_000_000) {
        let c = Container { meta: serde_json::json!({ "kind": "train", "iter": iter }), tensors };
        let bytes = c.encode().unwrap();
        prop_assert_eq!(Container::decode(&bytes).unwrap(), c);
        // Any strict prefix is rejected rather than misread.
        for cut in [0, bytes.len() / 2, bytes.len() - 1] {
            prop_assert!(Container::decode(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn config_text_round_trip(
        seed in any::<u64>(),
        base in 1usize..64,
        lr in 1e-6f64..1e-1,
        iters in 0u64..100_000,
        steps in 2usize..100,
        overlap in 0usize..16,
        bins in 2usize..512,
    ) {
        let mut c = RunConfig { seed, ..Default::default() };
        c.model.base_channels = base;
        c.train.lr_phase1 = lr;
        c.train.iters_phase2 = iters;
        c.schedule.steps = steps;
        c.synth.overlap = overlap;
        c.metrics.bins = bins;
        let text = c.to_text().unwrap();
        prop_assert_eq!(RunConfig::parse(&text, Path::new("p.cfg")).unwrap(), c);
    }

    #[test]
    fn raw_image_round_trip(h in 1usize..8, w in 1usize..8, ch in prop::sample::select(vec![1usize, 3]), seed in any::<u64>()) {
        let mut s = seed | 1;
        let data: Vec<f32> = (0..h * w * ch).map(|_| { s = s.wrapping_mul(0x5851_f42d_4c95_7f2d).wrapping_add(1); (s >> 40) as f32 / (1u64 << 24) as f32 }).collect();
        let img = ImagePatch::new(h, w, ch, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.f32");
        img.write_raw(&path).unwrap();
        prop_assert_eq!(ImagePatch::read_raw(&path).unwrap(), img);
    }
}

#[test]
fn config_errors_name_file_and_line() {
    let err = RunConfig::parse("seed = 1\n[model]\nbase_channels = 4\nwidth = 3\n", Path::new("bad.cfg")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("bad.cfg") && msg.contains('4') && msg.contains("model.width"), "{msg}");
    let err = RunConfig::parse("[train]\nlr_phase1 = fast\n", Path::new("t.cfg")).unwrap_err().to_string();
    assert!(err.contains("t.cfg") && err.contains('2'), "{err}");
}
