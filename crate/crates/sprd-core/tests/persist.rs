//! Config text round-trips and digests; checkpoint save/load bit-exactness
//! and rejection of damaged or mismatched files.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprd_core::model::{forward, init_params, Binding};
use sprd_core::{load_checkpoint, save_checkpoint, AdamConfig, ModelConfig, RunConfig, Tape, Tensor};
use std::fs;
use std::path::PathBuf;

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sprd-persist-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.classes = 2;
    m.backbone.widths = vec![4, 8];
    m.backbone.strides = vec![4, 8];
    m.backbone.pyramid_width = 4;
    m.head.tower_depth = 1;
    m.anchors.base_sizes = vec![16.0, 32.0];
    m.fusion.point_width = 4;
    m.fusion.dilated_width = 4;
    m.decoder.deconv_widths = [4, 4, 4];
    m.decoder.up_widths = [4, 4];
    m
}

#[test]
fn config_text_round_trip_preserves_digest() {
    let c = RunConfig::default();
    let text = c.to_text();
    let back = RunConfig::from_text(&text).unwrap();
    assert_eq!(back.to_text(), text, "canonical text must be a fixed point");
    assert_eq!(back.digest(), c.digest());
    assert_eq!(c.digest().len(), 64);

    // Every key appears exactly once in the canonical dump.
    let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap().trim()).collect();
    let mut dedup = keys.clone();
    dedup.sort_unstable();
    dedup.dedup();
    assert_eq!(dedup.len(), keys.len());
    assert!(keys.len() >= 40, "expected the full default surface, got {} keys", keys.len());
}

#[test]
fn config_overrides_comments_and_errors() {
    let text = "# toy overrides\n\nseed = 9\npyramid = fpn\nfusion.mode = consecutive\ndecoder.shortcut = off\ntrain.lr = 0.01\nassign.mask_pos_iou = 0.5\n";
    let c = RunConfig::from_text(text).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(c.model.pyramid.to_string(), "fpn");
    assert_eq!(c.model.fusion.mode.to_string(), "consecutive");
    assert!(!c.model.decoder.shortcut);
    assert_eq!(c.train.adam.lr, 0.01);
    assert_eq!(c.assign.mask_pos_iou, 0.5);
    // Untouched keys keep their defaults.
    assert_eq!(c.train.steps, 2000);
    assert_eq!(c.infer.top_k, 100);

    let err = RunConfig::from_text("bogus.key = 1\n").unwrap_err().to_string();
    assert!(err.contains("line 1") && err.contains("bogus.key"), "{err}");
    let err = RunConfig::from_text("seed 9\n").unwrap_err().to_string();
    assert!(err.contains("key = value"), "{err}");
    assert!(RunConfig::from_text("loss.alpha = 2\n").is_err(), "validation runs after parse");
    assert!(RunConfig::from_text("precision = sloppy\n").is_err());

    // Digest is sensitive to every effective value.
    let base = RunConfig::default();
    let mut other = RunConfig::default();
    other.infer.nms_iou = 0.45;
    assert_ne!(base.digest(), other.digest());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut run = RunConfig::default();
    run.model = tiny_model();
    run.seed = 3;
    let mut store = init_params::<f32>(&run.model, run.seed).unwrap();

    // Take one optimizer step so m/v/t round-trips are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for (_, p) in store.iter_mut() {
        p.grad = Some(Tensor::randn(p.value.shape(), 0.1, &mut rng));
    }
    let adam = AdamConfig::default();
    store.adam_step(&adam);

    let path = tmp("roundtrip.ckpt");
    save_checkpoint(&path, &store, &run).unwrap();
    let loaded = load_checkpoint::<f32>(&path, Some(&run), false).unwrap();
    assert_eq!(loaded.config.to_text(), run.to_text());
    assert_eq!(loaded.store.len(), store.len());
    for (name, p) in store.iter() {
        let q = loaded.store.get(name).unwrap();
        assert_eq!(p.value.data(), q.value.data(), "{name} value");
        assert_eq!(p.m.data(), q.m.data(), "{name} adam m");
        assert_eq!(p.v.data(), q.v.data(), "{name} adam v");
        assert_eq!(p.t, q.t, "{name} adam t");
    }

    // Identical forward logits from the reloaded parameters.
    let img = Tensor::<f32>::randn([1, 3, 32, 32], 1.0, &mut rng);
    let run_forward = |s: &sprd_core::ParamStore<f32>| {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, s, false);
        let x = tape.leaf(img.clone(), false);
        let f = forward(&mut tape, &bind, &run.model, x).unwrap();
        tape.value(f.cls[0]).data().to_vec()
    };
    assert_eq!(run_forward(&store), run_forward(&loaded.store));
    fs::remove_file(&path).unwrap();
}

#[test]
fn checkpoint_rejects_damage_and_mismatch() {
    let mut run = RunConfig::default();
    run.model = tiny_model();
    let store = init_params::<f32>(&run.model, 1).unwrap();
    let path = tmp("damage.ckpt");
    save_checkpoint(&path, &store, &run).unwrap();
    let bytes = fs::read(&path).unwrap();

    // Wrong magic.
    let mut bad = bytes.clone();
    bad[0] = b'X';
    fs::write(&path, &bad).unwrap();
    let err = load_checkpoint::<f32>(&path, None, false).unwrap_err().to_string();
    assert!(err.contains("magic"), "{err}");

    // Unsupported version.
    let mut bad = bytes.clone();
    bad[4] = 9;
    fs::write(&path, &bad).unwrap();
    let err = load_checkpoint::<f32>(&path, None, false).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    // Truncation at several depths never yields a partial store.
    for cut in [3usize, 20, bytes.len() / 2, bytes.len() - 1] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(load_checkpoint::<f32>(&path, None, false).is_err(), "cut at {cut}");
    }

    // Config digest mismatch is refused unless forced.
    fs::write(&path, &bytes).unwrap();
    let mut other = run.clone();
    other.train.adam.lr = 0.5;
    let err = load_checkpoint::<f32>(&path, Some(&other), false).unwrap_err().to_string();
    assert!(err.contains("--force"), "{err}");
    assert!(load_checkpoint::<f32>(&path, Some(&other), true).is_ok());
    fs::remove_file(&path).unwrap();
}
