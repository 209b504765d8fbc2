//! Optimizer-loop behavior: zero-lr fixpoint, clip bound, single-image
//! overfit trend, determinism, and the divergence guards.

use sprd_core::{synth_scene, RunConfig, Sample, SceneSpec, StepMetrics, TrainSession};

fn toy_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.seed = 5;
    run.model.classes = 3;
    run.model.backbone.widths = vec![8, 16];
    run.model.backbone.strides = vec![4, 8];
    run.model.backbone.pyramid_width = 8;
    run.model.head.tower_depth = 1;
    run.model.anchors.base_sizes = vec![16.0, 32.0];
    run.model.fusion.point_width = 8;
    run.model.fusion.dilated_width = 4;
    run.model.decoder.deconv_widths = [8, 8, 8];
    run.model.decoder.up_widths = [8, 8];
    run
}

fn toy_samples(count: u64) -> Vec<Sample> {
    let spec = SceneSpec { image_size: 64, size_range: (14.0, 30.0), ..SceneSpec::default() };
    (0..count)
        .map(|i| {
            let scene = synth_scene(&spec, i).unwrap();
            Sample {
                id: i as usize,
                image: scene.image,
                boxes: scene.instances.iter().map(|x| x.bbox).collect(),
                classes: scene.instances.iter().map(|x| x.class).collect(),
                masks: scene.instances.iter().map(|x| x.mask.clone()).collect(),
            }
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
    let mut run = toy_run();
    run.train.adam.lr = 0.0;
    // validate() rejects lr = 0 for real runs; bypass it via with_store.
    let samples = toy_samples(2);
    let store = sprd_core::init_params::<f32>(&run.model, run.seed).unwrap();
    let before: Vec<(String, Vec<f32>)> =
        store.iter().map(|(p, q)| (p.clone(), q.value.data().to_vec())).collect();
    run.train.adam.lr = 1.0;
    let mut session = TrainSession::with_store(&run, &samples, store, 0).unwrap();
    session.run.train.adam.lr = 0.0;
    session.step_once().unwrap();
    for (path, data) in &before {
        assert_eq!(session.store.value(path).data(), &data[..], "{path} moved under lr 0");
    }
}

#[test]
fn clipped_gradient_norm_is_bounded() {
    let run = toy_run();
    let samples = toy_samples(2);
    let mut session = TrainSession::<f32>::new(&run, &samples).unwrap();
    let m = session.step_once().unwrap();
    // At init with prior 0.01 the loss surface is steep: the pre-clip norm
    // exceeds the clip value, and the stored post-clip norm obeys the bound.
    assert!(m.grad_norm > run.train.clip_norm, "pre-clip norm {:.3e}", m.grad_norm);

    // Re-derive the post-clip norm on a fresh session with the same batch.
    let mut probe = TrainSession::<f32>::new(&run, &samples).unwrap();
    let tapeless = probe.step_once().unwrap();
    assert_eq!(tapeless.grad_norm, m.grad_norm, "training is deterministic");
}

#[test]
fn post_clip_norm_meets_tolerance() {
    let run = toy_run();
    let samples = toy_samples(1);
    // Reproduce one step manually to observe the clipped norm directly.
    let mut session = TrainSession::<f64>::new(&run, &samples).unwrap();
    let _ = session.step_once().unwrap();
    // Second step: clip again and inspect before the optimizer consumes it.
    // step_once clears grads, so re-run the clip path on synthetic grads.
    let clip = run.train.clip_norm;
    for (_, p) in session.store.iter_mut() {
        p.grad = Some(sprd_core::Tensor::full(p.value.shape(), 0.37));
    }
    let pre = session.store.clip_gradients(clip);
    assert!(pre > clip);
    let post = session.store.grad_norm();
    assert!(post <= clip + 1e-12, "post-clip norm {post:.15} vs clip {clip}");
    assert!(post >= clip * (1.0 - 1e-9), "clip should scale, not zero out");
}

#[test]
fn fifty_steps_overfit_one_image() {
    let mut run = toy_run();
    run.train.batch_size = 1;
    run.train.adam.lr = 5e-3;
    let samples = toy_samples(1);
    let mut session = TrainSession::<f32>::new(&run, &samples).unwrap();
    let mut totals = Vec::new();
    session.run_steps(50, |m| totals.push(m.total)).unwrap();
    assert_eq!(totals.len(), 50);
    let avg = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let early = avg(&totals[..10]);
    let late = avg(&totals[40..]);
    assert!(
        late < early,
        "10-step moving average should fall on one image: early {early:.4}, late {late:.4}"
    );
}

#[test]
fn identical_sessions_produce_identical_metric_streams() {
    let run = toy_run();
    let samples = toy_samples(3);
    let collect = || {
        let mut s = TrainSession::<f32>::new(&run, &samples).unwrap();
        let mut rows = Vec::new();
        s.run_steps(5, |m| rows.push(m.csv_row())).unwrap();
        rows
    };
    assert_eq!(collect(), collect());
    assert_eq!(StepMetrics::csv_header(), "step,L_cls,L_reg,L_mask,total,grad_norm");
}

#[test]
fn batches_rotate_through_the_dataset() {
    let mut run = toy_run();
    run.train.batch_size = 2;
    let samples = toy_samples(3);
    let mut session = TrainSession::<f32>::new(&run, &samples).unwrap();
    // Steps use images (0,1), (2,0), (1,2), ... so three steps cover all.
    for _ in 0..3 {
        session.step_once().unwrap();
    }
    assert_eq!(session.step, 3);
}

#[test]
fn runaway_loss_aborts_with_divergence_error() {
    let run = toy_run();
    let samples = toy_samples(1);
    let mut session = TrainSession::<f64>::new(&run, &samples).unwrap();
    session
        .store
        .get_mut("backbone.stage0.conv0.w")
        .unwrap()
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= 1e12);
    let err = session.step_once().unwrap_err();
    assert!(
        matches!(err, sprd_core::SprError::Diverged { .. }),
        "expected divergence abort, got {err}"
    );
}

#[test]
fn non_finite_loss_aborts_cleanly() {
    let run = toy_run();
    let samples = toy_samples(1);
    let mut session = TrainSession::<f32>::new(&run, &samples).unwrap();
    session.store.get_mut("head.cls.out.b").unwrap().value.data_mut()[0] = f32::NAN;
    let err = session.step_once().unwrap_err();
    assert!(
        matches!(err, sprd_core::SprError::NonFinite(_)),
        "expected non-finite abort, got {err}"
    );
}
