//! Loss hand values: focal scalar case, BCE reduction, smooth-L1 piecewise
//! values, on-class mask rule, and the assembled training loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sprd_core::anchors::{AnchorConfig, AnchorGrid};
use sprd_core::assign::AnchorState;
use sprd_core::geom::{BBox, Mask};
use sprd_core::loss::{
    build_losses, classification_loss, mask_bce_from_logits, mask_loss, prepare_image_targets,
    regression_loss, total_loss, LossConfig,
};
use sprd_core::mask_branch::{init_decoder, DecoderConfig};
use sprd_core::model::{forward, init_params, Binding, ModelConfig};
use sprd_core::{BackboneConfig, FusionConfig, FusionMode, HeadConfig, ParamStore, PyramidMode, Tape, Tensor};

/// One pixel, one anchor: a 4x4 image at stride 4 with a single 16x16 anchor
/// centered at (2,2).
fn single_anchor_grid() -> AnchorGrid {
    let cfg = AnchorConfig { base_sizes: vec![16.0], scales: vec![1.0], ratios: vec![1.0] };
    AnchorGrid::build(&cfg, 4, 4, &[4]).unwrap()
}

fn anchor_box(grid: &AnchorGrid) -> BBox {
    grid.levels[0].boxes[0]
}

fn full_mask() -> Mask {
    let mut m = Mask::zeros(4, 4);
    for i in 0..16 {
        m.data[i] = 1;
    }
    m
}

#[test]
fn focal_hand_value_on_single_positive() {
    let grid = single_anchor_grid();
    let gt = anchor_box(&grid);
    let targets =
        prepare_image_targets(&grid, &[gt], &[0], &[full_mask()], 0.5, 0.4, 0.7, 300).unwrap();
    assert_eq!(targets.positives(), 1);

    let mut tape: Tape<f64> = Tape::new();
    let p = 0.9f64;
    let logit = (p / (1.0 - p)).ln();
    let cls = tape.leaf(Tensor::from_vec([1, 1, 1, 1], vec![logit]).unwrap(), false);
    let cfg = LossConfig::default();
    let (loss, positives) =
        classification_loss(&mut tape, &[cls], &grid, std::slice::from_ref(&targets), 1, &cfg).unwrap();
    assert_eq!(positives, 1);
    let got = tape.scalar_value(loss);
    let want = -0.25 * (1.0 - p).powi(2) * p.ln();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    assert!((got - 2.634e-4).abs() < 1e-7);
}

#[test]
fn focal_gamma_zero_is_half_bce() {
    // 8x8 image, stride 4: a 2x2 pixel grid of single 16x16 anchors. The gt
    // sits exactly on pixel (0,0); its stride-distance neighbors land at IoU
    // 0.6 (positive) and the diagonal at 0.39 (negative).
    let cfg = AnchorConfig { base_sizes: vec![16.0], scales: vec![1.0], ratios: vec![1.0] };
    let grid = AnchorGrid::build(&cfg, 8, 8, &[4]).unwrap();
    let gt = grid.levels[0].boxes[0];
    let mask = {
        let mut m = Mask::zeros(8, 8);
        m.data.iter_mut().for_each(|v| *v = 1);
        m
    };
    let targets = prepare_image_targets(&grid, &[gt], &[1], &[mask], 0.5, 0.4, 0.7, 300).unwrap();

    let classes = 2usize;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = Tensor::<f64>::randn([1, classes, 2, 2], 1.5, &mut rng);
    let mut tape = Tape::new();
    let cls = tape.leaf(logits.clone(), false);
    let loss_cfg = LossConfig { alpha: 0.5, gamma: 0.0, ..LossConfig::default() };
    let (loss, positives) =
        classification_loss(&mut tape, &[cls], &grid, std::slice::from_ref(&targets), classes, &loss_cfg)
            .unwrap();

    // Independent BCE: walk anchors, skip ignores, target 1 only on the
    // matched class of positives.
    let level = &grid.levels[0];
    let mut bce = 0.0f64;
    for y in 0..2 {
        for x in 0..2 {
            let state = targets.labels.levels[0][level.index(y, x, 0)];
            for k in 0..classes {
                let x_val = logits.at(0, k, y, x);
                let t = match state {
                    AnchorState::Positive { gt } => (targets.gt_classes[gt] == k) as usize,
                    AnchorState::Negative => 0,
                    AnchorState::Ignore => continue,
                };
                bce += if t == 1 { (1.0 + (-x_val).exp()).ln() } else { (1.0 + x_val.exp()).ln() };
            }
        }
    }
    let want = 0.5 * bce / positives.max(1) as f64;
    let got = tape.scalar_value(loss);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn ignored_anchors_get_exactly_zero_gradient() {
    let grid = single_anchor_grid();
    let anchor = anchor_box(&grid);
    // Shift by 6 px: IoU = 160/352 = 0.4545, inside the ignore band.
    let gt = BBox::new(anchor.x1 + 6.0, anchor.y1, anchor.x2 + 6.0, anchor.y2);
    let targets =
        prepare_image_targets(&grid, &[gt], &[0], &[full_mask()], 0.5, 0.4, 0.7, 300).unwrap();
    assert_eq!(targets.positives(), 0);
    assert!(matches!(targets.labels.levels[0][0], AnchorState::Ignore));

    let mut tape: Tape<f64> = Tape::new();
    let cls = tape.leaf(Tensor::from_vec([1, 1, 1, 1], vec![1.3]).unwrap(), true);
    let cfg = LossConfig::default();
    let (loss, _) =
        classification_loss(&mut tape, &[cls], &grid, std::slice::from_ref(&targets), 1, &cfg).unwrap();
    assert_eq!(tape.scalar_value(loss), 0.0);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(cls).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn smooth_l1_hand_values() {
    let grid = single_anchor_grid();
    let gt = anchor_box(&grid);
    let targets =
        prepare_image_targets(&grid, &[gt], &[0], &[full_mask()], 0.5, 0.4, 0.7, 300).unwrap();
    let cfg = LossConfig { beta: 1.0, ..LossConfig::default() };

    // gt equals the anchor, so target deltas are zero and the prediction is
    // the residual itself.
    let run = |pred: [f64; 4]| {
        let mut tape: Tape<f64> = Tape::new();
        let boxes = tape.leaf(Tensor::from_vec([1, 4, 1, 1], pred.to_vec()).unwrap(), false);
        let loss =
            regression_loss(&mut tape, &[boxes], &grid, std::slice::from_ref(&targets), &cfg, 1).unwrap();
        tape.scalar_value(loss)
    };
    assert!((run([0.5, 0.0, 0.0, 0.0]) - 0.125).abs() < 1e-12);
    assert!((run([2.0, 0.0, 0.0, 0.0]) - 1.5).abs() < 1e-12);
    assert_eq!(run([0.0; 4]), 0.0);
    assert!((run([0.5, -0.5, 0.0, 0.0]) - 0.25).abs() < 1e-12);
}

#[test]
fn mask_bce_hand_values_and_on_class_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut grid_a = vec![0u8; 32 * 32];
    grid_a.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 3 == 0) as u8);
    let grid_b = vec![1u8; 32 * 32];
    let targets = vec![grid_a, grid_b];
    let classes = vec![0usize, 2];

    // Zero logits score one half everywhere: BCE is ln 2 whatever the target.
    let mut tape: Tape<f64> = Tape::new();
    let zero = tape.leaf(Tensor::zeros([2, 3, 32, 32]), false);
    let loss = mask_bce_from_logits(&mut tape, zero, &targets, &classes).unwrap();
    assert!((tape.scalar_value(loss) - 2f64.ln()).abs() < 1e-12);

    // Perturbing off-class channels leaves the loss bit-identical.
    let base = Tensor::randn([2, 3, 32, 32], 2.0, &mut rng);
    let mut perturbed = base.clone();
    for y in 0..32 {
        for x in 0..32 {
            *perturbed.at_mut(0, 1, y, x) = 1e6;
            *perturbed.at_mut(0, 2, y, x) = -40.0;
            *perturbed.at_mut(1, 0, y, x) = 7.5;
            *perturbed.at_mut(1, 1, y, x) = f64::MAX / 1e10;
        }
    }
    let a = tape.leaf(base, false);
    let b = tape.leaf(perturbed, false);
    let la = mask_bce_from_logits(&mut tape, a, &targets, &classes).unwrap();
    let lb = mask_bce_from_logits(&mut tape, b, &targets, &classes).unwrap();
    assert_eq!(tape.scalar_value(la).to_bits(), tape.scalar_value(lb).to_bits());

    // Saturated correct logits drive the loss to zero.
    let mut confident = Tensor::zeros([2, 3, 32, 32]);
    for (row, (grid, &k)) in targets.iter().zip(&classes).enumerate() {
        for (i, &v) in grid.iter().enumerate() {
            *confident.at_mut(row, k, i / 32, i % 32) = if v != 0 { 30.0 } else { -30.0 };
        }
    }
    let c = tape.leaf(confident, false);
    let lc = mask_bce_from_logits(&mut tape, c, &targets, &classes).unwrap();
    assert!(tape.scalar_value(lc) < 1e-6);

    // Class ids out of range are rejected.
    assert!(mask_bce_from_logits(&mut tape, zero, &targets, &[0, 3]).is_err());
}

#[test]
fn empty_mask_selection_contributes_exact_zero() {
    let grid = single_anchor_grid();
    let anchor = anchor_box(&grid);
    // Far-off gt: nothing qualifies for masks, anchor is negative.
    let gt = BBox::new(anchor.x1 + 14.0, anchor.y1 + 14.0, anchor.x2 + 14.0, anchor.y2 + 14.0);
    let targets =
        prepare_image_targets(&grid, &[gt], &[0], &[full_mask()], 0.5, 0.4, 0.7, 300).unwrap();
    assert!(targets.mask_pixels.is_empty());

    let dec = DecoderConfig { deconv_widths: [4, 4, 4], up_widths: [4, 4], shortcut: false };
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut store: ParamStore<f64> = ParamStore::new();
    init_decoder(&mut store, &dec, 6, 1, &mut rng).unwrap();
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &store, true);
    let fused = tape.leaf(Tensor::randn([1, 6, 1, 1], 1.0, &mut rng), false);
    let (loss, count) =
        mask_loss(&mut tape, &bind, &dec, &[fused], std::slice::from_ref(&targets)).unwrap();
    assert_eq!(count, 0);
    assert_eq!(tape.scalar_value(loss), 0.0);
}

#[test]
fn total_is_weighted_sum() {
    let mut tape: Tape<f64> = Tape::new();
    let c = tape.leaf(Tensor::scalar(0.3), false);
    let r = tape.leaf(Tensor::scalar(0.2), false);
    let m = tape.leaf(Tensor::scalar(0.5), false);
    let unit = LossConfig::default();
    let t = total_loss(&mut tape, c, r, m, &unit).unwrap();
    assert!((tape.scalar_value(t) - 1.0).abs() < 1e-15);

    let weighted = LossConfig { w_cls: 2.0, w_reg: 0.0, w_mask: 1.0, ..LossConfig::default() };
    let t = total_loss(&mut tape, c, r, m, &weighted).unwrap();
    assert!((tape.scalar_value(t) - 1.1).abs() < 1e-15);

    assert!(LossConfig { alpha: 0.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { beta: 0.0, ..LossConfig::default() }.validate().is_err());
    assert!(LossConfig { w_reg: -1.0, ..LossConfig::default() }.validate().is_err());
}

/// Small two-level model for end-to-end loss checks.
fn micro_config() -> ModelConfig {
    ModelConfig {
        classes: 2,
        backbone: BackboneConfig { widths: vec![8, 16], strides: vec![4, 8], pyramid_width: 8 },
        pyramid: PyramidMode::Gfpn,
        hard_block: false,
        head: HeadConfig { tower_depth: 1, prior: 0.01 },
        anchors: AnchorConfig { base_sizes: vec![16.0, 32.0], scales: vec![1.0], ratios: vec![1.0] },
        fusion: FusionConfig { mode: FusionMode::Dilated, point_width: 8, dilated_width: 4 },
        decoder: DecoderConfig { deconv_widths: [8, 8, 8], up_widths: [8, 8], shortcut: true },
    }
}

#[test]
fn assembled_losses_are_finite_and_differentiable() {
    let cfg = micro_config();
    let store = init_params::<f64>(&cfg, 5).unwrap();
    let grid = AnchorGrid::build(&cfg.anchors, 32, 32, &cfg.backbone.strides).unwrap();

    // A 16x16 gt exactly on the level-0 anchor at pixel (3,3).
    let gt = BBox::new(6.0, 6.0, 22.0, 22.0);
    let mut mask = Mask::zeros(32, 32);
    for y in 6..22 {
        for x in 6..22 {
            mask.set(y, x, 1);
        }
    }
    let targets = prepare_image_targets(&grid, &[gt], &[1], &[mask], 0.5, 0.4, 0.7, 300).unwrap();
    assert_eq!(targets.positives(), 5, "center plus the four stride-distance neighbors");
    assert_eq!(targets.mask_pixels.len(), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut tape = Tape::new();
    let bind = Binding::bind(&mut tape, &store, true);
    let img = tape.leaf(Tensor::randn([1, 3, 32, 32], 1.0, &mut rng), false);
    let feats = forward(&mut tape, &bind, &cfg, img).unwrap();
    let loss_cfg = LossConfig::default();
    let parts = build_losses(
        &mut tape,
        &bind,
        &feats,
        &cfg.decoder,
        &grid,
        std::slice::from_ref(&targets),
        cfg.classes,
        &loss_cfg,
    )
    .unwrap();
    assert_eq!(parts.positives, 5);
    assert_eq!(parts.mask_pixels, 1);
    for (name, v) in [("cls", parts.cls), ("reg", parts.reg), ("mask", parts.mask), ("total", parts.total)] {
        let val = tape.scalar_value(v);
        assert!(val.is_finite() && val >= 0.0, "{name} = {val}");
    }
    let total = tape.scalar_value(parts.total);
    let sum = tape.scalar_value(parts.cls) + tape.scalar_value(parts.reg) + tape.scalar_value(parts.mask);
    assert!((total - sum).abs() < 1e-12);

    let grads = tape.backward(parts.total).unwrap();
    for path in ["backbone.stage0.conv0.w", "head.cls.out.w", "head.box.out.w", "mask.dec.out.w", "mask.fuse.b0.w"] {
        let g = grads.get(bind.var(path)).unwrap_or_else(|| panic!("no grad for {path}"));
        assert!(g.data().iter().any(|&v| v != 0.0), "{path} gradient is all zero");
        assert!(g.data().iter().all(|v| v.is_finite()));
    }
}
