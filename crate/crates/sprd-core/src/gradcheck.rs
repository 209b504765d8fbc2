//! Central-difference gradient verification. Always runs in f64: finite
//! differences are meaningless at f32 precision. Per-op suites sweep every
//! input coordinate of randomized small shapes; the full-network check
//! samples coordinates (sweeping millions of parameters is not feasible).

use crate::error::{Result, SprError};
use crate::kernels::{ColRef, ConvMeta};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_TRIALS: usize = 100;

/// Result of comparing analytic and numeric derivatives.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (flat coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl FdReport {
    pub fn merge(&mut self, other: &FdReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

/// Compares `analytic` to the central difference (f(x+e) - f(x-e)) / 2e at
/// the listed coordinates (all coordinates if None).
pub fn finite_diff_check<F: FnMut(&Tensor<f64>) -> f64>(
    mut f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    coords: Option<&[usize]>,
) -> Result<FdReport> {
    if x.shape() != analytic.shape() {
        return Err(SprError::ShapeMismatch {
            op: "finite_diff_check",
            left: x.shape(),
            right: analytic.shape(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut report = FdReport::default();
    let mut probe = x.clone();
    for &ci in coords {
        let orig = probe.data()[ci];
        probe.data_mut()[ci] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[ci] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[ci] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[ci];
        let e = rel_err(a, numeric);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((ci, a, numeric));
        }
    }
    Ok(report)
}

/// One randomized op instance: differentiable inputs plus a graph builder.
struct Trial {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
}

/// Checks d(sum(W . op(inputs)))/d(input_i) for every input and coordinate,
/// with W a fixed random weighting that makes the objective scalar.
fn check_trial(trial: &Trial, eps: f64, rng: &mut ChaCha8Rng) -> Result<FdReport> {
    let build_scalar = |tensors: &[Tensor<f64>], w: Option<&Tensor<f64>>| -> Result<(f64, Option<Vec<Tensor<f64>>>, [usize; 4])> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (trial.build)(&mut tape, &vars)?;
        let out_shape = tape.shape(out);
        let w_t = match w {
            Some(w) => w.clone(),
            None => Tensor::zeros(out_shape),
        };
        let wv = tape.leaf(w_t, false);
        let prod = tape.mul(out, wv)?;
        let s = tape.sum_all(prod);
        let val = tape.scalar_value(s);
        let grads = if w.is_some() {
            let g = tape.backward(s)?;
            Some(
                vars.iter()
                    .map(|&v| g.get(v).cloned().unwrap_or_else(|| Tensor::zeros([1, 1, 1, 1])))
                    .collect(),
            )
        } else {
            None
        };
        Ok((val, grads, out_shape))
    };

    // Probe run to learn the output shape, then fix W.
    let (_, _, out_shape) = build_scalar(&trial.inputs, None)?;
    let w = Tensor::rand_uniform(out_shape, -1.0, 1.0, rng);
    let (_, grads, _) = build_scalar(&trial.inputs, Some(&w))?;
    let grads = grads.unwrap();

    let mut report = FdReport::default();
    for i in 0..trial.inputs.len() {
        let mut tensors = trial.inputs.clone();
        let f = |probe: &Tensor<f64>| {
            tensors[i] = probe.clone();
            let (v, _, _) = build_scalar(&tensors, Some(&w)).expect("trial rebuild");
            v
        };
        let sub = finite_diff_check(f, &trial.inputs[i], &grads[i], eps, None)?;
        report.merge(&sub);
    }
    Ok(report)
}

fn rand_shape(rng: &mut ChaCha8Rng, max_c: usize, max_hw: usize) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=max_c),
        rng.random_range(1..=max_hw),
        rng.random_range(1..=max_hw),
    ]
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Uniform with |x| >= lo (keeps relu and smooth-L1 probes off their kinks).
fn rand_away_from(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(lo..hi);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn conv_trial(rng: &mut ChaCha8Rng) -> Trial {
    let k = rng.random_range(1..=3usize);
    let dilation = *[1usize, 2].get(rng.random_range(0..2)).unwrap();
    let stride = rng.random_range(1..=2usize);
    let pad = rng.random_range(0..=2usize);
    let eff = dilation * (k - 1) + 1;
    let min_hw = eff.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(min_hw..min_hw + 4);
    let w = rng.random_range(min_hw..min_hw + 4);
    let c_in = rng.random_range(1..=3usize);
    let c_out = rng.random_range(1..=3usize);
    let n = rng.random_range(1..=2usize);
    let x = randn([n, c_in, h, w], rng);
    let wt = randn([c_out, c_in, k, k], rng);
    let b = randn([c_out, 1, 1, 1], rng);
    let meta = ConvMeta::new(stride, pad, dilation);
    Trial {
        inputs: vec![x, wt, b],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), meta)),
    }
}

fn convt_trial(rng: &mut ChaCha8Rng) -> Trial {
    let k = rng.random_range(1..=3usize);
    let stride = rng.random_range(1..=2usize);
    let h = rng.random_range(1..=5usize);
    let w = rng.random_range(1..=5usize);
    // Keep (min(h,w)-1)*stride + k > 2*pad so the output stays non-empty.
    let pad_cap = ((h.min(w) - 1) * stride + k - 1) / 2;
    let pad = rng.random_range(0..k.min(pad_cap + 1));
    let a = rng.random_range(1..=3usize);
    let bc = rng.random_range(1..=3usize);
    let n = rng.random_range(1..=2usize);
    let x = randn([n, a, h, w], rng);
    let wt = randn([a, bc, k, k], rng);
    let b = randn([bc, 1, 1, 1], rng);
    Trial {
        inputs: vec![x, wt, b],
        build: Box::new(move |t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), stride, pad)),
    }
}

fn depthwise_trial(rng: &mut ChaCha8Rng) -> Trial {
    let k = rng.random_range(1..=3usize);
    let dilation = rng.random_range(1..=2usize);
    let stride = rng.random_range(1..=2usize);
    let pad = rng.random_range(0..=2usize);
    let eff = dilation * (k - 1) + 1;
    let min_hw = eff.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(min_hw..min_hw + 4);
    let w = rng.random_range(min_hw..min_hw + 4);
    let c = rng.random_range(1..=4usize);
    let n = rng.random_range(1..=2usize);
    let x = randn([n, c, h, w], rng);
    let wt = randn([c, 1, k, k], rng);
    let b = randn([c, 1, 1, 1], rng);
    let meta = ConvMeta::new(stride, pad, dilation);
    Trial {
        inputs: vec![x, wt, b],
        build: Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), meta)),
    }
}

fn separable_trial(rng: &mut ChaCha8Rng) -> Trial {
    let k = 3usize;
    let pad = rng.random_range(0..=1usize);
    let min_hw = k.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(min_hw..min_hw + 3);
    let w = rng.random_range(min_hw..min_hw + 3);
    let c = rng.random_range(1..=3usize);
    let c_out = rng.random_range(1..=3usize);
    let x = randn([1, c, h, w], rng);
    let dw = randn([c, 1, k, k], rng);
    let db = randn([c, 1, 1, 1], rng);
    let pw = randn([c_out, c, 1, 1], rng);
    let pb = randn([c_out, 1, 1, 1], rng);
    let meta = ConvMeta::new(1, pad, 1);
    Trial {
        inputs: vec![x, dw, db, pw, pb],
        build: Box::new(move |t, v| t.separable_conv2d(v[0], v[1], Some(v[2]), v[3], Some(v[4]), meta)),
    }
}

fn elementwise_trial(rng: &mut ChaCha8Rng, kind: &str) -> Trial {
    let shape = rand_shape(rng, 4, 5);
    match kind {
        "add" => {
            let (a, b) = (randn(shape, rng), randn(shape, rng));
            Trial { inputs: vec![a, b], build: Box::new(|t, v| t.add(v[0], v[1])) }
        }
        "mul" => {
            let (a, b) = (randn(shape, rng), randn(shape, rng));
            Trial { inputs: vec![a, b], build: Box::new(|t, v| t.mul(v[0], v[1])) }
        }
        "sigmoid" => {
            let a = randn(shape, rng);
            Trial { inputs: vec![a], build: Box::new(|t, v| Ok(t.sigmoid(v[0]))) }
        }
        "relu" => {
            let a = rand_away_from(shape, 0.1, 2.0, rng);
            Trial { inputs: vec![a], build: Box::new(|t, v| Ok(t.relu(v[0]))) }
        }
        _ => unreachable!(),
    }
}

fn concat_channels_trial(rng: &mut ChaCha8Rng) -> Trial {
    let n = rng.random_range(1..=2usize);
    let h = rng.random_range(1..=4usize);
    let w = rng.random_range(1..=4usize);
    let parts: Vec<Tensor<f64>> =
        (0..rng.random_range(2..=3usize)).map(|_| randn([n, rng.random_range(1..=3), h, w], rng)).collect();
    Trial {
        inputs: parts,
        build: Box::new(|t, v| t.concat_channels(v)),
    }
}

fn slice_channels_trial(rng: &mut ChaCha8Rng) -> Trial {
    let c = rng.random_range(2..=5usize);
    let start = rng.random_range(0..c - 1);
    let len = rng.random_range(1..=c - start);
    let x = randn([rng.random_range(1..=2), c, 3, 3], rng);
    Trial { inputs: vec![x], build: Box::new(move |t, v| t.slice_channels(v[0], start, len)) }
}

fn concat_batch_trial(rng: &mut ChaCha8Rng) -> Trial {
    let c = rng.random_range(1..=3usize);
    let h = rng.random_range(1..=3usize);
    let w = rng.random_range(1..=3usize);
    let parts: Vec<Tensor<f64>> =
        (0..rng.random_range(2..=3usize)).map(|_| randn([rng.random_range(1..=2), c, h, w], rng)).collect();
    Trial { inputs: parts, build: Box::new(|t, v| t.concat_batch(v)) }
}

fn gather_trial(rng: &mut ChaCha8Rng) -> Trial {
    let shape = [rng.random_range(1..=2usize), rng.random_range(2..=5usize), 4, 4];
    let x = randn(shape, rng);
    let c_len = rng.random_range(1..=shape[1]);
    let c0_max = shape[1] - c_len;
    // Duplicates are deliberate: the vjp must scatter-add.
    let refs: Vec<ColRef> = (0..rng.random_range(1..=6usize))
        .map(|_| ColRef {
            n: rng.random_range(0..shape[0]),
            c0: rng.random_range(0..=c0_max),
            c_len,
            y: rng.random_range(0..shape[2]),
            x: rng.random_range(0..shape[3]),
        })
        .collect();
    Trial { inputs: vec![x], build: Box::new(move |t, v| t.gather_cols(v[0], refs.clone())) }
}

fn upsample_nearest_trial(rng: &mut ChaCha8Rng) -> Trial {
    let x = randn(rand_shape(rng, 3, 4), rng);
    let factor = rng.random_range(1..=3usize);
    Trial { inputs: vec![x], build: Box::new(move |t, v| t.upsample_nearest(v[0], factor)) }
}

fn upsample_bilinear_trial(rng: &mut ChaCha8Rng) -> Trial {
    let x = randn(rand_shape(rng, 3, 5), rng);
    let oh = rng.random_range(1..=8usize);
    let ow = rng.random_range(1..=8usize);
    Trial { inputs: vec![x], build: Box::new(move |t, v| t.upsample_bilinear(v[0], oh, ow)) }
}

fn focal_trial(rng: &mut ChaCha8Rng) -> Trial {
    let shape = rand_shape(rng, 4, 4);
    let x = randn(shape, rng);
    let n = x.numel();
    let targets =
        Tensor::from_vec(shape, (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
    let weights =
        Tensor::from_vec(shape, (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.1..2.0) }).collect())
            .unwrap();
    let gamma = if rng.random_bool(0.5) { 2.0 } else { 0.0 };
    Trial {
        inputs: vec![x],
        build: Box::new(move |t, v| t.focal_term(v[0], targets.clone(), weights.clone(), 0.25, gamma)),
    }
}

fn smooth_l1_trial(rng: &mut ChaCha8Rng) -> Trial {
    let beta = 1.0 / 9.0;
    let shape = rand_shape(rng, 4, 4);
    let targets = randn(shape, rng);
    let mut x = randn(shape, rng);
    for i in 0..x.numel() {
        // Step off the |d| = beta kink where the derivative is discontinuous.
        let d: f64 = x.data()[i] - targets.data()[i];
        if (d.abs() - beta).abs() < 5e-3 {
            x.data_mut()[i] += 0.05;
        }
    }
    let weights = Tensor::from_vec(shape, (0..targets.numel()).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap();
    Trial {
        inputs: vec![x],
        build: Box::new(move |t, v| t.smooth_l1_term(v[0], targets.clone(), weights.clone(), beta)),
    }
}

pub const ALL_OPS: &[&str] = &[
    "conv2d",
    "conv2d_transpose",
    "depthwise_conv2d",
    "separable_conv2d",
    "add",
    "mul",
    "sigmoid",
    "relu",
    "concat_channels",
    "slice_channels",
    "concat_batch",
    "gather_pixels",
    "upsample_nearest",
    "upsample_bilinear",
    "focal_loss",
    "smooth_l1",
];

fn make_trial(op: &str, rng: &mut ChaCha8Rng) -> Result<Trial> {
    Ok(match op {
        "conv2d" => conv_trial(rng),
        "conv2d_transpose" => convt_trial(rng),
        "depthwise_conv2d" => depthwise_trial(rng),
        "separable_conv2d" => separable_trial(rng),
        "add" | "mul" | "sigmoid" | "relu" => elementwise_trial(rng, op),
        "concat_channels" => concat_channels_trial(rng),
        "slice_channels" => slice_channels_trial(rng),
        "concat_batch" => concat_batch_trial(rng),
        "gather_pixels" => gather_trial(rng),
        "upsample_nearest" => upsample_nearest_trial(rng),
        "upsample_bilinear" => upsample_bilinear_trial(rng),
        "focal_loss" => focal_trial(rng),
        "smooth_l1" => smooth_l1_trial(rng),
        other => return Err(SprError::bad_arg("gradcheck", format!("unknown op {other}"))),
    })
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: String,
    pub trials: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    pub seconds: f64,
}

pub fn check_op(op: &str, trials: usize, tol: f64, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(op));
    let start = Instant::now();
    let mut report = FdReport::default();
    for _ in 0..trials {
        let trial = make_trial(op, &mut rng)?;
        let sub = check_trial(&trial, DEFAULT_EPS, &mut rng)?;
        report.merge(&sub);
    }
    Ok(OpCheck {
        op: op.to_string(),
        trials,
        coords: report.checked,
        max_rel_err: report.max_rel_err,
        pass: report.passes(tol),
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Runs the per-op suites. `ops` empty means every op.
pub fn run_gradcheck(ops: &[String], trials: usize, tol: f64, seed: u64) -> Result<Vec<OpCheck>> {
    let names: Vec<&str> = if ops.is_empty() || (ops.len() == 1 && ops[0] == "all") {
        ALL_OPS.to_vec()
    } else {
        ops.iter().map(|s| s.as_str()).collect()
    };
    names.iter().map(|op| check_op(op, trials, tol, seed)).collect()
}

/// Checks `analytic` at `n_coords` sampled coordinates of x.
pub fn sampled_check<F: FnMut(&Tensor<f64>) -> f64>(
    f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    n_coords: usize,
    rng: &mut ChaCha8Rng,
) -> Result<FdReport> {
    let numel = x.numel();
    let coords: Vec<usize> = if numel <= n_coords {
        (0..numel).collect()
    } else {
        let mut c: Vec<usize> = (0..n_coords).map(|_| rng.random_range(0..numel)).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    finite_diff_check(f, x, analytic, eps, Some(&coords))
}

#[derive(Debug, Clone)]
pub struct NetworkCheck {
    pub params: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub pass: bool,
    pub seconds: f64,
    /// Parameter path and local coordinate of the worst disagreement.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn micro_model() -> crate::model::ModelConfig {
    use crate::anchors::AnchorConfig;
    use crate::backbone::{BackboneConfig, PyramidMode};
    use crate::heads::HeadConfig;
    use crate::mask_branch::{DecoderConfig, FusionConfig, FusionMode};
    crate::model::ModelConfig {
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

/// Differentiates the full training loss of a miniature model with respect to
/// every parameter, then spot-checks `n_coords` sampled parameter coordinates
/// against central differences. The scene pins one gt slightly off its best
/// anchor so classification, regression, and mask terms all carry gradient.
pub fn network_gradcheck(n_coords: usize, tol: f64, seed: u64) -> Result<NetworkCheck> {
    use crate::anchors::AnchorGrid;
    use crate::geom::{BBox, Mask};
    use crate::loss::{build_losses, prepare_image_targets, LossConfig};
    use crate::model::{forward, init_params, Binding};

    let start = Instant::now();
    let cfg = micro_model();
    let mut store = init_params::<f64>(&cfg, seed)?;
    let grid = AnchorGrid::build(&cfg.anchors, 32, 32, &cfg.backbone.strides)?;

    let gt = BBox::new(7.0, 6.0, 23.0, 22.0);
    let mut mask = Mask::zeros(32, 32);
    for y in 6..22 {
        for x in 7..23 {
            mask.set(y, x, 1);
        }
    }
    let targets = prepare_image_targets(&grid, &[gt], &[1], &[mask], 0.5, 0.4, 0.7, 300)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b);
    let image = Tensor::randn([1, 3, 32, 32], 1.0, &mut rng);
    let loss_cfg = LossConfig::default();

    let paths: Vec<String> = store.paths().cloned().collect();
    let mut spans = Vec::with_capacity(paths.len());
    let mut flat: Vec<f64> = Vec::new();
    for p in &paths {
        let data = store.value(p).data();
        spans.push((flat.len(), data.len()));
        flat.extend_from_slice(data);
    }
    let total = flat.len();
    let flat_x = Tensor::from_vec([1, 1, 1, total], flat)?;

    let mut flat_grad = Vec::with_capacity(total);
    {
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &store, true);
        let img = tape.leaf(image.clone(), false);
        let feats = forward(&mut tape, &bind, &cfg, img)?;
        let parts = build_losses(
            &mut tape,
            &bind,
            &feats,
            &cfg.decoder,
            &grid,
            std::slice::from_ref(&targets),
            cfg.classes,
            &loss_cfg,
        )?;
        let grads = tape.backward(parts.total)?;
        for p in &paths {
            match grads.get(bind.var(p)) {
                Some(g) => flat_grad.extend_from_slice(g.data()),
                None => flat_grad.extend(std::iter::repeat(0.0).take(store.value(p).numel())),
            }
        }
    }
    let analytic = Tensor::from_vec([1, 1, 1, total], flat_grad)?;

    let f = |probe: &Tensor<f64>| -> f64 {
        for (i, p) in paths.iter().enumerate() {
            let (start, len) = spans[i];
            store
                .get_mut(p)
                .unwrap()
                .value
                .data_mut()
                .copy_from_slice(&probe.data()[start..start + len]);
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&mut tape, &store, false);
        let img = tape.leaf(image.clone(), false);
        let feats = forward(&mut tape, &bind, &cfg, img).expect("probe forward");
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
        .expect("probe loss");
        tape.scalar_value(parts.total)
    };

    let report = sampled_check(f, &flat_x, &analytic, DEFAULT_EPS, n_coords, &mut rng)?;
    let worst = report.worst.map(|(ci, a, n)| {
        let which = spans.iter().rposition(|&(s, _)| s <= ci).unwrap();
        (paths[which].clone(), ci - spans[which].0, a, n)
    });
    Ok(NetworkCheck {
        params: total,
        coords: report.checked,
        max_rel_err: report.max_rel_err,
        pass: report.passes(tol),
        seconds: start.elapsed().as_secs_f64(),
        worst,
    })
}
