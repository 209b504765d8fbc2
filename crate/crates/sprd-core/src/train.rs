//! Batched Adam training: cached label assignment, deterministic batch
//! rotation, global-norm gradient clipping, and divergence guards.

use crate::anchors::AnchorGrid;
use crate::config::RunConfig;
use crate::data::dataset::Sample;
use crate::error::{Result, SprError};
use crate::loss::{build_losses, prepare_image_targets, ImageTargets};
use crate::model::{forward, init_params, Binding};
use crate::num::Element;
use crate::optim::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Divergence guard: a total loss above this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub step: u64,
    pub cls: f64,
    pub reg: f64,
    pub mask: f64,
    pub total: f64,
    /// Pre-clip global gradient norm.
    pub grad_norm: f64,
    pub positives: usize,
    pub mask_pixels: usize,
}

impl StepMetrics {
    pub fn csv_header() -> &'static str {
        "step,L_cls,L_reg,L_mask,total,grad_norm"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.step, self.cls, self.reg, self.mask, self.total, self.grad_norm
        )
    }
}

/// Training state over a fixed in-memory dataset. Label assignment runs once
/// per image up front; steps rotate deterministically through the images.
pub struct TrainSession<E: Element> {
    pub run: RunConfig,
    pub store: ParamStore<E>,
    pub grid: AnchorGrid,
    pub step: u64,
    targets: Vec<ImageTargets>,
    inputs: Vec<Tensor<E>>,
}

impl<E: Element> TrainSession<E> {
    pub fn new(run: &RunConfig, samples: &[Sample]) -> Result<Self> {
        let store = init_params::<E>(&run.model, run.seed)?;
        Self::with_store(run, samples, store, 0)
    }

    /// Resumes from existing parameters (checkpoint restarts).
    pub fn with_store(
        run: &RunConfig,
        samples: &[Sample],
        store: ParamStore<E>,
        step: u64,
    ) -> Result<Self> {
        run.validate()?;
        if samples.is_empty() {
            return Err(SprError::Data("training set is empty".into()));
        }
        let (w, h) = (samples[0].image.w, samples[0].image.h);
        if samples.iter().any(|s| s.image.w != w || s.image.h != h) {
            return Err(SprError::Data("training images must share one size".into()));
        }
        let grid = AnchorGrid::build(&run.model.anchors, h, w, &run.model.backbone.strides)?;
        let a = &run.assign;
        let mut targets = Vec::with_capacity(samples.len());
        let mut inputs = Vec::with_capacity(samples.len());
        for s in samples {
            targets.push(prepare_image_targets(
                &grid,
                &s.boxes,
                &s.classes,
                &s.masks,
                a.box_pos_iou,
                a.box_neg_iou,
                a.mask_pos_iou,
                a.mask_cap,
            )?);
            inputs.push(s.image.to_input::<E>());
        }
        Ok(TrainSession { run: run.clone(), store, grid, step, targets, inputs })
    }

    pub fn num_images(&self) -> usize {
        self.inputs.len()
    }

    /// One optimizer step over the next batch. Returns the step's metrics or
    /// aborts on non-finite or runaway loss.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let n = self.inputs.len();
        let b = self.run.train.batch_size.min(n);
        let first = (self.step as usize).wrapping_mul(b) % n;
        let idxs: Vec<usize> = (0..b).map(|j| (first + j) % n).collect();

        let mut tape: Tape<E> = Tape::new();
        let bind = Binding::bind(&mut tape, &self.store, true);
        let leaves: Vec<_> =
            idxs.iter().map(|&i| tape.leaf(self.inputs[i].clone(), false)).collect();
        let batch = if leaves.len() == 1 { leaves[0] } else { tape.concat_batch(&leaves)? };
        let feats = forward(&mut tape, &bind, &self.run.model, batch)?;

        let images: Vec<ImageTargets> = idxs
            .iter()
            .map(|&i| {
                let mut t = self.targets[i].clone();
                t.subsample_mask_pixels(self.run.train.mask_pixels, self.step);
                t
            })
            .collect();
        let parts = build_losses(
            &mut tape,
            &bind,
            &feats,
            &self.run.model.decoder,
            &self.grid,
            &images,
            self.run.model.classes,
            &self.run.loss,
        )?;

        let total = tape.scalar_value(parts.total).to_f64();
        if !total.is_finite() {
            return Err(SprError::NonFinite(format!("total loss at step {}", self.step)));
        }
        if total > DIVERGENCE_LIMIT {
            return Err(SprError::Diverged { step: self.step as usize, loss: total });
        }

        let grads = tape.backward(parts.total)?;
        for (path, &var) in bind.iter() {
            match grads.get(var) {
                Some(g) => self.store.set_grad(path, g.clone()),
                // A batch with no mask pixels leaves the decoder disconnected;
                // its gradient is an honest zero.
                None => {
                    let shape = self.store.value(path).shape();
                    self.store.set_grad(path, Tensor::zeros(shape));
                }
            }
        }
        let grad_norm = self.store.clip_gradients(self.run.train.clip_norm);
        self.store.adam_step(&self.run.train.adam);
        self.store.clear_grads();

        let metrics = StepMetrics {
            step: self.step,
            cls: tape.scalar_value(parts.cls).to_f64(),
            reg: tape.scalar_value(parts.reg).to_f64(),
            mask: tape.scalar_value(parts.mask).to_f64(),
            total,
            grad_norm,
            positives: parts.positives,
            mask_pixels: parts.mask_pixels,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` optimizer steps, reporting each to `sink`.
    pub fn run_steps(&mut self, steps: u64, mut sink: impl FnMut(&StepMetrics)) -> Result<()> {
        for _ in 0..steps {
            let m = self.step_once()?;
            sink(&m);
        }
        Ok(())
    }
}
