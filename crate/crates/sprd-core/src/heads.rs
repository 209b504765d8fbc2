//! Classification and box-regression heads shared across pyramid levels.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{conv_block, Binding};
use crate::num::Element;
use crate::optim::{he_normal, normal, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::ConvMeta;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Number of 3x3 convs in each tower.
    pub tower_depth: usize,
    /// Expected initial foreground probability; sets the class-output bias to
    /// -ln((1-prior)/prior) so initial scores sit near it.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { tower_depth: 4, prior: 0.01 }
    }
}

/// Registers both head towers and output layers. The class output starts at
/// the prior bias; the box output starts at zero so decoded boxes equal their
/// anchors.
pub fn init_heads<E: Element>(
    store: &mut ParamStore<E>,
    cfg: &HeadConfig,
    p: usize,
    anchors_per_pixel: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for branch in ["cls", "box"] {
        for t in 0..cfg.tower_depth {
            store.insert(&format!("head.{branch}.tower{t}.w"), he_normal([p, p, 3, 3], rng))?;
            store.insert(&format!("head.{branch}.tower{t}.b"), Tensor::zeros([p, 1, 1, 1]))?;
        }
    }
    let ck = anchors_per_pixel * classes;
    let bias = -((1.0 - cfg.prior) / cfg.prior).ln();
    store.insert("head.cls.out.w", normal([ck, p, 3, 3], 0.01, rng))?;
    store.insert("head.cls.out.b", Tensor::full([ck, 1, 1, 1], E::from_f64(bias)))?;
    store.insert("head.box.out.w", Tensor::zeros([anchors_per_pixel * 4, p, 3, 3]))?;
    store.insert("head.box.out.b", Tensor::zeros([anchors_per_pixel * 4, 1, 1, 1]))?;
    Ok(())
}

fn tower<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    branch: &str,
    cfg: &HeadConfig,
    level: Var,
) -> Result<Var> {
    let mut x = level;
    for t in 0..cfg.tower_depth {
        x = conv_block(tape, bind, &format!("head.{branch}.tower{t}"), x, ConvMeta::new(1, 1, 1), true)?;
    }
    conv_block(tape, bind, &format!("head.{branch}.out"), x, ConvMeta::new(1, 1, 1), false)
}

/// Per-anchor per-class logits, [N, A*K, h, w].
pub fn class_head_forward<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &HeadConfig,
    level: Var,
) -> Result<Var> {
    tower(tape, bind, "cls", cfg, level)
}

/// Per-anchor box deltas (tx, ty, tw, th), [N, A*4, h, w].
pub fn box_head_forward<E: Element>(
    tape: &mut Tape<E>,
    bind: &Binding,
    cfg: &HeadConfig,
    level: Var,
) -> Result<Var> {
    tower(tape, bind, "box", cfg, level)
}
