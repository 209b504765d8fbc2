//! One-stage instance segmentation at desk scale: a tiny backbone with gated
//! feature-pyramid fusion, dense anchor heads, a per-pixel 32x32 mask
//! reconstruction branch, reverse-mode differentiation, Adam training,
//! inference post-processing, and a COCO-protocol evaluator, all runnable on
//! synthetic shape scenes.

pub mod anchors;
pub mod assign;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geom;
pub mod gradcheck;
pub mod heads;
pub mod infer;
pub mod kernels;
pub mod loss;
pub mod mask_branch;
pub mod model;
pub mod num;
pub mod optim;
pub mod tape;
pub mod train;
pub mod tensor;

pub use anchors::{AnchorConfig, AnchorGrid, LevelAnchors};
pub use assign::{AnchorState, BoxLabels, PixelPositive, MASK_SIZE};
pub use backbone::{BackboneConfig, PyramidMode};
pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use config::{AssignConfig, InferConfig, Precision, RunConfig, TrainConfig};
pub use data::dataset::{read_dataset, write_dataset, Annotations, Sample};
pub use data::ppm::Image;
pub use data::synth::{synth_scene, Scene, SceneSpec};
pub use error::{Result, SprError};
pub use eval::{build_eval_images, summarize, write_eval_result, write_pr_csv, EvalConfig, EvalResult, KindMetrics};
pub use geom::{decode_deltas, encode_deltas, BBox, Mask};
pub use heads::HeadConfig;
pub use infer::{detect_image, paste_mask, read_detections, top_k_pixels, write_detections, Candidate, Detection, DetectionRec};
pub use kernels::{ColRef, ConvMeta};
pub use loss::{ImageTargets, LossConfig, LossParts};
pub use mask_branch::{DecoderConfig, FusionConfig, FusionMode, PixelRef};
pub use model::{forward, init_params, Binding, Features, ModelConfig};
pub use num::Element;
pub use optim::{AdamConfig, ParamStore};
pub use tape::{Grads, Tape, Var};
pub use train::{StepMetrics, TrainSession};
pub use tensor::Tensor;
