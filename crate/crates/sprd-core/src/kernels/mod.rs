//! Forward kernels and their vector-Jacobian products. Everything here is a
//! pure function of its inputs; the tape module wires them into a graph.

pub mod conv;
pub mod elementwise;
pub mod gather;
pub mod resize;

pub use conv::{conv_out_dim, convt_out_dim, ConvMeta};
pub use gather::ColRef;
