//! Image-to-gene-expression pipeline: dual-resolution tiling, compression-based
//! patch selection, convolutional feature extraction and a dual-attention
//! predictor, built on a small reverse-mode differentiation core.

pub mod config;
pub mod diff;
pub mod dual_attn;
pub mod eval;
pub mod features;
pub mod patch_select;
pub mod pipeline;
pub mod seeds;
pub mod slide_io;
pub mod synth;
pub mod verify;
