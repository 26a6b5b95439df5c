//! Weakly-supervised whole-slide image classification at desk scale.
//!
//! The pipeline runs in two stages. Slides are tiled into tissue patches
//! ([`tiling`]) and embedded by a frozen block-structured encoder
//! ([`encoder`]); an attention head ([`mil_head`]) pools each slide's patch
//! embeddings into a slide prediction. The second stage ([`finetune`])
//! keeps the top-k attended patches per slide and updates encoder and head
//! jointly. [`cka`] compares block representations before and after
//! fine-tuning, and truncated encoders reuse the retained prefix of the
//! full one. Feature matrices cross process boundaries in the `HISTOFTR`
//! container ([`feature_store`]).

pub mod error;
pub mod linalg;
pub mod seed;
pub mod slide;
pub mod tiling;
pub mod encoder;
pub mod feature_store;
pub mod eval;
pub mod mil_head;
pub mod finetune;
pub mod cka;
pub mod pipeline;
pub mod cli;

pub use error::{Error, Result};
pub use linalg::Matrix;
