//! Take-a-Peek at desk scale: test-time adaptation of a segmentation
//! encoder on a few-shot support set via low-rank adapters.
//!
//! The crate provides:
//! - a minimal f64 tensor library with reverse-mode autodiff ([`tensor`]),
//! - low-rank adapters with merge/unmerge and parameter accounting ([`lora`]),
//! - a tiny reference encoder-decoder segmentation model ([`refnet`]),
//! - the class-weighted focal loss and mIoU metric ([`loss`], [`metrics`]),
//! - a synthetic fold-structured shape benchmark ([`episodes`]),
//! - the adaptation engine with baselines ([`engine`]),
//! - the evaluation harness and command drivers ([`config`], [`driver`]).

pub mod config;
pub mod driver;
pub mod engine;
pub mod episodes;
pub mod error;
pub mod loss;
pub mod lora;
pub mod metrics;
pub mod refnet;
pub mod tensor;
pub mod util;

pub use engine::{adapt, predict_query, run_method, AdaptConfig, AdaptedModel, Method};
pub use error::{Error, Result};
pub use episodes::{Episode, FoldSplit};
pub use lora::{AdapterSet, LoraAdapter, TargetPolicy};
pub use refnet::{ModelConfig, ModelState, Variant};
pub use tensor::{Tape, Tensor, Var};
