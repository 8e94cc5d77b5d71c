//! Referring image segmentation at desk scale: synthetic scenes, a frozen
//! embedding backend supplying an object prior, a bidirectional multimodal
//! decoder and the training, inference and evaluation harness around them.

pub mod ablation;
pub mod backend;
pub mod checkpoint;
pub mod cmd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod infer;
pub mod matching;
pub mod mcc;
pub mod model;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod prior;
pub mod tensor_file;
pub mod text;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
