//! Self-supervised pretraining of vision transformers with a sparse
//! convolutional tokenizer, plus frozen-feature probing and patch-feature
//! analysis. Everything runs on the CPU on top of a small reverse-mode
//! autodiff engine; no external ML runtime is involved.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod model;
pub mod module;
pub mod optim;
pub mod pca;
pub mod probe;
pub mod sparse;
pub mod stem;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use error::{Error, Result};
