pub mod autograd;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod fixture;
pub mod fsutil;
pub mod kg_store;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
