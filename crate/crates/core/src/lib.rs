pub mod binmap;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
