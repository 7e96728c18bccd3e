pub mod cli;
pub mod data;
pub mod error;
pub mod finetune;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod pretrain;
pub mod seed;

pub use error::{Error, Result};
