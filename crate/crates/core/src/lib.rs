//! Transformer translation with dependency-supervised encoder attention heads.

pub mod bleu;
pub mod cli;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod syntax;
pub mod toy;
pub mod train;
pub mod treedec;

pub use error::{Error, Result};
