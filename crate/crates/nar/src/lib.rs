//! File formats, dataset generation, training, evaluation, the command-line
//! tool and the HTTP/WebSocket render service built on `nar-core`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod narpc;
pub mod planes;
pub mod render;
pub mod server;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
