//! File formats, corpus storage and the command-line harness around
//! [`tsn_core`].

pub mod bench;
pub mod checkpoint;
pub mod config_file;
pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod infer;
pub mod pnm;
pub mod tensor_io;
pub mod train;

pub use error::{Result, TsnError};
pub use tsn_core as core;
