//! Semi-supervised severity representation learning at desk scale.
//!
//! Training runs in two phases. Phase one separates healthy from anomalous
//! images with a margin contrastive loss. Phase two mixes an NT-Xent term on
//! augmented views with a preference term that pushes more severe samples
//! farther from a healthy reference embedding.

pub(crate) mod binio;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod ndcore;
pub mod nets;
pub mod pipeline;
pub mod selfcheck;
pub mod synthdata;

pub use error::{Result, SemiseError};
pub use binio::write_atomic;
