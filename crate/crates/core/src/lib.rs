//! Portmanteau-feature scene text recognition.
//!
//! The pipeline fuses a padded view and a rectified view of a text image into
//! one patch embedding whose two halves start out decoupled, encodes it with
//! alternating column (y) and sequence (x) attention, and decodes characters
//! autoregressively.

pub mod attention;
pub mod bench;
pub mod data;
pub mod davit;
pub mod diagnostics;
pub mod decoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod model;
pub mod optim;
pub mod portmanteau;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
