//! Camera-incremental re-identification on synthetic or pre-extracted features.
//!
//! A small MLP encoder is trained one camera at a time. Identities are
//! associated across cameras through a growing identity memory, and
//! distillation against the previous encoder limits forgetting.

pub mod association;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod harness;
pub mod json;
pub mod losses;
pub mod memory;
pub mod optim;
pub mod seeding;
pub mod synth;
pub mod trainer;

pub use error::{IkeError, Result};
