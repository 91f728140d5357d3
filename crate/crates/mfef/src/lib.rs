//! MFEF: online knowledge distillation through multi-scale feature
//! extraction and fusion.
//!
//! A cohort of student classifiers trains jointly. Each student's last-stage
//! feature map is expanded by a multi-scale divide/concatenate cascade,
//! refined by sequential channel and spatial attention, and fused across
//! students into an auxiliary fusion classifier. Knowledge flows both ways
//! through temperature-softened KL losses: the aggregated students teach the
//! fusion classifier, and the fusion classifier teaches every student.
//!
//! The crate is a library plus the `mfef` experiment CLI. All numeric blocks
//! are generic over `f32`/`f64` and ship hand-written backward passes that
//! are verified against central finite differences.

pub mod attention;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod models;
pub mod msfe;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{MfefError, Result};
