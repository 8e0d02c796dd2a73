//! Entity alignment between two knowledge graphs with a highway-gated GCN
//! student distilled from a translation-based teacher.
//!
//! The pipeline is: [`kgdata`] loads or generates a graph pair, [`trainer`]
//! pretrains the teacher and then the student, and [`eval`] ranks the test
//! alignments. Everything runs on the small autodiff core in [`numkit`].

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod kgdata;
pub mod numkit;
pub mod objectives;
pub mod sampling;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
