//! Visual in-context prompting for generalizable object re-identification.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod connector;
pub mod error;
pub mod losses;
pub mod nn;
pub mod ot;
pub mod params;
pub mod pipeline;
pub mod promptgen;
pub mod reid_eval;
pub mod seed;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
