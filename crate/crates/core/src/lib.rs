//! Attention-based dual-stream 3D CNN for four-class visual-imagery EEG,
//! with the preprocessing, statistics and synthetic-data tooling around it.

pub mod adsnet;
pub mod attention;
pub mod dsp;
pub mod eegio;
pub mod error;
pub mod kv;
pub mod montage;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
