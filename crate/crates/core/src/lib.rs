//! Fourier neural processes for arbitrary-resolution data assimilation on lat/lon grids.
//!
//! A gridded background and a sparse observation set, each possibly at its own resolution,
//! are embedded with SetConv layers, processed by neural Fourier layers, merged on the
//! background grid and decoded into a per-channel Gaussian analysis.

pub mod baselines;
pub mod config;
pub mod conv;
pub mod dam;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod interp;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nfl;
pub mod report;
pub mod seeds;
pub mod spectral;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod var3d;

pub use error::{FnpError, Result};
