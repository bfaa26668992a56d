//! Numerical laboratory for the half-space Airy line ensemble and its pinned
//! limit: contour-integral kernels, Pfaffians, factorial moments, Brownian
//! samplers and GSE spectra, plus the studies that cross-check them.

pub mod cli;
pub mod ensembles;
pub mod kernels;
pub mod pfaffian;
mod precise;
pub mod quad;
pub mod verify;
