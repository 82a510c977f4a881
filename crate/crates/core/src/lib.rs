//! Purified process tensors of finite-environment open quantum evolutions.
//!
//! An open evolution is described by a system of dimension `d` coupled to a
//! finite environment of dimension `D` through step unitaries. Feeding half of
//! a maximally entangled pair into the system at every step and keeping the
//! environment produces a pure state, the purified process tensor, which is a
//! matrix product state with bond dimension `D`.
//!
//! Modules, bottom up:
//! - [`tensor`]: dense complex arrays and decompositions
//! - [`oqe`]: the hidden evolution model and random ensembles
//! - [`ppt`]: construction, canonical forms and conversion back to a model
//! - [`memory`]: transfer matrices, stationary states, memory complexity
//! - [`correlate`]: multi-time expectation values
//! - [`tomography`]: reconstruction from reduced density operators

pub mod correlate;
pub mod cserde;
pub mod error;
pub mod memory;
pub mod oqe;
pub mod ppt;
pub mod tensor;
pub mod tomography;

pub use error::{Error, Result};
pub use oqe::{OqeModel, SchmidtForm};
pub use ppt::{Canonical, InitialLeg, PptMps};
pub use tensor::{CMatrix, ComplexTensor, C64};
