// NaN-rejecting guards are written as negated comparisons on purpose, and
// index loops mirror the component formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod icnn;
pub mod io;
pub mod normalize;
pub mod potentials;
pub mod refmat;
pub mod solver;
pub mod symtensor;
pub mod training;

pub use error::{Error, Result};
pub use symtensor::{IsoStiffness, SymTensor2};
