// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fields;
pub mod io;
pub mod lattice;
pub mod morrey;
pub mod potentials;
pub mod quadrature;
pub mod sde;
pub mod solver;
pub mod stats;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
