//! Simulation of entangled multi-prover low-degree tests over GF(p^t).

pub mod error;
pub mod gf;
pub mod rmpoly;
pub mod qsim;
pub mod games;
pub mod css;
pub mod linpcp;
pub mod ham;
pub mod harness;

pub use error::{Error, Result};
pub use gf::{Elem, Field, FieldRef, FieldSpec};
