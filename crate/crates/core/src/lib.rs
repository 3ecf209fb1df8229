//! Low-rank tensor-train completion with Riemannian optimisation.

pub mod completion;
pub mod embedded;
pub mod error;
pub mod io;
pub mod linalg;
pub mod quotient;
pub mod solvers;
pub mod tt;

pub use error::{Error, Result};
