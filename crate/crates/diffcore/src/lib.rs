//! Reverse-mode differentiation over dense real matrices.
//!
//! Values are two-dimensional [`Tensor`]s; complex matrices are carried as
//! split real/imaginary pairs ([`ComplexTensor`], [`CVar`]) so that the
//! gradient machinery stays real-valued. Each forward pass records onto a
//! fresh [`Graph`], and [`Graph::backward`] consumes it.
//!
//! ```
//! use fdd_diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod complex;
mod error;
mod gradcheck;
mod graph;
mod real;
mod tensor;

pub use complex::{CVar, ComplexTensor};
pub use error::{DiffError, Result, Shape};
pub use gradcheck::{grad_check, grad_check_with_floor, GradCheckReport, DEFAULT_REL_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
