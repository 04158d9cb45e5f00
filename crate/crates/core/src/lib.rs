//! Differentiable soft-body simulation on tetrahedral meshes.
//!
//! One time step solves the linearized implicit-Euler system
//! `A dv = b + h Haᵀ λa + h Hcᵀ λc` with `A = M + hD + h²K`, detects contacts
//! with GJK, resolves frictional contact as a second-order-cone NCP, and
//! advances `x_f = x_i + h v_f`. Every stage has an analytical derivative so
//! that a whole step can be differentiated with respect to initial state,
//! actuation and material parameters.
//!
//! The crate is `no_std` and only needs `alloc`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod actuation;
pub mod collision;
pub mod constitutive;
pub mod contact;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod mesh;
pub mod oracles;
pub mod scene;
pub mod sensitivity;
pub mod tasks;

pub use error::{Error, Result};
pub use linalg::{CsrMatrix, DMat, DVec, Mat3, Vec3};
