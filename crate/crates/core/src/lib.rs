//! Independent Metropolis sampling with Poisson-equation control variates.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dist;
pub mod linalg;
pub mod quadrature;
pub mod rng;
pub mod proposals;
pub mod targets;
pub mod adaptation;
pub mod kernel;
pub mod estimators;
pub mod data;
pub mod modelselect;
pub mod bounds;
pub mod experiments;
