//! Reconstruction of conformally deforming surfaces from tracked image
//! points, built on invariants of the moving-frame connection.

pub mod constraints;
pub mod depth;
pub mod evaluation;
pub mod geometry;
pub mod graph;
pub mod jet2;
pub mod nlls;
pub mod solver;
pub mod spline;
pub mod synthetic;
