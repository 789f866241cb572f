//! Numerical laboratory for the mean curvature flow of a graph in a product
//! of Riemann surfaces whose metric evolves by the Kähler–Ricci flow.

pub mod ambient;
pub mod base_geometry;
pub mod cli_io;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod grid;
pub mod immersion;

pub use error::Error;
