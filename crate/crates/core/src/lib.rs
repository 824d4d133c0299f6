//! Drivable Gaussian head avatars from a synthetic prior.
//!
//! A VQ encoder–decoder maps UV-space identity and expression maps to
//! per-part Gaussian primitives, which a tile-based differentiable splatter
//! renders. A two-stage pivotal tuning adapts the prior to a few images of a
//! new subject.

pub mod container;
pub mod error;
pub mod exec;
pub mod geometry;
pub mod imageio;
pub mod math;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod primitives;
pub mod prior;
pub mod splatter;
pub mod synthgen;
pub mod uvmap;

pub use error::{Error, Result};
