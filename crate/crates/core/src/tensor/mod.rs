//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Everything the model computes is expressed as 2-D arrays: vectors are
//! `1 x n` rows and scalars are `1 x 1`. A [`Graph`] records one forward pass;
//! [`Graph::backward`] accumulates parameter gradients into [`Gradients`].

mod graph;
mod params;

pub use graph::{Block, Graph, Var};
pub use params::{Family, Gradients, Group, Param, ParamId, ParamStore};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type the engine runs on (`f32` or `f64`).
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}
