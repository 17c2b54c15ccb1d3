//! Discrete one-sided limit order book model, its deterministic first-order
//! limit and the Gaussian second-order limits in the fast and slow regimes.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`.

pub mod error;
pub mod fom;
pub mod grid;
pub mod harness;
pub mod liquidation;
pub mod model;
pub mod regime;
pub mod scalar;
pub mod simulator;
pub mod som_fast;
pub mod som_slow;
pub mod stats;

pub use error::{Error, Result};
pub use fom::{solve_first_order, solve_first_order_with, FomOptions, LimitPath, LimitTrack};
pub use grid::{inner_product, project_to_grid, Grid, GridFunction, InterpOrder, Shift, TestFunction};
pub use model::{InitialShape, ModelParams, ModelSpec};
pub use regime::{RegimeKind, ScalingRegime};
pub use scalar::Real;
pub use simulator::{BookState, EventDraw, EventKind, PathRecord, Simulator};

pub type Grid64 = Grid<f64>;
pub type LimitPath64 = LimitPath<f64>;
pub type GridFunction64 = GridFunction<f64>;
pub type ModelSpec64 = ModelSpec<f64>;
pub type ScalingRegime64 = ScalingRegime<f64>;
