//! Uniformly accurate (UA) integrators for highly oscillatory evolution
//! equations du/dt = f_{t/eps}(u), where f is 1-periodic in the fast phase
//! theta = t/eps and eps ranges anywhere in (0, 1].
//!
//! Two averaging-based transformations soften the stiffness so that standard
//! schemes keep their order uniformly in eps:
//!
//! * the **micro-macro** split (standard averaging): a slow macro variable
//!   driven by the averaged field plus a small micro corrector,
//! * the **pullback** transformation (stroboscopic averaging): the exactly
//!   transformed equation, built on implicit-midpoint changes of variables
//!   so quadratic first integrals survive the transformation.
//!
//! On top sit five UA time steppers of orders 2-4 and two benchmark
//! problems: the filtered Henon-Heiles system and the 1-d nonlinear
//! Klein-Gordon equation in its nonrelativistic regime.

pub mod averaging;
pub mod error;
pub mod field;
pub mod micromacro;
pub mod problems;
pub mod pullback;
pub mod schemes;
pub mod state;
pub mod torus;

pub use error::{Error, Result};
pub use state::{C64, State};
