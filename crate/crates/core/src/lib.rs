//! Recovers iterated-function-system fractal codes from raster images.
//!
//! The pipeline: a batch of chaos-game trajectories turns a candidate code
//! into a point cloud ([`chaos`]), the points are splatted into an image with
//! differentiable Gaussian footprints ([`splat`]), a multi-scale image loss
//! compares the render against the target ([`loss`]), hand-derived reverse-mode
//! gradients flow from pixels back to the code parameters ([`grad`]), and a
//! hybrid Adam / simulated-annealing loop drives the search ([`optim`]).
//! Recovered codes re-render at arbitrary zoom through the fast
//! point-accumulation path in [`render`].
//!
//! Conventions used throughout:
//! - All numerics are `f64`; images are row-major with `(0,0)` top-left.
//! - Pixel intensities live in `[0, 1]` with 1.0 = foreground (fractal set).
//! - World coordinates are mapped to pixels through a [`canvas::ViewWindow`];
//!   y grows upward in world space and downward in pixel space.
//! - Every randomized stage draws from counter-based streams keyed by a
//!   user seed (see [`rng`]), so results are independent of thread count
//!   and schedule.

pub mod canvas;
pub mod chaos;
pub mod codec;
pub mod config;
pub mod error;
pub mod grad;
pub mod ifs;
pub mod loss;
pub mod optim;
pub mod render;
pub mod rng;
pub mod splat;
pub mod suite;

pub use error::{Error, Result};
