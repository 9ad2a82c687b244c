//! Registration-based image synthesis.
//!
//! A moving scan is aligned to a fixed scan with a diffeomorphic transform
//! (a stationary velocity field exponentiated by scaling and squaring),
//! estimated by multi-resolution gradient descent on a weighted sum of MSE,
//! NCC and soft Dice terms. The same transform is then applied to other
//! contrasts acquired with the moving scan, and several warped atlases are
//! fused into one synthetic volume.

pub mod error;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod objective;
mod par;
pub mod phantom;
pub mod registration;
pub mod sampler;
pub mod synthesis;
pub mod transform;

pub use error::{Error, Result};
pub use grid::{Geometry, LabelMap, Pyramid, VectorField, Volume};
pub use objective::{LossConfig, LossKind, LossReport, LossTarget, LossTerm};
pub use registration::{register, register_batch, RegistrationConfig, RegistrationResult, Scan};
pub use synthesis::{AtlasSubject, FusionMethod, FusionResult};
pub use transform::{DisplacementField, VelocityField};
