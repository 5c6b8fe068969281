pub mod accdoa;
pub mod checkpoint;
pub mod error;
pub mod events;
pub mod features;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};
