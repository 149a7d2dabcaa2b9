pub mod autograd;
pub mod compositors;
pub mod corpus;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod experiments;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod runs;
pub mod seeds;
pub mod tensor;
pub mod trainer;

pub use error::{CssError, Result};
