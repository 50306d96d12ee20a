pub mod analysis;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod offpolicy;
pub mod onpolicy;
pub mod scenario;
pub mod serde_mat;
pub mod sim;

pub use error::{Error, Result};
