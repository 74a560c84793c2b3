pub mod adversarial;
pub mod autodial;
pub mod checkpoint;
pub mod error;
pub mod loss;
pub mod mkmmd;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{CoreError, Result};
