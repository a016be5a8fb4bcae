pub mod attentive;
pub mod autodiff;
pub mod background;
pub mod caf;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod nonlocal;
pub mod optim;
pub mod pnm;
pub mod protocol;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
