pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod fit;
pub mod linalg;
pub mod optim;
pub mod robust_loss;
pub mod sampling_baseline;
pub mod shooting_mpc;
pub mod smooth_net;
pub mod tasks;
pub mod trainer;

pub use error::{Result, SnsError};
