pub mod bench;
pub mod calibration;
pub mod camera;
pub mod config;
pub mod error;
pub mod kinematics;
pub mod overlay;
pub mod pnp;
pub mod se3;
pub mod serve;
pub mod sim;
pub mod delay;
pub mod teleop;
pub mod tracker;
pub mod wire;

pub use error::{Error, Result};
