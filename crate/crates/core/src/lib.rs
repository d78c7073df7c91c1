//! Backward-pass gating for post-densification Gaussian splatting training,
//! embedded in a small CPU trainer so its speed/quality trade-off can be
//! measured end to end.

pub mod cli;
pub mod densify;
pub mod gating;
pub mod image;
pub mod losses;
pub mod optim;
pub mod renderer;
pub mod scene;
pub mod trainer;

pub use image::Image;
