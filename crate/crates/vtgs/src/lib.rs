//! RGBD SLAM with view-tied isotropic 3D Gaussians.
//!
//! The scene is represented by spherical Gaussians anchored to depth pixels.
//! Each Gaussian stores only color, radius and opacity; its world position is
//! derived from the owning frame's pose and the anchored depth pixel, so it is
//! never stored or learned. Gaussians from `N` consecutive frames form a
//! section that is optimized while current and frozen afterwards, which bounds
//! the set of learnable parameters independent of sequence length.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grad;
pub mod image_buf;
pub mod loss;
pub mod mapper;
pub mod optim;
pub mod pipeline;
pub mod render;
pub mod section_io;
pub mod synth;
pub mod tracker;
pub mod types;
pub mod visibility;

pub use error::{Error, Result};
pub use geometry::{back_project, project, CameraIntrinsics, Pose, Projection};
pub use types::{Frame, Gaussian, Section, SectionState};
