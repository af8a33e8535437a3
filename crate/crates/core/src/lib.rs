//! CPU library for training and rendering textured 2D Gaussian surfels.
//!
//! Surfels are flat elliptical Gaussians carrying a spherical-harmonics base
//! color and a world-anchored texture grid whose texel size adapts to image
//! content during optimization. Everything runs in f64 on the CPU: a
//! differentiable forward renderer, analytic gradients for every parameter
//! class, progressive texel-size adaptation with resolution-aware splitting,
//! and a full training loop over multi-view datasets.

pub mod adaptation;
pub mod autodiff;
pub mod camera;
pub mod error;
pub mod geometry;
pub mod img;
pub mod math;
pub mod metrics;
pub mod renderer;
pub mod scene;
pub mod scene_io;
pub mod texture;
pub mod trainer;

pub use camera::Camera;
pub use error::{Error, Result};
pub use geometry::{Primitive, Ray};
pub use img::Image;
pub use scene::Scene;
pub use texture::{TextureGrid, TexturePool};
