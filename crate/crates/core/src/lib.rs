//! RGB-only dense SLAM with a deformable 3D Gaussian map.
//!
//! The pipeline tracks camera poses and per-pixel disparities over a factor
//! graph of dense flow observations, fuses consistent multi-view depth with
//! scaled monocular depth into proxy depth maps, and optimizes a 3D Gaussian
//! scene through differentiable splatting. Loop closure and global bundle
//! adjustment feed pose and depth updates back into the map through a
//! closed-form deformation.

pub mod eval;
pub mod frontend;
pub mod gaussians;
pub mod geometry;
pub mod grid;
pub mod mapping;
pub mod pipeline;
pub mod proxy;
pub mod render;
pub mod synth;
pub mod testing;
pub mod tracking;

pub mod config;
