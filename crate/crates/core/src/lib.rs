//! Unsupervised dense correspondence between non-rigid point clouds.
//!
//! A shared edge-convolution network embeds each cloud into a per-point
//! feature field; cosine affinity between fields drives soft cross- and
//! self-construction of the clouds, and the construction losses train the
//! embedding without any matching labels. At inference the best latent
//! neighbor of each source point is its match.

pub mod affinity;
pub mod autodiff;
pub mod cli;
pub mod datagen;
pub mod feature_net;
pub mod geometry;
pub mod losses;
pub mod matcher;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use geometry::{NeighborGraph, PointCloud};
pub use tensor::Tensor;
