//! Sparse 3D voxel engine with long range pooling.
//!
//! The crate covers voxelization, hashed kernel maps, differentiable sparse
//! ops on a reverse-mode tape, the long range pooling block and its
//! ablation variants, a four-stage sparse U-Net, training on synthetic rooms,
//! segmentation metrics and effective-receptive-field analysis.

pub mod acceptance;
pub mod cli;
pub mod config;
pub mod erf;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lrp;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod oracle;
pub mod params;
pub mod seed;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod voxel;

pub use error::{Error, Result};
pub use tensor::Matrix;
pub use voxel::{PointCloud, SparseTensor, VoxelCoord};
