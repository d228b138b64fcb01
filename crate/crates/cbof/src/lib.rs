//! Neural-network training library built around a trainable RBF-quantization
//! pooling layer. A small convolutional block turns an image of any size into
//! a grid of feature vectors; the pooling layer compresses that grid into a
//! fixed-length histogram of soft codeword memberships (optionally split into
//! spatial regions); an MLP classifies the histogram. Because the histogram
//! length never depends on the image size, one network trains and evaluates
//! across sizes.
//!
//! `models::Network` assembles the full pipeline, `train` exposes the
//! experiment commands the CLI wraps, and everything underneath (tensors,
//! layers, optimizer, IDX data handling) is public for direct use.

pub mod bof;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use bof::{BofLayer, Codebook, SpatialLevel};
pub use config::RunConfig;
pub use data::{load_idx, resize, Dataset, LabeledImage, SizeSchedule};
pub use error::{Error, Result};
pub use models::{count_head_params, evaluate, HeadKind, ModelSpec, Network};
pub use optim::{Adam, GroupRates, Param, ParamGroup};
pub use rng::{SeedStreams, Stream};
pub use tensor::Tensor;
