//! Same-hand ballot mark retrieval.
//!
//! The crate is organised around the life of a mark image:
//!
//! - [`synth`] generates writer styles, mark images and whole ballots with
//!   ground-truth masks.
//! - [`encoder`] maps a mark image to an L2-normalized embedding and
//!   differentiates that map exactly.
//! - [`objective`] holds the dense-batch similarity matrix, the dual
//!   row/column cross-entropy plus diagonal BCE loss, and the pairwise BCE
//!   baseline.
//! - [`trainer`] builds aligned-positive batches, runs Adam, and evaluates
//!   pair F1 and top-k retrieval.
//! - [`retrieval`] is the deployment side: an aliased embedding pool ranked
//!   by softmax-normalized similarity.
//! - [`segmentation`] extracts a mark from a ballot page given a point or box
//!   prompt.

pub mod encoder;
pub mod error;
pub mod objective;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod segmentation;
pub mod synth;
pub mod trainer;

pub use encoder::{EmbeddingVector, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use objective::{LossBreakdown, LossConfig, SimilarityMatrix};
pub use raster::{BBox, BitMask, GrayImage, MarkImage};
pub use retrieval::{HeatmapMatrix, Pool, PoolRecord, RankedMatch};
pub use segmentation::{MaskSegment, SegmentPrompt};
pub use synth::{SyntheticBallot, WriterGroup, WriterStyle};
pub use trainer::{TrainConfig, TrainReport};
