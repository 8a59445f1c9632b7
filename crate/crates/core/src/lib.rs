//! Segmentation-guided conditional diffusion for real-world image
//! super-resolution.
//!
//! A segmentation map of the LR input drives three conditions: a text prompt
//! built from its class names, a colorized mask, and a per-pixel map of class
//! text embeddings. The last two modulate UNet features through pointwise
//! scale-and-shift blocks.

pub mod config;
pub mod degradation;
pub mod diffusion;
pub mod dsg;
pub mod error;
pub mod fixtures;
pub mod gfm;
pub mod imageops;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod scmap;
pub mod seed;
pub mod segmentation;
pub mod slbp;
pub mod taxonomy;
pub mod text_embedding;

pub use config::RunConfig;
pub use diffusion::{NoiseSchedule, SrModel, UNetConfig};
pub use dsg::{ColorPalette, GuidanceBundle, GuidanceMode};
pub use error::{Error, Result};
pub use gfm::{FusionMode, Gfm, SaftBlock};
pub use metrics::{MetricReport, Psnr};
pub use scmap::{SCMap, SCMapCompressor};
pub use segmentation::{SegmentationMap, SegmenterBackend};
pub use slbp::Prompt;
pub use taxonomy::{ClassIndex, LabelTaxonomy};
pub use text_embedding::{EmbeddingTable, TextEncoder};
