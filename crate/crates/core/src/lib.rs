//! Activation maximization for a spoken-command classifier, end to end.
//!
//! The crate trains a small CNN classifier and a convolutional autoencoder
//! on normalized log-mel spectrograms, then searches the input space for
//! class-maximizing examples by gradient ascent: either directly on the
//! feature grid, or through the frozen decoder so the search stays on the
//! manifold of decodable features. Maximized samples are scored against an
//! independently seeded classifier of the same architecture, and latent
//! codes are embedded with exact t-SNE for before/after diagnostics.
//!
//! Module map:
//! - [`graph`] — reverse-mode autodiff over dense tensors, with a
//!   finite-difference verification harness
//! - [`features`] — WAV ingestion and the log-mel front end
//! - [`data`] — corpus scanning, speaker-disjoint splits, batching, and a
//!   synthetic fixture dataset
//! - [`models`] — classifier/autoencoder definitions and checkpoint I/O
//! - [`train`] — Adam training loops and accuracy evaluation
//! - [`actmax`] — the maximization loops and protocols
//! - [`eval`] — transfer grids, t-SNE, latent-shift diagnostics, SVG output

pub mod actmax;
pub mod data;
pub mod eval;
pub mod features;
pub mod graph;
pub mod models;
pub mod rng;
pub mod train;

pub use actmax::{MaxConfig, MaximizationResult, StartPoint};
pub use data::{DatasetSplit, LabeledExample};
pub use eval::{EmbeddingPoint, TransferGrid};
pub use features::{FeatureGrid, Waveform, FRAMES, MELS};
pub use graph::{DiffGraph, GradCheckReport, GraphError, NodeId, Tensor};
pub use models::{AutoencoderModel, ClassifierModel, LatentCode};
pub use train::{TrainConfig, TrainHistory};
