//! Embedding-space analysis of multimodal deepfakes.
//!
//! The crate ingests clustered image/caption embeddings (one real image, its
//! generated fakes and the captions that produced them), trains a style head
//! and a semantics head with opposing supervised contrastive objectives, fits
//! linear real/fake probes, and computes cluster-aware detection and retrieval
//! metrics plus exact t-SNE projections.

pub mod cli;
pub mod dataset;
pub mod disentangle;
pub mod error;
pub mod features;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod supcon;
pub mod synth;
pub mod tsne;

pub use dataset::{
    balanced_sample, l2_normalize, load_dataset, save_dataset, DatasetManifest, EmbeddingDataset,
    Label, SemanticCluster, Split, Splits,
};
pub use disentangle::{
    load_heads, project, sample_batches, save_heads, train_disentangle, HeadKind, HeadPair,
    LinearHead, TrainConfig, TrainHistory,
};
pub use error::{Error, Result, ValidationError};
pub use features::FeatureSpace;
pub use matrix::Matrix;
pub use metrics::{evaluate, MetricReport};
pub use probe::{fit_probe, load_probe, predict, save_probe, ProbeModel};
pub use supcon::{supcon_grad, supcon_loss, ContrastiveBatch};
pub use synth::{generate_synthetic, SynthConfig};
pub use tsne::{tsne_embed, TsneConfig};
