//! Mean-embedding heatmaps, the dropout mini-batch bias simulation and the
//! poly-2 synthetic experiment.

pub mod dropout;
pub mod heatmap;
pub mod poly2;

pub use dropout::{dropout_bias_experiment, kl_divergence, DropoutBiasConfig, KlCell};
pub use heatmap::{heatmap, mean_embeddings, Heatmap};
pub use poly2::{
    poly2_experiment, Curve, ExperimentConfig, FieldSizing, OneHotDnn, Poly2Generator, Poly2Spec,
};
