//! Pre-clustering: PCA down to a handful of dimensions, exact t-SNE to 2D,
//! then an aspect-preserving fit onto the canvas.

mod pca;
mod placement;
mod tsne;

pub use pca::{pca_fit, pca_fit_with, PcaModel, DEFAULT_PCA_DIMS};
pub use placement::scale_to_canvas;
pub use tsne::{
    joint_probabilities, kl_divergence, kl_gradient, perplexity_calibrate, tsne_embed, tsne_embed_with,
    Calibration, KlCheckpoint, TsneParams, TsneResult,
};
