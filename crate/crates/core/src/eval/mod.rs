//! Quantitative harnesses: negative perturbation and segmentation scoring,
//! plus the dataset and heatmap file formats they read and write.

pub mod dataset;
pub mod perturbation;
pub mod render;
pub mod segmentation;

pub use dataset::{load_image, Dataset, DatasetImage, Mask};
pub use perturbation::{auc, default_fractions, negative_perturbation, PerturbationCurve, PerturbationMode};
pub use render::{decode_raw, encode_raw, render_heatmap, to_gray, write_pgm, write_raw};
pub use segmentation::{average_precision, segmentation_eval, SegRecord, SegReport};
