//! Class-specific explanations for small sequential CNNs.
//!
//! The engine loads ModelPack files, runs cached forward and backward passes,
//! and computes input attributions with attribution-guided factorization
//! ([`agf`]) or the LRP, contrastive LRP and Grad-CAM baselines
//! ([`attribution`]). [`eval`] scores heatmaps by negative perturbation and
//! as segmentations.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

pub mod agf;
pub mod attribution;
pub mod backprop;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod methods;
pub mod model;
pub mod scalar;
pub mod selftest;
pub mod tensor;

pub use agf::ssl::{ssl_explain, GalleryEntry, NeighborFusion, SslExplanation, SslGallery};
pub use agf::{explain, explain_from, explain_trace, AgfConfig, AttributionState, Explanation, ResidualMode};
pub use attribution::GenericRuleConfig;
pub use error::{Error, LoadError, Result};
pub use methods::{Method, Polarity};
pub use model::{load_modelpack, ForwardTrace, Layer, Model};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Explanation32 = Explanation<f32>;
pub type Explanation64 = Explanation<f64>;
