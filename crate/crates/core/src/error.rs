use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while decoding a ModelPack file.
#[derive(Debug, Error)]
pub enum LoadError {
    #[error("bad magic bytes {0:?}, expected \"NNPK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, expected 1")]
    Version(u32),
    #[error("file truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("parameter `{name}`: shape {shape:?} needs {expected} bytes but manifest declares {declared}")]
    BufferLength {
        name: String,
        shape: Vec<usize>,
        expected: u64,
        declared: u64,
    },
    #[error("parameter `{name}` holds a non-finite value at element {index}")]
    NonFinite { name: String, index: usize },
    #[error("unsupported layer kind `{0}` (only sequential conv2d/linear/relu/maxpool2d/avgpool2d/flatten chains are accepted)")]
    UnsupportedLayer(String),
    #[error("inconsistent model: {0}")]
    Topology(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("class {class} out of range for a model with {count} classes")]
    ClassOutOfRange { class: usize, count: usize },
    #[error("layer index {index} out of range for a model with {count} layers")]
    LayerOutOfRange { index: usize, count: usize },
    #[error("delta shift: residual sum {residual_sum} cannot be absorbed, attribution has no non-zero neuron")]
    DegenerateShift { residual_sum: f64 },
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("gallery: {0}")]
    Gallery(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerics rather than inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateShift { .. })
    }
}
