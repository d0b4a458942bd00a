use thiserror::Error;

pub type Result<T, E = CadError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CadError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("softmax needs at least 2 classes, got {0}")]
    InvalidClassCount(usize),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("not a probability distribution: {0}")]
    NotADistribution(String),

    #[error("patch grid has not been normalized")]
    NotNormalized,

    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("region is empty")]
    EmptyRegion,

    #[error("placement out of bounds: anchor {anchor:?} with extent {extent:?} on a {grid_rows}x{grid_cols} grid")]
    PlacementOutOfBounds {
        anchor: (usize, usize),
        extent: (usize, usize),
        grid_rows: usize,
        grid_cols: usize,
    },

    #[error("no candidate placement available")]
    NoPlacement,

    #[error("class id {class_id} out of range for {num_classes} classes")]
    InvalidClassId { class_id: usize, num_classes: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("negative loss component {name} = {value}")]
    NegativeLoss { name: &'static str, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("malformed tensor file: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CadError {
    fn from(e: std::io::Error) -> Self {
        CadError::Io(e.to_string())
    }
}

impl CadError {
    /// True for errors caused by inconsistent shapes or grid geometry, as
    /// opposed to unreadable or invalid input values.
    pub fn is_shape_error(&self) -> bool {
        matches!(
            self,
            CadError::ShapeMismatch { .. } | CadError::GridMismatch(_) | CadError::PlacementOutOfBounds { .. }
        )
    }
}
