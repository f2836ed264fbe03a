use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("gene panel is empty")]
    EmptyGenePanel,

    #[error("constant expression on the central section for gene(s) {0:?}")]
    ConstantGene(Vec<String>),

    #[error("grid offset ({row}, {col}) out of range for spacing {spacing}")]
    OffsetOutOfRange { row: usize, col: usize, spacing: usize },

    #[error("observed set is empty")]
    EmptyObservedSet,

    #[error("confidence weights must be nonnegative (found {0})")]
    NegativeWeight(f32),

    #[error("no valid pixels for the loss")]
    NoValidPixels,

    #[error("need at least {needed} correspondences, got {got}")]
    TooFewMatches { needed: usize, got: usize },

    #[error("degenerate point configuration")]
    DegenerateConfiguration,

    #[error("transform is singular (det = {0:e})")]
    SingularTransform(f64),

    #[error("feature map has dims {got:?}, expected {expected:?}")]
    FeatureDims { expected: [usize; 3], got: Vec<usize> },

    #[error("domain-alignment site {0} is already present")]
    DuplicateSite(usize),

    #[error("unknown domain-alignment site {0}")]
    UnknownSite(usize),

    #[error("unknown training stage `{0}`")]
    UnknownStage(String),

    #[error("training diverged during {stage} at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },

    #[error("frozen parameter `{0}` was modified")]
    FrozenModified(String),

    #[error("transform moves {fraction:.2} of the content out of frame")]
    ContentOutOfFrame { fraction: f64 },

    #[error("image is {height}x{width}, needs at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("missing sections {0:?}")]
    MissingSections(Vec<usize>),
}
