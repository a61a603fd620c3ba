use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("frame size mismatch: {0}x{1} vs {2}x{3}")]
    FrameSizeMismatch(usize, usize, usize, usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unmatched label: point {point_id} at frame {frame} has no prediction")]
    UnmatchedLabel { point_id: u32, frame: usize },

    #[error("no reliable anchors (no match scored at or above {threshold})")]
    NoReliableAnchors { threshold: f64 },

    #[error("empty evaluation set: no visible ground-truth points")]
    EmptyEvaluation,

    #[error("empty video")]
    EmptyVideo,

    #[error("fold-over risk: {0}")]
    FoldOver(String),

    #[error("teacher `{teacher}` failed on video {video}: {reason}")]
    Teacher {
        teacher: String,
        video: String,
        reason: String,
    },

    #[error("malformed {file}: field `{field}` at byte {offset}: {reason}")]
    Format {
        file: &'static str,
        field: String,
        offset: usize,
        reason: String,
    },

    #[error("checkpoint version mismatch: file is version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFiniteLoss { step: usize, breakdown: String },

    #[error("stage 2: every sampled video was skipped (missing pseudo labels)")]
    AllVideosSkipped,

    #[error("config: {0}")]
    Config(String),

    #[error("png: {0}")]
    Png(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
