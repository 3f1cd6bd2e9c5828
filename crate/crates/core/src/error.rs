use std::path::PathBuf;

use crate::volgrid::VoxelIndex;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed volume file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("prompt at {center:?} lies outside patch of shape {shape:?}")]
    PromptOutOfPatch {
        center: VoxelIndex,
        shape: [usize; 3],
    },

    #[error("input mode requires the {0} channel but none was supplied")]
    MissingChannel(&'static str),

    #[error("lesion {0} is not part of this case")]
    UnknownLesion(u16),

    #[error("seed voxel {0:?} lies in the padded region of the patch")]
    SeedInPadding(VoxelIndex),

    #[error("cannot ensemble an empty list of probability maps")]
    EmptyEnsemble,

    #[error("lesion id {0} appears more than once")]
    DuplicateLesion(u16),

    #[error("label 0 is reserved for background")]
    ReservedLabel,

    #[error("patient {0} has no ground-truth lesions")]
    NoLesions(String),

    #[error("cannot aggregate metrics over zero patients")]
    NoPatients,

    #[error("duplicate patient id {0:?}")]
    DuplicateId(String),

    #[error("could not place lesion {lesion} after {attempts} attempts")]
    PlacementFailed { lesion: usize, attempts: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
