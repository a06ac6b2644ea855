use std::path::PathBuf;

use hullsplat::camera::CameraError;
use hullsplat::carve::CarveError;
use hullsplat::dataset::DatasetError;
use hullsplat::embed::EmbedError;
use hullsplat::imaging::ImageIoError;
use hullsplat::metrics::LossError;
use hullsplat::poseframe::PoseError;
use hullsplat::refine::RefineError;
use hullsplat::splat::ParticleFileError;
use hullsplat::synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{what} not found: {}", path.display())]
    ConfigPathMissing { what: &'static str, path: PathBuf },
    #[error("cannot parse {}: {message}", path.display())]
    ConfigParse { path: PathBuf, message: String },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("missing artifact {} (run `{producer}` first)", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// An error raised inside a pipeline module, with that module's code.
    #[error("{message}")]
    Module { code: &'static str, message: String },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::ConfigPathMissing { .. } => "ConfigPathMissing",
            CliError::ConfigParse { .. } => "ConfigParse",
            CliError::InvalidConfig(_) => "InvalidConfig",
            CliError::MissingArtifact { .. } => "MissingArtifact",
            CliError::Io { .. } => "IoError",
            CliError::Module { code, .. } => code,
        }
    }
}

macro_rules! module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Module { code: e.code(), message: e.to_string() }
            }
        }
    )*};
}

module_error!(CameraError, CarveError, DatasetError, EmbedError, LossError, PoseError, RefineError, SynthError);

impl From<ParticleFileError> for CliError {
    fn from(e: ParticleFileError) -> Self {
        CliError::Module {
            code: "ParticleFile",
            message: e.to_string(),
        }
    }
}

impl From<ImageIoError> for CliError {
    fn from(e: ImageIoError) -> Self {
        CliError::Module {
            code: "IoError",
            message: e.to_string(),
        }
    }
}
