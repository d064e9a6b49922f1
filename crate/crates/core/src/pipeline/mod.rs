//! Two-stage stylization driver and its supporting plumbing.

pub mod config;
pub mod fit;
pub mod gradcheck;
pub mod io;
pub mod optim;
pub mod stylize;
pub mod synthetic;
pub mod turntable;

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::colorxfer::ColorError;
use crate::controls::ControlError;
use crate::features::sgsw::SgswError;
use crate::features::FeatureError;
use crate::refine::RefineError;
use crate::scene::ply::PlyError;
use crate::scene::{CameraError, SceneError};
use crate::styleloss::StyleError;
use crate::tensor::TensorError;
use optim::OptimError;

/// Pipeline phase an error is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    ColorTransfer,
    Refine,
    Stylize,
    Fit,
    Render,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::ColorTransfer => "color-transfer",
            Stage::Refine => "refine",
            Stage::Stylize => "stylize",
            Stage::Fit => "fit",
            Stage::Render => "render",
        })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Sgsw(#[from] SgswError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },
    #[error("cancelled at iteration {0}")]
    Cancelled(usize),
    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<PipelineError>,
    },
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Wraps the error with a stage tag unless it already carries one.
    pub fn at(self, stage: Stage) -> Self {
        match self {
            PipelineError::Stage { .. } => self,
            other => PipelineError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Innermost error below any stage tags.
    pub fn root(&self) -> &PipelineError {
        match self {
            PipelineError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 3 for numeric failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            PipelineError::NonFinite { .. }
            | PipelineError::Optim(OptimError::NonFinite { .. })
            | PipelineError::Color(ColorError::Singular { .. } | ColorError::NotPsd(_) | ColorError::Asymmetric(_))
            | PipelineError::Tensor(TensorError::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}

/// Tags errors of a fallible expression with a stage.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T, E: Into<PipelineError>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|e| e.into().at(stage))
    }
}
