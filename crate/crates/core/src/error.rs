use crate::numcore::NumError;
use crate::synthdata::Setting;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("{k} classes requested but only {max} distinguishable (shape, colour) pairs exist")]
    TooManyClasses { k: usize, max: usize },
    #[error("invalid scenario plan: {0}")]
    InvalidPlan(String),
    #[error("step {step} ({setting}) has no training images")]
    EmptyStep { step: usize, setting: Setting },
    #[error("label {label} is outside the step alphabet {alphabet:?}")]
    LabelOutOfAlphabet { label: u8, alphabet: Vec<u8> },
    #[error("distillation needs a previous model (step {step})")]
    NoPreviousModel { step: usize },
    #[error("classifier bank is empty")]
    EmptyBank,
    #[error("class {0} already has a classifier")]
    ClassOverlap(u8),
    #[error("unknown class id {0}")]
    UnknownClass(u8),
    #[error("non-finite {term} loss at step {step}, iteration {iter}")]
    NonFiniteLoss {
        term: &'static str,
        step: usize,
        iter: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
