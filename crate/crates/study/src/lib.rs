//! Pairwise human-preference studies over HTTP.
//!
//! A study is a list of image pairs generated from the same prompt by two
//! models. Participants fetch pairs one at a time, with the left/right
//! placement randomized per participant, and submit a choice. Results report
//! per-pair votes, the positive-vote histogram for each model, and optionally
//! how well a model's predicted choices agree with the panel.
//!
//! | method | path | |
//! |---|---|---|
//! | `POST` | `/studies` | create from a [`StudyManifest`]; returns `{study_id}` |
//! | `GET` | `/studies/{id}/next?participant=p` | next [`NextPair`] for `p` |
//! | `POST` | `/studies/{id}/choices` | `{participant_id, pair_id, choice: "A"\|"B"}` |
//! | `GET` | `/studies/{id}/results` | [`StudyResults`] |
//! | `GET` | `/images/{image_id}` | image bytes from the image directory |

pub mod http;
pub mod model;
pub mod store;

use thiserror::Error;

pub use http::{router, AppState, Server, ServerConfig};
pub use model::{ChoiceRecord, NextPair, Pair, PairTask, Side, Study, StudyManifest, StudyResults};
pub use store::Store;

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown study {0:?}")]
    UnknownStudy(String),
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("unknown image {0:?}")]
    UnknownImage(String),
    #[error("participant {participant_id:?} already answered pair {pair_id:?}")]
    Conflict { participant_id: String, pair_id: String },
    #[error("study log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
