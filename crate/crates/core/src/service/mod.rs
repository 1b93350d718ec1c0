//! Serving and orchestration: config, the retrieve-rerank-generate pipeline, sessions and run-directory steps.

pub mod config;
pub mod layout;
pub mod ops;
pub mod pipeline;
pub mod session;

pub use config::{PipelineConfig, TurnOverrides, RUN_DIR_ENV};
pub use pipeline::{locate_span, Pipeline, SpanOffsets, Timings, TurnRecord};
pub use session::{answer_turn, replay, Session, SessionEvent, SessionStore};
