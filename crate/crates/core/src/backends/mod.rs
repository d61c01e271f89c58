//! Answerer abstraction over the vision-language model.
//!
//! An [`Answerer`] receives a question plus an ordered composition of
//! images (overview first when present) and returns answer text. Two
//! implementations ship here: [`ExternalAnswerer`], which speaks the JSON
//! wire protocol to a real model server, and [`ToyOracle`], a deterministic
//! synthetic stand-in driven by scene geometry.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{BBox, RasterImage};

mod external;
mod toy;
pub mod transport;
pub mod wire;

pub use external::{external_answer, external_embed, ExternalAnswerer, ExternalEncoder};
pub use toy::{visible_pixels, SceneRegistry, ToyOracle, ToyOracleConfig, UNKNOWN_ANSWER};
pub use transport::{connect, serve_lines, Endpoint, RetryPolicy, Transport};
pub use wire::{AnswerRequest, AnswerResponse, DecodeParams, EncoderRequest, EncoderResponse, Outcome, PayloadKind};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("response id {got:?} does not match request id {expected:?}")]
    IdMismatch { expected: String, got: String },
    #[error("remote error: {0}")]
    Remote(String),
    #[error("image is not registered with the oracle: {0}")]
    UnregisteredImage(String),
    #[error("question not understood: {0}")]
    UnsupportedQuestion(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Where a view's pixels were taken from: the instance and the bounding box
/// inside its native-resolution image.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ViewSource {
    pub instance_id: String,
    pub bbox: BBox,
}

/// One image in a composition.
#[derive(Debug, Clone)]
pub struct View {
    pub image: Arc<RasterImage>,
    pub source: ViewSource,
}

impl View {
    pub fn new(image: Arc<RasterImage>, source: ViewSource) -> Self {
        Self { image, source }
    }
}

/// A single answerer call.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub request_id: String,
    pub question: &'a str,
    pub options: Option<&'a [String]>,
    pub views: &'a [View],
    pub temperature: f64,
}

pub trait Answerer: Send + Sync {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError>;
}

impl<A: Answerer + ?Sized> Answerer for Arc<A> {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError> {
        (**self).answer(query)
    }
}

impl<A: Answerer + ?Sized> Answerer for &A {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError> {
        (**self).answer(query)
    }
}
