use std::sync::atomic::{AtomicU64, Ordering};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

use super::transport::{connect, Endpoint, RetryPolicy, Transport};
use super::wire::{AnswerRequest, AnswerResponse, DecodeParams, EncoderRequest, EncoderResponse, Outcome, PayloadKind};
use super::{Answerer, BackendError, Query};
use crate::imaging::RasterImage;
use crate::scoring::{Embedding, EncoderProvider, ScoringError};

fn png_base64(image: &RasterImage) -> Result<String, BackendError> {
    let png = image
        .to_png_bytes()
        .map_err(|e| BackendError::InvalidRequest(format!("encoding png: {e}")))?;
    Ok(BASE64.encode(png))
}

/// Sends one answer request and returns the peer's response, including an
/// error response passed through verbatim. Transport failures are retried.
pub fn external_answer(
    request: &AnswerRequest,
    transport: &dyn Transport,
    retry: &RetryPolicy,
) -> Result<AnswerResponse, BackendError> {
    request.validate().map_err(BackendError::InvalidRequest)?;
    let body = serde_json::to_string(request).expect("request serializes");
    let reply = retry.run(|| transport.exchange(&body))?;
    let response: AnswerResponse =
        serde_json::from_str(&reply).map_err(|e| BackendError::Malformed(format!("{e}: {reply}")))?;
    if response.request_id != request.request_id {
        return Err(BackendError::IdMismatch {
            expected: request.request_id.clone(),
            got: response.request_id,
        });
    }
    Ok(response)
}

pub fn external_embed(
    request: &EncoderRequest,
    transport: &dyn Transport,
    retry: &RetryPolicy,
) -> Result<EncoderResponse, BackendError> {
    let body = serde_json::to_string(request).expect("request serializes");
    let reply = retry.run(|| transport.exchange(&body))?;
    let response: EncoderResponse =
        serde_json::from_str(&reply).map_err(|e| BackendError::Malformed(format!("{e}: {reply}")))?;
    if response.request_id != request.request_id {
        return Err(BackendError::IdMismatch {
            expected: request.request_id.clone(),
            got: response.request_id,
        });
    }
    Ok(response)
}

/// Answerer backed by a model server speaking the wire protocol.
pub struct ExternalAnswerer {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
}

impl ExternalAnswerer {
    pub fn new(transport: Box<dyn Transport>, retry: RetryPolicy) -> Self {
        Self { transport, retry }
    }

    /// Connects to `/answer` on an HTTP endpoint, or spawns a subprocess.
    pub fn connect(endpoint: &Endpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(Self::new(connect(endpoint, "/answer", retry.timeout)?, retry))
    }

    pub fn build_request(query: &Query<'_>) -> Result<AnswerRequest, BackendError> {
        Ok(AnswerRequest {
            request_id: query.request_id.clone(),
            question: query.question.to_string(),
            images: query
                .views
                .iter()
                .map(|v| png_base64(&v.image))
                .collect::<Result<_, _>>()?,
            options: query.options.map(<[String]>::to_vec),
            decode: DecodeParams {
                temperature: query.temperature,
            },
        })
    }
}

impl Answerer for ExternalAnswerer {
    fn answer(&self, query: &Query<'_>) -> Result<String, BackendError> {
        let request = Self::build_request(query)?;
        match external_answer(&request, self.transport.as_ref(), &self.retry)?.outcome {
            Outcome::Ok(answer) => Ok(answer),
            Outcome::Error(e) => Err(BackendError::Remote(e)),
        }
    }
}

/// Encoder provider backed by an embedding server (`/embed`).
pub struct ExternalEncoder {
    transport: Box<dyn Transport>,
    retry: RetryPolicy,
    counter: AtomicU64,
}

impl ExternalEncoder {
    pub fn new(transport: Box<dyn Transport>, retry: RetryPolicy) -> Self {
        Self {
            transport,
            retry,
            counter: AtomicU64::new(0),
        }
    }

    pub fn connect(endpoint: &Endpoint, retry: RetryPolicy) -> Result<Self, BackendError> {
        Ok(Self::new(connect(endpoint, "/embed", retry.timeout)?, retry))
    }

    fn embed(&self, kind: PayloadKind, payload: String) -> Result<Embedding, ScoringError> {
        let id = self.counter.fetch_add(1, Ordering::Relaxed);
        let request = EncoderRequest {
            kind,
            payload,
            request_id: format!("emb-{id}"),
        };
        let response = external_embed(&request, self.transport.as_ref(), &self.retry)
            .map_err(|e| ScoringError::Provider(e.to_string()))?;
        match response.outcome {
            Outcome::Ok(values) => Embedding::new(values),
            Outcome::Error(e) => Err(ScoringError::Provider(e)),
        }
    }
}

impl EncoderProvider for ExternalEncoder {
    fn embed_text(&self, question: &str) -> Result<Embedding, ScoringError> {
        self.embed(PayloadKind::Text, question.to_string())
    }

    fn embed_image(&self, image: &RasterImage) -> Result<Embedding, ScoringError> {
        let payload = png_base64(image).map_err(|e| ScoringError::Provider(e.to_string()))?;
        self.embed(PayloadKind::Image, payload)
    }
}

/// Decodes a base64 PNG payload from the wire.
pub(crate) fn decode_png_base64(payload: &str) -> Result<RasterImage, BackendError> {
    let bytes = BASE64
        .decode(payload)
        .map_err(|e| BackendError::InvalidRequest(format!("base64: {e}")))?;
    RasterImage::from_png_bytes(&bytes).map_err(|e| BackendError::InvalidRequest(format!("png: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Replies with a canned line regardless of input.
    struct Canned(Mutex<Vec<String>>);

    impl Transport for Canned {
        fn exchange(&self, _body: &str) -> Result<String, BackendError> {
            self.0
                .lock()
                .unwrap()
                .pop()
                .ok_or_else(|| BackendError::Transport("exhausted".into()))
        }
    }

    fn request() -> AnswerRequest {
        AnswerRequest {
            request_id: "r-1".into(),
            question: "what?".into(),
            images: vec!["AAAA".into()],
            options: None,
            decode: DecodeParams::default(),
        }
    }

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay: std::time::Duration::from_millis(1),
            timeout: std::time::Duration::from_secs(1),
        }
    }

    #[test]
    fn mismatched_id_is_a_protocol_error() {
        let t = Canned(Mutex::new(vec![r#"{"request_id":"other","answer":"x"}"#.into()]));
        assert!(matches!(
            external_answer(&request(), &t, &fast()),
            Err(BackendError::IdMismatch { .. })
        ));
    }

    #[test]
    fn error_responses_pass_through() {
        let t = Canned(Mutex::new(vec![r#"{"request_id":"r-1","error":"oom"}"#.into()]));
        let resp = external_answer(&request(), &t, &fast()).unwrap();
        assert_eq!(resp.outcome, Outcome::Error("oom".into()));
    }

    #[test]
    fn malformed_and_exhausted() {
        let t = Canned(Mutex::new(vec!["not json".into()]));
        assert!(matches!(
            external_answer(&request(), &t, &fast()),
            Err(BackendError::Malformed(_))
        ));
        let t = Canned(Mutex::new(vec![]));
        assert!(matches!(
            external_answer(&request(), &t, &fast()),
            Err(BackendError::Transport(_))
        ));
    }

    #[test]
    fn png_payload_round_trip() {
        let img = RasterImage::filled(3, 2, [4, 5, 6]).unwrap();
        assert_eq!(decode_png_base64(&png_base64(&img).unwrap()).unwrap(), img);
        assert!(decode_png_base64("@@@").is_err());
    }
}
