//! JSON messages exchanged with external model servers. The same bytes are
//! carried over HTTP bodies and over line-delimited stdio.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub temperature: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self { temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRequest {
    pub request_id: String,
    pub question: String,
    /// Base64 PNG payloads, overview first when present.
    pub images: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default)]
    pub decode: DecodeParams,
}

impl AnswerRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.images.is_empty() {
            return Err("request carries no images".into());
        }
        if !(self.decode.temperature >= 0.0) {
            return Err("temperature must be >= 0".into());
        }
        Ok(())
    }
}

/// Either a payload or an error message; never both.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome<T> {
    Ok(T),
    Error(String),
}

impl<T> Outcome<T> {
    pub fn into_result(self) -> Result<T, String> {
        match self {
            Outcome::Ok(v) => Ok(v),
            Outcome::Error(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAnswerResponse", into = "RawAnswerResponse")]
pub struct AnswerResponse {
    pub request_id: String,
    pub outcome: Outcome<String>,
}

#[derive(Serialize, Deserialize)]
struct RawAnswerResponse {
    request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl TryFrom<RawAnswerResponse> for AnswerResponse {
    type Error = String;

    fn try_from(raw: RawAnswerResponse) -> Result<Self, String> {
        let outcome = match (raw.answer, raw.error) {
            (Some(a), None) => Outcome::Ok(a),
            (None, Some(e)) => Outcome::Error(e),
            (Some(_), Some(_)) => return Err("response has both answer and error".into()),
            (None, None) => return Err("response has neither answer nor error".into()),
        };
        Ok(Self {
            request_id: raw.request_id,
            outcome,
        })
    }
}

impl From<AnswerResponse> for RawAnswerResponse {
    fn from(r: AnswerResponse) -> Self {
        let (answer, error) = match r.outcome {
            Outcome::Ok(a) => (Some(a), None),
            Outcome::Error(e) => (None, Some(e)),
        };
        Self {
            request_id: r.request_id,
            answer,
            error,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRequest {
    pub kind: PayloadKind,
    /// UTF-8 text, or a base64 PNG for images.
    pub payload: String,
    pub request_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEncoderResponse", into = "RawEncoderResponse")]
pub struct EncoderResponse {
    pub request_id: String,
    pub outcome: Outcome<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawEncoderResponse {
    request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl TryFrom<RawEncoderResponse> for EncoderResponse {
    type Error = String;

    fn try_from(raw: RawEncoderResponse) -> Result<Self, String> {
        let outcome = match (raw.embedding, raw.error) {
            (Some(v), None) => Outcome::Ok(v),
            (None, Some(e)) => Outcome::Error(e),
            (Some(_), Some(_)) => return Err("response has both embedding and error".into()),
            (None, None) => return Err("response has neither embedding nor error".into()),
        };
        Ok(Self {
            request_id: raw.request_id,
            outcome,
        })
    }
}

impl From<EncoderResponse> for RawEncoderResponse {
    fn from(r: EncoderResponse) -> Self {
        let (embedding, error) = match r.outcome {
            Outcome::Ok(v) => (Some(v), None),
            Outcome::Error(e) => (None, Some(e)),
        };
        Self {
            request_id: r.request_id,
            embedding,
            error,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn response_shapes() {
        let ok: AnswerResponse = serde_json::from_str(r#"{"request_id":"1","answer":"red"}"#).unwrap();
        assert_eq!(ok.outcome, Outcome::Ok("red".into()));
        let err: AnswerResponse = serde_json::from_str(r#"{"request_id":"1","error":"oom"}"#).unwrap();
        assert_eq!(err.outcome, Outcome::Error("oom".into()));
        assert!(serde_json::from_str::<AnswerResponse>(r#"{"request_id":"1"}"#).is_err());
        assert!(serde_json::from_str::<AnswerResponse>(r#"{"request_id":"1","answer":"a","error":"b"}"#).is_err());
        assert_eq!(
            serde_json::to_string(&err).unwrap(),
            r#"{"request_id":"1","error":"oom"}"#
        );
    }

    #[test]
    fn encoder_messages_match_documented_layout() {
        let req = EncoderRequest {
            kind: PayloadKind::Text,
            payload: "what color".into(),
            request_id: "t1".into(),
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"kind":"text","payload":"what color","request_id":"t1"}"#
        );
        let resp: EncoderResponse = serde_json::from_str(r#"{"request_id":"t1","embedding":[0.5,-1]}"#).unwrap();
        assert_eq!(resp.outcome, Outcome::Ok(vec![0.5, -1.0]));
    }

    #[test]
    fn request_defaults_and_validation() {
        let req: AnswerRequest =
            serde_json::from_str(r#"{"request_id":"r","question":"q","images":["AA=="]}"#).unwrap();
        assert_eq!(req.decode.temperature, 0.0);
        assert!(req.validate().is_ok());
        let empty = AnswerRequest { images: vec![], ..req };
        assert!(empty.validate().is_err());
    }
}
