//! Chat-completions wire format.
//!
//! Request: `POST {base_url}/chat/completions` with
//! `{"model", "messages": [{"role": "user", "content": [text part, image_url part]}],
//! "temperature", "max_tokens", "seed"?}`. The reply text is
//! `choices[0].message.content`.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendCall, BackendError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Connection-level failure (refused, reset, timed out).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

/// The network edge. Swapped out in tests to count or script traffic.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        UreqTransport {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> Result<HttpResponse, TransportError> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.set(k, v);
        }
        let (status, resp) = match req.send_json(body) {
            Ok(r) => (r.status(), r),
            Err(ureq::Error::Status(code, r)) => (code, r),
            Err(ureq::Error::Transport(t)) => return Err(TransportError(t.to_string())),
        };
        let body = resp
            .into_string()
            .map_err(|e| TransportError(format!("reading body: {e}")))?;
        Ok(HttpResponse { status, body })
    }
}

pub struct HttpBackend {
    transport: Box<dyn HttpTransport>,
}

impl HttpBackend {
    pub fn new(transport: Box<dyn HttpTransport>) -> Self {
        HttpBackend { transport }
    }

    pub fn request_body(call: &BackendCall<'_>) -> Value {
        let mut body = json!({
            "model": call.endpoint.model_id,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": call.prompt},
                    {"type": "image_url", "image_url": {"url": call.image.data_uri}},
                ],
            }],
            "temperature": call.decoding.temperature,
            "max_tokens": call.decoding.max_tokens,
        });
        if let Some(seed) = call.decoding.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    pub fn parse_response(body: &str) -> Result<String, BackendError> {
        let v: Value =
            serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("no choices[0].message.content".into()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", call.endpoint.base_url.trim_end_matches('/'));
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(var) = &call.endpoint.auth_ref {
            let token = std::env::var(var)
                .map_err(|_| BackendError::Fatal(format!("credential variable {var} is not set")))?;
            headers.push(("Authorization".into(), format!("Bearer {token}")));
        }
        let resp = self
            .transport
            .post_json(&url, &headers, &Self::request_body(call))
            .map_err(|e| BackendError::Transient(e.0))?;
        match resp.status {
            200..=299 => Self::parse_response(&resp.body),
            408 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {}", resp.status))),
            s => Err(BackendError::Fatal(format!("HTTP {s}: {}", truncate(&resp.body, 200)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Decoding, ModelEndpoint, ResolvedImage};
    use std::sync::Mutex;

    struct Canned {
        replies: Mutex<Vec<Result<HttpResponse, TransportError>>>,
        seen: Mutex<Vec<(String, Vec<(String, String)>, Value)>>,
    }

    impl HttpTransport for Canned {
        fn post_json(
            &self,
            url: &str,
            headers: &[(String, String)],
            body: &Value,
        ) -> Result<HttpResponse, TransportError> {
            self.seen
                .lock()
                .unwrap()
                .push((url.into(), headers.to_vec(), body.clone()));
            self.replies.lock().unwrap().remove(0)
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: body.into(),
        })
    }

    fn call_with<'a>(
        ep: &'a ModelEndpoint,
        img: &'a ResolvedImage,
        dec: &'a Decoding,
    ) -> BackendCall<'a> {
        BackendCall {
            endpoint: ep,
            request_index: 0,
            prompt: "Describe.",
            image: img,
            decoding: dec,
        }
    }

    #[test]
    fn wire_shape() {
        let ep = ModelEndpoint::new("llava-7b", "http://host:8000/v1/");
        let img = ResolvedImage {
            data_uri: "data:image/png;base64,AAAA".into(),
            sha256: String::new(),
        };
        let dec = Decoding {
            seed: Some(7),
            ..Decoding::default()
        };
        let body = HttpBackend::request_body(&call_with(&ep, &img, &dec));
        let expected: Value =
            serde_json::from_str(include_str!("../../tests/fixtures/chat_request.json")).unwrap();
        assert_eq!(body, expected);

        let t = Canned {
            replies: Mutex::new(vec![ok(include_str!("../../tests/fixtures/chat_response.json"))]),
            seen: Mutex::new(vec![]),
        };
        let backend = HttpBackend::new(Box::new(t));
        let text = backend.complete(&call_with(&ep, &img, &dec)).unwrap();
        assert!(text.starts_with("###CAPTION:"));
    }

    #[test]
    fn status_classification() {
        let ep = ModelEndpoint::new("m", "http://h");
        let img = ResolvedImage {
            data_uri: String::new(),
            sha256: String::new(),
        };
        let dec = Decoding::default();
        let replies = vec![
            Ok(HttpResponse { status: 429, body: String::new() }),
            Ok(HttpResponse { status: 503, body: String::new() }),
            Ok(HttpResponse { status: 400, body: "bad".into() }),
            Err(TransportError("timed out".into())),
            ok("{not json"),
            ok(r#"{"choices": []}"#),
        ];
        let backend = HttpBackend::new(Box::new(Canned {
            replies: Mutex::new(replies),
            seen: Mutex::new(vec![]),
        }));
        let call = call_with(&ep, &img, &dec);
        assert!(matches!(backend.complete(&call), Err(BackendError::Transient(_))));
        assert!(matches!(backend.complete(&call), Err(BackendError::Transient(_))));
        assert!(matches!(backend.complete(&call), Err(BackendError::Fatal(_))));
        assert!(matches!(backend.complete(&call), Err(BackendError::Transient(_))));
        assert!(matches!(backend.complete(&call), Err(BackendError::Malformed(_))));
        assert!(matches!(backend.complete(&call), Err(BackendError::Malformed(_))));
    }

    #[test]
    fn bearer_from_environment() {
        std::env::set_var("STL_TEST_TOKEN_HTTP", "s3cret");
        let mut ep = ModelEndpoint::new("m", "http://h");
        ep.auth_ref = Some("STL_TEST_TOKEN_HTTP".into());
        let img = ResolvedImage {
            data_uri: String::new(),
            sha256: String::new(),
        };
        let dec = Decoding::default();
        let t = Canned {
            replies: Mutex::new(vec![ok(r#"{"choices":[{"message":{"content":"hi"}}]}"#)]),
            seen: Mutex::new(vec![]),
        };
        let backend = HttpBackend::new(Box::new(t));
        assert_eq!(backend.complete(&call_with(&ep, &img, &dec)).unwrap(), "hi");

        ep.auth_ref = Some("STL_TEST_TOKEN_UNSET".into());
        assert!(matches!(
            backend.complete(&call_with(&ep, &img, &dec)),
            Err(BackendError::Fatal(_))
        ));
    }
}
