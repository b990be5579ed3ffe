use std::time::Duration;

use serde_json::Value;

use super::{Endpoint, EndpointConfig, Transport, TransportError};

/// Blocking HTTP transport speaking the OpenAI-compatible JSON protocol.
pub struct LiveTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: String,
}

impl LiveTransport {
    pub fn new(config: &EndpointConfig, api_key: String) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        LiveTransport {
            agent,
            base_url: config.base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }
}

impl Transport for LiveTransport {
    fn post(&self, endpoint: Endpoint, body: &Value) -> Result<Value, TransportError> {
        let url = format!("{}/{}", self.base_url, endpoint.path());
        let response = self
            .agent
            .post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .set("Content-Type", "application/json")
            .send_json(body.clone());
        match response {
            Ok(r) => r
                .into_json::<Value>()
                .map_err(|e| TransportError::Protocol(e.to_string())),
            Err(ureq::Error::Status(code, r)) => Err(TransportError::Status {
                code,
                body: r.into_string().unwrap_or_default(),
            }),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                let timed_out = msg.contains("timed out")
                    || matches!(t.kind(), ureq::ErrorKind::Io)
                        && msg.to_ascii_lowercase().contains("timeout");
                if timed_out {
                    Err(TransportError::Timeout(msg))
                } else {
                    Err(TransportError::Io(msg))
                }
            }
        }
    }
}
