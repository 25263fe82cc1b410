use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendReply, CaptionedImage, VlmBackend};
use crate::error::{Error, Result};
use crate::recording::encode_png_base64;

/// Chat-completions client sending images as base64 data URLs.
#[derive(Debug, Clone)]
pub struct HttpVlm {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpVlm {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpVlm {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(120),
        }
    }

    pub fn request_body(&self, images: &[CaptionedImage], text: &str, max_tokens: u32) -> Value {
        let mut content = Vec::with_capacity(images.len() * 2 + 1);
        for (i, img) in images.iter().enumerate() {
            content.push(json!({"type": "text", "text": format!("Image {}: {}", i + 1, img.caption)}));
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", encode_png_base64(&img.image))}
            }));
        }
        content.push(json!({"type": "text", "text": text}));
        json!({
            "model": self.model,
            "max_tokens": max_tokens,
            "temperature": 0,
            "logprobs": true,
            "messages": [{"role": "user", "content": content}],
        })
    }
}

/// Pulls text, token counts and first-token probability out of a
/// chat-completions response body.
pub fn parse_completion(body: &Value) -> Result<BackendReply> {
    let choice = &body["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| Error::backend("http-vlm", format!("no message content in {body}")))?
        .to_string();
    let first_token_probability = choice["logprobs"]["content"][0]["logprob"]
        .as_f64()
        .map(f64::exp);
    Ok(BackendReply {
        text,
        input_tokens: body["usage"]["prompt_tokens"].as_u64().unwrap_or(0),
        output_tokens: body["usage"]["completion_tokens"].as_u64().unwrap_or(0),
        first_token_probability,
        latency: None,
    })
}

impl VlmBackend for HttpVlm {
    fn name(&self) -> &str {
        "http-vlm"
    }

    fn complete(&self, images: &[CaptionedImage], text: &str, max_tokens: u32) -> Result<BackendReply> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut req = agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body: Value = req
            .send_json(self.request_body(images, text, max_tokens))
            .map_err(|e| Error::backend(self.name(), e))?
            .body_mut()
            .read_json()
            .map_err(|e| Error::backend(self.name(), e))?;
        parse_completion(&body)
    }
}
