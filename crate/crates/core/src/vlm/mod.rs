//! Vision-language model access: prompt builders, response parsing, retries
//! and usage accounting behind a provider-agnostic backend trait.

mod http;
pub mod prompts;
mod scripted;
pub mod usage;

use std::sync::{Arc, Mutex, OnceLock};
use std::thread;
use std::time::{Duration, Instant};

use image::RgbImage;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{parse_action, ReplayAction};

pub use http::HttpVlm;
pub use prompts::{
    build_action_prompt, build_compare_prompt, build_roi_prompt, ActionPromptMode,
};
pub use scripted::{ScriptRule, ScriptedVlm};
pub use usage::{account, round_to, Phase, PriceTable, UsageRecord, UsageReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseSchema {
    RegionIndex,
    YesNo,
    Action,
}

impl ResponseSchema {
    pub fn default_max_tokens(&self) -> u32 {
        match self {
            ResponseSchema::RegionIndex | ResponseSchema::YesNo => 16,
            ResponseSchema::Action => 128,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CaptionedImage {
    pub caption: String,
    pub image: Arc<RgbImage>,
}

impl CaptionedImage {
    pub fn new(caption: impl Into<String>, image: Arc<RgbImage>) -> Self {
        CaptionedImage {
            caption: caption.into(),
            image,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VlmRequest {
    pub images: Vec<CaptionedImage>,
    pub prompt_text: String,
    pub max_output_tokens: u32,
    pub schema: ResponseSchema,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Parsed {
    RegionIndex(usize),
    YesNo(bool),
    Action(ReplayAction),
}

#[derive(Debug, Clone)]
pub struct VlmResponse {
    pub text: String,
    pub parsed: Option<Parsed>,
    /// Probability of the first response token when the backend reports it, else 1.0.
    pub confidence: f64,
    /// Summed over every attempt.
    pub usage: UsageRecord,
    pub attempts: usize,
}

/// What a backend returns for one completion.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub first_token_probability: Option<f64>,
    /// Seconds; backends that know their own latency (fixtures) report it.
    pub latency: Option<f64>,
}

pub trait VlmBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, images: &[CaptionedImage], text: &str, max_tokens: u32) -> Result<BackendReply>;
}

fn region_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\bregion\s*#?\s*(\d+)").expect("static regex"))
}

fn integer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(\d+)\b").expect("static regex"))
}

fn yes_no_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no)\b").expect("static regex"))
}

pub fn parse_response(text: &str, schema: ResponseSchema) -> Result<Parsed> {
    match schema {
        ResponseSchema::RegionIndex => {
            let caps = region_re()
                .captures(text)
                .or_else(|| integer_re().captures(text))
                .ok_or_else(|| Error::Parse(format!("no region index in {text:?}")))?;
            caps[1]
                .parse()
                .map(Parsed::RegionIndex)
                .map_err(|_| Error::Parse(format!("region index out of range in {text:?}")))
        }
        ResponseSchema::YesNo => yes_no_re()
            .captures(text)
            .map(|c| Parsed::YesNo(c[1].eq_ignore_ascii_case("yes")))
            .ok_or_else(|| Error::Parse(format!("no YES/NO in {text:?}"))),
        ResponseSchema::Action => parse_action(text).map(Parsed::Action),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each further attempt.
    pub initial_backoff_ms: u64,
    pub retry_parse_errors: bool,
    pub retry_transport_errors: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1000,
            retry_parse_errors: true,
            retry_transport_errors: true,
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(max_attempts: u32) -> Self {
        RetryPolicy {
            max_attempts,
            initial_backoff_ms: 0,
            ..RetryPolicy::default()
        }
    }

    fn backoff(&self, failed_attempts: u32) -> Duration {
        let factor = 1u64 << failed_attempts.saturating_sub(1).min(16);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor))
    }
}

/// Request-level checks beyond the schema grammar (index ranges, mark
/// grounding). The message is fed back to the model on retry.
pub type Validator<'a> = &'a dyn Fn(&Parsed) -> std::result::Result<(), String>;

/// Shared client: sends requests, retries, and keeps a usage ledger.
pub struct VlmClient {
    backend: Arc<dyn VlmBackend>,
    pub retry: RetryPolicy,
    pub prices: PriceTable,
    ledger: Mutex<Vec<UsageRecord>>,
}

impl VlmClient {
    pub fn new(backend: Arc<dyn VlmBackend>, retry: RetryPolicy, prices: PriceTable) -> Self {
        VlmClient {
            backend,
            retry,
            prices,
            ledger: Mutex::new(Vec::new()),
        }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn invoke(&self, request: &VlmRequest) -> Result<VlmResponse> {
        self.invoke_validated(request, &|_| Ok(()))
    }

    /// Sends the request until the reply parses and passes `validate`.
    ///
    /// Failed parses are appended to the prompt as corrective context on the
    /// next attempt. Usage is summed over attempts and also appended to the
    /// client ledger, whether or not the call finally succeeds.
    pub fn invoke_validated(&self, request: &VlmRequest, validate: Validator) -> Result<VlmResponse> {
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempts: Vec<String> = Vec::new();
        let (mut input_tokens, mut output_tokens, mut latency) = (0u64, 0u64, 0.0f64);
        let mut prompt = request.prompt_text.clone();
        let mut last_error = String::new();

        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let delay = self.retry.backoff(attempt - 1);
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
            }
            let started = Instant::now();
            let reply = self
                .backend
                .complete(&request.images, &prompt, request.max_output_tokens);
            let elapsed = started.elapsed().as_secs_f64();
            match reply {
                Err(e) => {
                    latency += elapsed;
                    last_error = e.to_string();
                    attempts.push(format!("<transport error: {last_error}>"));
                    if !self.retry.retry_transport_errors {
                        break;
                    }
                }
                Ok(reply) => {
                    input_tokens += reply.input_tokens;
                    output_tokens += reply.output_tokens;
                    latency += reply.latency.unwrap_or(elapsed);
                    attempts.push(reply.text.clone());
                    let checked = parse_response(&reply.text, request.schema)
                        .map_err(|e| e.to_string())
                        .and_then(|p| validate(&p).map(|_| p));
                    match checked {
                        Ok(parsed) => {
                            let usage = self.record(request.phase, input_tokens, output_tokens, latency);
                            return Ok(VlmResponse {
                                text: reply.text,
                                parsed: Some(parsed),
                                confidence: reply.first_token_probability.unwrap_or(1.0).clamp(0.0, 1.0),
                                usage,
                                attempts: attempts.len(),
                            });
                        }
                        Err(msg) => {
                            last_error = msg;
                            if !self.retry.retry_parse_errors {
                                break;
                            }
                            prompt = format!(
                                "{}\n\nYour previous answer {:?} could not be used: {}. Answer again using exactly the required format.",
                                request.prompt_text, reply.text, last_error
                            );
                        }
                    }
                }
            }
        }
        self.record(request.phase, input_tokens, output_tokens, latency);
        Err(Error::Invocation {
            attempts,
            last_error,
        })
    }

    fn record(&self, phase: Phase, input_tokens: u64, output_tokens: u64, latency: f64) -> UsageRecord {
        let usage = UsageRecord::new(phase, input_tokens, output_tokens, latency, &self.prices);
        self.ledger
            .lock()
            .expect("usage ledger poisoned")
            .push(usage.clone());
        usage
    }

    /// Appends a record produced outside the client (e.g. region detection) so
    /// the ledger covers every model call of a run.
    pub fn log_external(&self, record: UsageRecord) {
        self.ledger.lock().expect("usage ledger poisoned").push(record);
    }

    pub fn usage_log(&self) -> Vec<UsageRecord> {
        self.ledger.lock().expect("usage ledger poisoned").clone()
    }

    /// Removes and returns every ledger entry recorded so far.
    pub fn drain_usage(&self) -> Vec<UsageRecord> {
        std::mem::take(&mut *self.ledger.lock().expect("usage ledger poisoned"))
    }
}
