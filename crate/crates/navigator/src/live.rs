//! Live-mode adapter: drives real generator and reviewer services over HTTP
//! with JSON bodies.
//!
//! The generator endpoint accepts `{mode: "t2i"|"i2i", prompt, source_ref?}`
//! and returns `{payload_ref}`; the reviewer endpoint accepts
//! `{prompt, payload_ref}` and returns `{visual, instruction, diagnosis}`.
//! Candidates carry no latent quality in live mode. The agent prompt
//! templates are shipped verbatim as config assets and never interpreted
//! here.

use std::time::Duration;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentError};
use crate::trajectory::{Candidate, PromptSpec, ReviewerFeedback, SCORE_MAX};

/// Reviewer prompt template used by live deployments (config asset).
pub const REVIEWER_PROMPT_TEMPLATE: &str = include_str!("../assets/reviewer_prompt.txt");
/// Verbose navigator prompt used during data construction (config asset).
pub const NAVIGATOR_PROMPT_CONSTRUCTION: &str =
    include_str!("../assets/navigator_prompt_construction.txt");
/// Compact navigator prompt used at inference time (config asset).
pub const NAVIGATOR_PROMPT_INFERENCE: &str =
    include_str!("../assets/navigator_prompt_inference.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    T2i,
    I2i,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub mode: GenerationMode,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorResponse {
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerRequest {
    pub prompt: String,
    pub payload_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewerResponse {
    pub visual: f64,
    pub instruction: f64,
    pub diagnosis: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub generator_url: String,
    pub reviewer_url: String,
    pub timeout_secs: u64,
    /// Additional attempts after the first failure.
    pub retries: u32,
}

impl LiveConfig {
    pub fn new(generator_url: impl Into<String>, reviewer_url: impl Into<String>) -> Self {
        Self {
            generator_url: generator_url.into(),
            reviewer_url: reviewer_url.into(),
            timeout_secs: 30,
            retries: 2,
        }
    }
}

/// HTTP client implementing the [`Environment`] interface against live
/// services. All simulator-only features (latent quality) are absent.
pub struct LiveEnv {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveEnv {
    pub fn new(config: LiveConfig) -> Result<Self, EnvironmentError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| EnvironmentError::Config(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn post_json<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        url: &str,
        request: &Req,
    ) -> Result<Resp, String> {
        let mut last_err = String::new();
        for _attempt in 0..=self.config.retries {
            match self.client.post(url).json(request).send() {
                Ok(response) => {
                    let status = response.status();
                    if !status.is_success() {
                        last_err = format!("{url}: status {status}");
                        continue;
                    }
                    match response.json::<Resp>() {
                        Ok(parsed) => return Ok(parsed),
                        Err(e) => {
                            last_err = format!("{url}: bad response body: {e}");
                            continue;
                        }
                    }
                }
                Err(e) => {
                    last_err = format!("{url}: {e}");
                }
            }
        }
        Err(last_err)
    }

    fn call_generator(
        &self,
        request: &GeneratorRequest,
        prompt: &PromptSpec,
        tag: &str,
    ) -> Result<Candidate, EnvironmentError> {
        let response: GeneratorResponse = self
            .post_json(&self.config.generator_url, request)
            .map_err(EnvironmentError::Generator)?;
        Ok(Candidate {
            id: format!("{}-{tag}", prompt.id),
            latent_quality: None,
            payload_ref: response.payload_ref,
        })
    }
}

impl Environment for LiveEnv {
    fn generate(
        &self,
        prompt: &PromptSpec,
        instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        let request = GeneratorRequest {
            mode: GenerationMode::T2i,
            prompt: instruction.to_string(),
            source_ref: None,
        };
        self.call_generator(&request, prompt, tag)
    }

    fn refine(
        &self,
        prompt: &PromptSpec,
        current: &Candidate,
        instruction: &str,
        tag: &str,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Candidate, EnvironmentError> {
        let request = GeneratorRequest {
            mode: GenerationMode::I2i,
            prompt: instruction.to_string(),
            source_ref: Some(current.payload_ref.clone()),
        };
        self.call_generator(&request, prompt, tag)
    }

    fn review(
        &self,
        prompt: &PromptSpec,
        candidate: &Candidate,
        _rng: &mut ChaCha8Rng,
    ) -> Result<ReviewerFeedback, EnvironmentError> {
        let request = ReviewerRequest {
            prompt: prompt.text.clone(),
            payload_ref: candidate.payload_ref.clone(),
        };
        let response: ReviewerResponse = self
            .post_json(&self.config.reviewer_url, &request)
            .map_err(EnvironmentError::Reviewer)?;
        for (name, v) in [("visual", response.visual), ("instruction", response.instruction)] {
            if !(0.0..=SCORE_MAX).contains(&v) {
                return Err(EnvironmentError::Reviewer(format!(
                    "{name} score {v} outside [0,{SCORE_MAX}]"
                )));
            }
        }
        Ok(ReviewerFeedback::from_subscores(
            response.visual,
            response.instruction,
            response.diagnosis,
        ))
    }
}
