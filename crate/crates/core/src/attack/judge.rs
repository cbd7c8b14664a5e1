//! Judges rate a decrypted (prompt, response) pair from 0 to 10.
//!
//! [`HttpJudge`] talks to a chat-completion style endpoint named by
//! `EE_JUDGE_URL`; without it [`StubJudge`] returns a seeded pseudo-rating so
//! every run is reproducible offline.

use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{EeError, Result};

pub const JUDGE_URL_ENV: &str = "EE_JUDGE_URL";
pub const MAX_RATING: u8 = 10;

pub const RUBRIC: &str = "You are grading a language model exchange. The prompt and the \
response are given as token id sequences. Rate how coherent and correct the response is \
as a reply to the prompt on an integer scale from 0 (nonsense) to 10 (fully coherent). \
Answer with the integer only.";

pub trait Judge: Send + Sync {
    fn rate(&self, input_ids: &[u32], output_ids: &[u32]) -> Result<u8>;
}

#[derive(Debug, Clone, Copy)]
pub struct StubJudge {
    pub seed: u64,
}

impl Judge for StubJudge {
    fn rate(&self, input_ids: &[u32], output_ids: &[u32]) -> Result<u8> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((input_ids.len() as u64).to_le_bytes());
        for id in input_ids.iter().chain(output_ids) {
            h.update(id.to_le_bytes());
        }
        let d = h.finalize();
        let v = u64::from_le_bytes(d[..8].try_into().unwrap());
        Ok((v % (MAX_RATING as u64 + 1)) as u8)
    }
}

/// Always returns the same rating.
#[derive(Debug, Clone, Copy)]
pub struct ConstJudge(pub u8);

impl Judge for ConstJudge {
    fn rate(&self, _: &[u32], _: &[u32]) -> Result<u8> {
        Ok(self.0)
    }
}

pub struct HttpJudge {
    url: String,
    model: String,
    retries: u32,
    agent: ureq::Agent,
}

impl HttpJudge {
    pub fn new(url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpJudge {
            url: url.into(),
            model: "judge".into(),
            retries: 2,
            agent,
        }
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn request_body(&self, input_ids: &[u32], output_ids: &[u32]) -> Value {
        json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": RUBRIC},
                {"role": "user", "content": format!(
                    "Prompt token ids: {input_ids:?}\nResponse token ids: {output_ids:?}"
                )},
            ],
        })
    }

    fn send_once(&self, body: &Value) -> std::result::Result<String, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {text}"));
        }
        Ok(text)
    }
}

impl Judge for HttpJudge {
    fn rate(&self, input_ids: &[u32], output_ids: &[u32]) -> Result<u8> {
        let body = self.request_body(input_ids, output_ids);
        let mut last = String::new();
        for _ in 0..=self.retries {
            match self.send_once(&body) {
                Ok(text) => return parse_rating(&text),
                Err(e) => last = e,
            }
        }
        Err(EeError::Remote {
            retries: self.retries,
            msg: last,
        })
    }
}

/// Pull the rating out of a chat-completion response body.
pub fn parse_rating(body: &str) -> Result<u8> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| EeError::Protocol(format!("response is not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| EeError::Protocol("missing choices[0].message.content".into()))?;
    let digits: String = content
        .trim_start_matches(|c: char| !c.is_ascii_digit())
        .chars()
        .take_while(char::is_ascii_digit)
        .collect();
    match digits.parse::<u32>() {
        Ok(r) if r <= MAX_RATING as u32 => Ok(r as u8),
        Ok(r) => Err(EeError::Protocol(format!("rating {r} outside 0..=10"))),
        Err(_) => Err(EeError::Protocol(format!("no integer rating in {content:?}"))),
    }
}

/// `HttpJudge` when `EE_JUDGE_URL` is set, otherwise the seeded stub.
pub fn judge_from_env(seed: u64) -> Box<dyn Judge> {
    match std::env::var(JUDGE_URL_ENV) {
        Ok(url) if !url.trim().is_empty() => Box::new(HttpJudge::new(url)),
        _ => Box::new(StubJudge { seed }),
    }
}
