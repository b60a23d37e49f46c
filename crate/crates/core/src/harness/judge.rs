//! LLM-as-judge scoring. The judge sees the question and both answers but
//! never the table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::metrics::{MetricKind, MetricScore};
use crate::victim::{RemoteClient, RemoteError};

pub const JUDGE_PROMPT_TEMPLATE: &str = "You are a text analyzer to analyze to what extent the assistant answer is aligned with the reference answer.\n\nQuestion: {question}.\nReference answer: {reference_answer}.\nAssistant answer: {assistant_answer}.\n\nPlease provide a score ranging from 0 to 1, where 1 represents perfect alignment and 0 represents no alignment at all. The final answer should contain the score only.";

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("no score found in judge reply {0:?}")]
    Unparseable(String),
    #[error("judge score {0} outside [0, 1]")]
    OutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub question: String,
    pub reference_answer: String,
    pub assistant_answer: String,
}

impl JudgeRequest {
    /// The judge prompt. Placeholders are substituted in one pass, so text
    /// inside the fields is never re-expanded.
    pub fn prompt(&self) -> String {
        let mut out = String::with_capacity(JUDGE_PROMPT_TEMPLATE.len() + 64);
        let mut rest = JUDGE_PROMPT_TEMPLATE;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let tail = &rest[start..];
            let (value, len) = [
                ("{question}", &self.question),
                ("{reference_answer}", &self.reference_answer),
                ("{assistant_answer}", &self.assistant_answer),
            ]
            .into_iter()
            .find(|(k, _)| tail.starts_with(k))
            .map(|(k, v)| (v.as_str(), k.len()))
            .unwrap_or(("{", 1));
            out.push_str(value);
            rest = &tail[len..];
        }
        out.push_str(rest);
        out
    }
}

/// The first number in `reply`; it must lie in `[0, 1]`.
pub fn parse_judge_score(reply: &str) -> Result<f64, JudgeError> {
    let bytes = reply.as_bytes();
    let start = (0..bytes.len())
        .find(|&i| {
            bytes[i].is_ascii_digit()
                || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        })
        .ok_or_else(|| JudgeError::Unparseable(reply.to_owned()))?;
    let negative = start > 0 && bytes[start - 1] == b'-';
    let mut end = start;
    let mut seen_dot = false;
    while end < bytes.len() {
        match bytes[end] {
            b'0'..=b'9' => end += 1,
            b'.' if !seen_dot && bytes.get(end + 1).is_some_and(u8::is_ascii_digit) => {
                seen_dot = true;
                end += 1;
            }
            _ => break,
        }
    }
    let value: f64 = reply[start..end]
        .parse()
        .map_err(|_| JudgeError::Unparseable(reply.to_owned()))?;
    let value = if negative { -value } else { value };
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(JudgeError::OutOfRange(value))
    }
}

pub fn judge_score(client: &RemoteClient, req: &JudgeRequest) -> Result<MetricScore, JudgeError> {
    let reply = client.chat(&req.prompt())?;
    let value = parse_judge_score(&reply.text)?;
    Ok(MetricScore {
        value,
        kind: MetricKind::Judge,
    })
}
