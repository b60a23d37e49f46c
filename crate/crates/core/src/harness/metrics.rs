//! Answer-quality metrics.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Judge,
    Containment,
}

/// A score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub kind: MetricKind,
}

impl MetricScore {
    /// `None` unless `value` is finite and within `[0, 1]`.
    pub fn new(value: f64, kind: MetricKind) -> Option<Self> {
        (0.0..=1.0).contains(&value).then_some(Self { value, kind })
    }
}

/// Lowercased alphanumeric tokens; everything else separates.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

fn token_f1(reference: &[String], response: &[String]) -> f64 {
    if reference.is_empty() || response.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in response {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / response.len() as f64;
    let r = overlap as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// 1 when the normalized reference occurs as a contiguous token run of the
/// normalized response, token-level F1 otherwise.
pub fn containment_score(reference: &str, response: &str) -> MetricScore {
    let r = normalize_tokens(reference);
    let a = normalize_tokens(response);
    let value = if r.is_empty() {
        if a.is_empty() {
            1.0
        } else {
            0.0
        }
    } else if a.windows(r.len()).any(|w| w == r.as_slice()) {
        1.0
    } else {
        token_f1(&r, &a)
    };
    MetricScore {
        value,
        kind: MetricKind::Containment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_examples() {
        assert_eq!(containment_score("42", "42").value, 1.0);
        assert_eq!(containment_score("alpha beta", "gamma delta").value, 0.0);
        let s = containment_score(
            "State of Origin series",
            "The 2023 State of Origin series is the one.",
        );
        assert_eq!(s.value, 1.0);
        // token boundaries: "1" is not inside "10"
        assert_eq!(containment_score("1", "10").value, 0.0);
        let partial = containment_score("red oak tree", "oak tree red").value;
        assert!((partial - 1.0).abs() < 1e-12);
        let half = containment_score("a b", "a c").value;
        assert!((half - 0.5).abs() < 1e-12);
        assert_eq!(containment_score("", "").value, 1.0);
    }

    #[test]
    fn score_range_checked() {
        assert!(MetricScore::new(0.75, MetricKind::Judge).is_some());
        assert!(MetricScore::new(1.5, MetricKind::Judge).is_none());
        assert!(MetricScore::new(f64::NAN, MetricKind::Judge).is_none());
    }
}
