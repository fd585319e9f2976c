use std::collections::HashMap;

use crate::error::{Error, Result};

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token-level multiset recall of `truth` in `prediction`.
pub fn score_open_recall(prediction: &str, truth: &str) -> Result<f64> {
    let truth = normalize(truth);
    if truth.is_empty() {
        return Err(Error::Contract("open recall against an empty truth".into()));
    }
    let mut available: HashMap<String, usize> = HashMap::new();
    for t in normalize(prediction) {
        *available.entry(t).or_default() += 1;
    }
    let mut hits = 0usize;
    for t in &truth {
        if let Some(n) = available.get_mut(t) {
            if *n > 0 {
                *n -= 1;
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / truth.len() as f64)
}

/// 1 iff the normalised token sequences are equal.
pub fn score_closed_exact(prediction: &str, truth: &str) -> f64 {
    if normalize(prediction) == normalize(truth) {
        1.0
    } else {
        0.0
    }
}
