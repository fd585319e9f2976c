use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const STOP: usize = 1;

// Fixed word list. Every string the generator emits is spelled with these;
// the tail is domain filler that only ever shows up in the LM warmup text.
const WORDS: &[&str] = &[
    "<pad>", "<stop>", // specials
    "a", "an", "the", "is", "are", "at", "on", "in", "of", "and", "with", "to", "be", "can",
    "should", "how", "which", "what", "where", "this", "that", "it", "there", "image", "view",
    "shown", "quality", "sufficient", "target", "measured", "probe", "move", "visible", "not",
    "yes", "no", "row", "column", "shift", "left", "right", "up", "down", "centered", "apical",
    "parasternal", "subcostal", "suprasternal", "red", "green", "blue", "yellow", "circle",
    "square", "cross", "diamond", "clean", "grainy", "noisy", "shadowed", "occluded", "0", "1",
    "2", "3", "4", "5", "6", "7", "8", "9", "heart", "chamber", "chambers", "ventricle",
    "atrium", "septum", "apex", "wall", "valve", "mitral", "tricuspid", "aortic", "lung",
    "artifact", "rib", "shadow", "angle", "rotate", "clockwise", "tilt", "slide", "lateral",
    "medial", "patient", "shoulder", "window", "depth", "gain", "contrast", "frame", "scan",
    "ejection", "fraction", "estimate", "feasible", "four", "two", "all", "partial", "missing",
    "structure", "structures", "clear", "poor", "good", "moderate", "low", "high", "off", "axis",
];

/// Whitespace tokenizer over a fixed word list. Unknown words are an error;
/// there is no subword fallback.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<&'static str>,
    index: HashMap<&'static str, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let words = WORDS.to_vec();
        let index = words.iter().enumerate().map(|(i, w)| (*w, i)).collect();
        Self { words, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| Error::Tokenizer(word.to_string()))
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.word_id(w)).collect()
    }

    /// Joins tokens with single spaces, stopping at the first stop token.
    /// Padding is skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != STOP)
            .filter(|&&i| i != PAD)
            .filter_map(|&i| self.words.get(i).copied())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn words_are_unique_and_about_120() {
        let t = Tokenizer::new();
        assert_eq!(t.index.len(), t.vocab_size());
        assert!((110..=140).contains(&t.vocab_size()));
        assert_eq!(t.word(PAD), Some("<pad>"));
        assert_eq!(t.word(STOP), Some("<stop>"));
    }

    #[test]
    fn round_trip_and_unknown_word() {
        let t = Tokenizer::new();
        let s = "is a red circle visible";
        let ids = t.encode(s).unwrap();
        assert_eq!(t.decode(&ids), s);
        assert!(matches!(t.encode("is a purple circle"), Err(Error::Tokenizer(w)) if w == "purple"));
    }

    #[test]
    fn decode_stops_at_stop_token() {
        let t = Tokenizer::new();
        let mut ids = t.encode("shift left").unwrap();
        ids.push(STOP);
        ids.extend(t.encode("yes").unwrap());
        assert_eq!(t.decode(&ids), "shift left");
    }
}
