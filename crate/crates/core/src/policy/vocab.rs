use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const OBSERVATION: &str = "[Observation]";
pub const ANALYSIS: &str = "[Analysis]";
pub const CONCLUSION: &str = "[Conclusion]";
pub const LETTER_LABELS: [&str; 4] = ["A", "B", "C", "D"];
pub const YES: &str = "yes";
pub const NO: &str = "no";

/// Reserved tokens, always at ids `0..RESERVED.len()` in this order.
pub const RESERVED: [&str; 11] = [
    EOS, UNK, OBSERVATION, ANALYSIS, CONCLUSION, "A", "B", "C", "D", YES, NO,
];

pub const EOS_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Whitespace-token vocabulary with dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens followed by the distinct remaining words of `texts`,
    /// sorted so the id assignment does not depend on corpus order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !RESERVED.contains(w))
            .collect();
        words.sort_unstable();
        words.dedup();
        let tokens = RESERVED
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect::<Vec<_>>();
        Self::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Encodes a target answer, terminated by end-of-sequence.
    pub fn encode_answer(&self, text: &str) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(EOS_ID);
        ids
    }

    /// Joins tokens with single spaces, stopping at the first end-of-sequence.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS_ID)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// True when the reserved block is intact at the expected ids.
    pub fn has_reserved_layout(&self) -> bool {
        RESERVED
            .iter()
            .enumerate()
            .all(|(i, r)| self.tokens.get(i).map(String::as_str) == Some(*r))
            && self.index.len() == self.tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_first_and_sorted() {
        let v = Vocabulary::build(["zeta alpha [Observation] alpha", "B mid"]);
        assert!(v.has_reserved_layout());
        assert_eq!(&v.tokens()[RESERVED.len()..], ["alpha", "mid", "zeta"]);
        assert_eq!(v.id("never-seen"), UNK_ID);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build(["cells present"]);
        let mut ids = v.encode_answer("[Observation] cells present");
        ids.push(v.id("cells"));
        assert_eq!(v.decode(&ids), "[Observation] cells present");
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["a b c"]);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(v, back);
    }
}
