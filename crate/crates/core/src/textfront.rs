//! Text front-end: character-level units standing in for phonemes, a
//! persisted vocabulary and frame alignments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Ordered unit inventory; the id of a unit is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    units: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(units: Vec<String>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(units.len());
        for (i, u) in units.iter().enumerate() {
            if u.is_empty() || u.contains('\n') {
                return Err(Error::InvalidArgument(format!("invalid unit {u:?} at line {i}")));
            }
            if index.insert(u.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate unit {u:?}")));
            }
        }
        Ok(Self { units, index })
    }

    /// Space, `a`–`z`, `0`–`9`.
    pub fn default_characters() -> Self {
        let units = std::iter::once(' ')
            .chain('a'..='z')
            .chain('0'..='9')
            .map(String::from)
            .collect();
        Self::new(units).expect("default vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn id(&self, unit: &str) -> Option<u32> {
        self.index.get(unit).copied()
    }

    pub fn unit(&self, id: u32) -> Option<&str> {
        self.units.get(id as usize).map(String::as_str)
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// One unit per line; line number = id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.units.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let body = text.strip_suffix('\n').unwrap_or(&text);
        let units = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::new(units)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Swappable text-to-unit front-end (a G2P can implement this).
pub trait Tokenizer {
    fn vocabulary(&self) -> &Vocabulary;
    fn tokenize(&self, text: &str) -> Result<TokenSequence>;
}

/// Lowercases, drops punctuation and anything outside the vocabulary, and
/// collapses whitespace to single spaces.
#[derive(Debug, Clone)]
pub struct CharTokenizer {
    vocab: Vocabulary,
}

impl CharTokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }

    pub fn normalize(&self, text: &str) -> Vec<String> {
        let mut units: Vec<String> = Vec::new();
        let mut pending_space = false;
        for ch in text.chars().flat_map(char::to_lowercase) {
            if ch.is_whitespace() {
                pending_space = !units.is_empty();
                continue;
            }
            let unit = ch.to_string();
            if self.vocab.id(&unit).is_none() || unit == " " {
                continue;
            }
            if pending_space && self.vocab.id(" ").is_some() {
                units.push(" ".to_string());
            }
            pending_space = false;
            units.push(unit);
        }
        units
    }
}

impl Default for CharTokenizer {
    fn default() -> Self {
        Self::new(Vocabulary::default_characters())
    }
}

impl Tokenizer for CharTokenizer {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let units = self.normalize(text);
        if units.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "text {text:?} is empty after normalization"
            )));
        }
        let ids = units
            .iter()
            .map(|u| self.vocab.id(u).expect("normalizer only keeps known units"))
            .collect();
        Ok(TokenSequence {
            ids,
            text: text.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub durations: Vec<u32>,
    pub total_frames: usize,
}

impl Alignment {
    pub fn new(durations: Vec<u32>) -> Result<Self> {
        if let Some(i) = durations.iter().position(|d| *d == 0) {
            return Err(Error::InvalidArgument(format!("duration of token {i} is zero")));
        }
        let total_frames = durations.iter().map(|d| *d as usize).sum();
        Ok(Self {
            durations,
            total_frames,
        })
    }
}

/// Split `total_frames` as evenly as possible over the tokens; earlier tokens
/// take the remainder.
pub fn uniform_align(tokens: &TokenSequence, total_frames: usize) -> Result<Alignment> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no tokens to align".into()));
    }
    if total_frames < n {
        return Err(Error::InvalidArgument(format!(
            "{total_frames} frames cannot cover {n} tokens"
        )));
    }
    let base = total_frames / n;
    let extra = total_frames % n;
    let durations = (0..n).map(|i| (base + usize::from(i < extra)) as u32).collect();
    Alignment::new(durations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn units(t: &CharTokenizer, text: &str) -> Vec<String> {
        let seq = t.tokenize(text).unwrap();
        seq.ids
            .iter()
            .map(|&i| t.vocabulary().unit(i).unwrap().to_string())
            .collect()
    }

    #[test]
    fn maps_characters() {
        let t = CharTokenizer::default();
        assert_eq!(units(&t, "Hi"), vec!["h", "i"]);
        let v = t.vocabulary();
        assert_eq!(t.tokenize("Hi").unwrap().ids, vec![v.id("h").unwrap(), v.id("i").unwrap()]);
    }

    #[test]
    fn strips_punctuation_golden() {
        let t = CharTokenizer::default();
        assert_eq!(
            units(&t, "Don't stop"),
            vec!["d", "o", "n", "t", " ", "s", "t", "o", "p"]
        );
        assert_eq!(units(&t, "  Hello,   world!  "), units(&t, "hello world"));
    }

    #[test]
    fn deterministic() {
        let t = CharTokenizer::default();
        assert_eq!(t.tokenize("same text").unwrap(), t.tokenize("same text").unwrap());
    }

    #[test]
    fn empty_after_normalization_is_rejected() {
        let t = CharTokenizer::default();
        assert!(matches!(t.tokenize(" ?!. "), Err(Error::InvalidArgument(_))));
        assert!(t.tokenize("").is_err());
    }

    #[test]
    fn alignment_examples() {
        let t = CharTokenizer::default();
        let five = t.tokenize("abcde").unwrap();
        assert_eq!(uniform_align(&five, 10).unwrap().durations, vec![2; 5]);
        let three = t.tokenize("abc").unwrap();
        assert_eq!(uniform_align(&three, 10).unwrap().durations, vec![4, 3, 3]);
        assert_eq!(uniform_align(&three, 3).unwrap().durations, vec![1, 1, 1]);
        assert!(uniform_align(&three, 2).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::default_characters();
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.unit(0), Some(" "));
        let t = CharTokenizer::new(back);
        assert_eq!(t.tokenize("ok 1").unwrap(), CharTokenizer::new(v).tokenize("ok 1").unwrap());
    }

    proptest! {
        #[test]
        fn alignment_sums(n in 1usize..50, extra in 0usize..500) {
            let t = CharTokenizer::default();
            let text: String = (0..n).map(|i| (b'a' + (i % 26) as u8) as char).collect();
            let seq = t.tokenize(&text).unwrap();
            let a = uniform_align(&seq, n + extra).unwrap();
            prop_assert_eq!(a.durations.iter().map(|d| *d as usize).sum::<usize>(), n + extra);
            prop_assert_eq!(a.total_frames, n + extra);
            let (lo, hi) = (a.durations.iter().min().unwrap(), a.durations.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }
}
