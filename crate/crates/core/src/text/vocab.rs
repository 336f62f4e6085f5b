use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: usize = 0;
pub const PAD: usize = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Lower-cases and splits on whitespace; `,` `.` `;` become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if matches!(ch, ',' | '.' | ';' | '!' | '?') {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.extend(ch.to_lowercase());
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Token ↔ index map. `<unk>` is 0, `<pad>` is 1, the rest are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Keeps tokens seen at least `min_count` times.
    pub fn build<'a, I>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let kept = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count && t != UNK_TOKEN && t != PAD_TOKEN)
            .map(|(t, _)| t.to_string());
        Self::from_tokens([UNK_TOKEN.to_string(), PAD_TOKEN.to_string()].into_iter().chain(kept).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Vocabulary size K.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the index.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < 2 || tokens[UNK] != UNK_TOKEN || tokens[PAD] != PAD_TOKEN {
            return Err(Error::Data("vocabulary must start with <unk> and <pad>".into()));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Data("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| tokenize(t)).collect()
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("A red Shirt, blue pants."), ["a", "red", "shirt", ",", "blue", "pants", "."]);
    }

    #[test]
    fn rare_tokens_map_to_unk() {
        let s = sents(&["a red shirt", "a blue shirt", "a red hat"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 2);
        assert_eq!(v.token(0), Some("<unk>"));
        assert_eq!(v.token(1), Some("<pad>"));
        assert_eq!(v.len(), 5); // unk, pad, a, red, shirt
        assert_eq!(v.id("blue"), UNK);
        assert_eq!(v.id("hat"), UNK);
        assert_ne!(v.id("red"), UNK);
    }

    #[test]
    fn index_round_trip_and_file_format() {
        let s = sents(&["the person wears a red shirt", "the person wears blue pants"]);
        let v = Vocabulary::build(s.iter().map(Vec::as_slice), 1);
        for i in 0..v.len() {
            assert_eq!(v.id(v.token(i).unwrap()), i);
        }
        let text = v.to_text();
        let lines = text.lines().skip(2).collect::<Vec<_>>();
        let sorted = {
            let mut c = lines.clone();
            c.sort();
            c
        };
        assert_eq!(lines, sorted);
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }
}
