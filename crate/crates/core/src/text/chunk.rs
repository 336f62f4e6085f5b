//! Rule-based noun-phrase chunker for the caption grammar.
//!
//! A phrase is `DET? ADJ* NOUN+`, matched greedily left to right. Spans are
//! half-open token ranges and never overlap. When nothing matches, the whole
//! caption is returned as a single span.

pub type Span = (usize, usize);

const DETERMINERS: &[&str] = &["a", "an", "the", "some", "no", "his", "her", "their"];

const ADJECTIVES: &[&str] = &[
    "red", "green", "blue", "yellow", "white", "black", "gray", "grey", "purple", "orange", "pink", "brown",
    "long", "short", "dark", "light", "small", "large", "casual",
];

const NOUNS: &[&str] = &[
    "person", "man", "woman", "pedestrian", "individual", "someone", "shirt", "top", "sleeves", "pants",
    "trousers", "jeans", "shorts", "skirt", "shoes", "sneakers", "boots", "hat", "cap", "bag", "backpack",
    "handbag", "outfit", "clothes",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Det,
    Adj,
    Noun,
    Other,
}

pub fn tag(token: &str) -> Tag {
    if DETERMINERS.contains(&token) {
        Tag::Det
    } else if ADJECTIVES.contains(&token) {
        Tag::Adj
    } else if NOUNS.contains(&token) {
        Tag::Noun
    } else {
        Tag::Other
    }
}

/// Noun-phrase spans, falling back to one whole-caption span.
pub fn chunk<S: AsRef<str>>(tokens: &[S]) -> Vec<Span> {
    let tags: Vec<Tag> = tokens.iter().map(|t| tag(t.as_ref())).collect();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tags.len() {
        let mut j = i;
        if tags[j] == Tag::Det {
            j += 1;
        }
        while j < tags.len() && tags[j] == Tag::Adj {
            j += 1;
        }
        let mut k = j;
        while k < tags.len() && tags[k] == Tag::Noun {
            k += 1;
        }
        if k > j {
            spans.push((i, k));
            i = k;
        } else {
            i += 1;
        }
    }
    if spans.is_empty() && !tokens.is_empty() {
        spans.push((0, tokens.len()));
    }
    spans
}

/// One span per token, used when phrases are replaced by single words.
pub fn word_spans(len: usize) -> Vec<Span> {
    (0..len).map(|i| (i, i + 1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    #[test]
    fn splits_coordinated_phrases() {
        let toks = tokenize("a red shirt and blue pants");
        // a/DET red/ADJ shirt/NOUN | and/OTHER | blue/ADJ pants/NOUN
        assert_eq!(chunk(&toks), vec![(0, 3), (4, 6)]);
    }

    #[test]
    fn full_caption() {
        let toks = tokenize("the person wears a red shirt with long sleeves , blue pants and white shoes .");
        let spans = chunk(&toks);
        let texts: Vec<String> = spans.iter().map(|&(s, e)| toks[s..e].join(" ")).collect();
        assert_eq!(texts, ["the person", "a red shirt", "long sleeves", "blue pants", "white shoes"]);
    }

    #[test]
    fn falls_back_to_whole_caption() {
        let toks = tokenize("walking quickly");
        assert_eq!(chunk(&toks), vec![(0, 2)]);
        assert!(chunk::<&str>(&[]).is_empty());
    }

    #[test]
    fn dangling_determiner_is_skipped() {
        let toks = tokenize("a and the hat");
        assert_eq!(chunk(&toks), vec![(2, 4)]);
    }
}
