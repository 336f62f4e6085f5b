//! Template grammar that verbalizes a person's attributes.

use serde::{Deserialize, Serialize};

use super::spec::{Attributes, Bottoms, Sleeve};
use crate::rng::Rng;
use crate::text::{chunk, tokenize, Span};

pub const GRAMMAR_VERSION: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub spans: Vec<Span>,
}

impl Caption {
    pub fn from_text(text: String) -> Self {
        let spans = chunk(&tokenize(&text));
        Self { text, spans }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

fn pick<'a>(rng: &mut Rng, options: &[&'a str]) -> &'a str {
    options[rng.below(options.len())]
}

/// One sentence with randomized wording and order. Each clothing item and the
/// bag clause is mentioned with probability `mention`; at least two items always are.
pub fn caption(attrs: &Attributes, mention: f64, rng: &mut Rng) -> Caption {
    let sleeves = match attrs.sleeve {
        Sleeve::Long => "long",
        Sleeve::Short => "short",
    };
    let top = pick(rng, &["shirt", "top"]);
    let shirt = format!("a {} {top} with {sleeves} sleeves", attrs.shirt.name());
    let bottoms = match attrs.bottoms {
        Bottoms::Skirt => format!("a {} skirt", attrs.bottoms_color.name()),
        b => format!("{} {}", attrs.bottoms_color.name(), b.noun()),
    };
    let shoes = format!("{} shoes", attrs.shoes.name());
    let mut items = vec![shirt, bottoms, shoes];
    if let Some(h) = attrs.hat {
        items.push(format!("a {} hat", h.name()));
    }
    rng.shuffle(&mut items);
    let bag = if attrs.bag { pick(rng, &["a bag", "a backpack"]) } else { "no bag" };
    let subject = pick(rng, &["the person", "a pedestrian", "this individual", "the pedestrian"]);
    let verb = pick(rng, &["wears", "is wearing", "is dressed in"]);
    let keep: Vec<bool> = items.iter().map(|_| rng.bernoulli(mention)).collect();
    let mut kept: Vec<String> = items.iter().zip(&keep).filter(|(_, &k)| k).map(|(i, _)| i.clone()).collect();
    if kept.len() < 2 {
        kept = items[..2].to_vec();
    }
    let text = if rng.bernoulli(mention) {
        format!("{subject} {verb} {} and {bag} .", kept.join(" , "))
    } else {
        format!("{subject} {verb} {} .", kept.join(" , "))
    };
    Caption::from_text(text)
}

/// `count` pairwise distinct captions for the same attributes.
pub fn distinct_captions(attrs: &Attributes, count: usize, mention: f64, rng: &mut Rng) -> Vec<Caption> {
    let mut out: Vec<Caption> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let c = caption(attrs, mention, rng);
        attempts += 1;
        if attempts > 1000 || !out.iter().any(|o| o.text == c.text) {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::spec::{sample_persons, Color};

    fn attrs() -> Attributes {
        Attributes {
            hat: None,
            shirt: Color::Red,
            sleeve: Sleeve::Long,
            bottoms: Bottoms::Pants,
            bottoms_color: Color::Blue,
            shoes: Color::White,
            bag: false,
        }
    }

    #[test]
    fn every_attribute_is_mentioned() {
        let mut rng = Rng::new(1);
        for p in sample_persons(100, &mut rng.fork(9)) {
            let c = caption(&p.attributes, 1.0, &mut rng);
            let a = p.attributes;
            let t = &c.text;
            let n = a.shirt.name();
            assert!(t.contains(&format!("{n} shirt")) || t.contains(&format!("{n} top")), "{t}");
            assert!(t.contains(match a.sleeve {
                Sleeve::Long => "long sleeves",
                Sleeve::Short => "short sleeves",
            }));
            assert!(t.contains(&format!("{} {}", a.bottoms_color.name(), a.bottoms.noun())), "{t}");
            assert!(t.contains(&format!("{} shoes", a.shoes.name())));
            if let Some(h) = a.hat {
                assert!(t.contains(&format!("{} hat", h.name())));
            }
            assert_eq!(a.bag, !t.contains("no bag"));
        }
    }

    #[test]
    fn spans_are_in_bounds_and_disjoint() {
        let mut rng = Rng::new(2);
        for p in sample_persons(50, &mut Rng::new(3)) {
            let c = caption(&p.attributes, 0.6, &mut rng);
            let n = c.tokens().len();
            let mut end = 0;
            assert!(!c.spans.is_empty());
            for &(s, e) in &c.spans {
                assert!(s >= end && s < e && e <= n);
                end = e;
            }
        }
    }

    #[test]
    fn phrases_follow_the_chunker() {
        let mut rng = Rng::new(4);
        let c = caption(&attrs(), 1.0, &mut rng);
        let toks = c.tokens();
        let phrases: Vec<String> = c.spans.iter().map(|&(s, e)| toks[s..e].join(" ")).collect();
        assert!(phrases.contains(&"blue pants".to_string()), "{phrases:?}");
        assert!(phrases.contains(&"white shoes".to_string()));
        assert!(phrases.contains(&"no bag".to_string()));
    }

    #[test]
    fn partial_captions_only_state_true_attributes() {
        let a = attrs();
        let mut rng = Rng::new(6);
        let mut lengths = std::collections::HashSet::new();
        for _ in 0..200 {
            let c = caption(&a, 0.5, &mut rng);
            let t = &c.text;
            let items = ["red", "blue pants", "white shoes"].iter().filter(|w| t.contains(*w)).count();
            assert!(items >= 2, "{t}");
            assert!(!t.contains("hat") && !t.contains("a bag") && !t.contains("backpack"), "{t}");
            lengths.insert(c.tokens().len());
        }
        assert!(lengths.len() > 1);
        let never = caption(&a, 0.0, &mut rng);
        assert!(!never.text.contains("no bag"));
    }

    #[test]
    fn two_seeds_give_two_distinct_captions() {
        let cs = distinct_captions(&attrs(), 2, 0.6, &mut Rng::new(5));
        assert_eq!(cs.len(), 2);
        assert_ne!(cs[0].text, cs[1].text);
    }
}
