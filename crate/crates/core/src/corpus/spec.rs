use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
    Purple,
    Orange,
}

impl Color {
    pub const ALL: [Color; 8] =
        [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White, Color::Black, Color::Purple, Color::Orange];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
            Color::Purple => "purple",
            Color::Orange => "orange",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.85, 0.10, 0.10],
            Color::Green => [0.10, 0.65, 0.20],
            Color::Blue => [0.15, 0.25, 0.85],
            Color::Yellow => [0.95, 0.85, 0.10],
            Color::White => [0.95, 0.95, 0.95],
            Color::Black => [0.08, 0.08, 0.08],
            Color::Purple => [0.55, 0.15, 0.70],
            Color::Orange => [0.95, 0.50, 0.05],
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sleeve {
    Long,
    Short,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bottoms {
    Pants,
    Shorts,
    Skirt,
}

impl Bottoms {
    pub fn noun(self) -> &'static str {
        match self {
            Bottoms::Pants => "pants",
            Bottoms::Shorts => "shorts",
            Bottoms::Skirt => "skirt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub hat: Option<Color>,
    pub shirt: Color,
    pub sleeve: Sleeve,
    pub bottoms: Bottoms,
    pub bottoms_color: Color,
    pub shoes: Color,
    pub bag: bool,
}

const N_COLORS: usize = Color::ALL.len();

impl Attributes {
    /// Number of distinct attribute tuples.
    pub const SPACE: usize = (N_COLORS + 1) * N_COLORS * 2 * 3 * N_COLORS * N_COLORS * 2;

    /// Mixed-radix code in `[0, SPACE)`.
    pub fn code(&self) -> usize {
        let mut c = self.hat.map_or(0, |h| h.index() + 1);
        c = c * N_COLORS + self.shirt.index();
        c = c * 2 + self.sleeve as usize;
        c = c * 3 + self.bottoms as usize;
        c = c * N_COLORS + self.bottoms_color.index();
        c = c * N_COLORS + self.shoes.index();
        c * 2 + self.bag as usize
    }

    pub fn from_code(mut c: usize) -> Self {
        let mut take = |radix: usize| {
            let d = c % radix;
            c /= radix;
            d
        };
        let bag = take(2) == 1;
        let shoes = Color::ALL[take(N_COLORS)];
        let bottoms_color = Color::ALL[take(N_COLORS)];
        let bottoms = [Bottoms::Pants, Bottoms::Shorts, Bottoms::Skirt][take(3)];
        let sleeve = [Sleeve::Long, Sleeve::Short][take(2)];
        let shirt = Color::ALL[take(N_COLORS)];
        let hat = match take(N_COLORS + 1) {
            0 => None,
            h => Some(Color::ALL[h - 1]),
        };
        Self { hat, shirt, sleeve, bottoms, bottoms_color, shoes, bag }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonSpec {
    pub identity: usize,
    pub attributes: Attributes,
}

/// `n` persons with pairwise distinct attribute tuples; identity i gets the i-th draw.
pub fn sample_persons(n: usize, rng: &mut Rng) -> Vec<PersonSpec> {
    assert!(n <= Attributes::SPACE, "more identities than attribute tuples");
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let code = rng.below(Attributes::SPACE);
        if seen.insert(code) {
            out.push(PersonSpec { identity: out.len(), attributes: Attributes::from_code(code) });
        }
    }
    out
}
