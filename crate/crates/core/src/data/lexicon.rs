//! Fixed color palette, shape inventory and the synonyms the expression
//! templates draw from. The mock embedding backend and the text vocabulary
//! both key off these tables.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NamedColor {
    pub name: &'static str,
    pub rgb: [u8; 3],
    pub synonyms: [&'static str; 2],
}

pub const BACKGROUND_RGB: [u8; 3] = [20, 20, 20];

pub const PALETTE: [NamedColor; 8] = [
    NamedColor { name: "red", rgb: [220, 40, 40], synonyms: ["crimson", "scarlet"] },
    NamedColor { name: "green", rgb: [40, 180, 60], synonyms: ["emerald", "leafy"] },
    NamedColor { name: "blue", rgb: [40, 80, 220], synonyms: ["azure", "navy"] },
    NamedColor { name: "yellow", rgb: [230, 210, 40], synonyms: ["golden", "lemon"] },
    NamedColor { name: "purple", rgb: [150, 60, 190], synonyms: ["violet", "lilac"] },
    NamedColor { name: "orange", rgb: [240, 140, 30], synonyms: ["amber", "tangerine"] },
    NamedColor { name: "white", rgb: [240, 240, 240], synonyms: ["ivory", "snowy"] },
    NamedColor { name: "cyan", rgb: [40, 200, 210], synonyms: ["teal", "aqua"] },
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn index(self) -> usize {
        match self {
            Shape::Circle => 0,
            Shape::Square => 1,
            Shape::Triangle => 2,
        }
    }

    pub fn noun(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn synonyms(self) -> [&'static str; 2] {
        match self {
            Shape::Circle => ["disk", "ball"],
            Shape::Square => ["box", "block"],
            Shape::Triangle => ["wedge", "pyramid"],
        }
    }

    pub fn adjective(self) -> &'static str {
        match self {
            Shape::Circle => "round",
            Shape::Square => "blocky",
            Shape::Triangle => "pointy",
        }
    }
}

pub fn color_index(name: &str) -> Option<usize> {
    PALETTE.iter().position(|c| c.name == name)
}

/// Maps any color word (name or synonym) to its palette index.
pub fn color_word(word: &str) -> Option<usize> {
    PALETTE
        .iter()
        .position(|c| c.name == word || c.synonyms.contains(&word))
}

/// Maps any shape word (noun, synonym or adjective) to its shape.
pub fn shape_word(word: &str) -> Option<Shape> {
    Shape::ALL
        .into_iter()
        .find(|s| s.noun() == word || s.synonyms().contains(&word) || s.adjective() == word)
}

/// Template words outside the color/shape vocabulary.
pub const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "photo", "of", "find", "shape", "painted", "that", "is", "left", "right", "above",
    "below",
];

/// Every word the expression templates can emit, in a fixed order.
pub fn template_words() -> Vec<&'static str> {
    let mut words: Vec<&'static str> = FUNCTION_WORDS.to_vec();
    for c in PALETTE.iter() {
        words.push(c.name);
        words.extend(c.synonyms);
    }
    for s in Shape::ALL {
        words.push(s.noun());
        words.extend(s.synonyms());
        words.push(s.adjective());
    }
    words
}
