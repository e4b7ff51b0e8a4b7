use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Index into a [`Vocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const MASK_SYMBOL: &str = "[M]";
pub const PAD_SYMBOL: &str = "<pad>";
pub const SIGN_SYMBOLS: [&str; 2] = ["+", "-"];
pub const DIGIT_SYMBOLS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
pub const POINT_SYMBOL: &str = ".";
pub const OPEN_SYMBOL: &str = "[";
pub const SEPARATOR_SYMBOL: &str = ",";
pub const CLOSE_SYMBOL: &str = "]";
pub const TERMINATOR_SYMBOL: &str = ";";

/// Words the scene generators use to phrase driving instructions and parking
/// commands.
pub const INSTRUCTION_WORDS: [&str; 18] = [
    "go", "straight", "turn", "left", "right", "stop", "at", "sign", "park", "nearest",
    "farthest", "spot", "away", "from", "cars", "next", "to", "entrance",
];

/// Coarse role of a symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolClass {
    Mask,
    Pad,
    Sign(bool),
    Digit(u8),
    Point,
    Punct,
    Word,
}

/// Dense, bijective symbol table. Built once and shared read-only.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    symbols: Vec<String>,
    classes: Vec<SymbolClass>,
    id_of: HashMap<String, TokenId>,
    mask_id: TokenId,
}

impl Vocabulary {
    /// The vocabulary used throughout the crate: mask, padding, signs,
    /// digits, decimal point, template punctuation, then instruction words.
    pub fn standard() -> Self {
        let mut entries: Vec<(&str, SymbolClass)> = vec![
            (MASK_SYMBOL, SymbolClass::Mask),
            (PAD_SYMBOL, SymbolClass::Pad),
            ("+", SymbolClass::Sign(false)),
            ("-", SymbolClass::Sign(true)),
        ];
        for (d, s) in DIGIT_SYMBOLS.iter().enumerate() {
            entries.push((s, SymbolClass::Digit(d as u8)));
        }
        entries.push((POINT_SYMBOL, SymbolClass::Point));
        for s in [OPEN_SYMBOL, SEPARATOR_SYMBOL, CLOSE_SYMBOL, TERMINATOR_SYMBOL] {
            entries.push((s, SymbolClass::Punct));
        }
        for w in INSTRUCTION_WORDS {
            entries.push((w, SymbolClass::Word));
        }

        let symbols: Vec<String> = entries.iter().map(|(s, _)| s.to_string()).collect();
        let classes = entries.iter().map(|(_, c)| *c).collect();
        let id_of = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), TokenId(i as u32)))
            .collect();
        Self {
            symbols,
            classes,
            id_of,
            mask_id: TokenId(0),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.id_of[PAD_SYMBOL]
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.id_of.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id.index()).map(String::as_str)
    }

    pub fn class(&self, id: TokenId) -> Option<SymbolClass> {
        self.classes.get(id.index()).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn digit(&self, d: u8) -> TokenId {
        self.id_of[DIGIT_SYMBOLS[d as usize]]
    }

    pub fn sign(&self, negative: bool) -> TokenId {
        self.id_of[SIGN_SYMBOLS[negative as usize]]
    }

    /// Token ids for a whitespace-separated phrase of instruction words.
    pub fn phrase(&self, text: &str) -> Option<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}
