use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved ids before the first content symbol.
pub const RESERVED: u32 = 4;
/// Content symbols in the default vocabulary.
pub const CONTENT_SYMBOLS: u32 = 40;

const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Symbol table shared by the source and target sides.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocab {
    /// `a`–`z`, `0`–`9` and `+ - * /` after the four reserved ids.
    fn default() -> Self {
        let content = ('a'..='z')
            .chain('0'..='9')
            .chain(['+', '-', '*', '/'])
            .map(String::from);
        Vocab::from_symbols(content)
    }
}

impl Vocab {
    pub fn from_symbols(content: impl IntoIterator<Item = String>) -> Self {
        let symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(content).collect();
        let ids = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Vocab { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> u32 {
        self.ids.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization; unknown symbols map to UNK.
    pub fn encode(&self, line: &str) -> Vec<u32> {
        line.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.symbol(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
