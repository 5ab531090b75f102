use std::sync::OnceLock;

use thiserror::Error;

pub type Token = u32;

/// Symbol table shared by the generator, solver and scorer.
///
/// Digits render multi-digit numbers one symbol at a time; role markers frame
/// tasks, demonstrations, queries, answers and self-generated examples; the
/// remaining arithmetic/markup symbols round the table out to 40 entries.
pub struct Vocab {
    symbols: Vec<&'static str>,
}

/// Role marker token ids. Digits occupy ids 0..=9.
pub const TASK_START: Token = 10;
pub const DEMO_SEP: Token = 11;
pub const SOLUTION_SEP: Token = 12;
pub const QUERY: Token = 13;
pub const ANSWER_START: Token = 14;
pub const EXAMPLE_START: Token = 15;
pub const END: Token = 16;

const MARKUP: &[&str] = &[
    "+", "-", "*", "/", "=", "(", ")", "[", "]", "{", "}", "<", ">", ".", ",", "%", "^", "&",
    "|", "!", "?", "~", "@",
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unencodable text at byte {0}")]
    Unencodable(usize),
}

impl Vocab {
    pub fn standard() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut symbols: Vec<&'static str> =
                vec!["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
            symbols.extend(["T:", ";", "\u{2192}", "Q:", "A:", "E:", "#"]);
            symbols.extend(MARKUP);
            debug_assert_eq!(symbols.len(), 40);
            Vocab { symbols }
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn symbol(&self, t: Token) -> &'static str {
        self.symbols[t as usize]
    }

    pub fn digit(d: u8) -> Token {
        debug_assert!(d < 10);
        d as Token
    }

    pub fn is_digit(t: Token) -> bool {
        t < 10
    }

    /// Tokens for a non-negative number, most significant digit first.
    pub fn number(&self, n: u64) -> Vec<Token> {
        let s = n.to_string();
        s.bytes().map(|b| Vocab::digit(b - b'0')).collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens.iter().map(|&t| self.symbol(t)).collect()
    }

    /// Greedy longest-match tokenization; inverse of `decode` on valid text.
    pub fn encode(&self, text: &str) -> Result<Vec<Token>, VocabError> {
        let mut out = Vec::new();
        let mut pos = 0;
        let bytes = text.as_bytes();
        while pos < bytes.len() {
            let rest = &text[pos..];
            let mut best: Option<(Token, usize)> = None;
            for (i, sym) in self.symbols.iter().enumerate() {
                if rest.starts_with(sym) && best.map_or(true, |(_, l)| sym.len() > l) {
                    best = Some((i as Token, sym.len()));
                }
            }
            match best {
                Some((t, l)) => {
                    out.push(t);
                    pos += l;
                }
                None => return Err(VocabError::Unencodable(pos)),
            }
        }
        Ok(out)
    }
}
