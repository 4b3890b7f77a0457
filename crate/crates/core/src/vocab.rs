//! Closed, versioned vocabulary and the tokenizer shared by commands and
//! object attributes.
//!
//! Tokenization is deliberately simple: lowercase, split on whitespace,
//! underscores and camelCase boundaries, strip punctuation. Every token that
//! reaches a model is looked up in the closed word list; anything else maps
//! to the reserved `<unk>` id.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

/// Version tag of the bundled word list.
pub const VOCAB_VERSION: &str = "v1";

const BUNDLED: &str = include_str!("../data/vocab-v1.txt");

pub const UNK: &str = "<unk>";
pub const EMPTY: &str = "<empty>";
pub const SEP: &str = "<sep>";

pub const UNK_ID: usize = 0;
pub const EMPTY_ID: usize = 1;
pub const SEP_ID: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// The bundled word list.
    pub fn bundled() -> Self {
        Self::from_lines(BUNDLED).expect("bundled vocabulary is well-formed")
    }

    /// Parses one token per line. The first three entries must be the
    /// reserved `<unk>`, `<empty>` and `<sep>` markers.
    pub fn from_lines(text: &str) -> Result<Self, String> {
        let tokens: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect();
        if tokens.len() < 3 || tokens[0] != UNK || tokens[1] != EMPTY || tokens[2] != SEP {
            return Err("vocabulary must start with <unk>, <empty>, <sep>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Hex SHA-256 over the newline-joined word list; recorded in checkpoints.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex(&h.finalize())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Splits identifiers such as `login_icon`, `btnSignIn` or
/// `com.app:id/search_bar` into lowercase word tokens.
pub fn split_identifier(id: &str) -> Vec<String> {
    // Android resource ids carry a package prefix up to the last '/'.
    let id = id.rsplit('/').next().unwrap_or(id);
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for c in id.chars() {
        if !c.is_alphanumeric() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if c.is_uppercase() && prev_lower && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev_lower = c.is_lowercase() || c.is_ascii_digit();
        cur.extend(c.to_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_has_reserved_prefix() {
        let v = Vocab::bundled();
        assert_eq!(v.id(UNK), UNK_ID);
        assert_eq!(v.id(EMPTY), EMPTY_ID);
        assert_eq!(v.id(SEP), SEP_ID);
        assert!(v.len() > 500 && v.len() < 800, "{}", v.len());
        assert_eq!(v.id("definitely-not-a-word"), UNK_ID);
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("Not the Icon, click it!"), ["not", "the", "icon", "click", "it"]);
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn identifiers_split() {
        assert_eq!(split_identifier("login_icon"), ["login", "icon"]);
        assert_eq!(split_identifier("btnSignIn"), ["btn", "sign", "in"]);
        assert_eq!(split_identifier("com.example:id/search_bar"), ["search", "bar"]);
        assert!(split_identifier("").is_empty());
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(Vocab::bundled().digest(), Vocab::bundled().digest());
        assert_eq!(Vocab::bundled().digest().len(), 64);
    }
}
