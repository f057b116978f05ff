//! Closed character-level vocabulary.
//!
//! Ids are dense. Index 0 is `<pad>`, index 1 is `<eos>`, every other token
//! is a single character. The newline character must be present; tasks and
//! corpus handling treat it as the line separator.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    by_char: HashMap<char, u32>,
    pad: u32,
    eos: u32,
    newline: u32,
}

impl Vocabulary {
    /// Builds `<pad>`, `<eos>` plus one token per character of `charset`,
    /// in order. The charset must contain `\n` and no duplicates.
    pub fn from_charset(charset: &str) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), EOS_TOKEN.to_string()];
        for ch in charset.chars() {
            tokens.push(ch.to_string());
        }
        Self::from_tokens(tokens, 0, 1)
    }

    /// General constructor. Checks the invariants: unique tokens, distinct
    /// specials, all non-special tokens single characters, newline present.
    pub fn from_tokens(tokens: Vec<String>, pad: u32, eos: u32) -> Result<Self> {
        if pad == eos {
            return Err(Error::Config("pad and eos ids must differ".into()));
        }
        for id in [pad, eos] {
            if id as usize >= tokens.len() {
                return Err(Error::Config(format!("special id {id} out of range")));
            }
        }
        let mut by_char = HashMap::new();
        let mut newline = None;
        let mut seen = std::collections::HashSet::new();
        for (i, tok) in tokens.iter().enumerate() {
            if !seen.insert(tok.clone()) {
                return Err(Error::Config(format!("duplicate token {tok:?}")));
            }
            let id = i as u32;
            if id == pad || id == eos {
                continue;
            }
            let mut chars = tok.chars();
            let ch = chars.next().ok_or_else(|| {
                Error::Config(format!("empty token at id {id}"))
            })?;
            if chars.next().is_some() {
                return Err(Error::Config(format!(
                    "non-special token {tok:?} must be a single character"
                )));
            }
            if ch == '\n' {
                newline = Some(id);
            }
            by_char.insert(ch, id);
        }
        let newline = newline.ok_or_else(|| {
            Error::Config("vocabulary must contain the newline character".into())
        })?;
        Ok(Vocabulary {
            tokens,
            by_char,
            pad,
            eos,
            newline,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> u32 {
        self.pad
    }

    pub fn eos_id(&self) -> u32 {
        self.eos
    }

    pub fn newline_id(&self) -> u32 {
        self.newline
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.pad || id == self.eos
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn char_id(&self, ch: char) -> Option<u32> {
        self.by_char.get(&ch).copied()
    }

    /// Maps each character to its id. Unknown characters are an error
    /// naming the character and its position.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(text.len());
        for (pos, ch) in text.chars().enumerate() {
            match self.by_char.get(&ch) {
                Some(&id) => ids.push(id),
                None => {
                    return Err(Error::Tokenize(format!(
                        "unknown character {ch:?} at position {pos}"
                    )))
                }
            }
        }
        Ok(ids)
    }

    /// Inverse of `tokenize` on representable text. Special tokens are
    /// skipped so trailing `<eos>` never leaks into output text.
    pub fn detokenize(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::with_capacity(ids.len());
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            match self.tokens.get(id as usize) {
                Some(tok) => out.push_str(tok),
                None => {
                    return Err(Error::Tokenize(format!(
                        "token id {id} out of range (vocab size {})",
                        self.size()
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Identity check used by the equality tests: same tokens, same specials.
    pub fn same_as(&self, other: &Vocabulary) -> bool {
        self.tokens == other.tokens && self.pad == other.pad && self.eos == other.eos
    }
}

/// Text plus its token ids under a fixed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub text: String,
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn from_text(vocab: &Vocabulary, text: &str) -> Result<Self> {
        Ok(TokenSequence {
            text: text.to_string(),
            ids: vocab.tokenize(text)?,
        })
    }

    pub fn from_ids(vocab: &Vocabulary, ids: Vec<u32>) -> Result<Self> {
        Ok(TokenSequence {
            text: vocab.detokenize(&ids)?,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Escapes a token for the one-token-per-line vocabulary file.
pub fn escape_token(tok: &str) -> String {
    let mut out = String::with_capacity(tok.len());
    for ch in tok.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(ch),
        }
    }
    out
}

pub fn unescape_token(line: &str) -> Result<String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => {
                return Err(Error::Checkpoint(format!(
                    "bad escape in vocabulary line {line:?}: {other:?}"
                )))
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::from_charset("\n abc").unwrap()
    }

    #[test]
    fn charset_layout_and_specials() {
        let v = vocab();
        assert_eq!(v.size(), 7);
        assert_eq!(v.pad_id(), 0);
        assert_eq!(v.eos_id(), 1);
        assert_eq!(v.newline_id(), 2);
        assert_eq!(v.token(3), Some(" "));
        assert_eq!(v.token(4), Some("a"));
    }

    #[test]
    fn tokenize_roundtrip() {
        let v = vocab();
        let ids = v.tokenize("ab c\ncba").unwrap();
        assert_eq!(v.detokenize(&ids).unwrap(), "ab c\ncba");
    }

    #[test]
    fn detokenize_skips_specials() {
        let v = vocab();
        let mut ids = v.tokenize("ab").unwrap();
        ids.push(v.eos_id());
        ids.insert(0, v.pad_id());
        assert_eq!(v.detokenize(&ids).unwrap(), "ab");
    }

    #[test]
    fn unknown_character_is_named() {
        let v = vocab();
        let err = v.tokenize("aXb").unwrap_err().to_string();
        assert!(err.contains("'X'"), "{err}");
        assert!(err.contains("position 1"), "{err}");
    }

    #[test]
    fn missing_newline_rejected() {
        let err = Vocabulary::from_charset("abc").unwrap_err().to_string();
        assert!(err.contains("newline"), "{err}");
    }

    #[test]
    fn duplicate_characters_rejected() {
        assert!(Vocabulary::from_charset("\naba").is_err());
    }

    #[test]
    fn escape_roundtrip() {
        for tok in ["\n", "\r", "\\", "a", "<eos>", "\\n"] {
            let esc = escape_token(tok);
            assert!(!esc.contains('\n'));
            assert_eq!(unescape_token(&esc).unwrap(), tok);
        }
    }
}
