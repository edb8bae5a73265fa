use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::text::{tokenize, ANSWER_BEGIN, ANSWER_END};
use crate::error::{MulteeError, Result};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const OOV_TOKEN: &str = "<unk>";
/// Inserted between sentences by the concatenation baseline.
pub const SEP_TOKEN: &str = "<sep>";

/// Tokens paired with their vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Concatenation with an optional separator between parts.
    pub fn join(parts: &[TokenSeq], sep: Option<(&str, usize)>) -> TokenSeq {
        let mut out = TokenSeq {
            tokens: Vec::new(),
            ids: Vec::new(),
        };
        for (i, p) in parts.iter().enumerate() {
            if i > 0 {
                if let Some((tok, id)) = sep {
                    out.tokens.push(tok.to_string());
                    out.ids.push(id);
                }
            }
            out.tokens.extend(p.tokens.iter().cloned());
            out.ids.extend(p.ids.iter().copied());
        }
        out
    }

    /// Appends `n` padding positions.
    pub fn padded(&self, n: usize) -> TokenSeq {
        let mut out = self.clone();
        out.tokens.extend(std::iter::repeat_n(PAD_TOKEN.to_string(), n));
        out.ids.extend(std::iter::repeat_n(PAD_ID, n));
        out
    }

    pub fn mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

/// Token <-> id mapping. Ids 0 and 1 are padding and out-of-vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved entries followed by every distinct token in sorted order.
    pub fn build<'a>(sequences: impl IntoIterator<Item = &'a [String]>) -> Vocab {
        let reserved = [PAD_TOKEN, OOV_TOKEN, SEP_TOKEN, ANSWER_BEGIN, ANSWER_END];
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for seq in sequences {
            for t in seq {
                seen.insert(t.as_str());
            }
        }
        let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            seen.into_iter()
                .filter(|t| !reserved.contains(t))
                .map(str::to_string),
        );
        Vocab::from_tokens(tokens).expect("reserved tokens are distinct")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[OOV_ID] != OOV_TOKEN {
            return Err(MulteeError::Validation(format!(
                "vocabulary must start with `{PAD_TOKEN}` and `{OOV_TOKEN}`"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(MulteeError::Validation(format!(
                    "duplicate vocabulary entry `{t}`"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// One token per line; the line number is the id.
    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn sep_id(&self) -> usize {
        self.index.get(SEP_TOKEN).copied().unwrap_or(OOV_ID)
    }

    pub fn encode(&self, tokens: Vec<String>) -> TokenSeq {
        let ids = tokens.iter().map(|t| self.id(t)).collect();
        TokenSeq { tokens, ids }
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        Ok(self.encode(tokenize(text)?))
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
