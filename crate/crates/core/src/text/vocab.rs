use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::Error;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
/// Number of reserved ids before the first corpus token.
pub const RESERVED: usize = 2;

/// Token ↔ id map with reserved padding (0) and unknown (1) ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from every distinct token in the corpus
    /// (minimum frequency 1), ordered alphabetically.
    pub fn build<'a, I, S>(corpus: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut set = BTreeSet::new();
        for caption in corpus {
            for tok in caption {
                if tok != PAD_TOKEN && tok != UNK_TOKEN {
                    set.insert(tok.clone());
                }
            }
        }
        Self::from_tokens(set.into_iter().collect())
    }

    /// Vocabulary whose non-reserved tokens are `tokens`, in order.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens);
        let ids = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Corpus tokens, excluding the reserved entries.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// One token per line; line index equals id minus the reserved offset.
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let mut text = self.corpus_tokens().join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let tokens: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        let distinct: BTreeSet<&String> = tokens.iter().collect();
        if distinct.len() != tokens.len() {
            return Err(Error::Input("vocabulary file has duplicate tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}
