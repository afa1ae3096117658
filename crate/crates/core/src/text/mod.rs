//! Caption processing: tokenisation, POS tagging, keep-set filtering,
//! vocabulary lookup, and the recurrent text encoder.

mod encoder;
mod tagger;
mod vocab;

pub use encoder::{EncodedText, TextEncoder, TextFeatures};
pub use tagger::{
    filter_semantic, filter_semantic_without_auxiliaries, parse_lexicon, tag_tokens, tokenize, LexiconTagger,
    PosTagger, Tag, TaggedToken, AUXILIARIES, KEEP_PREFIXES,
};
pub use vocab::{Vocabulary, PAD_ID, PAD_TOKEN, RESERVED, UNK_ID, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::Error;

/// How raw captions become token sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionOptions {
    /// Apply the POS keep-set filter. When off every token is kept.
    pub use_pos: bool,
    /// Additionally drop auxiliary verbs ("is", "are", ...).
    pub drop_auxiliaries: bool,
    /// Filtered captions longer than this are truncated.
    pub max_len: usize,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        Self { use_pos: true, drop_auxiliaries: false, max_len: 16 }
    }
}

/// One processed description.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub raw_tokens: Vec<String>,
    pub tagged: Vec<TaggedToken>,
    pub filtered_tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl Caption {
    /// Tokenises, tags, and filters `text`, then maps tokens to ids.
    pub fn process(
        text: &str,
        tagger: &dyn PosTagger,
        vocab: &Vocabulary,
        options: &CaptionOptions,
    ) -> Result<Self, Error> {
        let (raw_tokens, tagged, filtered_tokens) = preprocess(text, tagger, options)?;
        let ids = filtered_tokens.iter().map(|t| vocab.id(t)).collect();
        Ok(Self { raw_tokens, tagged, filtered_tokens, ids })
    }

    /// Single unknown-token caption used when filtering leaves nothing.
    pub fn placeholder() -> Self {
        Self {
            raw_tokens: vec![UNK_TOKEN.to_string()],
            tagged: vec![TaggedToken { text: UNK_TOKEN.to_string(), tag: Tag::Nn }],
            filtered_tokens: vec![UNK_TOKEN.to_string()],
            ids: vec![UNK_ID],
        }
    }

    pub fn len(&self) -> usize {
        self.filtered_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filtered_tokens.is_empty()
    }

    /// This caption, or the placeholder if filtering removed every token.
    pub fn or_placeholder(self) -> Self {
        if self.is_empty() {
            Self::placeholder()
        } else {
            self
        }
    }
}

/// Raw tokens, their tags, and the filtered (truncated) token list.
pub type Preprocessed = (Vec<String>, Vec<TaggedToken>, Vec<String>);

pub fn preprocess(text: &str, tagger: &dyn PosTagger, options: &CaptionOptions) -> Result<Preprocessed, Error> {
    let raw = tokenize(text);
    let tagged = tagger.tag(&raw)?;
    let mut filtered = match (options.use_pos, options.drop_auxiliaries) {
        (false, _) => raw.clone(),
        (true, false) => filter_semantic(&tagged),
        (true, true) => filter_semantic_without_auxiliaries(&tagged),
    };
    filtered.truncate(options.max_len);
    Ok((raw, tagged, filtered))
}
