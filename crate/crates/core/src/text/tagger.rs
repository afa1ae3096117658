use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::Error;

macro_rules! penn_tags {
    ($($variant:ident => $text:literal),* $(,)?) => {
        /// Penn Treebank word-level tag.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum Tag { $($variant),* }

        impl Tag {
            pub const ALL: &'static [Tag] = &[$(Tag::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self { $(Tag::$variant => $text),* }
            }
        }

        impl FromStr for Tag {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self, Error> {
                match s {
                    $($text => Ok(Tag::$variant),)*
                    other => Err(Error::Input(format!("unknown POS tag {other:?}"))),
                }
            }
        }
    };
}

penn_tags! {
    Cc => "CC", Cd => "CD", Dt => "DT", Ex => "EX", Fw => "FW", In => "IN",
    Jj => "JJ", Jjr => "JJR", Jjs => "JJS", Ls => "LS", Md => "MD",
    Nn => "NN", Nns => "NNS", Nnp => "NNP", Nnps => "NNPS", Pdt => "PDT",
    Pos => "POS", Prp => "PRP", PrpS => "PRP$", Rb => "RB", Rbr => "RBR",
    Rbs => "RBS", Rp => "RP", Sym => "SYM", To => "TO", Uh => "UH",
    Vb => "VB", Vbd => "VBD", Vbg => "VBG", Vbn => "VBN", Vbp => "VBP",
    Vbz => "VBZ", Wdt => "WDT", Wp => "WP", WpS => "WP$", Wrb => "WRB",
}

/// Tag prefixes whose words carry meaning for generation.
pub const KEEP_PREFIXES: [&str; 4] = ["NN", "IN", "VB", "JJ"];

impl Tag {
    /// Whether the tag matches one of `NN*`, `IN*`, `VB*`, `JJ*`.
    pub fn is_semantic(self) -> bool {
        let s = self.as_str();
        KEEP_PREFIXES.iter().any(|p| s.starts_with(p))
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedToken {
    pub text: String,
    pub tag: Tag,
}

/// Assigns one POS tag per token.
pub trait PosTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<TaggedToken>, Error>;
}

const BUNDLED_LEXICON: &str = include_str!("lexicon.tsv");

/// Context-free tagger: lexicon lookup, then suffix heuristics, then `NN`.
#[derive(Clone, Debug)]
pub struct LexiconTagger {
    lexicon: HashMap<String, Tag>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        Self::bundled()
    }
}

impl LexiconTagger {
    pub fn bundled() -> Self {
        let lexicon = parse_lexicon(BUNDLED_LEXICON).expect("bundled lexicon is well formed");
        Self { lexicon }
    }

    pub fn empty() -> Self {
        Self { lexicon: HashMap::new() }
    }

    /// Adds or overrides entries from a `token<TAB>tag` file.
    pub fn extend_from_file(&mut self, path: &Path) -> Result<(), Error> {
        let text = std::fs::read_to_string(path)?;
        self.lexicon.extend(parse_lexicon(&text)?);
        Ok(())
    }

    pub fn insert(&mut self, token: &str, tag: Tag) {
        self.lexicon.insert(token.to_lowercase(), tag);
    }

    pub fn tag_word(&self, word: &str) -> Tag {
        if let Some(&t) = self.lexicon.get(word) {
            return t;
        }
        suffix_rule(word)
    }
}

fn suffix_rule(word: &str) -> Tag {
    if word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') && word.chars().any(|c| c.is_ascii_digit()) {
        return Tag::Cd;
    }
    let n = word.chars().count();
    if n > 4 && word.ends_with("ing") {
        Tag::Vbg
    } else if n > 3 && word.ends_with("ly") {
        Tag::Rb
    } else if n > 3 && word.ends_with("ed") {
        Tag::Vbd
    } else if n > 4 && word.ends_with("est") {
        Tag::Jjs
    } else if n > 4
        && ["ous", "ful", "ive", "able", "ible", "less", "ish", "al", "ic"].iter().any(|s| word.ends_with(s))
    {
        Tag::Jj
    } else if n > 3 && word.ends_with('s') && !word.ends_with("ss") && !word.ends_with("us") && !word.ends_with("is") {
        Tag::Nns
    } else {
        Tag::Nn
    }
}

/// Parses `token<TAB>tag` lines; blank lines and `#` comments are skipped.
pub fn parse_lexicon(text: &str) -> Result<HashMap<String, Tag>, Error> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (token, tag) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("lexicon line {}: expected token<TAB>tag", lineno + 1)))?;
        let token = token.trim().to_lowercase();
        if token.is_empty() || token.contains(char::is_whitespace) {
            return Err(Error::Input(format!("lexicon line {}: bad token {token:?}", lineno + 1)));
        }
        map.insert(token, tag.trim().parse()?);
    }
    Ok(map)
}

impl PosTagger for LexiconTagger {
    fn tag(&self, tokens: &[String]) -> Result<Vec<TaggedToken>, Error> {
        tokens
            .iter()
            .map(|t| {
                if t.is_empty() || t.contains(char::is_whitespace) {
                    return Err(Error::Input(format!("invalid token {t:?}")));
                }
                Ok(TaggedToken { text: t.clone(), tag: self.tag_word(t) })
            })
            .collect()
    }
}

/// Tags a token list. Tokens must be non-empty and whitespace-free.
pub fn tag_tokens(tokens: &[String], tagger: &dyn PosTagger) -> Result<Vec<TaggedToken>, Error> {
    tagger.tag(tokens)
}

/// Auxiliary verbs dropped by the optional stoplist.
pub const AUXILIARIES: &[&str] = &["is", "are", "am", "was", "were", "be", "been", "being"];

/// Keeps exactly the tokens whose tag matches the keep-set, in order.
pub fn filter_semantic(tagged: &[TaggedToken]) -> Vec<String> {
    tagged.iter().filter(|t| t.tag.is_semantic()).map(|t| t.text.clone()).collect()
}

/// [`filter_semantic`] followed by the auxiliary-verb stoplist.
pub fn filter_semantic_without_auxiliaries(tagged: &[TaggedToken]) -> Vec<String> {
    tagged
        .iter()
        .filter(|t| t.tag.is_semantic() && !AUXILIARIES.contains(&t.text.as_str()))
        .map(|t| t.text.clone())
        .collect()
}

/// Lowercases, splits on whitespace, and strips surrounding punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn closed_class_words() {
        let tagger = LexiconTagger::bundled();
        let out = tag_tokens(&toks(&["to"]), &tagger).unwrap();
        assert_eq!(out, vec![TaggedToken { text: "to".into(), tag: Tag::To }]);
        assert_eq!(tagger.tag_word("grassy"), Tag::Jj);
    }

    #[test]
    fn stop_sign_fixture() {
        let tagger = LexiconTagger::bundled();
        let tags: Vec<Tag> = tagger.tag(&toks(&["a", "stop", "sign"])).unwrap().into_iter().map(|t| t.tag).collect();
        assert_eq!(tags, vec![Tag::Dt, Tag::Nn, Tag::Nn]);

        let sentence = tokenize("A stop sign is in a grassy rural area.");
        let tagged = tagger.tag(&sentence).unwrap();
        let tags: Vec<&str> = tagged.iter().map(|t| t.tag.as_str()).collect();
        assert_eq!(tags, ["DT", "NN", "NN", "VBZ", "IN", "DT", "JJ", "JJ", "NN"]);
        assert_eq!(filter_semantic(&tagged), toks(&["stop", "sign", "is", "in", "grassy", "rural", "area"]));
    }

    #[test]
    fn unknown_words_use_suffix_rules() {
        let tagger = LexiconTagger::empty();
        assert_eq!(tagger.tag_word("jumping"), Tag::Vbg);
        assert_eq!(tagger.tag_word("quickly"), Tag::Rb);
        assert_eq!(tagger.tag_word("zebras"), Tag::Nns);
        assert_eq!(tagger.tag_word("glass"), Tag::Nn);
        assert_eq!(tagger.tag_word("42"), Tag::Cd);
        assert_eq!(tagger.tag_word("giraffe"), Tag::Nn);
    }

    #[test]
    fn empty_token_is_rejected() {
        let tagger = LexiconTagger::bundled();
        assert!(matches!(tagger.tag(&toks(&["a", ""])), Err(Error::Input(_))));
        assert!(tagger.tag(&toks(&["a b"])).is_err());
    }

    #[test]
    fn non_semantic_words_removed() {
        let tagger = LexiconTagger::bundled();
        let tagged = tagger.tag(&toks(&["a", "to", "its"])).unwrap();
        assert!(filter_semantic(&tagged).is_empty());
        let nouns: Vec<TaggedToken> =
            ["bus", "sky"].iter().map(|w| TaggedToken { text: w.to_string(), tag: Tag::Nn }).collect();
        assert_eq!(filter_semantic(&nouns), toks(&["bus", "sky"]));
    }

    #[test]
    fn auxiliary_stoplist_is_opt_in() {
        let tagger = LexiconTagger::bundled();
        let tagged = tagger.tag(&tokenize("A blue bus that is outside of a building.")).unwrap();
        assert_eq!(filter_semantic(&tagged), toks(&["blue", "bus", "is", "outside", "of", "building"]));
        assert_eq!(filter_semantic_without_auxiliaries(&tagged), toks(&["blue", "bus", "outside", "of", "building"]));
    }

    #[test]
    fn lexicon_parsing() {
        let map = parse_lexicon("# c\nfoo\tJJ\n\nbar\tVBZ\r\n").unwrap();
        assert_eq!(map["foo"], Tag::Jj);
        assert_eq!(map["bar"], Tag::Vbz);
        assert!(parse_lexicon("foo JJ").is_err());
        assert!(parse_lexicon("foo\tXX").is_err());
    }

    #[test]
    fn tag_round_trip() {
        for &t in Tag::ALL {
            assert_eq!(t.as_str().parse::<Tag>().unwrap(), t);
        }
    }
}
