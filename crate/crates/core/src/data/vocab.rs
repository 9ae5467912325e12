use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const YES: &str = "Yes";
pub const NO: &str = "No";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const YES_ID: usize = 2;
pub const NO_ID: usize = 3;

/// Fixed words of the prompt template, in vocabulary order.
pub const TEMPLATE_WORDS: &[&str] = &[
    "The", "user", "watched", "the", "following", "movies", "in", "order", ":", ",", ".",
    "Please", "deduce", "if", "he", "will", "like", "movie",
];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Special(String),
    Word(String),
    Title(String),
}

impl TokenKind {
    pub fn surface(&self) -> &str {
        match self {
            TokenKind::Special(s) | TokenKind::Word(s) | TokenKind::Title(s) => s,
        }
    }
}

/// Closed word-level vocabulary: reserved tokens, template words and one
/// token per distinct item title.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<TokenKind>,
    #[serde(skip)]
    words: HashMap<String, usize>,
    #[serde(skip)]
    titles: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds the vocabulary over every title of the full dataset. Titles are
    /// added in first-seen order after de-duplication.
    pub fn build<'t>(titles: impl IntoIterator<Item = &'t str>) -> Self {
        let mut tokens = vec![
            TokenKind::Special(PAD.into()),
            TokenKind::Special(BOS.into()),
            TokenKind::Special(YES.into()),
            TokenKind::Special(NO.into()),
        ];
        tokens.extend(TEMPLATE_WORDS.iter().map(|w| TokenKind::Word((*w).into())));
        let mut seen = std::collections::HashSet::new();
        for t in titles {
            if seen.insert(t.to_string()) {
                tokens.push(TokenKind::Title(t.to_string()));
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<TokenKind>) -> Self {
        let mut words = HashMap::new();
        let mut titles = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            match t {
                TokenKind::Special(s) | TokenKind::Word(s) => {
                    words.insert(s.clone(), i);
                }
                TokenKind::Title(s) => {
                    titles.insert(s.clone(), i);
                }
            }
        }
        Self {
            tokens,
            words,
            titles,
        }
    }

    /// Restores lookup tables after deserialisation.
    pub fn reindex(self) -> Self {
        Self::from_tokens(self.tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn word(&self, w: &str) -> Result<usize> {
        self.words
            .get(w)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("unknown word `{w}`")))
    }

    pub fn title(&self, t: &str) -> Result<usize> {
        self.titles
            .get(t)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("item title `{t}` has no vocabulary slot")))
    }

    pub fn token(&self, id: usize) -> Option<&TokenKind> {
        self.tokens.get(id)
    }

    pub fn n_titles(&self) -> usize {
        self.titles.len()
    }

    /// Reconstructs the prompt string. Special tokens are dropped; the
    /// punctuation words attach to the preceding token.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Vocabulary(format!("token id {id} out of range")))?;
            let s = match tok {
                TokenKind::Special(_) => continue,
                TokenKind::Word(w) | TokenKind::Title(w) => w.as_str(),
            };
            let attach = matches!(tok, TokenKind::Word(w) if w == ":" || w == "," || w == ".");
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(s);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed_and_distinct() {
        let v = Vocabulary::build(["Titanic", "Anta"]);
        assert_eq!(v.word(PAD).unwrap(), PAD_ID);
        assert_eq!(v.word(BOS).unwrap(), BOS_ID);
        assert_eq!(v.word(YES).unwrap(), YES_ID);
        assert_eq!(v.word(NO).unwrap(), NO_ID);
        assert_ne!(YES_ID, NO_ID);
        assert_eq!(v.len(), 4 + TEMPLATE_WORDS.len() + 2);
    }

    #[test]
    fn titles_and_words_live_in_separate_namespaces() {
        let v = Vocabulary::build(["the", "Titanic", "the"]);
        assert_ne!(v.word("the").unwrap(), v.title("the").unwrap());
        assert_eq!(v.n_titles(), 2);
        assert!(v.title("Alien").is_err());
    }

    #[test]
    fn mapping_is_bijective() {
        let v = Vocabulary::build(["A", "B", "C"]);
        let mut seen = std::collections::HashSet::new();
        for id in 0..v.len() {
            assert!(seen.insert(v.token(id).unwrap().clone()));
        }
    }

    #[test]
    fn serde_reindex_restores_lookups() {
        let v = Vocabulary::build(["Heat"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str::<Vocabulary>(&json).unwrap().reindex();
        assert_eq!(back, v);
        assert_eq!(back.title("Heat").unwrap(), v.title("Heat").unwrap());
    }
}
