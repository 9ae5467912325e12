use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, BOS_ID, NO_ID, YES_ID};
use crate::error::{Error, Result};

const LEAD: &[&str] = &["The", "user", "watched", "the", "following", "movies", "in", "order", ":"];
const ASK: &[&str] = &["Please", "deduce", "if", "he", "will", "like", "the", "movie"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptOptions {
    /// Most recent history items kept in the prompt.
    pub max_history: usize,
    pub max_seq_len: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            max_history: 10,
            max_seq_len: 128,
        }
    }
}

/// A prompt plus its answer, ready for the recommender.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSample {
    pub token_ids: Vec<usize>,
    pub answer_token_id: usize,
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    pub label: u8,
}

pub fn answer_token(label: u8) -> usize {
    if label == 1 {
        YES_ID
    } else {
        NO_ID
    }
}

impl RenderedSample {
    /// Same prompt with a different answer, used for relabelling.
    pub fn with_label(&self, label: u8) -> Self {
        Self {
            label,
            answer_token_id: answer_token(label),
            ..self.clone()
        }
    }
}

/// Tokenises
/// `The user watched the following movies in order: h1, h2, …. Please deduce
/// if he will like the movie c.` keeping the last `max_history` titles. An
/// empty history drops the first sentence. Older titles are also dropped
/// until the sequence fits `max_seq_len`.
pub fn render_prompt(
    history: &[&str],
    candidate: &str,
    vocab: &Vocabulary,
    opts: &PromptOptions,
) -> Result<Vec<usize>> {
    if candidate.is_empty() {
        return Err(Error::Vocabulary("empty candidate title".into()));
    }
    let keep = history.len().min(opts.max_history);
    let mut recent: &[&str] = &history[history.len() - keep..];
    let cand = vocab.title(candidate)?;
    loop {
        let tokens = assemble(recent, cand, vocab)?;
        if tokens.len() <= opts.max_seq_len {
            return Ok(tokens);
        }
        if recent.is_empty() {
            return Err(Error::SequenceLength {
                len: tokens.len(),
                max: opts.max_seq_len,
            });
        }
        recent = &recent[1..];
    }
}

fn assemble(history: &[&str], candidate: usize, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut out = vec![BOS_ID];
    if !history.is_empty() {
        for w in LEAD {
            out.push(vocab.word(w)?);
        }
        let comma = vocab.word(",")?;
        for (i, t) in history.iter().enumerate() {
            if i > 0 {
                out.push(comma);
            }
            out.push(vocab.title(t)?);
        }
        out.push(vocab.word(".")?);
    }
    for w in ASK {
        out.push(vocab.word(w)?);
    }
    out.push(candidate);
    out.push(vocab.word(".")?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        let mut titles = vec!["Pump UP the Volume", "Anta", "Devil's Own", "Crying Game", "Titanic"];
        let extra: Vec<String> = (0..15).map(|i| format!("Film {i}")).collect();
        titles.extend(extra.iter().map(String::as_str));
        Vocabulary::build(titles)
    }

    #[test]
    fn reproduces_the_reference_prompt() {
        let v = vocab();
        let hist = ["Pump UP the Volume", "Anta", "Devil's Own", "Crying Game"];
        let ids = render_prompt(&hist, "Titanic", &v, &PromptOptions::default()).unwrap();
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(
            v.detokenize(&ids).unwrap(),
            "The user watched the following movies in order: Pump UP the Volume, Anta, \
             Devil's Own, Crying Game. Please deduce if he will like the movie Titanic."
        );
        // BOS + 9 lead + 4 titles + 3 commas + "." + 8 ask + candidate + "."
        assert_eq!(ids.len(), 1 + 9 + 4 + 3 + 1 + 8 + 1 + 1);
    }

    #[test]
    fn empty_history_drops_the_first_sentence() {
        let v = vocab();
        let ids = render_prompt(&[], "Titanic", &v, &PromptOptions::default()).unwrap();
        assert_eq!(
            v.detokenize(&ids).unwrap(),
            "Please deduce if he will like the movie Titanic."
        );
    }

    #[test]
    fn long_history_keeps_the_most_recent_items() {
        let v = vocab();
        let names: Vec<String> = (0..15).map(|i| format!("Film {i}")).collect();
        let hist: Vec<&str> = names.iter().map(String::as_str).collect();
        let ids = render_prompt(&hist, "Titanic", &v, &PromptOptions::default()).unwrap();
        // slice oracle: the last ten titles in order
        let want: Vec<usize> = hist[5..].iter().map(|t| v.title(t).unwrap()).collect();
        let got: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&id| matches!(v.token(id), Some(super::super::vocab::TokenKind::Title(_))))
            .collect();
        assert_eq!(&got[..10], want.as_slice());
        assert_eq!(got.len(), 11);
    }

    #[test]
    fn max_seq_len_truncates_oldest_first() {
        let v = vocab();
        let hist = ["Anta", "Devil's Own", "Crying Game"];
        let opts = PromptOptions {
            max_history: 10,
            max_seq_len: 1 + 9 + 2 + 1 + 1 + 8 + 1 + 1,
        };
        let ids = render_prompt(&hist, "Titanic", &v, &opts).unwrap();
        assert!(v.detokenize(&ids).unwrap().contains("order: Devil's Own, Crying Game."));
        let tiny = PromptOptions { max_history: 10, max_seq_len: 5 };
        assert!(matches!(
            render_prompt(&hist, "Titanic", &v, &tiny),
            Err(Error::SequenceLength { .. })
        ));
    }

    #[test]
    fn unknown_title_is_vocabulary_error() {
        let v = vocab();
        assert!(matches!(
            render_prompt(&["Alien"], "Titanic", &v, &PromptOptions::default()),
            Err(Error::Vocabulary(_))
        ));
    }

    #[test]
    fn rendering_is_pure() {
        let v = vocab();
        let a = render_prompt(&["Anta"], "Titanic", &v, &PromptOptions::default()).unwrap();
        let b = render_prompt(&["Anta"], "Titanic", &v, &PromptOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
