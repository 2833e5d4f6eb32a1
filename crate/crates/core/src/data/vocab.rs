use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

const WORDS: &[&str] = &[
    // question words
    "which", "plane", "is", "this", "ct", "scan", "in", "was", "image", "taken", "phase", "what",
    "the", "contrast", "of", "organ", "shown", "does", "show", "abnormality", "seen", "kind",
    "quadrant", "located", "where",
    // answer words
    "axial", "coronal", "sagittal", "non", "arterial", "portal", "venous", "liver", "spleen",
    "kidney", "pancreas", "round", "stellate", "ring", "lesion", "no", "upper", "lower", "left",
    "right", "not", "applicable",
];

/// Closed word-level vocabulary with reserved PAD/UNK/BOS/EOS ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids plus the distinct words that were mapped to UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unknown: Vec<String>,
}

impl Vocabulary {
    pub fn synthetic() -> Self {
        let words: Vec<String> = SPECIALS.iter().chain(WORDS).map(|w| w.to_string()).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Lower-cases and splits on whitespace; unknown words become UNK.
    pub fn encode_lossy(&self, text: &str) -> Encoded {
        let mut ids = Vec::new();
        let mut unknown: Vec<String> = Vec::new();
        for w in text.split_whitespace() {
            let w = w.to_lowercase();
            match self.id(&w) {
                Some(id) if !Self::is_special(id) => ids.push(id),
                _ => {
                    if !unknown.contains(&w) {
                        unknown.push(w);
                    }
                    ids.push(UNK);
                }
            }
        }
        Encoded { ids, unknown }
    }

    /// Like [`Vocabulary::encode_lossy`] but fails on the first unknown word.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let enc = self.encode_lossy(text);
        match enc.unknown.first() {
            Some(w) => Err(Error::Data(format!("word '{w}' is not in the vocabulary"))),
            None => Ok(enc.ids),
        }
    }

    /// Joins the words of `ids`, skipping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert!(v.len() <= 64);
    }

    #[test]
    fn words_are_unique() {
        let v = Vocabulary::synthetic();
        assert_eq!(v.index.len(), v.len());
    }

    #[test]
    fn unknown_words_map_to_unk_once() {
        let v = Vocabulary::synthetic();
        let enc = v.encode_lossy("Which FOO plane foo bar");
        assert_eq!(enc.ids[0], v.id("which").unwrap());
        assert_eq!(enc.ids[1], UNK);
        assert_eq!(enc.ids[3], UNK);
        assert_eq!(enc.unknown, vec!["foo".to_string(), "bar".to_string()]);
        assert!(v.encode("which foo").is_err());
        // reserved spellings are not accepted as words
        assert_eq!(v.encode_lossy("<eos>").ids, vec![UNK]);
    }
}
