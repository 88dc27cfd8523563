//! Word-level tokenizer over a closed vocabulary.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Words used by captions and prompt templates.
pub const TEMPLATE_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "of", "and", "with", "dish", "food", "picture", "plate", "image",
    "close", "up", "view", "cooked", "fresh", "tasty", "bowl", "meal", "served", "on", "this",
    "is",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved ids, then `words` in order (duplicates dropped).
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED
            .iter()
            .copied()
            .chain(words.iter().map(AsRef::as_ref))
        {
            let w = w.to_lowercase();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.tokens.len() as u32);
                v.tokens.push(w);
            }
        }
        v
    }

    /// Template words followed by the class names.
    pub fn for_classes<S: AsRef<str>>(class_names: &[S]) -> Self {
        let mut words: Vec<&str> = TEMPLATE_WORDS.to_vec();
        words.extend(class_names.iter().map(AsRef::as_ref));
        Self::new(&words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, words..., EOS]`; unknown words map to `UNK`.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|w| self.id(w)));
        ids.push(EOS);
        ids
    }

    /// Inverse of [`Vocab::tokenize`] for in-vocabulary text.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id != BOS && id != EOS && id != PAD)
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_file_contents(contents: &str) -> Result<Self> {
        let tokens: Vec<&str> = contents.lines().collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid(
                "vocabulary file must start with <pad> <bos> <eos> <unk>",
            ));
        }
        let v = Self::new(&tokens[RESERVED.len()..]);
        if v.len() != tokens.len() {
            return Err(Error::invalid("vocabulary file has duplicate tokens"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_contents(&s)
    }
}

/// Padded batch of token sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub token_ids: Vec<Vec<u32>>,
    /// `true` where the position is padding.
    pub pad_mask: Vec<Vec<bool>>,
    pub vocab_size: usize,
}

impl TextBatch {
    /// Pads (or truncates, keeping a final `EOS`) every sequence to `max_len`.
    pub fn new(seqs: &[Vec<u32>], max_len: usize, vocab_size: usize) -> Result<Self> {
        if max_len < 2 {
            return Err(Error::invalid("max_len must hold BOS and EOS"));
        }
        let mut token_ids = Vec::with_capacity(seqs.len());
        let mut pad_mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            if let Some(&bad) = s.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::OutOfRange {
                    what: "vocabulary",
                    index: bad as usize,
                    len: vocab_size,
                });
            }
            let mut ids = s.clone();
            if ids.len() > max_len {
                ids.truncate(max_len);
                ids[max_len - 1] = EOS;
            }
            let n = ids.len();
            ids.resize(max_len, PAD);
            token_ids.push(ids);
            pad_mask.push((0..max_len).map(|i| i >= n).collect());
        }
        Ok(Self {
            token_ids,
            pad_mask,
            vocab_size,
        })
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Sequence `i` without its padding.
    pub fn unpadded(&self, i: usize) -> &[u32] {
        let n = self.pad_mask[i].iter().take_while(|&&p| !p).count();
        &self.token_ids[i][..n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::for_classes(&["redblob", "egg", "rice"])
    }

    #[test]
    fn empty_text() {
        assert_eq!(vocab().tokenize(""), vec![BOS, EOS]);
    }

    #[test]
    fn dictionary_lookup() {
        let v = vocab();
        let ids = v.tokenize("a photo of redblob");
        assert_eq!(
            ids,
            vec![
                BOS,
                v.id("a"),
                v.id("photo"),
                v.id("of"),
                v.id("redblob"),
                EOS
            ]
        );
        assert!(ids.iter().all(|&i| i != UNK));
        assert_eq!(v.tokenize("a zebra")[2], UNK);
    }

    #[test]
    fn file_round_trip() {
        let v = vocab();
        let back = Vocab::from_file_contents(&v.to_file_contents()).unwrap();
        assert_eq!(v, back);
        assert_eq!(back.id("<pad>"), PAD);
        assert!(Vocab::from_file_contents("a\nb\n").is_err());
    }

    #[test]
    fn batch_padding_and_truncation() {
        let v = vocab();
        let seqs = vec![v.tokenize("egg"), v.tokenize("a photo of egg and rice")];
        let b = TextBatch::new(&seqs, 5, v.len()).unwrap();
        assert_eq!(b.token_ids[0], vec![BOS, v.id("egg"), EOS, PAD, PAD]);
        assert_eq!(b.pad_mask[0], vec![false, false, false, true, true]);
        assert_eq!(*b.token_ids[1].last().unwrap(), EOS);
        assert_eq!(b.unpadded(0), &[BOS, v.id("egg"), EOS]);
        assert!(TextBatch::new(&[vec![999]], 4, v.len()).is_err());
    }
}
