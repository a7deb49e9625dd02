use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Word/id bijection with the reserved tokens at fixed ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_count: usize,
    words: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = CoreError;

    fn try_from(f: VocabFile) -> Result<Self> {
        Self::from_words(f.words, f.min_count)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_count: v.min_count,
            words: v.words,
        }
    }
}

impl Vocabulary {
    /// Words seen at least `min_count` times, by count descending then
    /// lexicographically, after the reserved tokens.
    pub fn build<S: AsRef<str>>(captions: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in captions.iter().flatten() {
            let t = tok.as_ref();
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words, min_count).expect("reserved prefix and unique words")
    }

    pub fn from_words(words: Vec<String>, min_count: usize) -> Result<Self> {
        if words.len() < RESERVED.len() || words[..RESERVED.len()] != RESERVED {
            return Err(CoreError::Data(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(CoreError::Data(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self {
            words,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Id of `word`, if it is in the vocabulary.
    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Id of `word`, or UNK.
    pub fn id(&self, word: &str) -> usize {
        self.get(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `[BOS, ids…, EOS]`.
    pub fn encode_caption<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        std::iter::once(BOS)
            .chain(tokens.iter().map(|t| self.id(t.as_ref())))
            .chain(std::iter::once(EOS))
            .collect()
    }

    /// Words up to the first EOS, skipping BOS and PAD.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != BOS && i != PAD)
            .map(|&i| self.word(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn threshold_boundary() {
        let caps = vec![toks("a red dog"); 5];
        let v = Vocabulary::build(&caps, 5);
        assert_eq!(v.len(), 7);
        for w in ["a", "red", "dog"] {
            assert!(v.get(w).is_some());
        }
        let mut caps = vec![toks("a red dog"); 5];
        caps.extend(vec![toks("cat"); 4]);
        let v = Vocabulary::build(&caps, 5);
        assert_eq!(v.id("cat"), UNK);
    }

    #[test]
    fn ordering_is_count_then_lexicographic() {
        let caps = vec![toks("b a c c"), toks("a b c")];
        let v = Vocabulary::build(&caps, 1);
        assert_eq!(&v.words()[4..], &["c", "a", "b"]);
        assert_eq!(Vocabulary::build(&caps, 1), v);
    }

    #[test]
    fn encode_decode_and_serde() {
        let v = Vocabulary::build(&[toks("a dog")], 1);
        let ids = v.encode_caption(&toks("a cat dog"));
        assert_eq!(ids[0], BOS);
        assert_eq!(ids[2], UNK);
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(v.decode(&ids), toks("a <unk> dog"));
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"{"min_count":1,"words":["x"]}"#).is_err());
    }
}
