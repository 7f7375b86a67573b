//! Word-level vocabularies and fixed-length integer encoding.
//!
//! Five special ids are always reserved ahead of the words — PAD(0), UNK(1),
//! CLS(2), SEP(3), MASK(4) — so one vocabulary file serves every pipeline;
//! the recurrent and paragraph-vector models simply never emit the last
//! three. Words are ordered by descending corpus frequency, ties broken
//! lexicographically, which makes construction a pure function of the
//! training multiset.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Dataset;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;

/// Number of reserved ids preceding the words.
pub const SPECIALS: usize = 5;

const SPECIAL_TOKENS: [&str; SPECIALS] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

/// Current on-disk format version.
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("max_len {max_len} too small: CLS/SEP framing needs at least 3")]
    MaxLenTooSmall { max_len: usize },
    #[error("id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("unsupported vocabulary format version {0}")]
    BadVersion(u32),
    #[error("malformed vocabulary file: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

/// Fixed-length id sequence; positions at and beyond `true_length` are PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    specials: Vec<String>,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Builds from the training split only: every token with frequency
    /// ≥ `min_count` enters, ordered by (count desc, token asc).
    pub fn build(train: &Dataset, min_count: u64) -> Self {
        assert!(
            !train.is_empty(),
            "cannot build a vocabulary from an empty dataset"
        );
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for r in &train.records {
            for t in &r.tokens {
                *freq.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut words: Vec<(&str, u64)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; SPECIALS];
        for (tok, c) in words {
            id_to_token.push(tok.to_string());
            counts.push(c);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            counts,
        }
    }

    /// Total id count including the five specials.
    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    /// Number of word entries (specials excluded).
    pub fn word_count(&self) -> usize {
        self.size() - SPECIALS
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Corpus frequency of a word id (0 for specials).
    pub fn count_of(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS
    }

    /// Encodes tokens to exactly `max_len` ids: OOV → UNK, overlong input
    /// truncated from the tail, PAD fill. With `add_cls_sep` the body is
    /// wrapped as [CLS] … [SEP] before padding.
    pub fn encode(
        &self,
        tokens: &[String],
        max_len: usize,
        add_cls_sep: bool,
    ) -> Result<EncodedSequence, VocabError> {
        assert!(max_len >= 1, "max_len must be at least 1");
        if add_cls_sep && max_len < 3 {
            return Err(VocabError::MaxLenTooSmall { max_len });
        }
        let capacity = if add_cls_sep { max_len - 2 } else { max_len };
        let body = tokens.iter().take(capacity);
        let mut ids = Vec::with_capacity(max_len);
        if add_cls_sep {
            ids.push(CLS);
        }
        for t in body {
            ids.push(self.id_of(t).unwrap_or(UNK));
        }
        if add_cls_sep {
            ids.push(SEP);
        }
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        Ok(EncodedSequence { ids, true_length })
    }

    /// Inverse of `encode` up to specials: PAD/CLS/SEP are stripped, UNK
    /// renders as "<unk>" and MASK as "<mask>".
    pub fn decode(&self, seq: &EncodedSequence) -> Result<Vec<String>, VocabError> {
        let mut out = Vec::new();
        for &id in &seq.ids {
            if id >= self.size() {
                return Err(VocabError::IdOutOfRange {
                    id,
                    size: self.size(),
                });
            }
            match id {
                PAD | CLS | SEP => {}
                _ => out.push(self.id_to_token[id].clone()),
            }
        }
        Ok(out)
    }

    /// Canonical serialized form; byte-identical for equal vocabularies.
    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: FORMAT_VERSION,
            specials: SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect(),
            tokens: self.id_to_token[SPECIALS..].to_vec(),
            counts: self.counts[SPECIALS..].to_vec(),
        };
        serde_json::to_string(&file).expect("vocabulary serialization cannot fail")
    }

    pub fn from_json(json: &str) -> Result<Self, VocabError> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| VocabError::Malformed(e.to_string()))?;
        if file.version != FORMAT_VERSION {
            return Err(VocabError::BadVersion(file.version));
        }
        if file.tokens.len() != file.counts.len() {
            return Err(VocabError::Malformed(format!(
                "{} tokens but {} counts",
                file.tokens.len(),
                file.counts.len()
            )));
        }
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; SPECIALS];
        id_to_token.extend(file.tokens);
        counts.extend(file.counts);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            counts,
        })
    }

    /// SHA-256 of the canonical serialization; embedded in checkpoints to
    /// catch vocabulary/model mismatches.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_json().as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, LabeledSentence};
    use proptest::prelude::*;

    fn dataset_from_tokens(docs: &[&[&str]]) -> Dataset {
        let records = docs
            .iter()
            .enumerate()
            .map(|(id, toks)| LabeledSentence {
                id,
                text: toks.join(" "),
                label: 0,
                tokens: toks.iter().map(|s| s.to_string()).collect(),
            })
            .collect();
        Dataset::new(records, 1)
    }

    #[test]
    fn min_count_threshold_filters_rare_words() {
        let ds = dataset_from_tokens(&[&["a", "a", "b"], &["a"]]);
        let v = Vocabulary::build(&ds, 2);
        assert_eq!(v.word_count(), 1);
        assert_eq!(v.id_of("a"), Some(SPECIALS));
        assert_eq!(v.id_of("b"), None);
        let enc = v.encode(&["b".into()], 2, false).unwrap();
        assert_eq!(enc.ids[0], UNK);
    }

    #[test]
    fn ordering_is_frequency_then_lexicographic() {
        let ds = dataset_from_tokens(&[&["z", "z", "m", "m", "a"]]);
        let v = Vocabulary::build(&ds, 1);
        // m and z tie at 2, m sorts first; a comes last with count 1.
        assert_eq!(v.token_of(SPECIALS), Some("m"));
        assert_eq!(v.token_of(SPECIALS + 1), Some("z"));
        assert_eq!(v.token_of(SPECIALS + 2), Some("a"));
    }

    #[test]
    fn serialization_is_deterministic() {
        let ds = dataset_from_tokens(&[&["seo", "site", "seo"], &["reklam", "site"]]);
        let a = Vocabulary::build(&ds, 1).to_json();
        let b = Vocabulary::build(&ds, 1).to_json();
        assert_eq!(a, b);
        let v2 = Vocabulary::from_json(&a).unwrap();
        assert_eq!(v2.to_json(), a);
        assert_eq!(Vocabulary::build(&ds, 1).content_hash(), v2.content_hash());
    }

    #[test]
    fn encode_pads_to_max_len() {
        let ds = dataset_from_tokens(&[&["seo", "yaptıracağım"]]);
        let v = Vocabulary::build(&ds, 1);
        let enc = v
            .encode(&["seo".into(), "yaptıracağım".into()], 5, false)
            .unwrap();
        assert_eq!(enc.true_length, 2);
        assert_eq!(enc.ids.len(), 5);
        assert_eq!(&enc.ids[2..], &[PAD, PAD, PAD]);
    }

    #[test]
    fn encode_truncates_tail_beyond_capacity() {
        let ds = dataset_from_tokens(&[&["w"]]);
        let v = Vocabulary::build(&ds, 1);
        let long: Vec<String> = (0..300).map(|_| "w".to_string()).collect();
        let enc = v.encode(&long, 250, false).unwrap();
        assert_eq!(enc.true_length, 250);
        assert!(enc.ids.iter().all(|&id| id == v.id_of("w").unwrap()));
    }

    #[test]
    fn encode_cls_sep_framing() {
        let ds = dataset_from_tokens(&[&["a", "b"]]);
        let v = Vocabulary::build(&ds, 1);
        let enc = v.encode(&["a".into(), "b".into()], 6, true).unwrap();
        assert_eq!(enc.ids[0], CLS);
        assert_eq!(enc.ids[3], SEP);
        assert_eq!(enc.true_length, 4);
        assert!(matches!(
            v.encode(&["a".into()], 2, true),
            Err(VocabError::MaxLenTooSmall { max_len: 2 })
        ));
    }

    #[test]
    fn decode_strips_specials_and_marks_unk() {
        let ds = dataset_from_tokens(&[&["a"]]);
        let v = Vocabulary::build(&ds, 1);
        let seq = EncodedSequence {
            ids: vec![CLS, v.id_of("a").unwrap(), UNK, SEP, PAD],
            true_length: 4,
        };
        assert_eq!(v.decode(&seq).unwrap(), vec!["a", "<unk>"]);
        let all_pad = EncodedSequence {
            ids: vec![PAD; 4],
            true_length: 0,
        };
        assert!(v.decode(&all_pad).unwrap().is_empty());
        let bad = EncodedSequence {
            ids: vec![v.size()],
            true_length: 1,
        };
        assert!(matches!(
            v.decode(&bad),
            Err(VocabError::IdOutOfRange { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab_tokens(indices in prop::collection::vec(0usize..4, 0..8)) {
            let ds = dataset_from_tokens(&[&["kelime", "site", "reklam", "fiyat"]]);
            let v = Vocabulary::build(&ds, 1);
            let words = ["kelime", "site", "reklam", "fiyat"];
            let tokens: Vec<String> = indices.iter().map(|&i| words[i].to_string()).collect();
            let enc = v.encode(&tokens, 8, false).unwrap();
            prop_assert_eq!(enc.ids.len(), 8);
            let dec = v.decode(&enc).unwrap();
            prop_assert_eq!(dec, tokens);
        }

        #[test]
        fn encode_length_is_always_max_len(n in 0usize..40, max_len in 1usize..32) {
            let ds = dataset_from_tokens(&[&["x"]]);
            let v = Vocabulary::build(&ds, 1);
            let tokens: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let enc = v.encode(&tokens, max_len, false).unwrap();
            prop_assert_eq!(enc.ids.len(), max_len);
            prop_assert!(enc.true_length <= max_len);
        }
    }
}
