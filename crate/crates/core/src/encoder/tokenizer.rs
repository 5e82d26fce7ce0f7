use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const BOS: &str = "<|startoftext|>";
pub const EOT: &str = "<|endoftext|>";

/// Lowercasing word-level tokenizer. Words outside the known list land in
/// one of `hash_buckets` extra rows picked by an FNV-1a hash, so every name
/// tokenizes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "TokenizerRepr", into = "TokenizerRepr")]
pub struct WordTokenizer {
    words: Vec<String>,
    hash_buckets: usize,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerRepr {
    words: Vec<String>,
    hash_buckets: usize,
}

impl From<TokenizerRepr> for WordTokenizer {
    fn from(r: TokenizerRepr) -> Self {
        WordTokenizer::new(r.words, r.hash_buckets)
    }
}

impl From<WordTokenizer> for TokenizerRepr {
    fn from(t: WordTokenizer) -> Self {
        TokenizerRepr {
            words: t.words,
            hash_buckets: t.hash_buckets,
        }
    }
}

/// Split a concept name or prompt into lowercase words.
pub fn split_words(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == '-' || c == '.')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl WordTokenizer {
    /// Known words keep their first occurrence; the sentinels are always
    /// present.
    pub fn new<I, S>(words: I, hash_buckets: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut list: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let sentinels = [BOS.to_string(), EOT.to_string()];
        for w in sentinels.into_iter().chain(words.into_iter().map(Into::into)) {
            let w = if w == BOS || w == EOT { w } else { w.to_lowercase() };
            if !index.contains_key(&w) {
                index.insert(w.clone(), list.len());
                list.push(w);
            }
        }
        Self {
            words: list,
            hash_buckets,
            index,
        }
    }

    /// Known words plus hash buckets; the row count of the token table.
    pub fn len(&self) -> usize {
        self.words.len() + self.hash_buckets
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn hash_buckets(&self) -> usize {
        self.hash_buckets
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eot(&self) -> usize {
        self.index[EOT]
    }

    pub fn is_known(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    /// Id of a single word. Unknown words hash into a bucket; with no
    /// buckets they map to the end-of-text row.
    pub fn token_id(&self, word: &str) -> usize {
        let w = word.to_lowercase();
        if let Some(&i) = self.index.get(&w) {
            return i;
        }
        if self.hash_buckets == 0 {
            return self.eot();
        }
        self.words.len() + (fnv1a(&w) % self.hash_buckets as u64) as usize
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.token_id(w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_on_whitespace_hyphen_and_period() {
        assert_eq!(split_words("Faux Fur"), vec!["faux", "fur"]);
        assert_eq!(split_words("run-down st. louis"), vec!["run", "down", "st", "louis"]);
        assert!(split_words("  ").is_empty());
    }

    #[test]
    fn unknown_words_hash_deterministically_into_buckets() {
        let t = WordTokenizer::new(["a", "photo", "of"], 4);
        assert_eq!(t.len(), 2 + 3 + 4);
        let id = t.token_id("zebra");
        assert!(id >= 5 && id < 9);
        assert_eq!(id, t.token_id("ZEBRA"));
        assert_eq!(t.tokenize("a Photo of"), vec![2, 3, 4]);
    }

    #[test]
    fn duplicates_collapse() {
        let t = WordTokenizer::new(["a", "A", "b"], 0);
        assert_eq!(t.words().len(), 4);
        assert_eq!(t.token_id("nope"), t.eot());
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let t = WordTokenizer::new(["x", "y"], 2);
        let json = serde_json::to_string(&t).unwrap();
        let back: WordTokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.token_id("y"), t.token_id("y"));
    }
}
