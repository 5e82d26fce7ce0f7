//! GloVe text format: one word per line followed by its space-separated
//! vector components.

use std::collections::HashMap;
use std::fmt::Write as _;

use super::DataError;
use crate::encoder::tokenizer::split_words;

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AuxEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    order: Vec<String>,
}

fn glove_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Format {
        file: "aux_embeddings.txt".into(),
        line: Some(line),
        msg: msg.into(),
    }
}

impl AuxEmbeddings {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Later inserts of an existing word are ignored.
    pub fn insert(&mut self, word: &str, v: Vec<f64>) {
        assert_eq!(v.len(), self.dim, "aux embedding width");
        let key = word.to_lowercase();
        if !self.vectors.contains_key(&key) {
            self.order.push(key.clone());
            self.vectors.insert(key, v);
        }
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    /// Embedding of a possibly multi-word concept name: the exact entry if
    /// present, else the mean of its words' vectors. `None` if no word is
    /// covered.
    pub fn phrase(&self, name: &str) -> Option<Vec<f64>> {
        if let Some(v) = self.get(name) {
            return Some(v.to_vec());
        }
        let found: Vec<&[f64]> = split_words(name).iter().filter_map(|w| self.get(w)).collect();
        if found.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; self.dim];
        for v in &found {
            acc.iter_mut().zip(*v).for_each(|(a, b)| *a += b);
        }
        acc.iter_mut().for_each(|a| *a /= found.len() as f64);
        Some(acc)
    }

    /// Mean of every stored vector.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for w in &self.order {
            acc.iter_mut().zip(&self.vectors[w]).for_each(|(a, b)| *a += b);
        }
        if !self.order.is_empty() {
            acc.iter_mut().for_each(|a| *a /= self.order.len() as f64);
        }
        acc
    }
}

pub fn parse_glove(text: &str) -> Result<AuxEmbeddings, DataError> {
    let mut out: Option<AuxEmbeddings> = None;
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let v = parts
            .map(|p| {
                p.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| glove_err(no, format!("bad component {p:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if v.is_empty() {
            return Err(glove_err(no, format!("word {word:?} has no vector")));
        }
        let emb = out.get_or_insert_with(|| AuxEmbeddings::new(v.len()));
        if v.len() != emb.dim {
            return Err(glove_err(no, format!("width {} != {}", v.len(), emb.dim)));
        }
        emb.insert(word, v);
    }
    out.ok_or_else(|| glove_err(1, "no embeddings"))
}

pub fn write_glove(emb: &AuxEmbeddings) -> String {
    let mut s = String::new();
    for w in &emb.order {
        s.push_str(w);
        for v in &emb.vectors[w] {
            write!(s, " {v:?}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let e = parse_glove("cat 0.5 -1\n\ndog 1e-3 2\n").unwrap();
        assert_eq!(e.dim(), 2);
        assert_eq!(e.get("CAT"), Some(&[0.5, -1.0][..]));
        let back = parse_glove(&write_glove(&e)).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn phrase_falls_back_to_word_mean() {
        let e = parse_glove("faux 1 0\nfur 0 1\n").unwrap();
        assert_eq!(e.phrase("faux fur"), Some(vec![0.5, 0.5]));
        assert_eq!(e.phrase("nothing here"), None);
        assert_eq!(e.mean(), vec![0.5, 0.5]);
    }

    #[test]
    fn rejects_ragged_or_bad_lines() {
        assert!(parse_glove("a 1 2\nb 1\n").is_err());
        assert!(parse_glove("a x\n").is_err());
        assert!(parse_glove("a nan\n").is_err());
        assert!(parse_glove("a\n").is_err());
        assert!(parse_glove("").is_err());
    }
}
