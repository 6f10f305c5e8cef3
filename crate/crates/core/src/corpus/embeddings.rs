use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Word vectors restricted to a corpus vocabulary, with an OOV fallback.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: IndexMap<String, Vec<f64>>,
    oov: Vec<f64>,
}

impl EmbeddingTable {
    /// Read `word v1 ... vD` lines, keeping the words in `vocab`. The OOV
    /// vector is the mean of every vector in the file.
    pub fn load(path: impl AsRef<Path>, vocab: &BTreeSet<String>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dim = None;
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let mut vectors = IndexMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let parse_err = |msg: String| Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                msg,
            };
            let v = fields
                .map(|f| f.parse::<f64>().map_err(|e| parse_err(format!("{f}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match dim {
                None if v.is_empty() => return Err(parse_err("no vector components".into())),
                None => {
                    dim = Some(v.len());
                    sum = vec![0.0; v.len()];
                }
                Some(d) if d != v.len() => {
                    return Err(parse_err(format!("dimension {} differs from {d}", v.len())))
                }
                Some(_) => {}
            }
            sum.iter_mut().zip(&v).for_each(|(s, x)| *s += x);
            count += 1;
            let word = word.to_lowercase();
            if vocab.contains(&word) && !vectors.contains_key(&word) {
                vectors.insert(word, v);
            }
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: "embedding file has no vectors".into(),
        })?;
        vectors.sort_keys();
        Ok(EmbeddingTable {
            dim,
            vectors,
            oov: sum.into_iter().map(|s| s / count as f64).collect(),
        })
    }

    /// Uniform `[-0.1, 0.1]` vectors. Each word draws from its own seed
    /// stream; the OOV vector is the mean of the word vectors.
    pub fn random(vocab: &BTreeSet<String>, dim: usize, seed: u64) -> Self {
        assert!(dim > 0);
        let vectors: IndexMap<String, Vec<f64>> = vocab
            .iter()
            .map(|w| {
                let mut r = rng::stream(seed, &format!("embed/{w}"));
                (w.clone(), (0..dim).map(|_| r.gen_range(-0.1..=0.1)).collect())
            })
            .collect();
        let mut oov = vec![0.0; dim];
        for v in vectors.values() {
            oov.iter_mut().zip(v).for_each(|(s, x)| *s += x);
        }
        if !vectors.is_empty() {
            oov.iter_mut().for_each(|s| *s /= vectors.len() as f64);
        }
        EmbeddingTable { dim, vectors, oov }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn lookup(&self, word: &str) -> &[f64] {
        self.vectors.get(word).unwrap_or(&self.oov)
    }

    pub fn oov(&self) -> &[f64] {
        &self.oov
    }
}
