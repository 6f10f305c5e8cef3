//! JSON checkpoint container.
//!
//! ```text
//! {
//!   "format": "ctxslu-checkpoint/1",
//!   "vocab_hash": "<16 hex digits>",
//!   "theta": 0.45,
//!   "train": { ...training configuration, including seed and window... },
//!   "model": { "config": {...}, "params": { "<name>": {"shape": [...], "data": [...]}, ... } },
//!   "featurizer": { "embeddings": {...}, "annotations": {...}, "labels": [...] }
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{label_set, Session, Window};
use crate::error::{Error, Result};
use crate::model::{Featurizer, Model};
use crate::rng::fnv1a;
use crate::scalar::Scalar;
use crate::training::TrainConfig;

pub const FORMAT: &str = "ctxslu-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Checkpoint<S = f64> {
    pub format: String,
    pub vocab_hash: String,
    pub theta: f64,
    pub window: Window,
    pub train: TrainConfig,
    pub model: Model<S>,
    pub featurizer: Featurizer,
}

/// Hash of the label and annotation vocabularies.
pub fn vocab_hash(f: &Featurizer) -> String {
    let mut text = String::new();
    for l in f.labels.labels() {
        text.push_str(l);
        text.push('\n');
    }
    text.push('\u{1}');
    for a in f.annotations.acts().iter().chain(f.annotations.attrs()) {
        text.push_str(a);
        text.push('\n');
    }
    format!("{:016x}", fnv1a(&text))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new(model: Model<S>, featurizer: Featurizer, theta: f64, train: TrainConfig) -> Self {
        Checkpoint {
            format: FORMAT.to_owned(),
            vocab_hash: vocab_hash(&featurizer),
            theta,
            window: train.window,
            train,
            model,
            featurizer,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.format != FORMAT {
            return Err(Error::Unsupported(format!("checkpoint format `{}`, expected `{FORMAT}`", c.format)));
        }
        if c.vocab_hash != vocab_hash(&c.featurizer) {
            return Err(Error::Vocab("stored vocabulary hash does not match the stored vocabularies".into()));
        }
        c.model.config.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Reject corpora that share no label with the checkpoint's vocabulary.
    pub fn check_compatible(&self, sessions: &[Session]) -> Result<()> {
        let labels = label_set(sessions);
        if labels.is_empty() {
            return Ok(());
        }
        let known = labels.iter().filter(|l| self.featurizer.labels.get(l).is_some()).count();
        if known == 0 {
            return Err(Error::Vocab(format!(
                "none of the corpus's {} labels is in the checkpoint vocabulary (hash {})",
                labels.len(),
                self.vocab_hash
            )));
        }
        if known < labels.len() {
            log::warn!("{} corpus labels are unknown to the checkpoint", labels.len() - known);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingTable, Role, Utterance};
    use crate::model::{ModelOptions, Variant};

    fn fixture() -> (Vec<Session>, Checkpoint<f64>) {
        let s = vec![Session {
            id: "x".into(),
            utterances: vec![
                Utterance::new("x", 0, Role::Guide, "hi", ["FOL_OPENING"]),
                Utterance::new("x", 1, Role::Tourist, "food please", ["QST_FOOD"]),
            ],
        }];
        let f = Featurizer::build(&s, EmbeddingTable::random(&crate::corpus::word_set(&s), 3, 1));
        let opts = ModelOptions {
            hidden: 2,
            attn_hidden: 2,
            ..ModelOptions::default()
        };
        let m = Model::init(opts.config(Variant::L, &f), 5).unwrap();
        (s, Checkpoint::new(m, f, 0.35, TrainConfig::default()))
    }

    #[test]
    fn round_trip() {
        let (_, c) = fixture();
        let back = Checkpoint::<f64>::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn tampered_or_foreign_checkpoints_are_rejected() {
        let (s, mut c) = fixture();
        c.vocab_hash = "0000000000000000".into();
        assert!(matches!(Checkpoint::<f64>::from_json(&c.to_json().unwrap()), Err(Error::Vocab(_))));
        let (_, mut c) = fixture();
        c.format = "other/9".into();
        assert!(Checkpoint::<f64>::from_json(&c.to_json().unwrap()).is_err());

        let (_, c) = fixture();
        assert!(c.check_compatible(&s).is_ok());
        let other = vec![Session {
            id: "y".into(),
            utterances: vec![Utterance::new("y", 0, Role::Guide, "hi", ["UNRELATED"])],
        }];
        assert!(matches!(c.check_compatible(&other), Err(Error::Vocab(_))));
    }
}
