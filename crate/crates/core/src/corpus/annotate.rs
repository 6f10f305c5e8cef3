use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Session;

/// Split `"QST-WHEN"` into the speech act `"QST"` and attribute `"WHEN"`.
/// A label without a dash is a bare act.
pub fn split_label(label: &str) -> (&str, Option<&str>) {
    match label.split_once('-') {
        Some((act, attr)) => (act, Some(attr)),
        None => (label, None),
    }
}

fn index_of(items: &[String]) -> HashMap<String, usize> {
    items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect()
}

/// Act and attribute vocabularies behind the one-hot history features.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "AnnotationVocabRepr", into = "AnnotationVocabRepr")]
pub struct AnnotationVocab {
    acts: Vec<String>,
    attrs: Vec<String>,
    act_index: HashMap<String, usize>,
    attr_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationVocabRepr {
    acts: Vec<String>,
    attrs: Vec<String>,
}

impl From<AnnotationVocabRepr> for AnnotationVocab {
    fn from(r: AnnotationVocabRepr) -> Self {
        AnnotationVocab::new(r.acts, r.attrs)
    }
}

impl From<AnnotationVocab> for AnnotationVocabRepr {
    fn from(v: AnnotationVocab) -> Self {
        AnnotationVocabRepr {
            acts: v.acts,
            attrs: v.attrs,
        }
    }
}

impl AnnotationVocab {
    pub fn new(acts: Vec<String>, attrs: Vec<String>) -> Self {
        AnnotationVocab {
            act_index: index_of(&acts),
            attr_index: index_of(&attrs),
            acts,
            attrs,
        }
    }

    /// Build from the training split only; both vocabularies are sorted.
    pub fn build(train: &[Session]) -> Self {
        let mut acts = BTreeSet::new();
        let mut attrs = BTreeSet::new();
        for label in train.iter().flat_map(|s| &s.utterances).flat_map(|u| &u.labels) {
            let (act, attr) = split_label(label);
            acts.insert(act.to_owned());
            if let Some(a) = attr {
                attrs.insert(a.to_owned());
            }
        }
        Self::new(acts.into_iter().collect(), attrs.into_iter().collect())
    }

    pub fn acts(&self) -> &[String] {
        &self.acts
    }

    pub fn attrs(&self) -> &[String] {
        &self.attrs
    }

    pub fn dim(&self) -> usize {
        self.acts.len() + self.attrs.len()
    }

    /// Binary vector `[acts | attributes]`. Parts missing from the
    /// vocabulary contribute nothing and are added to `oov`.
    pub fn encode<'a>(&self, labels: impl IntoIterator<Item = &'a String>, oov: &mut usize) -> Vec<u8> {
        let mut v = vec![0u8; self.dim()];
        for label in labels {
            let (act, attr) = split_label(label);
            match self.act_index.get(act) {
                Some(&i) => v[i] = 1,
                None => *oov += 1,
            }
            if let Some(a) = attr {
                match self.attr_index.get(a) {
                    Some(&i) => v[self.acts.len() + i] = 1,
                    None => *oov += 1,
                }
            }
        }
        v
    }
}

/// Output label inventory of the multi-label head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelVocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelVocab {
    fn from(labels: Vec<String>) -> Self {
        LabelVocab {
            index: index_of(&labels),
            labels,
        }
    }
}

impl From<LabelVocab> for Vec<String> {
    fn from(v: LabelVocab) -> Self {
        v.labels
    }
}

impl LabelVocab {
    pub fn build(train: &[Session]) -> Self {
        super::label_set(train).into_iter().collect::<Vec<_>>().into()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, k: usize) -> &str {
        &self.labels[k]
    }

    /// Binary target vector; labels outside the inventory are skipped and counted.
    pub fn targets<'a>(&self, labels: impl IntoIterator<Item = &'a String>, oov: &mut usize) -> Vec<u8> {
        let mut v = vec![0u8; self.len()];
        for l in labels {
            match self.get(l) {
                Some(k) => v[k] = 1,
                None => *oov += 1,
            }
        }
        v
    }

    pub fn decode(&self, indices: impl IntoIterator<Item = usize>) -> BTreeSet<String> {
        indices.into_iter().map(|k| self.labels[k].clone()).collect()
    }
}
