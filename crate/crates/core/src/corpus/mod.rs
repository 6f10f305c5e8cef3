//! Dialogue data model, JSON-lines ingestion and context construction.
//!
//! A corpus file holds one utterance per line:
//!
//! ```text
//! {"session_id": "s1", "turn_index": 0, "speaker": "guide", "transcript": "hello there", "labels": ["FOL-OPENING"]}
//! ```
//!
//! Transcripts are tokenised by lowercasing and splitting on whitespace.

mod annotate;
mod embeddings;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use annotate::{split_label, AnnotationVocab, LabelVocab};
pub use embeddings::EmbeddingTable;

/// Speaker role. The tourist is the user side, the guide the agent side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Tourist,
    Guide,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Tourist, Role::Guide];

    pub fn index(self) -> usize {
        match self {
            Role::Tourist => 0,
            Role::Guide => 1,
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::Tourist => Role::Guide,
            Role::Guide => Role::Tourist,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Tourist => "tourist",
            Role::Guide => "guide",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tourist" => Ok(Role::Tourist),
            "guide" => Ok(Role::Guide),
            _ => Err(Error::Config(format!("unknown role `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub session_id: String,
    pub turn_index: usize,
    pub speaker: Role,
    pub tokens: Vec<String>,
    pub labels: BTreeSet<String>,
}

impl Utterance {
    pub fn new(
        session_id: impl Into<String>,
        turn_index: usize,
        speaker: Role,
        transcript: &str,
        labels: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Utterance {
            session_id: session_id.into(),
            turn_index,
            speaker,
            tokens: tokenize(transcript),
            labels: labels.into_iter().map(Into::into).collect(),
        }
    }

    pub fn transcript(&self) -> String {
        self.tokens.join(" ")
    }
}

pub fn tokenize(transcript: &str) -> Vec<String> {
    transcript.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    /// Sorted by strictly increasing `turn_index`.
    pub utterances: Vec<Utterance>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

pub type Corpus = Vec<Session>;

#[derive(Serialize, Deserialize)]
struct Record {
    session_id: String,
    turn_index: usize,
    speaker: Role,
    transcript: String,
    labels: Vec<String>,
}

/// Parse a JSON-lines corpus. Sessions keep the order of their first
/// appearance in the file; utterances are sorted by turn index.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut sessions: IndexMap<String, Vec<Utterance>> = IndexMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let u = Utterance::new(
            rec.session_id,
            rec.turn_index,
            rec.speaker,
            &rec.transcript,
            rec.labels,
        );
        sessions.entry(u.session_id.clone()).or_default().push(u);
    }
    if sessions.is_empty() {
        log::warn!("{}: corpus is empty", path.display());
    }
    sessions
        .into_iter()
        .map(|(id, mut utterances)| {
            utterances.sort_by_key(|u| u.turn_index);
            if let Some(w) = utterances.windows(2).find(|w| w[0].turn_index == w[1].turn_index) {
                return Err(Error::DuplicateTurn {
                    session: id,
                    turn: w[0].turn_index,
                });
            }
            Ok(Session { id, utterances })
        })
        .collect()
}

pub fn write_corpus(corpus: &[Session], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for u in corpus.iter().flat_map(|s| &s.utterances) {
        let rec = Record {
            session_id: u.session_id.clone(),
            turn_index: u.turn_index,
            speaker: u.speaker,
            transcript: u.transcript(),
            labels: u.labels.iter().cloned().collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Every distinct label string in the corpus, sorted.
pub fn label_set(corpus: &[Session]) -> BTreeSet<String> {
    corpus
        .iter()
        .flat_map(|s| &s.utterances)
        .flat_map(|u| u.labels.iter().cloned())
        .collect()
}

/// Every distinct token in the corpus, sorted.
pub fn word_set(corpus: &[Session]) -> BTreeSet<String> {
    corpus
        .iter()
        .flat_map(|s| &s.utterances)
        .flat_map(|u| u.tokens.iter().cloned())
        .collect()
}

/// How many preceding utterances a context keeps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    All,
    Last(usize),
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Window::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Window::Last(n)),
            _ => Err(Error::Config(format!("window must be a positive integer or `all`, got `{s}`"))),
        }
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::All => f.write_str("all"),
            Window::Last(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HistoryEntry<'a> {
    pub utterance: &'a Utterance,
    /// Turn-index difference to the current utterance, at least 1.
    pub distance: usize,
}

#[derive(Clone, Debug)]
pub struct DialogueContext<'a> {
    pub current: &'a Utterance,
    /// Oldest first, most recent last.
    pub history: Vec<HistoryEntry<'a>>,
}

/// Context for position `t` (an index into the session, not a turn index).
pub fn build_context(session: &Session, t: usize, window: Window) -> Result<DialogueContext<'_>> {
    let current = session.utterances.get(t).ok_or(Error::OutOfRange {
        index: t,
        len: session.len(),
    })?;
    let start = match window {
        Window::All => 0,
        Window::Last(n) => t.saturating_sub(n),
    };
    let history = session.utterances[start..t]
        .iter()
        .map(|u| HistoryEntry {
            utterance: u,
            distance: current.turn_index - u.turn_index,
        })
        .collect();
    Ok(DialogueContext { current, history })
}

/// Contexts for every utterance of every session, in corpus order.
pub fn contexts(corpus: &[Session], window: Window) -> Vec<DialogueContext<'_>> {
    corpus
        .iter()
        .flat_map(|s| (0..s.len()).map(move |t| build_context(s, t, window).expect("in range")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn session(turns: &[usize]) -> Session {
        Session {
            id: "s".into(),
            utterances: turns
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let role = if i % 2 == 0 { Role::Guide } else { Role::Tourist };
                    Utterance::new("s", t, role, "x", ["A-B"])
                })
                .collect(),
        }
    }

    #[test]
    fn loads_one_session_of_two_turns() {
        let f = write_lines(&[
            r#"{"session_id":"a","turn_index":1,"speaker":"tourist","transcript":"Uh On August","labels":["RES-WHEN"]}"#,
            r#"{"session_id":"a","turn_index":0,"speaker":"guide","transcript":"when will you come","labels":["QST-WHEN"]}"#,
        ]);
        let c = load_corpus(f.path()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].len(), 2);
        assert_eq!(c[0].utterances[0].turn_index, 0);
        assert_eq!(c[0].utterances[1].tokens, vec!["uh", "on", "august"]);
        assert_eq!(c[0].utterances[1].speaker, Role::Tourist);
    }

    #[test]
    fn turn_gaps_give_distances_from_indices() {
        let s = session(&[0, 2]);
        let ctx = build_context(&s, 1, Window::All).unwrap();
        assert_eq!(ctx.history.len(), 1);
        assert_eq!(ctx.history[0].distance, 2);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let f = write_lines(&[]);
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"session_id":"a","turn_index":0,"speaker":"guide","transcript":"hi","labels":[]}"#,
            r#"{"session_id":"a","turn_index":1,"speaker":"robot","transcript":"hi","labels":[]}"#,
        ]);
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_turn_is_rejected() {
        let f = write_lines(&[
            r#"{"session_id":"a","turn_index":3,"speaker":"guide","transcript":"hi","labels":[]}"#,
            r#"{"session_id":"a","turn_index":3,"speaker":"tourist","transcript":"yo","labels":[]}"#,
        ]);
        assert!(matches!(load_corpus(f.path()), Err(Error::DuplicateTurn { turn: 3, .. })));
    }

    #[test]
    fn context_windows() {
        let s = session(&[0, 1, 2, 3, 4, 5]);
        assert!(build_context(&s, 0, Window::All).unwrap().history.is_empty());
        let d: Vec<_> = build_context(&s, 3, Window::All)
            .unwrap()
            .history
            .iter()
            .map(|h| h.distance)
            .collect();
        assert_eq!(d, vec![3, 2, 1]);
        let d: Vec<_> = build_context(&s, 5, Window::Last(2))
            .unwrap()
            .history
            .iter()
            .map(|h| h.distance)
            .collect();
        assert_eq!(d, vec![2, 1]);
        assert!(matches!(build_context(&s, 6, Window::All), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn write_then_load_round_trips() {
        let s = session(&[0, 1, 4]);
        let f = tempfile::NamedTempFile::new().unwrap();
        write_corpus(&[s.clone()], f.path()).unwrap();
        assert_eq!(load_corpus(f.path()).unwrap(), vec![s]);
    }

    #[test]
    fn window_parsing() {
        assert_eq!("all".parse::<Window>().unwrap(), Window::All);
        assert_eq!("3".parse::<Window>().unwrap(), Window::Last(3));
        assert!("0".parse::<Window>().is_err());
    }
}
