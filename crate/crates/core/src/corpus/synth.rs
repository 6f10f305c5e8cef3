//! Deterministic synthetic dialogues with known label rules.
//!
//! Every utterance carries one to `max_acts` speech acts, each spelled by an
//! act word in the transcript, plus one attribute shared by all its labels
//! (`"ACT1-TOPIC3"`). How the attribute is chosen depends on the rule family:
//!
//! * `r1`: the attribute is a topic word in the transcript, always.
//! * `r2`: with probability `switch_prob` the utterance names its own topic;
//!   otherwise it inherits the attribute of the most recent utterance by the
//!   designated role, provided that utterance lies within `horizon` turns
//!   (`0` means unbounded). With no such utterance the attribute is `NONE`.
//! * `r3`: like `r2`, but the source is the utterance exactly `lag` turns back,
//!   whoever spoke it.
//!
//! The spec file is TOML; every field is optional:
//!
//! ```toml
//! sessions = 200
//! turns = 10
//! acts = 3
//! topics = 4
//! synonyms = 2
//! noise_words = 30
//! noise_min = 1
//! noise_max = 3
//! role_words = 0
//! max_acts = 2
//! switch_prob = 0.3
//! guide_prob = 0.5
//! rule = "r2"          # r1 | r2 | r3
//! designated = "guide" # tourist | guide | self | other
//! horizon = 2
//! lag = 2
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Role, Session, Utterance};
use crate::error::{Error, Result};
use crate::evaluation::utterance_f1;
use crate::rng;

pub const NONE_ATTR: &str = "NONE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleFamily {
    R1,
    R2,
    R3,
}

/// Whose history an `r2` attribute is copied from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Designated {
    Tourist,
    Guide,
    /// The current speaker's own role.
    #[serde(rename = "self")]
    SameRole,
    /// The role opposite the current speaker.
    Other,
}

impl Designated {
    fn resolve(self, current: Role) -> Role {
        match self {
            Designated::Tourist => Role::Tourist,
            Designated::Guide => Role::Guide,
            Designated::SameRole => current,
            Designated::Other => current.other(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sessions: usize,
    pub turns: usize,
    pub acts: usize,
    pub topics: usize,
    pub synonyms: usize,
    pub noise_words: usize,
    pub noise_min: usize,
    pub noise_max: usize,
    /// Size of each role's private pool of habit words; every utterance
    /// carries one word from its speaker's pool. 0 leaves the speaker
    /// unobservable from the transcript.
    pub role_words: usize,
    pub max_acts: usize,
    pub switch_prob: f64,
    pub guide_prob: f64,
    pub rule: RuleFamily,
    pub designated: Designated,
    pub horizon: usize,
    pub lag: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sessions: 200,
            turns: 10,
            acts: 3,
            topics: 4,
            synonyms: 2,
            noise_words: 30,
            noise_min: 1,
            noise_max: 3,
            role_words: 0,
            max_acts: 2,
            switch_prob: 0.3,
            guide_prob: 0.5,
            rule: RuleFamily::R2,
            designated: Designated::Guide,
            horizon: 2,
            lag: 2,
        }
    }
}

impl SynthSpec {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.sessions == 0 {
            return bad("sessions must be positive");
        }
        if self.turns == 0 || self.acts == 0 || self.topics == 0 || self.synonyms == 0 {
            return bad("turns, acts, topics and synonyms must be positive");
        }
        if self.max_acts == 0 || self.max_acts > self.acts {
            return bad("max_acts must lie in 1..=acts");
        }
        if self.noise_min > self.noise_max {
            return bad("noise_min exceeds noise_max");
        }
        if self.noise_max > 0 && self.noise_words == 0 {
            return bad("noise tokens requested but noise_words is 0");
        }
        if !(0.0..=1.0).contains(&self.switch_prob) || !(0.0..=1.0).contains(&self.guide_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.rule == RuleFamily::R3 && self.lag == 0 {
            return bad("lag must be positive");
        }
        Ok(())
    }

    pub fn act_name(i: usize) -> String {
        format!("ACT{i}")
    }

    pub fn topic_name(z: usize) -> String {
        format!("TOPIC{z}")
    }

    fn act_word(i: usize, s: usize) -> String {
        format!("act{i}_{s}")
    }

    fn role_word(role: Role, k: usize) -> String {
        format!("{}{k}", &role.as_str()[..1])
    }

    fn topic_word(z: usize, s: usize) -> String {
        format!("topic{z}_{s}")
    }

    /// The label-relevant content of a transcript: act ids and the topic id
    /// (if a topic word occurs). Noise words are independent of the labels,
    /// so this is a sufficient statistic for any history-free predictor.
    pub fn signature(tokens: &[String]) -> (BTreeSet<usize>, Option<usize>) {
        let mut acts = BTreeSet::new();
        let mut topic = None;
        for t in tokens {
            let id = |prefix: &str| {
                t.strip_prefix(prefix)
                    .and_then(|r| r.split_once('_'))
                    .and_then(|(n, _)| n.parse::<usize>().ok())
            };
            if let Some(i) = id("act") {
                acts.insert(i);
            } else if let Some(z) = id("topic") {
                topic = Some(z);
            }
        }
        (acts, topic)
    }
}

/// Where an utterance's attribute came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Source {
    /// A topic word in the utterance itself.
    Tokens,
    /// Copied from the utterance at `turn_index` of the same session.
    History { turn_index: usize },
    /// No eligible source; attribute is `NONE`.
    Absent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceMeta {
    pub session_id: String,
    pub turn_index: usize,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
    pub sessions: Vec<Session>,
    pub meta: Vec<UtteranceMeta>,
}

pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut r = rng::stream(seed, "synth");
    let mut sessions = Vec::with_capacity(spec.sessions);
    let mut meta = Vec::new();
    for s in 0..spec.sessions {
        let id = format!("syn{s:04}");
        let mut utterances: Vec<Utterance> = Vec::with_capacity(spec.turns);
        let mut attrs: Vec<String> = Vec::with_capacity(spec.turns);
        for t in 0..spec.turns {
            let speaker = if r.gen_bool(spec.guide_prob) { Role::Guide } else { Role::Tourist };
            let n_acts = r.gen_range(1..=spec.max_acts);
            let mut acts = index::sample(&mut r, spec.acts, n_acts).into_vec();
            acts.sort_unstable();
            let mut tokens: Vec<String> = acts
                .iter()
                .map(|&a| SynthSpec::act_word(a, r.gen_range(0..spec.synonyms)))
                .collect();

            let own_topic = match spec.rule {
                RuleFamily::R1 => true,
                RuleFamily::R2 | RuleFamily::R3 => r.gen_bool(spec.switch_prob),
            };
            let (attr, source) = if own_topic {
                let z = r.gen_range(0..spec.topics);
                tokens.push(SynthSpec::topic_word(z, r.gen_range(0..spec.synonyms)));
                (SynthSpec::topic_name(z), Source::Tokens)
            } else {
                let src = match spec.rule {
                    RuleFamily::R2 => {
                        let role = spec.designated.resolve(speaker);
                        (0..t)
                            .rev()
                            .find(|&j| utterances[j].speaker == role)
                            .filter(|&j| spec.horizon == 0 || t - j <= spec.horizon)
                    }
                    RuleFamily::R3 => t.checked_sub(spec.lag),
                    RuleFamily::R1 => unreachable!(),
                };
                match src {
                    Some(j) => (attrs[j].clone(), Source::History { turn_index: j }),
                    None => (NONE_ATTR.to_owned(), Source::Absent),
                }
            };

            let n_noise = r.gen_range(spec.noise_min..=spec.noise_max);
            for _ in 0..n_noise {
                tokens.push(format!("w{}", r.gen_range(0..spec.noise_words)));
            }
            if spec.role_words > 0 {
                tokens.push(SynthSpec::role_word(speaker, r.gen_range(0..spec.role_words)));
            }
            tokens.shuffle(&mut r);
            let labels: BTreeSet<String> = acts
                .iter()
                .map(|&a| format!("{}-{}", SynthSpec::act_name(a), attr))
                .collect();
            meta.push(UtteranceMeta {
                session_id: id.clone(),
                turn_index: t,
                source,
            });
            attrs.push(attr);
            utterances.push(Utterance {
                session_id: id.clone(),
                turn_index: t,
                speaker,
                tokens,
                labels,
            });
        }
        sessions.push(Session { id, utterances });
    }
    Ok(SynthCorpus {
        spec: spec.clone(),
        seed,
        sessions,
        meta,
    })
}

/// Session-level 70/15/15 split into (train, dev, test), in corpus order.
pub fn split(sessions: &[Session]) -> (Vec<Session>, Vec<Session>, Vec<Session>) {
    let n = sessions.len();
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_dev = ((n as f64 * 0.15).round() as usize).min(n - n_train);
    (
        sessions[..n_train].to_vec(),
        sessions[n_train..n_train + n_dev].to_vec(),
        sessions[n_train + n_dev..].to_vec(),
    )
}

/// Best mean utterance F1 any predictor that sees only the current
/// transcript can reach on `sessions`.
///
/// Utterances are grouped by [`SynthSpec::signature`]; within a group every
/// subset of the group's gold labels is tried as the constant prediction and
/// the best total is kept.
pub fn history_free_ceiling(sessions: &[Session]) -> f64 {
    let mut groups: BTreeMap<(BTreeSet<usize>, Option<usize>), Vec<&BTreeSet<String>>> = BTreeMap::new();
    for u in sessions.iter().flat_map(|s| &s.utterances) {
        groups.entry(SynthSpec::signature(&u.tokens)).or_default().push(&u.labels);
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for golds in groups.values() {
        let candidates: Vec<&String> = golds.iter().flat_map(|g| g.iter()).collect::<BTreeSet<_>>().into_iter().collect();
        assert!(candidates.len() < 20, "label union too large to enumerate");
        let mut best = 0.0f64;
        for mask in 0u32..(1 << candidates.len()) {
            let pred: BTreeSet<String> = candidates
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, l)| (*l).clone())
                .collect();
            let score: f64 = golds.iter().map(|g| utterance_f1(g, &pred)).sum();
            best = best.max(score);
        }
        total += best;
        n += golds.len();
    }
    if n == 0 {
        return 0.0;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rule: RuleFamily) -> SynthSpec {
        SynthSpec {
            sessions: 60,
            rule,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small(RuleFamily::R2), 7).unwrap();
        let b = generate_synthetic(&small(RuleFamily::R2), 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(RuleFamily::R2), 8).unwrap();
        assert_ne!(a.sessions, c.sessions);
    }

    #[test]
    fn zero_sessions_is_rejected() {
        let spec = SynthSpec {
            sessions: 0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&spec, 1).is_err());
        let spec = SynthSpec {
            max_acts: 9,
            ..SynthSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let spec = SynthSpec::from_toml_str("sessions = 5\nrule = \"r3\"\ndesignated = \"self\"").unwrap();
        assert_eq!(spec.sessions, 5);
        assert_eq!(spec.rule, RuleFamily::R3);
        assert_eq!(spec.designated, Designated::SameRole);
        assert_eq!(spec.turns, 10);
        assert_eq!(SynthSpec::from_toml_str(&spec.to_toml()).unwrap(), spec);
        assert!(SynthSpec::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn habit_words_reveal_the_speaker() {
        let chatty = SynthSpec {
            role_words: 5,
            ..small(RuleFamily::R1)
        };
        let c = generate_synthetic(&chatty, 4).unwrap();
        for u in c.sessions.iter().flat_map(|s| &s.utterances) {
            let habit: Vec<&String> = u.tokens.iter().filter(|t| t.len() == 2 && !t.starts_with('w')).collect();
            assert_eq!(habit.len(), 1, "{:?}", u.tokens);
            assert!(habit[0].starts_with(&u.speaker.as_str()[..1]));
        }
        let c = generate_synthetic(&small(RuleFamily::R1), 4).unwrap();
        assert!(c.sessions.iter().flat_map(|s| &s.utterances).all(|u| u
            .tokens
            .iter()
            .all(|t| t.starts_with('w') || t.starts_with("act") || t.starts_with("topic"))));
    }

    #[test]
    fn r2_sources_follow_the_rule() {
        let c = generate_synthetic(&small(RuleFamily::R2), 3).unwrap();
        let mut idx = 0;
        for s in &c.sessions {
            for u in &s.utterances {
                let m = &c.meta[idx];
                idx += 1;
                let attr = u.labels.iter().next().unwrap().split_once('-').unwrap().1.to_string();
                match m.source {
                    Source::Tokens => assert!(SynthSpec::signature(&u.tokens).1.is_some()),
                    Source::History { turn_index } => {
                        let src = &s.utterances[turn_index];
                        assert_eq!(src.speaker, Role::Guide);
                        assert!(u.turn_index - turn_index <= 2);
                        assert!(src.labels.iter().all(|l| l.ends_with(&format!("-{attr}"))));
                        // no newer guide turn in between
                        assert!(s.utterances[turn_index + 1..u.turn_index].iter().all(|v| v.speaker != Role::Guide));
                    }
                    Source::Absent => assert_eq!(attr, NONE_ATTR),
                }
            }
        }
    }

    #[test]
    fn r1_ceiling_is_perfect_and_r2_ceiling_is_not() {
        let r1 = generate_synthetic(&small(RuleFamily::R1), 5).unwrap();
        assert_eq!(history_free_ceiling(&r1.sessions), 1.0);
        let r2 = generate_synthetic(&small(RuleFamily::R2), 5).unwrap();
        let ceiling = history_free_ceiling(&r2.sessions);
        assert!(ceiling < 0.85, "ceiling {ceiling}");
    }

    #[test]
    fn r3_copies_from_lag() {
        let c = generate_synthetic(&small(RuleFamily::R3), 4).unwrap();
        for m in &c.meta {
            if let Source::History { turn_index } = m.source {
                assert_eq!(m.turn_index - turn_index, 2);
            }
        }
    }

    #[test]
    fn split_ratios() {
        let c = generate_synthetic(&SynthSpec::default(), 1).unwrap();
        let (tr, dv, te) = split(&c.sessions);
        assert_eq!((tr.len(), dv.len(), te.len()), (140, 30, 30));
    }
}
