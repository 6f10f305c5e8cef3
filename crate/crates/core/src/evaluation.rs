//! Utterance F1, role-split corpus scores, prediction records, the variant
//! ablation harness and paired bootstrap significance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::context::RoleWeights;
use crate::corpus::{build_context, Role, Session, Window};
use crate::encoder;
use crate::error::{Error, Result};
use crate::model::{ContextMode, Featurizer, Model, ModelOptions, Variant};
use crate::rng;
use crate::scalar::Scalar;
use crate::training::{self, TrainConfig};

/// F1 between two label sets. Both empty scores 1, exactly one empty 0.
pub fn utterance_f1(gold: &BTreeSet<String>, pred: &BTreeSet<String>) -> f64 {
    match (gold.is_empty(), pred.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = gold.intersection(pred).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / pred.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Tourist,
    Guide,
    All,
}

impl Split {
    pub fn admits(self, speaker: Role) -> bool {
        match self {
            Split::Tourist => speaker == Role::Tourist,
            Split::Guide => speaker == Role::Guide,
            Split::All => true,
        }
    }
}

/// How utterance decisions are pooled into a corpus score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Mode {
    /// Mean of utterance F1.
    #[default]
    Macro,
    /// F1 of label decisions pooled over utterances.
    Micro,
}

impl std::str::FromStr for F1Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(F1Mode::Macro),
            "micro" => Ok(F1Mode::Micro),
            _ => Err(Error::Config(format!("unknown F1 mode `{s}`"))),
        }
    }
}

/// Which labels annotate history utterances at prediction time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HistorySource {
    #[default]
    Gold,
    /// The model's own earlier predictions, decoded session by session.
    Predicted,
}

impl std::str::FromStr for HistorySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(HistorySource::Gold),
            "predicted" => Ok(HistorySource::Predicted),
            _ => Err(Error::Config(format!("unknown history source `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub speaker: Role,
    pub gold: BTreeSet<String>,
    pub predicted: BTreeSet<String>,
    pub scores: Vec<f64>,
    /// Sentence-level weight per history turn index, when the variant has one.
    pub sentence_weights: BTreeMap<usize, f64>,
    pub role_weights: Option<RoleWeights>,
}

impl PredictionRecord {
    pub fn f1(&self) -> f64 {
        utterance_f1(&self.gold, &self.predicted)
    }
}

/// Corpus F1 (percent) over the records of `split`.
pub fn corpus_f1(records: &[PredictionRecord], split: Split) -> Result<f64> {
    corpus_f1_with(records, split, F1Mode::Macro)
}

pub fn corpus_f1_with(records: &[PredictionRecord], split: Split, mode: F1Mode) -> Result<f64> {
    let sel: Vec<&PredictionRecord> = records.iter().filter(|r| split.admits(r.speaker)).collect();
    if sel.is_empty() {
        return Err(Error::Empty { op: "corpus_f1" });
    }
    let f1 = match mode {
        F1Mode::Macro => sel.iter().map(|r| r.f1()).sum::<f64>() / sel.len() as f64,
        F1Mode::Micro => {
            let hit: usize = sel.iter().map(|r| r.gold.intersection(&r.predicted).count()).sum();
            let total: usize = sel.iter().map(|r| r.gold.len() + r.predicted.len()).sum();
            if total == 0 {
                1.0
            } else {
                2.0 * hit as f64 / total as f64
            }
        }
    };
    Ok(100.0 * f1)
}

/// Tourist, guide and overall F1; a role with no utterances is `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub tourist: Option<f64>,
    pub guide: Option<f64>,
    pub all: f64,
}

pub fn f1_scores(records: &[PredictionRecord], mode: F1Mode) -> Result<F1Scores> {
    Ok(F1Scores {
        tourist: corpus_f1_with(records, Split::Tourist, mode).ok(),
        guide: corpus_f1_with(records, Split::Guide, mode).ok(),
        all: corpus_f1_with(records, Split::All, mode)?,
    })
}

/// Candidate decision thresholds 0.10, 0.15, ..., 0.90.
pub fn theta_grid() -> impl Iterator<Item = f64> {
    (0..=16).map(|i| f64::from(10 + 5 * i) / 100.0)
}

/// Re-derive predicted sets from stored scores at a new threshold.
pub fn rethreshold(records: &mut [PredictionRecord], featurizer: &Featurizer, theta: f64) {
    for r in records {
        r.predicted = featurizer.labels.decode(encoder::decide(&r.scores, theta));
    }
}

/// Threshold on the grid with the best overall F1 (lowest on ties), and
/// the scores it attains.
pub fn tune_theta(records: &mut [PredictionRecord], featurizer: &Featurizer, mode: F1Mode) -> Result<(f64, F1Scores)> {
    let mut best: Option<(f64, F1Scores)> = None;
    for theta in theta_grid() {
        rethreshold(records, featurizer, theta);
        let s = f1_scores(records, mode)?;
        if best.map_or(true, |(_, b)| s.all > b.all) {
            best = Some((theta, s));
        }
    }
    let (theta, s) = best.expect("grid is not empty");
    rethreshold(records, featurizer, theta);
    Ok((theta, s))
}

/// Prediction records for every utterance of `sessions`, in corpus order.
pub fn predict_sessions<S: Scalar>(
    model: &Model<S>,
    featurizer: &Featurizer,
    theta: f64,
    window: Window,
    sessions: &[Session],
    history: HistorySource,
) -> Result<Vec<PredictionRecord>> {
    let per_session: Vec<Result<Vec<PredictionRecord>>> = sessions
        .par_iter()
        .map(|s| {
            let mut predicted: Vec<BTreeSet<String>> = Vec::with_capacity(s.len());
            let mut out = Vec::with_capacity(s.len());
            for t in 0..s.len() {
                let ctx = build_context(s, t, window)?;
                let ex = match history {
                    HistorySource::Gold => featurizer.example::<S>(&ctx),
                    HistorySource::Predicted => featurizer.example_with::<S>(&ctx, |u| {
                        // history precedes t and turn indices are sorted
                        let pos = s
                            .utterances
                            .binary_search_by_key(&u.turn_index, |x| x.turn_index)
                            .expect("history utterance belongs to the session");
                        predicted[pos].iter().cloned().collect()
                    }),
                };
                let inf = model.infer(&ex)?;
                let labels = featurizer.labels.decode(encoder::decide(&inf.scores, theta));
                predicted.push(labels.clone());
                out.push(PredictionRecord {
                    session_id: ctx.current.session_id.clone(),
                    turn_index: ctx.current.turn_index,
                    speaker: ctx.current.speaker,
                    gold: ctx.current.labels.clone(),
                    predicted: labels,
                    scores: inf.scores,
                    sentence_weights: inf.sentence_weights.into_iter().collect(),
                    role_weights: inf.role_weights,
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_session {
        records.extend(r?);
    }
    Ok(records)
}

/// Predictions of a checkpoint at its stored threshold. A checkpoint
/// trained for one role's task only scores that role's utterances.
pub fn predict<S: Scalar>(ckpt: &Checkpoint<S>, sessions: &[Session], history: HistorySource) -> Result<Vec<PredictionRecord>> {
    ckpt.check_compatible(sessions)?;
    let mut records = predict_sessions(&ckpt.model, &ckpt.featurizer, ckpt.theta, ckpt.window, sessions, history)?;
    if let Some(r) = ckpt.train.task {
        records.retain(|x| x.speaker == r);
    }
    Ok(records)
}

/// Result of a paired bootstrap on `mean(a - b)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub mean_diff: f64,
    /// One-sided p-value for `a > b`: share of resampled mean differences `<= 0`.
    pub p_greater: f64,
    /// Two-sided p-value for `a != b`.
    pub p_two_sided: f64,
}

pub const BOOTSTRAP_RESAMPLES: usize = 10_000;

pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<Bootstrap> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "paired_bootstrap",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() || resamples == 0 {
        return Err(Error::Empty { op: "paired_bootstrap" });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mut r = rng::stream(seed, "bootstrap");
    let (mut le, mut ge) = (0usize, 0usize);
    for _ in 0..resamples {
        let s: f64 = (0..n).map(|_| d[r.gen_range(0..n)]).sum();
        if s <= 0.0 {
            le += 1;
        }
        if s >= 0.0 {
            ge += 1;
        }
    }
    let frac = |c: usize| c as f64 / resamples as f64;
    Ok(Bootstrap {
        mean_diff: d.iter().sum::<f64>() / n as f64,
        p_greater: frac(le),
        p_two_sided: (2.0 * frac(le).min(frac(ge))).min(1.0),
    })
}

/// One-sided p-value that `a` improves on `b`, from 10,000 seeded resamples.
pub fn significance(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(paired_bootstrap(a, b, BOOTSTRAP_RESAMPLES, 0)?.p_greater)
}

/// Everything an ablation cell needs besides its variant and seed.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub featurizer: Featurizer,
    pub train: Vec<Session>,
    pub dev: Vec<Session>,
    pub test: Vec<Session>,
    pub model: ModelOptions,
    /// Its seed is replaced by each cell's seed.
    pub train_config: TrainConfig,
    pub history: HistorySource,
    pub f1_mode: F1Mode,
    /// Train one model per speaker role, each on that role's utterances,
    /// and score every test utterance with its speaker's model.
    pub per_role_tasks: bool,
}

/// Test-set outcome of one (variant, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub variant: Variant,
    pub seed: u64,
    #[serde(default)]
    pub own_role_only: bool,
    /// Tuned threshold; the mean of both when tasks are split by role.
    pub theta: f64,
    /// Tourist and guide task thresholds, with per-role tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role_thetas: Option<[f64; 2]>,
    pub f1: F1Scores,
    /// Test utterances in corpus order.
    pub speakers: Vec<Role>,
    pub utterance_f1: Vec<f64>,
}

pub fn run_cell(exp: &Experiment, variant: Variant, seed: u64, own_role_only: bool) -> Result<CellResult> {
    let mut config = exp.model.config(variant, &exp.featurizer);
    config.own_role_only = own_role_only;
    let train_for = |task: Option<Role>| -> Result<(f64, Vec<PredictionRecord>)> {
        let cfg = TrainConfig {
            seed,
            task,
            ..exp.train_config.clone()
        };
        let trained = training::train::<f64>(&exp.featurizer, config.clone(), &exp.train, &exp.dev, &cfg)?;
        let ckpt = trained.checkpoint;
        let records = predict_sessions(&ckpt.model, &ckpt.featurizer, ckpt.theta, ckpt.window, &exp.test, exp.history)?;
        Ok((ckpt.theta, records))
    };
    let (theta, role_thetas, records) = if exp.per_role_tasks {
        let (tt, tourist) = train_for(Some(Role::Tourist))?;
        let (tg, guide) = train_for(Some(Role::Guide))?;
        // both cover every test utterance, in corpus order
        let records: Vec<PredictionRecord> = tourist
            .into_iter()
            .zip(guide)
            .map(|(t, g)| if t.speaker == Role::Tourist { t } else { g })
            .collect();
        ((tt + tg) / 2.0, Some([tt, tg]), records)
    } else {
        let (t, records) = train_for(None)?;
        (t, None, records)
    };
    Ok(CellResult {
        variant,
        seed,
        own_role_only,
        theta,
        role_thetas,
        f1: f1_scores(&records, exp.f1_mode)?,
        speakers: records.iter().map(|r| r.speaker).collect(),
        utterance_f1: records.iter().map(PredictionRecord::f1).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub group: String,
    pub level: String,
    pub seeds: Vec<u64>,
    pub tourist: Option<Stat>,
    pub guide: Option<Stat>,
    pub all: Option<Stat>,
    /// Better than every baseline row present (one-sided p < 0.05 on
    /// seed-averaged utterance F1). `None` for baselines or without one.
    pub significant: Option<bool>,
    /// Failures of individual seeds, formatted as `seed N: message`.
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

/// Seed-averaged utterance F1 of `variant`, or `None` if a seed is missing.
pub fn mean_utterance_f1(cells: &[CellResult], variant: Variant, own_role_only: bool, split: Split) -> Option<Vec<f64>> {
    let sel: Vec<&CellResult> = cells
        .iter()
        .filter(|c| c.variant == variant && c.own_role_only == own_role_only)
        .collect();
    let first = sel.first()?;
    let idx: Vec<usize> = (0..first.speakers.len()).filter(|&i| split.admits(first.speakers[i])).collect();
    Some(
        idx.iter()
            .map(|&i| sel.iter().map(|c| c.utterance_f1[i]).sum::<f64>() / sel.len() as f64)
            .collect(),
    )
}

/// Train and test every (variant, seed) cell. Cells found in `done` are
/// reused; `on_cell` sees each newly finished cell. A failing cell is
/// reported in its row without stopping the others.
pub fn run_ablation(
    exp: &Experiment,
    variants: &[Variant],
    seeds: &[u64],
    done: &[CellResult],
    on_cell: &(dyn Fn(&CellResult) + Sync),
) -> AblationReport {
    let jobs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<(Variant, u64, Result<CellResult>)> = jobs
        .par_iter()
        .map(|&(v, s)| {
            if let Some(c) = done.iter().find(|c| c.variant == v && c.seed == s && !c.own_role_only) {
                return (v, s, Ok(c.clone()));
            }
            let r = run_cell(exp, v, s, false);
            if let Ok(c) = &r {
                on_cell(c);
            }
            (v, s, r)
        })
        .collect();
    let mut cells = Vec::new();
    let mut errors: BTreeMap<Variant, Vec<String>> = BTreeMap::new();
    for (v, s, r) in results {
        match r {
            Ok(c) => cells.push(c),
            Err(e) => errors.entry(v).or_default().push(format!("seed {s}: {e}")),
        }
    }
    let rows = summarize(variants, &cells, &errors);
    AblationReport { rows, cells }
}

fn summarize(variants: &[Variant], cells: &[CellResult], errors: &BTreeMap<Variant, Vec<String>>) -> Vec<AblationRow> {
    let baselines: Vec<Vec<f64>> = variants
        .iter()
        .filter(|v| v.is_baseline())
        .filter_map(|&v| mean_utterance_f1(cells, v, false, Split::All))
        .collect();
    variants
        .iter()
        .map(|&v| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.variant == v && !c.own_role_only).collect();
            let col = |f: fn(&F1Scores) -> Option<f64>| Stat::of(&mine.iter().filter_map(|c| f(&c.f1)).collect::<Vec<_>>());
            let significant = if v.is_baseline() || baselines.is_empty() {
                None
            } else {
                mean_utterance_f1(cells, v, false, Split::All).map(|a| {
                    baselines
                        .iter()
                        .all(|b| significance(&a, b).map_or(false, |p| p < 0.05))
                })
            };
            AblationRow {
                variant: v,
                group: v.group().to_owned(),
                level: v.level_label().to_owned(),
                seeds: mine.iter().map(|c| c.seed).collect(),
                tourist: col(|f| f.tourist),
                guide: col(|f| f.guide),
                all: col(|f| Some(f.all)),
                significant,
                errors: errors.get(&v).cloned().unwrap_or_default(),
            }
        })
        .collect()
}

pub const TABLE_HEADER: &str = "Attention Type  Row  Attention Level       Tourist        Guide          All";

/// Aligned plain-text table: one row per variant, mean ± std per column,
/// `*` marking rows significantly better than every baseline.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(TABLE_HEADER);
    out.push('\n');
    out.push_str(&"-".repeat(TABLE_HEADER.len()));
    out.push('\n');
    let cell = |s: &Option<Stat>| match s {
        Some(s) => format!("{:.2}±{:.2}", s.mean, s.std),
        None => "-".to_owned(),
    };
    for r in rows {
        let mark = if r.significant == Some(true) { "*" } else { "" };
        let _ = write!(
            out,
            "{:<14}  ({})  {:<20}  {:<13}  {:<13}  {}{}",
            r.group,
            r.variant.id(),
            r.level,
            cell(&r.tourist),
            cell(&r.guide),
            cell(&r.all),
            mark
        );
        if !r.errors.is_empty() {
            let _ = write!(out, "  [failed: {}]", r.errors.join("; "));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleHistoryDelta {
    pub both: f64,
    pub own: f64,
    /// `own - both`, in F1 percentage points.
    pub delta: f64,
    /// One-sided p-value that own-role-only history is worse.
    pub p_lower: f64,
    pub p_two_sided: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleHistoryReport {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub tourist: Option<RoleHistoryDelta>,
    pub guide: Option<RoleHistoryDelta>,
    pub all: RoleHistoryDelta,
    pub cells: Vec<CellResult>,
}

/// Compare both-role history with own-role-only history for `variant`,
/// bootstrapping seed-averaged utterance F1 per split.
pub fn single_role_history_ablation(exp: &Experiment, variant: Variant, seeds: &[u64]) -> Result<RoleHistoryReport> {
    if variant.context_mode() != ContextMode::RoleSplit {
        return Err(Error::Config(format!(
            "variant {} has no role-split history",
            variant.name()
        )));
    }
    let jobs: Vec<(u64, bool)> = seeds.iter().flat_map(|&s| [(s, false), (s, true)]).collect();
    let cells = jobs
        .par_iter()
        .map(|&(s, own)| run_cell(exp, variant, s, own))
        .collect::<Result<Vec<_>>>()?;
    let delta = |split: Split| -> Result<Option<RoleHistoryDelta>> {
        let both = mean_utterance_f1(&cells, variant, false, split).unwrap_or_default();
        let own = mean_utterance_f1(&cells, variant, true, split).unwrap_or_default();
        if both.is_empty() {
            return Ok(None);
        }
        let b = paired_bootstrap(&both, &own, BOOTSTRAP_RESAMPLES, 0)?;
        let n = both.len() as f64;
        let mb = 100.0 * both.iter().sum::<f64>() / n;
        let mo = 100.0 * own.iter().sum::<f64>() / n;
        Ok(Some(RoleHistoryDelta {
            both: mb,
            own: mo,
            delta: mo - mb,
            p_lower: b.p_greater,
            p_two_sided: b.p_two_sided,
        }))
    };
    Ok(RoleHistoryReport {
        variant,
        seeds: seeds.to_vec(),
        tourist: delta(Split::Tourist)?,
        guide: delta(Split::Guide)?,
        all: delta(Split::All)?.ok_or(Error::Empty {
            op: "single_role_history_ablation",
        })?,
        cells,
    })
}
