//! Role-split history encoders and the content/time × sentence/role
//! attention that turns preceding utterances into the history summary.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::corpus::Role;
use crate::encoder::{self, BlstmParams};
use crate::error::{Error, Result};
use crate::evaluation::PredictionRecord;
use crate::model::{AttentionConfig, RoleTimeAgg, TimeDecay};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;

/// Weight given to the tourist and guide summaries, rescaled to sum to one
/// when the raw weights allow it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleWeights {
    pub tourist: f64,
    pub guide: f64,
}

impl RoleWeights {
    pub fn get(&self, r: Role) -> f64 {
        match r {
            Role::Tourist => self.tourist,
            Role::Guide => self.guide,
        }
    }
}

/// Scoring MLP `w2 · tanh(w1 · v + b1)` with a scalar output.
pub fn init_scorer<S: Scalar>(p: &mut ParamStore<S>, seed: u64, prefix: &str, input: usize, hidden: usize) {
    p.insert_uniform(seed, &format!("{prefix}.w1"), &[hidden, input], 1.0 / (input as f64).sqrt());
    p.insert(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
    p.insert_uniform(seed, &format!("{prefix}.w2"), &[1, hidden], 1.0 / (hidden as f64).sqrt());
}

pub fn score<S: Scalar>(g: &mut Graph<S>, prefix: &str, v: Var) -> Result<Var> {
    let w1 = g.param(&format!("{prefix}.w1"))?;
    let b1 = g.param(&format!("{prefix}.b1"))?;
    let w2 = g.param(&format!("{prefix}.w2"))?;
    let z = g.tape.matmul(w1, v)?;
    let z = g.tape.add(z, b1)?;
    let a = g.tape.tanh(z);
    g.tape.matmul(w2, a)
}

/// Softmax over scalar scores, returned as one single-element var per item.
pub fn softmax_weights<S: Scalar>(g: &mut Graph<S>, scores: &[Var]) -> Result<Vec<Var>> {
    let joined = g.tape.concat(scores)?;
    let probs = g.tape.softmax(joined)?;
    (0..scores.len()).map(|i| g.tape.slice(probs, i, 1)).collect()
}

/// Content-aware sentence weights: a softmax over all history items of
/// `M_S(v_cur_free + P · x_i)`, where `P` lifts annotation vectors to `2H`.
pub fn content_attention_sentence<S: Scalar>(
    g: &mut Graph<S>,
    prefix: &str,
    v_cur_free: Var,
    items: &[Var],
) -> Result<Vec<Var>> {
    if items.is_empty() {
        return Ok(Vec::new());
    }
    let proj = g.param(&format!("{prefix}.proj"))?;
    let scores = items
        .iter()
        .map(|&x| {
            let lifted = g.tape.matmul(proj, x)?;
            let q = g.tape.add(v_cur_free, lifted)?;
            score(g, prefix, q)
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_weights(g, &scores)
}

/// Fixed temporal weight of an utterance `d` turns back.
pub fn time_attention(d: usize, decay: TimeDecay) -> Result<f64> {
    if d < 1 {
        return Err(Error::Domain {
            op: "time_attention",
            detail: "distance must be at least 1".into(),
        });
    }
    Ok(match decay {
        TimeDecay::Reciprocal => 1.0 / d as f64,
        TimeDecay::Exponential { rate } => (-rate * (d - 1) as f64).exp(),
    })
}

pub fn sentence_time_weights(distances: &[usize], decay: TimeDecay, normalize: bool) -> Result<Vec<f64>> {
    let mut w = distances
        .iter()
        .map(|&d| time_attention(d, decay))
        .collect::<Result<Vec<_>>>()?;
    if normalize {
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            w.iter_mut().for_each(|x| *x /= total);
        }
    }
    Ok(w)
}

/// Role-level time weight from the distances of one role's utterances;
/// a role with no utterances gets 0.
pub fn role_time_attention(distances: &[usize], agg: RoleTimeAgg) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    match agg {
        RoleTimeAgg::Min => 1.0 / *distances.iter().min().unwrap() as f64,
        RoleTimeAgg::LiteralMin => 1.0 / *distances.iter().max().unwrap() as f64,
        RoleTimeAgg::Avg => distances.iter().map(|&d| 1.0 / d as f64).sum::<f64>() / distances.len() as f64,
    }
}

/// Run one role's BLSTM over its items (oldest first), each scaled by its
/// sentence weight when present. No items gives the zero vector.
pub fn encode_role_history<S: Scalar>(
    g: &mut Graph<S>,
    encoder: &BlstmParams,
    items: &[Var],
    weights: &[Option<Var>],
) -> Result<Var> {
    if items.is_empty() {
        return Ok(g.zeros(encoder.output_dim()));
    }
    let inputs = items
        .iter()
        .zip(weights)
        .map(|(&x, w)| match w {
            Some(w) => g.tape.scale_by(x, *w),
            None => Ok(x),
        })
        .collect::<Result<Vec<_>>>()?;
    encoder::blstm_encode(g, encoder, &inputs, None)
}

/// Merge the two role summaries into `v_his`.
///
/// Without role-level attention the summaries are added. With it, each
/// summary is scaled by its content weight (softmax over both roles of
/// `M_R(v_cur_free + v_role)`), its time weight ([`role_time_attention`]),
/// or their product, then added. Absent roles contribute a zero summary.
pub fn combine_roles<S: Scalar>(
    g: &mut Graph<S>,
    summaries: [Option<Var>; 2],
    distances: &[Vec<usize>; 2],
    att: &AttentionConfig,
    v_cur_free: Option<Var>,
    scorer: &str,
    width: usize,
) -> Result<(Var, Option<RoleWeights>)> {
    let v: Vec<Var> = summaries.iter().map(|s| s.unwrap_or_else(|| g.zeros(width))).collect();
    if !att.level.role() {
        return Ok((g.tape.add(v[0], v[1])?, None));
    }
    let content = if att.role_content() {
        let free = v_cur_free.ok_or_else(|| Error::Config("role content attention needs v_cur_free".into()))?;
        let scores = v
            .iter()
            .map(|&vr| {
                let q = g.tape.add(free, vr)?;
                score(g, scorer, q)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(softmax_weights(g, &scores)?)
    } else {
        None
    };
    let time = if att.role_time() {
        let mut t = [
            role_time_attention(&distances[0], att.role_time_agg),
            role_time_attention(&distances[1], att.role_time_agg),
        ];
        if att.normalize_time {
            let total = t[0] + t[1];
            if total > 0.0 {
                t.iter_mut().for_each(|x| *x /= total);
            }
        }
        Some(t)
    } else {
        None
    };
    let mut weighted = Vec::with_capacity(2);
    let mut raw = [0.0; 2];
    for r in 0..2 {
        let w = match (&content, &time) {
            (Some(c), Some(t)) => g.tape.scale(c[r], S::of(t[r])),
            (Some(c), None) => c[r],
            (None, Some(t)) => g.constant(Tensor::scalar(S::of(t[r]))),
            (None, None) => unreachable!(),
        };
        raw[r] = g.tape.value(w).item().as_f64();
        weighted.push(g.tape.scale_by(v[r], w)?);
    }
    let v_his = g.tape.add(weighted[0], weighted[1])?;
    let total = raw[0] + raw[1];
    let norm = if total > 0.0 { total } else { 1.0 };
    Ok((
        v_his,
        Some(RoleWeights {
            tourist: raw[0] / norm,
            guide: raw[1] / norm,
        }),
    ))
}

/// Mean role weight per understanding task (rows: current speaker;
/// columns: tourist context, guide context).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoleAttentionTable {
    pub tourist_task: Option<RoleWeights>,
    pub guide_task: Option<RoleWeights>,
}

/// Averages the role weights of `records`, split by current speaker.
/// Records without role weights (empty history) are skipped.
pub fn mean_role_attention(records: &[PredictionRecord]) -> Result<RoleAttentionTable> {
    if !records.iter().any(|r| r.role_weights.is_some()) {
        return Err(Error::Unsupported(
            "role attention report needs a variant with role-level attention".into(),
        ));
    }
    let mean = |speaker: Role| {
        let ws: Vec<RoleWeights> = records
            .iter()
            .filter(|r| r.speaker == speaker)
            .filter_map(|r| r.role_weights)
            .collect();
        if ws.is_empty() {
            return None;
        }
        let n = ws.len() as f64;
        Some(RoleWeights {
            tourist: ws.iter().map(|w| w.tourist).sum::<f64>() / n,
            guide: ws.iter().map(|w| w.guide).sum::<f64>() / n,
        })
    };
    Ok(RoleAttentionTable {
        tourist_task: mean(Role::Tourist),
        guide_task: mean(Role::Guide),
    })
}
