//! Model configuration, variant matrix, parameter layout and the full
//! forward pass from a dialogue context to label scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::context::{self, RoleWeights};
use crate::corpus::{AnnotationVocab, DialogueContext, EmbeddingTable, LabelVocab, Role};
use crate::encoder::{self, BlstmParams};
use crate::error::{Error, Result};
use crate::params::{Grads, Graph, ParamStore};
use crate::scalar::Scalar;

/// How preceding utterances reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextMode {
    /// Current utterance only.
    None,
    /// One history encoder over both speakers.
    Shared,
    /// One history encoder per speaker role.
    RoleSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionLevel {
    None,
    Sentence,
    Role,
    Both,
}

impl AttentionLevel {
    pub fn sentence(self) -> bool {
        matches!(self, AttentionLevel::Sentence | AttentionLevel::Both)
    }

    pub fn role(self) -> bool {
        matches!(self, AttentionLevel::Role | AttentionLevel::Both)
    }
}

/// Reduction of a role's turn distances into its role-level time weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoleTimeAgg {
    /// `1 / min d`: the role's closest utterance decides.
    #[default]
    Min,
    /// Mean of `1 / d` over the role's utterances.
    Avg,
    /// `min (1 / d)`: the role's farthest utterance decides.
    LiteralMin,
}

impl FromStr for RoleTimeAgg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(RoleTimeAgg::Min),
            "avg" => Ok(RoleTimeAgg::Avg),
            "literal-min" => Ok(RoleTimeAgg::LiteralMin),
            _ => Err(Error::Config(format!("unknown role time aggregator `{s}`"))),
        }
    }
}

/// Shape of the fixed temporal weight as a function of turn distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TimeDecay {
    /// `1 / d`.
    #[default]
    Reciprocal,
    /// `exp(-rate · (d - 1))`. Experimental.
    Exponential { rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub content: bool,
    pub time: bool,
    pub level: AttentionLevel,
    #[serde(default)]
    pub role_time_agg: RoleTimeAgg,
    #[serde(default)]
    pub decay: TimeDecay,
    /// Renormalise time weights to sum to one. Off by default.
    #[serde(default)]
    pub normalize_time: bool,
}

impl AttentionConfig {
    pub fn none() -> Self {
        AttentionConfig {
            content: false,
            time: false,
            level: AttentionLevel::None,
            role_time_agg: RoleTimeAgg::Min,
            decay: TimeDecay::Reciprocal,
            normalize_time: false,
        }
    }

    pub fn new(content: bool, time: bool, level: AttentionLevel) -> Self {
        AttentionConfig {
            content,
            time,
            level,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let off = self.level == AttentionLevel::None;
        if off != (!self.content && !self.time) {
            return Err(Error::Config(
                "attention level `none` iff neither content nor time attention is enabled".into(),
            ));
        }
        if let TimeDecay::Exponential { rate } = self.decay {
            if !(rate.is_finite() && rate >= 0.0) {
                return Err(Error::Config("decay rate must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn sentence_content(&self) -> bool {
        self.content && self.level.sentence()
    }

    pub fn sentence_time(&self) -> bool {
        self.time && self.level.sentence()
    }

    pub fn role_content(&self) -> bool {
        self.content && self.level.role()
    }

    pub fn role_time(&self) -> bool {
        self.time && self.level.role()
    }
}

/// Rows (c)–(n) of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    C,
    D,
    E,
    F,
    G,
    H,
    I,
    J,
    K,
    L,
    M,
    N,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::G,
        Variant::H,
        Variant::I,
        Variant::J,
        Variant::K,
        Variant::L,
        Variant::M,
        Variant::N,
    ];

    pub fn id(self) -> char {
        b"cdefghijklmn"[self as usize] as char
    }

    pub fn name(self) -> &'static str {
        [
            "no-context",
            "context",
            "role-context",
            "content-sentence",
            "content-role",
            "content-both",
            "time-sentence",
            "time-role",
            "time-both",
            "content-time-sentence",
            "content-time-role",
            "content-time-both",
        ][self as usize]
    }

    pub fn is_baseline(self) -> bool {
        matches!(self, Variant::C | Variant::D | Variant::E)
    }

    pub fn context_mode(self) -> ContextMode {
        match self {
            Variant::C => ContextMode::None,
            Variant::D => ContextMode::Shared,
            _ => ContextMode::RoleSplit,
        }
    }

    pub fn attention(self) -> AttentionConfig {
        use AttentionLevel::*;
        let idx = self as usize;
        if idx < 3 {
            return AttentionConfig::none();
        }
        let level = [Sentence, Role, Both][(idx - 3) % 3];
        let (content, time) = [(true, false), (false, true), (true, true)][(idx - 3) / 3];
        AttentionConfig::new(content, time, level)
    }

    /// Attention-type group label for tables.
    pub fn group(self) -> &'static str {
        match self as usize {
            0..=2 => "Baseline",
            3..=5 => "Content-Aware",
            6..=8 => "Time-Aware",
            _ => "Content+Time",
        }
    }

    /// Attention-level (or baseline description) label for tables.
    pub fn level_label(self) -> &'static str {
        match self {
            Variant::C => "w/o context",
            Variant::D => "w/ context w/o role",
            Variant::E => "w/ context w/ role",
            v => match v.attention().level {
                AttentionLevel::Sentence => "Sentence",
                AttentionLevel::Role => "Role",
                _ => "Both",
            },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| s == v.id().to_string() || s == v.name())
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Where the history summary enters the current-utterance encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistoryInjection {
    /// Projected summary appended to every word embedding.
    #[default]
    Concat,
    /// Projected summary used as the initial hidden state.
    InitialState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Hidden width of the attention scoring MLPs.
    pub attn_hidden: usize,
    /// Number of output labels.
    pub labels: usize,
    /// Width of the one-hot history annotation vectors.
    pub annotation_dim: usize,
    pub context: ContextMode,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub injection: HistoryInjection,
    /// Restrict history to utterances by the current speaker.
    #[serde(default)]
    pub own_role_only: bool,
}

impl ModelConfig {
    pub fn for_variant(v: Variant, embed_dim: usize, hidden: usize, labels: usize, annotation_dim: usize) -> Self {
        ModelConfig {
            embed_dim,
            hidden,
            attn_hidden: 64,
            labels,
            annotation_dim,
            context: v.context_mode(),
            attention: v.attention(),
            injection: HistoryInjection::Concat,
            own_role_only: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.embed_dim == 0 || self.hidden == 0 || self.labels == 0 || self.attn_hidden == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.context != ContextMode::None && self.annotation_dim == 0 {
            return Err(Error::Config("context needs a non-empty annotation vocabulary".into()));
        }
        if self.context == ContextMode::None && (self.attention.level != AttentionLevel::None || self.own_role_only) {
            return Err(Error::Config("attention and history filters need context".into()));
        }
        if self.attention.level.role() && self.context != ContextMode::RoleSplit {
            return Err(Error::Config("role-level attention needs role-split context".into()));
        }
        Ok(())
    }

    pub fn current_encoder(&self) -> BlstmParams {
        let input = match self.injection {
            HistoryInjection::Concat => 2 * self.embed_dim,
            HistoryInjection::InitialState => self.embed_dim,
        };
        BlstmParams::new(encoder::CURRENT, input, self.hidden)
    }

    pub fn history_encoder(&self, role: Option<Role>) -> BlstmParams {
        let prefix = match role {
            Some(r) => format!("ctx.{r}"),
            None => "ctx.shared".to_owned(),
        };
        BlstmParams::new(prefix, self.annotation_dim, self.hidden)
    }
}

/// Variant-independent architecture choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub hidden: usize,
    pub attn_hidden: usize,
    #[serde(default)]
    pub injection: HistoryInjection,
    #[serde(default)]
    pub role_time_agg: RoleTimeAgg,
    #[serde(default)]
    pub decay: TimeDecay,
    #[serde(default)]
    pub normalize_time: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            hidden: 128,
            attn_hidden: 64,
            injection: HistoryInjection::Concat,
            role_time_agg: RoleTimeAgg::Min,
            decay: TimeDecay::Reciprocal,
            normalize_time: false,
        }
    }
}

impl ModelOptions {
    pub fn config(&self, v: Variant, featurizer: &Featurizer) -> ModelConfig {
        let mut c = ModelConfig::for_variant(
            v,
            featurizer.embeddings.dim(),
            self.hidden,
            featurizer.labels.len(),
            featurizer.annotations.dim(),
        );
        c.attn_hidden = self.attn_hidden;
        c.injection = self.injection;
        c.attention.role_time_agg = self.role_time_agg;
        c.attention.decay = self.decay;
        c.attention.normalize_time = self.normalize_time;
        c
    }
}

/// Model input prepared from a dialogue context.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<S = f64> {
    pub session_id: String,
    pub turn_index: usize,
    pub speaker: Role,
    /// One embedding per token of the current utterance.
    pub words: Vec<Tensor<S>>,
    pub history: Vec<HistoryFeature<S>>,
    pub targets: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryFeature<S = f64> {
    pub features: Tensor<S>,
    pub role: Role,
    pub distance: usize,
    pub turn_index: usize,
}

/// Turns dialogue contexts into [`Example`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub embeddings: EmbeddingTable,
    pub annotations: AnnotationVocab,
    pub labels: LabelVocab,
}

impl Featurizer {
    /// Vocabularies from the training split.
    pub fn build(train: &[crate::corpus::Session], embeddings: EmbeddingTable) -> Self {
        Featurizer {
            embeddings,
            annotations: AnnotationVocab::build(train),
            labels: LabelVocab::build(train),
        }
    }

    /// History annotations come from the gold labels.
    pub fn example<S: Scalar>(&self, ctx: &DialogueContext<'_>) -> Example<S> {
        self.example_with(ctx, |h| h.labels.iter().cloned().collect())
    }

    /// History annotations come from `history_labels`, e.g. earlier predictions.
    pub fn example_with<S: Scalar>(
        &self,
        ctx: &DialogueContext<'_>,
        history_labels: impl Fn(&crate::corpus::Utterance) -> Vec<String>,
    ) -> Example<S> {
        let mut oov = 0;
        let embed = |w: &str| Tensor::vector(self.embeddings.lookup(w).iter().map(|&v| S::of(v)).collect());
        let mut words: Vec<Tensor<S>> = ctx.current.tokens.iter().map(|w| embed(w)).collect();
        if words.is_empty() {
            words.push(Tensor::vector(self.embeddings.oov().iter().map(|&v| S::of(v)).collect()));
        }
        let history = ctx
            .history
            .iter()
            .map(|h| {
                let labels = history_labels(h.utterance);
                let enc = self.annotations.encode(&labels, &mut oov);
                HistoryFeature {
                    features: Tensor::vector(enc.into_iter().map(|b| S::of(f64::from(b))).collect()),
                    role: h.utterance.speaker,
                    distance: h.distance,
                    turn_index: h.utterance.turn_index,
                }
            })
            .collect();
        Example {
            session_id: ctx.current.session_id.clone(),
            turn_index: ctx.current.turn_index,
            speaker: ctx.current.speaker,
            words,
            history,
            targets: self.labels.targets(&ctx.current.labels, &mut oov),
        }
    }
}

/// Symbolic result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub scores: Var,
    pub v_his: Option<Var>,
    pub v_cur_free: Option<Var>,
    /// Combined weight per history item, keyed by turn index.
    pub sentence_weights: Vec<(usize, f64)>,
    pub role_weights: Option<RoleWeights>,
}

/// Concrete result of a forward pass, detached from its tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub scores: Vec<f64>,
    pub sentence_weights: Vec<(usize, f64)>,
    pub role_weights: Option<RoleWeights>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct Model<S = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
}

pub const ATT_SENTENCE: &str = "att_s";
pub const ATT_ROLE: &str = "att_r";

impl<S: Scalar> Model<S> {
    /// Fresh parameters for `config`. Each parameter draws from its own seed
    /// stream, so parameters shared between variants start identical.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let h2 = 2 * config.hidden;
        config.current_encoder().init(&mut p, seed);
        if config.context != ContextMode::None {
            let proj_out = match config.injection {
                HistoryInjection::Concat => config.embed_dim,
                HistoryInjection::InitialState => config.hidden,
            };
            p.insert_uniform(seed, encoder::HISTORY_PROJ, &[proj_out, h2], 1.0 / (h2 as f64).sqrt());
        }
        match config.context {
            ContextMode::None => {}
            ContextMode::Shared => config.history_encoder(None).init(&mut p, seed),
            ContextMode::RoleSplit => {
                for r in Role::ALL {
                    config.history_encoder(Some(r)).init(&mut p, seed);
                }
            }
        }
        if config.attention.sentence_content() {
            let a = config.annotation_dim;
            p.insert_uniform(seed, &format!("{ATT_SENTENCE}.proj"), &[h2, a], 1.0 / (a as f64).sqrt());
            context::init_scorer(&mut p, seed, ATT_SENTENCE, h2, config.attn_hidden);
        }
        if config.attention.role_content() {
            context::init_scorer(&mut p, seed, ATT_ROLE, h2, config.attn_hidden);
        }
        p.insert_uniform(seed, encoder::HEAD_W, &[config.labels, h2], 1.0 / (h2 as f64).sqrt());
        p.insert(encoder::HEAD_B, Tensor::zeros(&[config.labels]));
        Ok(Model { config, params: p })
    }

    /// Names of the parameters this configuration learns.
    pub fn declared_learnables(config: &ModelConfig) -> Vec<String> {
        let mut names = Vec::new();
        let blstm = |p: BlstmParams, names: &mut Vec<String>| {
            for d in ["fwd", "bwd"] {
                for x in ["w", "b"] {
                    names.push(format!("{}.{d}.{x}", p.prefix));
                }
            }
        };
        blstm(config.current_encoder(), &mut names);
        if config.context != ContextMode::None {
            names.push(encoder::HISTORY_PROJ.into());
        }
        match config.context {
            ContextMode::None => {}
            ContextMode::Shared => blstm(config.history_encoder(None), &mut names),
            ContextMode::RoleSplit => {
                for r in Role::ALL {
                    blstm(config.history_encoder(Some(r)), &mut names);
                }
            }
        }
        let scorer = |prefix: &str, names: &mut Vec<String>| {
            for x in ["w1", "b1", "w2"] {
                names.push(format!("{prefix}.{x}"));
            }
        };
        if config.attention.sentence_content() {
            names.push(format!("{ATT_SENTENCE}.proj"));
            scorer(ATT_SENTENCE, &mut names);
        }
        if config.attention.role_content() {
            scorer(ATT_ROLE, &mut names);
        }
        names.push(encoder::HEAD_W.into());
        names.push(encoder::HEAD_B.into());
        names
    }

    fn embed(g: &mut Graph<S>, ex: &Example<S>) -> Vec<Var> {
        ex.words.iter().map(|w| g.constant(w.clone())).collect()
    }

    /// History summary `v_his` plus the attention weights used to build it.
    /// `None` when there is no context or no usable history.
    pub fn history_summary(
        &self,
        g: &mut Graph<S>,
        ex: &Example<S>,
        words: &[Var],
    ) -> Result<(Option<Var>, Option<Var>, Vec<(usize, f64)>, Option<RoleWeights>)> {
        let cfg = &self.config;
        if cfg.context == ContextMode::None {
            return Ok((None, None, Vec::new(), None));
        }
        let items: Vec<&HistoryFeature<S>> = ex
            .history
            .iter()
            .filter(|h| !cfg.own_role_only || h.role == ex.speaker)
            .collect();
        if items.is_empty() {
            return Ok((None, None, Vec::new(), None));
        }
        let att = &cfg.attention;
        let v_free = if att.content {
            Some(encoder::encode_current(g, cfg.injection, &cfg.current_encoder(), words, None)?)
        } else {
            None
        };
        let feats: Vec<Var> = items.iter().map(|h| g.constant(h.features.clone())).collect();

        // sentence-level weights, one per item
        let content_w = match (att.sentence_content(), v_free) {
            (true, Some(v)) => Some(context::content_attention_sentence(g, ATT_SENTENCE, v, &feats)?),
            _ => None,
        };
        let time_w = if att.sentence_time() {
            let d: Vec<usize> = items.iter().map(|h| h.distance).collect();
            Some(context::sentence_time_weights(&d, att.decay, att.normalize_time)?)
        } else {
            None
        };
        let mut weights: Vec<Option<Var>> = vec![None; items.len()];
        let mut reported = Vec::new();
        if content_w.is_some() || time_w.is_some() {
            for (i, h) in items.iter().enumerate() {
                let w = match (&content_w, &time_w) {
                    (Some(c), Some(t)) => g.tape.scale(c[i], S::of(t[i])),
                    (Some(c), None) => c[i],
                    (None, Some(t)) => g.constant(Tensor::scalar(S::of(t[i]))),
                    (None, None) => unreachable!(),
                };
                reported.push((h.turn_index, g.tape.value(w).item().as_f64()));
                weights[i] = Some(w);
            }
        }

        let (v_his, role_weights) = match cfg.context {
            ContextMode::Shared => {
                let v = context::encode_role_history(g, &cfg.history_encoder(None), &feats, &weights)?;
                (v, None)
            }
            ContextMode::RoleSplit => {
                let mut summaries = [None, None];
                let mut distances: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
                for r in Role::ALL {
                    let idx: Vec<usize> = (0..items.len()).filter(|&i| items[i].role == r).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let f: Vec<Var> = idx.iter().map(|&i| feats[i]).collect();
                    let w: Vec<Option<Var>> = idx.iter().map(|&i| weights[i]).collect();
                    summaries[r.index()] =
                        Some(context::encode_role_history(g, &cfg.history_encoder(Some(r)), &f, &w)?);
                    distances[r.index()] = idx.iter().map(|&i| items[i].distance).collect();
                }
                context::combine_roles(g, summaries, &distances, att, v_free, ATT_ROLE, 2 * cfg.hidden)?
            }
            ContextMode::None => unreachable!(),
        };
        Ok((Some(v_his), v_free, reported, role_weights))
    }

    pub fn forward(&self, g: &mut Graph<S>, ex: &Example<S>) -> Result<Forward> {
        let words = Self::embed(g, ex);
        let (v_his, v_cur_free, sentence_weights, role_weights) = self.history_summary(g, ex, &words)?;
        let v_cur = encoder::encode_current(g, self.config.injection, &self.config.current_encoder(), &words, v_his)?;
        let scores = encoder::predict_scores(g, v_cur)?;
        Ok(Forward {
            scores,
            v_his,
            v_cur_free,
            sentence_weights,
            role_weights,
        })
    }

    pub fn infer(&self, ex: &Example<S>) -> Result<Inference> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, ex)?;
        Ok(Inference {
            scores: g.tape.value(f.scores).data().iter().map(|s| s.as_f64()).collect(),
            sentence_weights: f.sentence_weights,
            role_weights: f.role_weights,
        })
    }

    /// Per-example loss and its parameter gradients.
    pub fn loss_and_grads(&self, ex: &Example<S>) -> Result<(f64, Grads<S>)> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, ex)?;
        let loss = crate::training::bce_loss(&mut g, f.scores, &ex.targets)?;
        g.tape.backward(loss)?;
        Ok((g.tape.value(loss).item().as_f64(), g.grads()))
    }

    /// Per-example loss without gradients.
    pub fn loss(&self, ex: &Example<S>) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, ex)?;
        let loss = crate::training::bce_loss(&mut g, f.scores, &ex.targets)?;
        Ok(g.tape.value(loss).item().as_f64())
    }
}
