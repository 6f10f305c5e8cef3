//! Flag/config-file merging and the fully resolved run configuration.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use ctxslu::corpus::{self, EmbeddingTable, Session, Window};
use ctxslu::evaluation::F1Mode;
use ctxslu::model::{
    AttentionConfig, AttentionLevel, ContextMode, Featurizer, HistoryInjection, ModelConfig, ModelOptions,
    RoleTimeAgg, TimeDecay, Variant,
};
use ctxslu::training::TrainConfig;
use ctxslu::Error;

/// Corpus, model and optimisation flags shared by `train` and `ablate`.
/// Every field may also come from the `--config` TOML file (same names,
/// kebab-case); flags win.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunFlags {
    /// TOML file with defaults for any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Hidden size of every recurrent layer [default: 128].
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Hidden width of the attention scoring networks [default: 64].
    #[arg(long)]
    pub attn_hidden: Option<usize>,
    /// Dimension of random embeddings when no embedding file is given [default: 200].
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Text embedding file, `word v1 ... vD` per line.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// [default: 256]
    #[arg(long)]
    pub batch: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Run seed [default: 1].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of preceding utterances kept, or `all`.
    #[arg(long)]
    pub window: Option<String>,
    /// Role-level time weight: min | avg | literal-min.
    #[arg(long)]
    pub role_time_agg: Option<String>,
    /// Where the history summary enters: concat | initial-state.
    #[arg(long)]
    pub injection: Option<String>,
    /// Use `exp(-rate (d - 1))` instead of `1 / d` for time weights.
    #[arg(long)]
    pub decay_rate: Option<f64>,
    /// Renormalise time weights to sum to one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize_time: Option<bool>,
    /// Clip the batch gradient to this global L2 norm.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Utterance pooling for F1: macro | micro.
    #[arg(long)]
    pub f1: Option<String>,
    /// Variant id (c..n) or name, e.g. `time-sentence` [default: i].
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_context: Option<bool>,
    /// none | shared | role-split.
    #[arg(long)]
    pub context: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub content_attention: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub time_attention: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub sentence_attention: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub role_attention: Option<bool>,
    /// Restrict history to the current speaker's role.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub own_role_only: Option<bool>,
    /// Train on one role's utterances only: tourist | guide (train).
    #[arg(long)]
    pub task: Option<String>,
    /// One model per speaker role, each scoring its own role's utterances (ablate).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_role_tasks: Option<bool>,
}

macro_rules! merge {
    ($flags:expr, $file:expr; $($f:ident),*) => {{
        let mut out = $flags.clone();
        $(if out.$f.is_none() { out.$f = $file.$f.clone(); })*
        out
    }};
}

impl RunFlags {
    /// Fill unset flags from the `--config` file, if any.
    pub fn resolve_file(&self) -> Result<RunFlags> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: RunFlags = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        Ok(self.or(&file))
    }

    pub fn or(&self, file: &RunFlags) -> RunFlags {
        merge!(self, file; train, dev, test, hidden, attn_hidden, embed_dim, embeddings, batch, epochs, lr,
            seed, window, role_time_agg, injection, decay_rate, normalize_time, clip_norm, f1, variant,
            no_context, context, content_attention, time_attention, sentence_attention, role_attention,
            own_role_only, task, per_role_tasks)
    }

    pub fn granular(&self) -> bool {
        self.no_context.is_some()
            || self.context.is_some()
            || self.content_attention.is_some()
            || self.time_attention.is_some()
            || self.sentence_attention.is_some()
            || self.role_attention.is_some()
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Context mode and attention chosen by the architecture flags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Arch {
    pub context: ContextMode,
    pub content: bool,
    pub time: bool,
    pub level: AttentionLevel,
    pub own_role_only: bool,
}

impl Arch {
    pub fn of_variant(v: Variant) -> Arch {
        let a = v.attention();
        Arch {
            context: v.context_mode(),
            content: a.content,
            time: a.time,
            level: a.level,
            own_role_only: false,
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|&v| {
            let a = Arch::of_variant(v);
            a.context == self.context && a.content == self.content && a.time == self.time && a.level == self.level
        })
    }
}

/// The default architecture when no flag picks one.
pub const DEFAULT_VARIANT: Variant = Variant::I;

pub fn resolve_arch(f: &RunFlags) -> Result<Arch> {
    let own_role_only = f.own_role_only.unwrap_or(false);
    if let Some(v) = &f.variant {
        if f.granular() {
            bail!(usage("--variant cannot be combined with context or attention switches"));
        }
        let v: Variant = v.parse()?;
        return Ok(Arch {
            own_role_only,
            ..Arch::of_variant(v)
        });
    }
    if !f.granular() {
        return Ok(Arch {
            own_role_only,
            ..Arch::of_variant(DEFAULT_VARIANT)
        });
    }
    let content = f.content_attention.unwrap_or(false);
    let time = f.time_attention.unwrap_or(false);
    let sentence = f.sentence_attention.unwrap_or(false);
    let role = f.role_attention.unwrap_or(false);
    let context = match (f.no_context.unwrap_or(false), f.context.as_deref()) {
        (true, Some(c)) if c != "none" => bail!(usage(format!("--no-context conflicts with --context {c}"))),
        (true, _) | (false, Some("none")) => ContextMode::None,
        (false, Some("shared")) => ContextMode::Shared,
        (false, Some("role-split")) | (false, None) => ContextMode::RoleSplit,
        (false, Some(c)) => bail!(usage(format!("unknown context mode `{c}`"))),
    };
    if context == ContextMode::None && (content || time || sentence || role) {
        bail!(usage("attention switches need context; drop --no-context or the attention flags"));
    }
    let level = match (sentence, role) {
        (false, false) => AttentionLevel::None,
        (true, false) => AttentionLevel::Sentence,
        (false, true) => AttentionLevel::Role,
        (true, true) => AttentionLevel::Both,
    };
    if (level == AttentionLevel::None) != (!content && !time) {
        bail!(usage(
            "pick an attention type (--content-attention/--time-attention) together with a level (--sentence-attention/--role-attention)"
        ));
    }
    Ok(Arch {
        context,
        content,
        time,
        level,
        own_role_only,
    })
}

/// Hyperparameters after defaults are applied.
#[derive(Clone, Debug, Serialize)]
pub struct Hyper {
    pub options: ModelOptions,
    pub embed_dim: usize,
    pub embeddings: Option<PathBuf>,
    pub train: TrainConfig,
}

pub fn resolve_hyper(f: &RunFlags) -> Result<Hyper> {
    let d = TrainConfig::default();
    let m = ModelOptions::default();
    let window: Window = match &f.window {
        Some(w) => w.parse()?,
        None => Window::All,
    };
    let role_time_agg: RoleTimeAgg = match &f.role_time_agg {
        Some(s) => s.parse()?,
        None => RoleTimeAgg::Min,
    };
    let injection = match f.injection.as_deref() {
        None | Some("concat") => HistoryInjection::Concat,
        Some("initial-state") => HistoryInjection::InitialState,
        Some(s) => bail!(usage(format!("unknown injection `{s}`"))),
    };
    let f1_mode: F1Mode = match &f.f1 {
        Some(s) => s.parse()?,
        None => F1Mode::Macro,
    };
    let train = TrainConfig {
        batch_size: f.batch.unwrap_or(d.batch_size),
        epochs: f.epochs.unwrap_or(d.epochs),
        learning_rate: f.lr.unwrap_or(d.learning_rate),
        seed: f.seed.unwrap_or(d.seed),
        window,
        clip_norm: f.clip_norm,
        f1_mode,
        task: f.task.as_deref().map(str::parse).transpose()?,
        ..d
    };
    train.validate()?;
    let embed_dim = f.embed_dim.unwrap_or(200);
    if embed_dim == 0 {
        bail!(usage("--embed-dim must be positive"));
    }
    Ok(Hyper {
        options: ModelOptions {
            hidden: f.hidden.unwrap_or(m.hidden),
            attn_hidden: f.attn_hidden.unwrap_or(m.attn_hidden),
            injection,
            role_time_agg,
            decay: match f.decay_rate {
                Some(rate) => TimeDecay::Exponential { rate },
                None => TimeDecay::Reciprocal,
            },
            normalize_time: f.normalize_time.unwrap_or(false),
        },
        embed_dim,
        embeddings: f.embeddings.clone(),
        train,
    })
}

/// Embedding table for the words of `corpora`: from the file if given,
/// else random with the run seed.
pub fn embeddings(h: &Hyper, corpora: &[&[Session]]) -> Result<EmbeddingTable> {
    let mut vocab = std::collections::BTreeSet::new();
    for c in corpora {
        vocab.extend(corpus::word_set(c));
    }
    Ok(match &h.embeddings {
        Some(p) => EmbeddingTable::load(p, &vocab)?,
        None => EmbeddingTable::random(&vocab, h.embed_dim, h.train.seed),
    })
}

pub fn model_config(arch: &Arch, h: &Hyper, f: &Featurizer) -> Result<ModelConfig> {
    let mut c = h.options.config(Variant::C, f);
    c.context = arch.context;
    c.attention = AttentionConfig {
        content: arch.content,
        time: arch.time,
        level: arch.level,
        ..c.attention
    };
    c.own_role_only = arch.own_role_only;
    c.validate()?;
    Ok(c)
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| usage(format!("bad {what} `{x}`"))))
        .collect()
}
