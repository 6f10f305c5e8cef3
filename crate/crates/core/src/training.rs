//! Binary cross-entropy objective, Adam, and the mini-batch training loop
//! with dev-set threshold tuning.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::corpus::{contexts, Role, Session, Window};
use crate::error::{Error, Result};
use crate::evaluation::{self, F1Mode, HistorySource};
use crate::model::{Example, Featurizer, Model, ModelConfig};
use crate::params::{Grads, Graph, ParamStore};
use crate::rng;
use crate::scalar::Scalar;

pub const CLAMP: f64 = 1e-12;

/// `-Σ_k [q_k ln p_k + (1 - q_k) ln(1 - p_k)]` with `p` clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn bce_loss<S: Scalar>(g: &mut Graph<S>, scores: Var, targets: &[u8]) -> Result<Var> {
    let k = g.tape.shape(scores).to_vec();
    if k != [targets.len()] {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: k,
            rhs: vec![targets.len()],
        });
    }
    let p = g.tape.clamp(scores, S::of(CLAMP), S::of(1.0 - CLAMP));
    let q = g.constant(Tensor::vector(targets.iter().map(|&t| S::of(f64::from(t))).collect()));
    let not_q = g.constant(Tensor::vector(targets.iter().map(|&t| S::of(1.0 - f64::from(t))).collect()));
    let ones = g.constant(Tensor::full(&[targets.len()], S::one()));
    let log_p = g.tape.log(p)?;
    let one_minus = g.tape.sub(ones, p)?;
    let log_not_p = g.tape.log(one_minus)?;
    let a = g.tape.mul(q, log_p)?;
    let b = g.tape.mul(not_q, log_not_p)?;
    let ll = g.tape.add(a, b)?;
    let total = g.tape.sum(ll);
    Ok(g.tape.scale(total, -S::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub window: Window,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub f1_mode: F1Mode,
    /// Train and tune only on utterances by this role (tourist or guide
    /// understanding as a task of its own). History still covers both roles.
    pub task: Option<Role>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 30,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 1,
            window: Window::All,
            clip_norm: None,
            f1_mode: F1Mode::Macro,
            task: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("{what} out of range")));
        if self.batch_size == 0 {
            return bad("batch size");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning rate");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam beta");
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip norm");
        }
        Ok(())
    }
}

/// Adam moments per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: Deserialize<'de>"))]
pub struct OptimizerState<S = f64> {
    pub m: IndexMap<String, Tensor<S>>,
    pub v: IndexMap<String, Tensor<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: IndexMap<String, Tensor<S>> = params
            .iter()
            .map(|(n, t)| (n.to_owned(), Tensor::zeros(t.shape())))
            .collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters missing from `grads` are
/// treated as having a zero gradient.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &Grads<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::of(lr), S::of(cfg.epsilon));
    for (name, p) in params.iter_mut() {
        let m = state.m.get_mut(name).ok_or_else(|| Error::Config(format!("no moments for `{name}`")))?;
        let v = state.v.get_mut(name).expect("m and v share keys");
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let gd = g.map(Tensor::data);
        for i in 0..p.len() {
            let gi = gd.map_or(S::zero(), |d| d[i]);
            let mi = &mut m.data_mut()[i];
            *mi = b1 * *mi + (S::one() - b1) * gi;
            let vi = &mut v.data_mut()[i];
            *vi = b2 * *vi + (S::one() - b2) * gi * gi;
            let m_hat = m.data()[i] / c1;
            let v_hat = v.data()[i] / c2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean loss and gradients over `batch`. Examples run in parallel; their
/// gradients are summed in example order, so the result does not depend on
/// the number of threads.
pub fn batch_gradients<S: Scalar>(model: &Model<S>, batch: &[&Example<S>]) -> Result<(f64, Grads<S>)> {
    let per: Vec<(f64, Grads<S>)> = batch
        .par_iter()
        .map(|ex| model.loss_and_grads(ex))
        .collect::<Result<_>>()?;
    let n = S::of(batch.len() as f64);
    let mut total = 0.0;
    let mut sum: Grads<S> = IndexMap::new();
    for (loss, grads) in per {
        total += loss;
        for (name, g) in grads {
            match sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    sum.insert(name, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    // canonical parameter order
    let ordered = model
        .params
        .names()
        .filter_map(|n| sum.swap_remove(n).map(|g| (n.to_owned(), g)))
        .collect();
    Ok((total / batch.len() as f64, ordered))
}

fn clip<S: Scalar>(grads: &mut Grads<S>, max_norm: f64) {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = S::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Mean per-example loss over `examples`.
pub fn mean_loss<S: Scalar>(model: &Model<S>, examples: &[Example<S>]) -> Result<f64> {
    let losses: Vec<f64> = examples.par_iter().map(|ex| model.loss(ex)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_f1_tourist: Option<f64>,
    pub dev_f1_guide: Option<f64>,
    pub dev_f1_all: f64,
    pub theta: f64,
}

pub struct Trained<S = f64> {
    pub checkpoint: Checkpoint<S>,
    pub metrics: Vec<EpochMetrics>,
}

pub fn examples<S: Scalar>(featurizer: &Featurizer, sessions: &[Session], window: Window) -> Vec<Example<S>> {
    contexts(sessions, window).iter().map(|c| featurizer.example(c)).collect()
}

/// Train a fresh model for exactly `cfg.epochs` epochs. After every epoch
/// the threshold is tuned on `dev`; the checkpoint keeps the last one.
pub fn train<S: Scalar>(
    featurizer: &Featurizer,
    config: ModelConfig,
    train: &[Session],
    dev: &[Session],
    cfg: &TrainConfig,
) -> Result<Trained<S>> {
    cfg.validate()?;
    let model = Model::<S>::init(config, cfg.seed)?;
    train_model(featurizer, model, train, dev, cfg, |_| {})
}

/// Continue training `model`; `on_epoch` sees each epoch's metrics.
pub fn train_model<S: Scalar>(
    featurizer: &Featurizer,
    mut model: Model<S>,
    train: &[Session],
    dev: &[Session],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Trained<S>> {
    cfg.validate()?;
    let mut train_ex = examples::<S>(featurizer, train, cfg.window);
    if let Some(r) = cfg.task {
        train_ex.retain(|e| e.speaker == r);
    }
    if train_ex.is_empty() {
        return Err(Error::Empty { op: "train" });
    }
    if dev.iter().all(|s| s.is_empty()) {
        return Err(Error::Empty { op: "dev split" });
    }
    let mut state = OptimizerState::new(&model.params);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "shuffle");
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut theta = 0.5;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example<S>> = chunk.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grads) = batch_gradients(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            loss_sum += loss * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam_step(&mut model.params, &grads, &mut state, cfg.learning_rate, cfg)?;
        }
        let mut records =
            evaluation::predict_sessions(&model, featurizer, 0.5, cfg.window, dev, HistorySource::Gold)?;
        if let Some(r) = cfg.task {
            records.retain(|x| x.speaker == r);
        }
        let (t, f1) = evaluation::tune_theta(&mut records, featurizer, cfg.f1_mode)?;
        theta = t;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_ex.len() as f64,
            dev_f1_tourist: f1.tourist,
            dev_f1_guide: f1.guide,
            dev_f1_all: f1.all,
            theta,
        };
        log::info!(
            "epoch {epoch}: train loss {:.5}, dev F1 {:.2}, theta {theta:.2}",
            m.train_loss,
            m.dev_f1_all
        );
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(Trained {
        checkpoint: Checkpoint::new(model, featurizer.clone(), theta, cfg.clone()),
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EmbeddingTable, Role, Utterance};
    use crate::model::{ModelOptions, Variant};

    fn loss_of(scores: &[f64], targets: &[u8]) -> f64 {
        let p = ParamStore::<f64>::new();
        let mut g = Graph::new(&p);
        let s = g.constant(Tensor::vector(scores.to_vec()));
        let l = bce_loss(&mut g, s, targets).unwrap();
        g.tape.value(l).item()
    }

    #[test]
    fn loss_examples() {
        assert!(loss_of(&[1.0, 0.0, 1.0], &[1, 0, 1]) <= 1e-10);
        assert!((loss_of(&[0.5; 4], &[1, 0, 0, 1]) - 4.0 * 2f64.ln()).abs() < 1e-12);
        assert!((loss_of(&[0.5; 4], &[0, 0, 0, 0]) - 4.0 * 2f64.ln()).abs() < 1e-12);
        let expected = -(0.9f64.ln() + 0.8f64.ln());
        assert!((loss_of(&[0.9, 0.2], &[1, 0]) - expected).abs() < 1e-12);
        assert!((expected - 0.3285).abs() < 1e-4);
        // clamped, not infinite
        assert!(loss_of(&[0.0], &[1]).is_finite());
    }

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::vector(vec![v]));
        p.insert("b", Tensor::vector(vec![v]));
        p
    }

    fn grads(a: f64, b: f64) -> Grads<f64> {
        [("a".to_owned(), Tensor::vector(vec![a])), ("b".to_owned(), Tensor::vector(vec![b]))]
            .into_iter()
            .collect()
    }

    #[test]
    fn adam_first_step() {
        let cfg = TrainConfig::default();
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &grads(1.0, 1.0), &mut st, 0.1, &cfg).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p.expect("a").unwrap().item() - expected).abs() < 1e-15);
        // equal gradients, identical updates
        assert_eq!(p.expect("a").unwrap(), p.expect("b").unwrap());
    }

    #[test]
    fn adam_zero_gradient() {
        let cfg = TrainConfig::default();
        let mut p = single(0.3);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &grads(0.0, 0.0), &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.expect("a").unwrap().item(), 0.3);
        assert_eq!(st.step, 1);

        // once moments are nonzero, a zero gradient lets them decay
        adam_step(&mut p, &grads(1.0, 1.0), &mut st, 0.1, &cfg).unwrap();
        let m = st.m["a"].item();
        adam_step(&mut p, &grads(0.0, 0.0), &mut st, 0.1, &cfg).unwrap();
        assert!((st.m["a"].item() - 0.9 * m).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_nan() {
        let cfg = TrainConfig::default();
        let mut p = single(0.3);
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &grads(0.0, f64::NAN), &mut st, 0.1, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "b"));
    }

    fn toy() -> (Vec<Session>, Featurizer) {
        let mk = |id: &str| Session {
            id: id.into(),
            utterances: vec![
                Utterance::new(id, 0, Role::Guide, "hello how can i help", ["FOL_OPENING"]),
                Utterance::new(id, 1, Role::Tourist, "i want food", ["QST_FOOD"]),
                Utterance::new(id, 2, Role::Guide, "try the noodles", ["RES_FOOD", "FOL_INFO"]),
                Utterance::new(id, 3, Role::Tourist, "thanks", ["FOL_THANK"]),
                Utterance::new(id, 4, Role::Guide, "bye", ["FOL_CLOSING"]),
            ],
        };
        let sessions = vec![mk("a"), mk("b")];
        let emb = EmbeddingTable::random(&crate::corpus::word_set(&sessions), 6, 3);
        let f = Featurizer::build(&sessions, emb);
        (sessions, f)
    }

    fn small_cfg() -> (ModelOptions, TrainConfig) {
        let opts = ModelOptions {
            hidden: 4,
            attn_hidden: 5,
            ..ModelOptions::default()
        };
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 1,
            learning_rate: 0.01,
            seed: 11,
            ..TrainConfig::default()
        };
        (opts, cfg)
    }

    #[test]
    fn one_epoch_lowers_training_loss() {
        let (sessions, f) = toy();
        let (opts, cfg) = small_cfg();
        let config = opts.config(Variant::N, &f);
        let before = Model::<f64>::init(config.clone(), cfg.seed).unwrap();
        let ex = examples::<f64>(&f, &sessions, cfg.window);
        let trained = train::<f64>(&f, config, &sessions, &sessions, &cfg).unwrap();
        assert!(mean_loss(&trained.checkpoint.model, &ex).unwrap() < mean_loss(&before, &ex).unwrap());
        assert_eq!(trained.metrics.len(), 1);
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let (sessions, f) = toy();
        let (opts, mut cfg) = small_cfg();
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        let config = opts.config(Variant::H, &f);
        let init = Model::<f64>::init(config.clone(), cfg.seed).unwrap();
        let trained = train::<f64>(&f, config, &sessions, &sessions, &cfg).unwrap();
        assert_eq!(trained.checkpoint.model.params, init.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (sessions, f) = toy();
        let (opts, mut cfg) = small_cfg();
        cfg.epochs = 2;
        let config = opts.config(Variant::K, &f);
        let a = train::<f64>(&f, config.clone(), &sessions, &sessions, &cfg).unwrap();
        let b = train::<f64>(&f, config, &sessions, &sessions, &cfg).unwrap();
        assert_eq!(a.checkpoint.to_json().unwrap(), b.checkpoint.to_json().unwrap());
        assert_eq!(a.metrics, b.metrics);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = grads(3.0, 4.0);
        clip(&mut g, 1.0);
        assert!((g["a"].item() - 0.6).abs() < 1e-15 && (g["b"].item() - 0.8).abs() < 1e-15);
    }
}
