//! BLSTM utterance encoder, history-conditioned current encoding and the
//! sigmoid multi-label output head.

use crate::autograd::{Tensor, Var};
use crate::error::{Error, Result};
use crate::model::HistoryInjection;
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;

/// Names and sizes of one bidirectional LSTM.
///
/// Each direction owns `w: [4H, I + H]` acting on `[x_t; h_{t-1}]` and
/// `b: [4H]`; gate rows are ordered input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlstmParams {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl BlstmParams {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        BlstmParams {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    fn name(&self, dir: &str, p: &str) -> String {
        format!("{}.{dir}.{p}", self.prefix)
    }

    /// Weights uniform in `±1/√H`, biases zero except the forget gate at 1.
    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, seed: u64) {
        let h = self.hidden;
        let bound = 1.0 / (h as f64).sqrt();
        for dir in ["fwd", "bwd"] {
            store.insert_uniform(seed, &self.name(dir, "w"), &[4 * h, self.input + h], bound);
            let mut b = vec![S::zero(); 4 * h];
            b[h..2 * h].iter_mut().for_each(|v| *v = S::one());
            store.insert(self.name(dir, "b"), Tensor::vector(b));
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }
}

/// One LSTM step on the fused tape op; returns `(h, c)`.
pub fn lstm_cell<S: Scalar>(
    g: &mut Graph<S>,
    w: Var,
    b: Var,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let out = g.tape.lstm_cell(w, b, x, h, c)?;
    Ok((g.tape.slice(out, 0, hidden)?, g.tape.slice(out, hidden, hidden)?))
}

/// The same step spelled out with elementary ops.
pub fn lstm_cell_composed<S: Scalar>(
    g: &mut Graph<S>,
    w: Var,
    b: Var,
    hidden: usize,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let t = &mut g.tape;
    let xh = t.concat(&[x, h])?;
    let z = t.matmul(w, xh)?;
    let z = t.add(z, b)?;
    let zi = t.slice(z, 0, hidden)?;
    let zf = t.slice(z, hidden, hidden)?;
    let zg = t.slice(z, 2 * hidden, hidden)?;
    let zo = t.slice(z, 3 * hidden, hidden)?;
    let i = t.sigmoid(zi);
    let f = t.sigmoid(zf);
    let cand = t.tanh(zg);
    let o = t.sigmoid(zo);
    let keep = t.mul(f, c)?;
    let write = t.mul(i, cand)?;
    let c = t.add(keep, write)?;
    let squashed = t.tanh(c);
    let h = t.mul(o, squashed)?;
    Ok((h, c))
}

fn run_direction<S: Scalar>(
    g: &mut Graph<S>,
    p: &BlstmParams,
    dir: &str,
    inputs: &[Var],
    h0: Option<Var>,
) -> Result<Var> {
    let w = g.param(&p.name(dir, "w"))?;
    let b = g.param(&p.name(dir, "b"))?;
    let mut h = h0.unwrap_or_else(|| g.zeros(p.hidden));
    let mut c = g.zeros(p.hidden);
    let mut step = |g: &mut Graph<S>, x: Var| -> Result<()> {
        if g.tape.shape(x) != [p.input] {
            return Err(Error::Shape {
                op: "lstm input",
                lhs: g.tape.shape(x).to_vec(),
                rhs: vec![p.input],
            });
        }
        (h, c) = lstm_cell(g, w, b, p.hidden, x, h, c)?;
        Ok(())
    };
    if dir == "fwd" {
        for &x in inputs {
            step(g, x)?;
        }
    } else {
        for &x in inputs.iter().rev() {
            step(g, x)?;
        }
    }
    Ok(h)
}

/// Final forward state concatenated with final backward state, `[2H]`.
/// `h0`, when given, initialises the hidden state of both directions.
pub fn blstm_encode<S: Scalar>(
    g: &mut Graph<S>,
    p: &BlstmParams,
    inputs: &[Var],
    h0: Option<Var>,
) -> Result<Var> {
    if inputs.is_empty() {
        return Err(Error::Empty { op: "blstm_encode" });
    }
    let fwd = run_direction(g, p, "fwd", inputs, h0)?;
    let bwd = run_direction(g, p, "bwd", inputs, h0)?;
    g.tape.concat(&[fwd, bwd])
}

pub const CURRENT: &str = "cur";
pub const HISTORY_PROJ: &str = "his.w";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Encode the current utterance conditioned on the history summary.
///
/// With [`HistoryInjection::Concat`] the projected summary `W_his · v_his`
/// (width `E`) is appended to every word embedding; an absent summary
/// appends zeros, so parameter shapes do not depend on the variant. With
/// [`HistoryInjection::InitialState`] the projection (width `H`) becomes
/// the initial hidden state of both directions.
pub fn encode_current<S: Scalar>(
    g: &mut Graph<S>,
    injection: HistoryInjection,
    cur: &BlstmParams,
    words: &[Var],
    v_his: Option<Var>,
) -> Result<Var> {
    match injection {
        HistoryInjection::Concat => {
            let width = cur.input - g.tape.shape(words.first().copied().ok_or(Error::Empty {
                op: "encode_current",
            })?)[0];
            let proj = match v_his {
                Some(v) => {
                    let w = g.param(HISTORY_PROJ)?;
                    g.tape.matmul(w, v)?
                }
                None => g.zeros(width),
            };
            let inputs = words
                .iter()
                .map(|&x| g.tape.concat(&[x, proj]))
                .collect::<Result<Vec<_>>>()?;
            blstm_encode(g, cur, &inputs, None)
        }
        HistoryInjection::InitialState => {
            let h0 = match v_his {
                Some(v) => {
                    let w = g.param(HISTORY_PROJ)?;
                    Some(g.tape.matmul(w, v)?)
                }
                None => None,
            };
            blstm_encode(g, cur, words, h0)
        }
    }
}

/// `sigmoid(W_SLU · v_cur + b)`.
pub fn predict_scores<S: Scalar>(g: &mut Graph<S>, v_cur: Var) -> Result<Var> {
    let w = g.param(HEAD_W)?;
    let b = g.param(HEAD_B)?;
    let z = g.tape.matmul(w, v_cur)?;
    let z = g.tape.add(z, b)?;
    Ok(g.tape.sigmoid(z))
}

/// Indices whose score is strictly above `theta`.
pub fn decide<S: Scalar>(scores: &[S], theta: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s.as_f64() > theta)
        .map(|(k, _)| k)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn store(seed: u64, p: &BlstmParams) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        p.init(&mut s, seed);
        s
    }

    fn inputs(g: &mut Graph<f64>, xs: &[Vec<f64>]) -> Vec<Var> {
        xs.iter().map(|x| g.constant(Tensor::vector(x.clone()))).collect()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let p = BlstmParams::new("z", 3, 4);
        let mut s = ParamStore::new();
        for dir in ["fwd", "bwd"] {
            s.insert(format!("z.{dir}.w"), Tensor::zeros(&[16, 7]));
            s.insert(format!("z.{dir}.b"), Tensor::zeros(&[16]));
        }
        let mut g = Graph::new(&s);
        let xs = inputs(&mut g, &[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        let out = blstm_encode(&mut g, &p, &xs, None).unwrap();
        assert_eq!(g.tape.value(out).data(), &[0.0; 8]);
    }

    #[test]
    fn length_one_runs_two_independent_cells() {
        let p = BlstmParams::new("l", 3, 2);
        let s = store(1, &p);
        let mut g = Graph::new(&s);
        let xs = inputs(&mut g, &[vec![0.3, -0.1, 0.8]]);
        let out = blstm_encode(&mut g, &p, &xs, None).unwrap();
        let out = g.tape.value(out).clone();
        for (k, dir) in ["fwd", "bwd"].iter().enumerate() {
            let mut g = Graph::new(&s);
            let x = inputs(&mut g, &[vec![0.3, -0.1, 0.8]])[0];
            let w = g.param(&format!("l.{dir}.w")).unwrap();
            let b = g.param(&format!("l.{dir}.b")).unwrap();
            let h = g.zeros(2);
            let c = g.zeros(2);
            let (h, _) = lstm_cell(&mut g, w, b, 2, x, h, c).unwrap();
            assert_eq!(g.tape.value(h).data(), &out.data()[2 * k..2 * k + 2]);
        }
    }

    #[test]
    fn fused_cell_matches_composed_cell() {
        let p = BlstmParams::new("f", 3, 4);
        let mut s = store(5, &p);
        // nonzero biases exercise every gate
        s.insert("f.fwd.b", Tensor::vector((0..16).map(|i| 0.1 * i as f64 - 0.7).collect()));
        let run = |fused: bool| {
            let mut g = Graph::new(&s);
            let w = g.param("f.fwd.w").unwrap();
            let b = g.param("f.fwd.b").unwrap();
            let x = g.tape.leaf(Tensor::vector(vec![0.3, -0.9, 0.5]));
            let h = g.tape.leaf(Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]));
            let c = g.tape.leaf(Tensor::vector(vec![-0.5, 0.6, 0.0, 1.1]));
            let cell = if fused { lstm_cell } else { lstm_cell_composed };
            let (h1, c1) = cell(&mut g, w, b, 4, x, h, c).unwrap();
            let (h2, c2) = cell(&mut g, w, b, 4, x, h1, c1).unwrap();
            let both = g.tape.concat(&[h2, c2]).unwrap();
            let coef = g.constant(Tensor::vector((0..8).map(|i| 1.0 + i as f64 * 0.25).collect()));
            let weighted = g.tape.mul(both, coef).unwrap();
            let loss = g.tape.sum(weighted);
            g.tape.backward(loss).unwrap();
            let val = g.tape.value(both).clone();
            let grads: Vec<Tensor<f64>> = [w, b, x, h, c].iter().map(|&v| g.tape.grad(v).unwrap().clone()).collect();
            (val, grads)
        };
        let (va, ga) = run(true);
        let (vb, gb) = run(false);
        for (a, b) in va.data().iter().zip(vb.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        for (ta, tb) in ga.iter().zip(&gb) {
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert!((a - b).abs() < 1e-13, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let p = BlstmParams::new("e", 3, 2);
        let s = store(1, &p);
        let mut g = Graph::new(&s);
        assert!(matches!(blstm_encode(&mut g, &p, &[], None), Err(Error::Empty { .. })));
    }

    #[test]
    fn decisions() {
        assert_eq!(decide(&[0.7, 0.4, 0.51], 0.5), vec![0, 2]);
        assert!(decide(&[0.7, 0.4, 0.51], 0.9).is_empty());
        assert!(decide(&[0.5, 0.5], 0.5).is_empty());
    }

    #[test]
    fn zero_head_scores_one_half() {
        let mut s = ParamStore::<f64>::new();
        s.insert(HEAD_W, Tensor::zeros(&[3, 4]));
        s.insert(HEAD_B, Tensor::zeros(&[3]));
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let scores = predict_scores(&mut g, v).unwrap();
        assert_eq!(g.tape.value(scores).data(), &[0.5; 3]);
        assert!(decide(g.tape.value(scores).data(), 0.5).is_empty());
    }

    proptest! {
        #[test]
        fn output_is_2h_and_order_sensitive(seed in 0u64..1000, len in 2usize..6) {
            let p = BlstmParams::new("p", 3, 4);
            let s = store(seed, &p);
            let xs: Vec<Vec<f64>> = (0..len).map(|i| vec![i as f64 * 0.3 - 0.5, (i * i) as f64 * 0.1, 1.0 - i as f64 * 0.2]).collect();
            let mut rev = xs.clone();
            rev.reverse();
            let mut g = Graph::new(&s);
            let a = inputs(&mut g, &xs);
            let b = inputs(&mut g, &rev);
            let oa = blstm_encode(&mut g, &p, &a, None).unwrap();
            let ob = blstm_encode(&mut g, &p, &b, None).unwrap();
            prop_assert_eq!(g.tape.shape(oa), &[8]);
            prop_assert_ne!(g.tape.value(oa), g.tape.value(ob));
        }

        #[test]
        fn raising_theta_never_adds_labels(scores in proptest::collection::vec(0.0f64..1.0, 1..10), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = decide(&scores, lo);
            let b = decide(&scores, hi);
            prop_assert!(b.iter().all(|k| a.contains(k)));
        }
    }
}
