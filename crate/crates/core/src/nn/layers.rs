//! Parameterized building blocks. Each layer registers its tensors in a
//! [`ParamStore`] at construction and replays them onto a [`Tape`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Xavier-uniform weight `[out, inp]`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inp + out) as f64).sqrt();
        let w = (0..inp * out).map(|_| rng.random_range(-limit..=limit)).collect();
        Self::from_parts(store, name, Tensor::new(vec![out, inp], w).expect("sized"), inp, out)
    }

    /// Both weight and bias start at zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, inp: usize, out: usize) -> Self {
        Self::from_parts(store, name, Tensor::zeros(vec![out, inp]), inp, out)
    }

    fn from_parts(store: &mut ParamStore, name: &str, weight: Tensor, inp: usize, out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), weight);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out]));
        Linear { weight, bias, inp, out }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::new(vec![dim], vec![1.0; dim]).expect("sized"),
        );
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![dim]));
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    /// Entries drawn from `N(0, std^2)`.
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..vocab * dim).map(|_| normal.sample(rng)).collect();
        let table = store.add(
            format!("{name}.table"),
            Tensor::new(vec![vocab, dim], data).expect("sized"),
        );
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.embedding(t, ids)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// `query` is `[batch * t, dim]`, `memory` is `[batch * s, dim]`.
    pub fn forward(&self, tape: &mut Tape, query: Var, memory: Var, batch: usize, causal: bool) -> Result<Var> {
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, memory)?;
        let v = self.v.forward(tape, memory)?;
        let a = tape.attention(q, k, v, batch, self.heads, causal)?;
        self.o.forward(tape, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout);
        self.down.forward(tape, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn input(rows: usize, cols: usize, salt: f64) -> Tensor {
        let data = (0..rows * cols).map(|i| ((i as f64 + salt) * 0.731).sin()).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn xavier_bounds_and_zero_bias() {
        let mut store = ParamStore::new();
        let l = Linear::new(&mut store, "l", 10, 6, &mut rng());
        let limit = (6.0f64 / 16.0).sqrt();
        assert!(store.get(l.weight).data().iter().all(|w| w.abs() <= limit));
        assert!(store.get(l.bias).data().iter().all(|&b| b == 0.0));
        assert_eq!(store.get(l.weight).shape(), &[6, 10]);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let l1 = Linear::new(&mut store, "l1", 4, 5, &mut r);
        let l2 = Linear::new(&mut store, "l2", 5, 1, &mut r);
        let x = input(3, 4, 0.0);
        let report = check_gradients(&store, 1e-5, None, |tape| {
            let xv = tape.constant(x.clone());
            let h = l1.forward(tape, xv)?;
            let h = tape.sigmoid(h);
            let z = l2.forward(tape, h)?;
            tape.bce_with_logits(z, &[1.0, 0.0, 1.0])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn layer_norm_and_embedding_gradients() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let emb = Embedding::new(&mut store, "e", 6, 4, 0.5, &mut r);
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let head = Linear::new(&mut store, "h", 4, 6, &mut r);
        // perturb gamma and beta away from their trivial initial values
        store
            .get_mut(ln.gamma)
            .data_mut()
            .copy_from_slice(&[1.2, 0.7, -0.4, 1.0]);
        store
            .get_mut(ln.beta)
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let report = check_gradients(&store, 1e-5, None, |tape| {
            let x = emb.forward(tape, &[1, 3, 3, 5])?;
            let x = ln.forward(tape, x)?;
            let z = head.forward(tape, x)?;
            tape.cross_entropy(z, &[0, 2, 4, 1], &[true, true, false, true])
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let self_attn = MultiHeadAttention::new(&mut store, "sa", 4, 2, &mut r);
        let cross = MultiHeadAttention::new(&mut store, "ca", 4, 2, &mut r);
        let ff = FeedForward::new(&mut store, "ff", 4, 8, &mut r);
        let x = input(6, 4, 1.0);
        let mem = input(2, 4, 9.0);
        let report = check_gradients(&store, 1e-5, None, |tape| {
            let xv = tape.constant(x.clone());
            let mv = tape.constant(mem.clone());
            let h = self_attn.forward(tape, xv, xv, 2, true)?;
            let h = cross.forward(tape, h, mv, 2, false)?;
            let h = ff.forward(tape, h, 0.0)?;
            let s = tape.softmax(h)?;
            let w = tape.constant(input(6, 4, 4.0));
            let p = tape.mul(s, w)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn causal_attention_ignores_future_positions() {
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng());
        let base = input(5, 4, 0.0);
        let mut changed = base.clone();
        changed.data_mut()[16..].iter_mut().for_each(|x| *x += 3.0);
        let run = |t: &Tensor| {
            let mut tape = Tape::eval(&store);
            let x = tape.constant(t.clone());
            let y = attn.forward(&mut tape, x, x, 1, true).unwrap();
            tape.value(y).to_vec()
        };
        let (a, b) = (run(&base), run(&changed));
        assert_eq!(&a[..16], &b[..16]);
        assert_ne!(&a[16..], &b[16..]);
    }
}
