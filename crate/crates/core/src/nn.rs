//! Parameter storage and the basic layers: linear, embedding, LSTM cell.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Half-width of the uniform initializer.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Replaces every tensor with one of the same name and shape from `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(Error::dim("load_params", t.shape(), src.shape()));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Parameter leaves of one tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Uses externally created leaves, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients for every parameter, in store order.
    pub fn collect(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.get(*v).clone()).collect()
    }
}

/// `x·W + b` for a vector `x` or a matrix whose rows are inputs.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    if tape.shape(xw).len() == 2 {
        tape.add_row(xw, b)
    } else {
        tape.add(xw, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], range, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            Tensor::uniform(&[out_dim], range, rng),
        );
        Linear {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        linear(tape, x, p.var(self.weight), p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embedding {
    pub vocab_size: usize,
    pub dim: usize,
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let table = store.add(
            format!("{name}.table"),
            Tensor::uniform(&[vocab_size, dim], range, rng),
        );
        Embedding {
            vocab_size,
            dim,
            table,
        }
    }

    /// Row `token` of the table; same value as `onehot(token)·table`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, token: usize) -> Result<Var> {
        if token >= self.vocab_size {
            return Err(Error::Lookup {
                index: token,
                len: self.vocab_size,
            });
        }
        tape.row(p.var(self.table), token)
    }
}

/// Gate order inside [`LstmCell`].
const GATES: [&str; 4] = ["input", "forget", "output", "candidate"];

/// Standard LSTM cell without peepholes.
///
/// Every gate has its own `(input_dim + hidden_dim) × hidden_dim` matrix applied
/// to `[x, h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub weights: [ParamId; 4],
    pub biases: [ParamId; 4],
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let mut weights = [ParamId(0); 4];
        let mut biases = [ParamId(0); 4];
        for (g, gate) in GATES.iter().enumerate() {
            weights[g] = store.add(
                format!("{name}.{gate}.weight"),
                Tensor::uniform(&[input_dim + hidden_dim, hidden_dim], range, rng),
            );
            let bias = if *gate == "forget" {
                Tensor::filled(&[hidden_dim], 1.0)
            } else {
                Tensor::uniform(&[hidden_dim], range, rng)
            };
            biases[g] = store.add(format!("{name}.{gate}.bias"), bias);
        }
        LstmCell {
            input_dim,
            hidden_dim,
            weights,
            biases,
        }
    }

    /// One step: returns `(h', m')`.
    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var, m: Var) -> Result<(Var, Var)> {
        if tape.shape(x) != [self.input_dim] {
            return Err(Error::dim("lstm_step", tape.shape(x), &[self.input_dim]));
        }
        for v in [h, m] {
            if tape.shape(v) != [self.hidden_dim] {
                return Err(Error::dim("lstm_step", tape.shape(v), &[self.hidden_dim]));
            }
        }
        let xh = tape.concat(&[x, h])?;
        let mut pre = [xh; 4];
        for g in 0..4 {
            pre[g] = linear(tape, xh, p.var(self.weights[g]), p.var(self.biases[g]))?;
        }
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let g = tape.tanh(pre[3]);
        let keep = tape.mul(f, m)?;
        let write = tape.mul(i, g)?;
        let m_next = tape.add(keep, write)?;
        let squashed = tape.tanh(m_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, m_next))
    }
}
