//! Two-layer attention decoder with base, recurrent and adaptive attention.
//!
//! One [`Session`] encodes a single image on a [`Tape`] and then runs decoding
//! steps against it. Every step is
//!
//! 1. the input LSTM over `[embed(token), ā + c_{t−1}]`,
//! 2. the attention module, which depending on [`Mode`] takes one step with
//!    the input hidden state as query, a fixed `m_r` steps, or an adaptive
//!    number decided by the halting kernel,
//! 3. a softmax over the vocabulary from the context vector `c_t`.
//!
//! The three modes share one parameter layout, so a parameter set trained in
//! any mode can be evaluated in any other.

use crate::attention::{Attention, AttentionConfig, AttentionKind, PreparedFeatures};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::halting::{Halting, HaltingConfig, DEFAULT_EPSILON};
use crate::nn::{Bound, Embedding, Linear, LstmCell, ParamId, ParamStore, INIT_RANGE};
use crate::tensor::Tensor;
use crate::trace::{HaltingTrace, StepTrace};
use crate::vocab::{BOS, EOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Probability floor inside the cross-entropy logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Base,
    Recurrent,
    Adaptive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Mode::Base),
            "recurrent" => Ok(Mode::Recurrent),
            "adaptive" => Ok(Mode::Adaptive),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Base => "base",
            Mode::Recurrent => "recurrent",
            Mode::Adaptive => "adaptive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden, embedding and projected-feature size.
    pub d: usize,
    /// Raw feature dimension.
    pub d_a: usize,
    pub vocab_size: usize,
    pub attention: AttentionConfig,
    pub mode: Mode,
    pub m_r: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub epsilon: f64,
    pub lambda: f64,
    /// Layer-normalize every adaptive attention step.
    pub layer_norm: bool,
    /// Weights and non-forget biases start uniform in `±init_range`.
    #[serde(default = "default_init_range")]
    pub init_range: f64,
}

fn default_init_range() -> f64 {
    INIT_RANGE
}

impl ModelConfig {
    /// Defaults: single-head additive attention, `m_r = 1` for base and 4 for
    /// recurrent, `m_min = 0`, `m_max = 4`, ε = 1e-4, λ = 1e-4.
    pub fn new(mode: Mode, d: usize, d_a: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d,
            d_a,
            vocab_size,
            attention: AttentionConfig {
                kind: AttentionKind::Additive,
                heads: 1,
                query_dim: d,
                key_dim: d,
                value_dim: d,
            },
            mode,
            m_r: if mode == Mode::Recurrent { 4 } else { 1 },
            m_min: 0,
            m_max: 4,
            epsilon: DEFAULT_EPSILON,
            lambda: 1e-4,
            layer_norm: true,
            init_range: INIT_RANGE,
        }
    }

    pub fn with_attention(mut self, kind: AttentionKind, heads: usize) -> Self {
        self.attention.kind = kind;
        self.attention.heads = heads;
        self
    }

    pub fn halting(&self) -> HaltingConfig {
        HaltingConfig {
            epsilon: self.epsilon,
            m_min: self.m_min,
            m_max: self.m_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::config("d must be at least 2"));
        }
        if self.d_a == 0 {
            return Err(Error::config("d_a must be positive"));
        }
        if self.vocab_size < 3 {
            return Err(Error::config("vocabulary needs BOS, EOS and one word"));
        }
        let a = &self.attention;
        if a.query_dim != self.d || a.key_dim != self.d || a.value_dim != self.d {
            return Err(Error::config("attention dimensions must all equal d"));
        }
        a.validate()?;
        match self.mode {
            Mode::Base if self.m_r != 1 => {
                return Err(Error::config(format!("base mode needs m_r = 1, got {}", self.m_r)))
            }
            Mode::Recurrent if self.m_r == 0 => {
                return Err(Error::config("recurrent mode needs m_r >= 1"))
            }
            _ => {}
        }
        self.halting().validate()?;
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return Err(Error::config(format!(
                "init_range must be positive, got {}",
                self.init_range
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layers {
    feature_proj: Linear,
    embed: Embedding,
    lstm1: LstmCell,
    query: Linear,
    attention: Attention,
    lstm2: LstmCell,
    confidence_hidden: Linear,
    confidence_out: Linear,
    ln_h: (ParamId, ParamId),
    ln_m: (ParamId, ParamId),
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layers: Layers,
}

impl Model {
    /// Builds a model with parameters drawn from `seed`. The parameter layout
    /// depends only on the configuration.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (d, r) = (config.d, config.init_range);
        let feature_proj = Linear::new(&mut s, "feature_proj", config.d_a, d, r, &mut rng);
        let embed = Embedding::new(&mut s, "embed", config.vocab_size, d, r, &mut rng);
        let lstm1 = LstmCell::new(&mut s, "lstm1", 2 * d, d, r, &mut rng);
        let query = Linear::new(&mut s, "query", 2 * d, d, r, &mut rng);
        let attention = Attention::new(&mut s, "attention", config.attention, r, &mut rng)?;
        let lstm2 = LstmCell::new(&mut s, "lstm2", 2 * d, d, r, &mut rng);
        let confidence_hidden = Linear::new(&mut s, "confidence.hidden", d, d, r, &mut rng);
        let confidence_out = Linear::new(&mut s, "confidence.out", d, 1, r, &mut rng);
        let ln_h = (
            s.add("layer_norm_h.gain", Tensor::filled(&[d], 1.0)),
            s.add("layer_norm_h.bias", Tensor::zeros(&[d])),
        );
        let ln_m = (
            s.add("layer_norm_m.gain", Tensor::filled(&[d], 1.0)),
            s.add("layer_norm_m.bias", Tensor::zeros(&[d])),
        );
        let output = Linear::new(&mut s, "output", d, config.vocab_size, r, &mut rng);
        Ok(Model {
            config,
            params: s,
            layers: Layers {
                feature_proj,
                embed,
                lstm1,
                query,
                attention,
                lstm2,
                confidence_hidden,
                confidence_out,
                ln_h,
                ln_m,
                output,
            },
        })
    }

    /// Same parameters, different decoding configuration. The new
    /// configuration must share the parameter layout.
    pub fn with_config(&self, config: ModelConfig) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        m.params.load_from(&self.params)?;
        Ok(m)
    }

    pub fn query_projection(&self) -> (ParamId, ParamId) {
        (self.layers.query.weight, self.layers.query.bias)
    }

    pub fn confidence_params(&self) -> [ParamId; 4] {
        let (h, o) = (self.layers.confidence_hidden, self.layers.confidence_out);
        [h.weight, h.bias, o.weight, o.bias]
    }

    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.layers.output.weight, self.layers.output.bias)
    }

    pub fn embedding_table(&self) -> ParamId {
        self.layers.embed.table
    }

    pub fn lstm2(&self) -> &LstmCell {
        &self.layers.lstm2
    }

    pub fn attention(&self) -> &Attention {
        &self.layers.attention
    }

    /// Fixes the query projection to `[I; 0]`, so that the query is `h¹`.
    pub fn select_input_query(&mut self) {
        let d = self.config.d;
        let (w, b) = self.query_projection();
        let mut sel = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            sel.set(i, i, 1.0);
        }
        *self.params.get_mut(w) = sel;
        *self.params.get_mut(b) = Tensor::zeros(&[d]);
    }

    /// Encodes one image on `tape`, binding the stored parameters.
    pub fn session<'m>(&'m self, tape: &mut Tape, feats: &FeatureSet) -> Result<Session<'m>> {
        let bound = self.params.bind(tape);
        self.session_with(tape, bound, feats)
    }

    /// Encodes one image using externally bound parameter leaves.
    pub fn session_with<'m>(
        &'m self,
        tape: &mut Tape,
        p: Bound,
        feats: &FeatureSet,
    ) -> Result<Session<'m>> {
        if feats.dim() != self.config.d_a {
            return Err(Error::dim(
                "encode",
                &[feats.k(), feats.dim()],
                &[feats.k(), self.config.d_a],
            ));
        }
        let raw = tape.leaf(feats.vectors().clone());
        let projected = self.layers.feature_proj.forward(tape, &p, raw)?;
        let mean = tape.leaf(Tensor::vector(feats.mean().to_vec()));
        let mean_pool = self.layers.feature_proj.forward(tape, &p, mean)?;
        let prepared = self.layers.attention.prepare(tape, &p, projected)?;
        Ok(Session {
            model: self,
            p,
            prepared,
            mean_pool,
        })
    }
}

/// Hidden and memory states carried between decoding steps.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    pub h1: Var,
    pub m1: Var,
    pub h2: Var,
    pub m2: Var,
    pub c_prev: Var,
}

/// Output of one decoding step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// Vocabulary distribution.
    pub dist: Var,
    pub context: Var,
    pub state: DecoderState,
    /// Time-cost penalty node (adaptive mode only).
    pub ponder: Option<Var>,
    pub trace: StepTrace,
}

/// Adaptive attention result for one decoding step.
#[derive(Clone, Debug)]
pub struct AdaptiveOutput {
    pub h2: Var,
    pub m2: Var,
    pub ponder: Var,
    /// Part of the penalty that carries the bare step count, behind a
    /// stop-gradient.
    pub ponder_count: Var,
    pub steps: usize,
    pub p: Vec<f64>,
    pub beta_raw: Vec<f64>,
    pub beta_norm: Vec<f64>,
}

pub struct Session<'m> {
    model: &'m Model,
    p: Bound,
    prepared: PreparedFeatures,
    mean_pool: Var,
}

impl<'m> Session<'m> {
    pub fn bound(&self) -> &Bound {
        &self.p
    }

    pub fn mean_pool(&self) -> Var {
        self.mean_pool
    }

    pub fn initial_state(&self, tape: &mut Tape) -> DecoderState {
        let d = self.model.config.d;
        let z = tape.leaf(Tensor::zeros(&[d]));
        DecoderState {
            h1: z,
            m1: z,
            h2: z,
            m2: z,
            c_prev: z,
        }
    }

    /// Input LSTM: `(h¹, m¹) ← LSTM₁([embed(token), ā + c_{t−1}], (h¹, m¹))`.
    pub fn input_step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        token: usize,
    ) -> Result<(Var, Var)> {
        let l = &self.model.layers;
        let e = l.embed.embed(tape, &self.p, token)?;
        let ctx = tape.add(self.mean_pool, state.c_prev)?;
        let x = tape.concat(&[e, ctx])?;
        l.lstm1.step(tape, &self.p, x, state.h1, state.m1)
    }

    /// `q = [h¹, h²_prev]·W_q + b_q`.
    pub fn make_query(&self, tape: &mut Tape, h1: Var, h2_prev: Var) -> Result<Var> {
        let x = tape.concat(&[h1, h2_prev])?;
        self.model.layers.query.forward(tape, &self.p, x)
    }

    /// One attention step: attend with `query`, then `LSTM₂([â, query], (h, m))`.
    /// Adaptive mode layer-normalizes both outputs.
    pub fn attention_step(
        &self,
        tape: &mut Tape,
        query: Var,
        h: Var,
        m: Var,
    ) -> Result<(Var, Var)> {
        let l = &self.model.layers;
        let att = l.attention.attend(tape, &self.p, &self.prepared, query)?;
        let x = tape.concat(&[att.vector, query])?;
        let (h, m) = l.lstm2.step(tape, &self.p, x, h, m)?;
        let cfg = &self.model.config;
        if cfg.mode == Mode::Adaptive && cfg.layer_norm {
            let h = tape.layer_norm(h, self.p.var(l.ln_h.0), self.p.var(l.ln_h.1))?;
            let m = tape.layer_norm(m, self.p.var(l.ln_m.0), self.p.var(l.ln_m.1))?;
            Ok((h, m))
        } else {
            Ok((h, m))
        }
    }

    /// `σ(max(0, h·W₁ + b₁)·W₂ + b₂)` as a single-element node.
    pub fn confidence(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let l = &self.model.layers;
        let hidden = l.confidence_hidden.forward(tape, &self.p, h)?;
        let hidden = tape.relu(hidden);
        let logit = l.confidence_out.forward(tape, &self.p, hidden)?;
        Ok(tape.sigmoid(logit))
    }

    /// Adaptive attention for one decoding step, given the fresh input state
    /// `h1` and the committed `(h², m²)` of the previous step.
    pub fn adaptive_attention(
        &self,
        tape: &mut Tape,
        h1: Var,
        h2_prev: Var,
        m2_prev: Var,
    ) -> Result<AdaptiveOutput> {
        let cfg = &self.model.config;
        let mut halting = Halting::new(cfg.halting());
        let mut hs = vec![h1];
        let mut ms = vec![m2_prev];
        let mut ps = Vec::with_capacity(cfg.m_max + 1);

        let p0 = self.step_confidence(tape, &halting, h1)?;
        let mut halted = halting.push(tape.scalar(p0));
        ps.push(p0);
        let (mut h, mut m) = (h2_prev, m2_prev);
        while !halted {
            let q = self.make_query(tape, h1, h)?;
            (h, m) = self.attention_step(tape, q, h, m)?;
            hs.push(h);
            ms.push(m);
            let pn = self.step_confidence(tape, &halting, h)?;
            halted = halting.push(tape.scalar(pn));
            ps.push(pn);
        }
        let steps = ps.len() - 1;

        // β on the tape, in the same operation order as the kernel.
        let mut raw = Vec::with_capacity(ps.len());
        let mut complements = Vec::with_capacity(ps.len());
        let mut remainder: Option<Var> = None;
        for &pn in &ps {
            let b = match remainder {
                None => pn,
                Some(r) => tape.mul(pn, r)?,
            };
            raw.push(b);
            let c = tape.one_minus(pn);
            complements.push(c);
            remainder = Some(match remainder {
                None => c,
                Some(r) => tape.mul(r, c)?,
            });
        }
        let total = tape.sum_scalars(&raw)?;
        let norm: Vec<Var> = if tape.scalar(total) > 0.0 {
            raw.iter()
                .map(|&b| tape.div_scalar(b, total))
                .collect::<Result<_>>()?
        } else {
            (0..raw.len())
                .map(|n| tape.constant_scalar(if n == steps { 1.0 } else { 0.0 }))
                .collect()
        };

        let h2 = weighted_sum(tape, &norm, &hs)?;
        let m2 = weighted_sum(tape, &norm, &ms)?;

        // λ·(N + Σ (n+1)(1 − pₙ)) with N behind a stop-gradient.
        let terms: Vec<Var> = complements
            .iter()
            .enumerate()
            .map(|(n, &c)| tape.affine(c, (n + 1) as f64, 0.0))
            .collect();
        let weighted = tape.sum_scalars(&terms)?;
        let count = tape.constant_scalar(steps as f64);
        let count = tape.stop_gradient(count);
        let inner = tape.add(count, weighted)?;
        let ponder = tape.affine(inner, cfg.lambda, 0.0);

        let values = |v: &[Var], tape: &Tape| v.iter().map(|x| tape.scalar(*x)).collect();
        Ok(AdaptiveOutput {
            h2,
            m2,
            ponder,
            ponder_count: count,
            steps,
            p: halting.confidences().to_vec(),
            beta_raw: values(&raw, tape),
            beta_norm: values(&norm, tape),
        })
    }

    fn step_confidence(&self, tape: &mut Tape, halting: &Halting, h: Var) -> Result<Var> {
        if halting.next_is_forced() {
            Ok(tape.constant_scalar(0.0))
        } else {
            self.confidence(tape, h)
        }
    }

    /// One decoding step from `state` with input `token`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        state: &DecoderState,
        token: usize,
    ) -> Result<StepOutput> {
        let cfg = &self.model.config;
        let (h1, m1) = self.input_step(tape, state, token)?;
        let (h2, m2, ponder, trace) = match cfg.mode {
            Mode::Base => {
                let (h2, m2) = self.attention_step(tape, h1, state.h2, state.m2)?;
                (h2, m2, None, StepTrace::fixed(1))
            }
            Mode::Recurrent => {
                let (mut h, mut m) = (state.h2, state.m2);
                for _ in 0..cfg.m_r {
                    let q = self.make_query(tape, h1, h)?;
                    (h, m) = self.attention_step(tape, q, h, m)?;
                }
                (h, m, None, StepTrace::fixed(cfg.m_r))
            }
            Mode::Adaptive => {
                let out = self.adaptive_attention(tape, h1, state.h2, state.m2)?;
                let trace = StepTrace {
                    t: 0,
                    token: 0,
                    n_t: out.steps,
                    p: out.p,
                    beta_raw: out.beta_raw,
                    beta_norm: out.beta_norm,
                    ponder_term: tape.scalar(out.ponder),
                };
                (out.h2, out.m2, Some(out.ponder), trace)
            }
        };
        let context = h2;
        let logits = self.model.layers.output.forward(tape, &self.p, context)?;
        let dist = tape.softmax(logits)?;
        Ok(StepOutput {
            dist,
            context,
            state: DecoderState {
                h1,
                m1,
                h2,
                m2,
                c_prev: context,
            },
            ponder,
            trace,
        })
    }

    /// Teacher-forced pass over `targets` (which should end with EOS).
    /// With `sampling = Some((prob, rng))`, each input after the first is
    /// replaced with probability `prob` by a draw from the previous step's
    /// distribution.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        targets: &[usize],
        mut sampling: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<SequenceOutput> {
        if targets.is_empty() {
            return Err(Error::config("teacher forcing needs at least one target"));
        }
        let mut state = self.initial_state(tape);
        let mut input = BOS;
        let mut losses = Vec::with_capacity(2 * targets.len());
        let mut out = SequenceOutput::default();
        for (t, &target) in targets.iter().enumerate() {
            let step = self.decode_step(tape, &state, input)?;
            let dist = tape.value(step.dist).data().to_vec();
            let pick = tape.pick(step.dist, target)?;
            let logp = tape.log(pick, PROB_FLOOR);
            let ce = tape.affine(logp, -1.0, 0.0);
            out.cross_entropy += tape.scalar(ce);
            losses.push(ce);
            if let Some(pd) = step.ponder {
                out.ponder += tape.scalar(pd);
                losses.push(pd);
            }
            let predicted = argmax(&dist);
            out.correct += usize::from(predicted == target);
            out.tokens.push(predicted);
            let mut tr = step.trace;
            tr.t = t;
            tr.token = target;
            out.trace.push(tr);
            state = step.state;

            input = match sampling.as_mut() {
                Some((prob, rng)) => {
                    if rng.gen::<f64>() < *prob {
                        sample(&dist, rng)
                    } else {
                        target
                    }
                }
                None => target,
            };
        }
        out.loss = Some(tape.sum_scalars(&losses)?);
        out.steps = targets.len();
        Ok(out)
    }

    /// Greedy decoding: argmax tokens until EOS or `max_len` tokens.
    pub fn greedy(&self, tape: &mut Tape, max_len: usize) -> Result<SequenceOutput> {
        if max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        let mut state = self.initial_state(tape);
        let mut input = BOS;
        let mut out = SequenceOutput::default();
        for t in 0..max_len {
            let step = self.decode_step(tape, &state, input)?;
            let token = argmax(tape.value(step.dist).data());
            if let Some(pd) = step.ponder {
                out.ponder += tape.scalar(pd);
            }
            let mut tr = step.trace;
            tr.t = t;
            tr.token = token;
            out.trace.push(tr);
            out.steps += 1;
            if token == EOS {
                break;
            }
            out.tokens.push(token);
            state = step.state;
            input = token;
        }
        Ok(out)
    }
}

fn weighted_sum(tape: &mut Tape, weights: &[Var], states: &[Var]) -> Result<Var> {
    let mut acc = tape.scale(states[0], weights[0])?;
    for (&w, &s) in weights.iter().zip(states).skip(1) {
        let term = tape.scale(s, w)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

/// Result of driving the decoder over a whole sequence.
#[derive(Clone, Debug, Default)]
pub struct SequenceOutput {
    /// Greedy: emitted tokens without EOS. Teacher forcing: argmax at each step.
    pub tokens: Vec<usize>,
    /// Total loss node `Σ_t (cross-entropy + penalty)`, teacher forcing only.
    pub loss: Option<Var>,
    pub cross_entropy: f64,
    pub ponder: f64,
    pub correct: usize,
    /// Decoding steps run.
    pub steps: usize,
    pub trace: HaltingTrace,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample(dist: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    dist.len() - 1
}

/// How [`Model::decode`] drives the decoder.
#[derive(Clone, Copy, Debug)]
pub enum Decoding<'a> {
    TeacherForcing(&'a [usize]),
    Greedy { max_len: usize },
}

impl Model {
    /// Runs a whole sequence on a fresh tape.
    pub fn decode(&self, feats: &FeatureSet, how: Decoding<'_>) -> Result<SequenceOutput> {
        let mut tape = Tape::new();
        let session = self.session(&mut tape, feats)?;
        match how {
            Decoding::TeacherForcing(targets) => session.teacher_forced(&mut tape, targets, None),
            Decoding::Greedy { max_len } => session.greedy(&mut tape, max_len),
        }
    }
}
