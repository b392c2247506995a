//! The hierarchical recurrent encoder-decoder.
//!
//! A query-level GRU folds each query (plus the end-of-query token) into a
//! vector `q_m`; a session-level GRU folds the query vectors into session
//! states `s_m`; a decoder GRU, initialized from `s_{m-1}`, predicts the words
//! of query `m` through an extra linear layer `ω = H_o d + E_o w + b_o`
//! followed by a softmax against the output embeddings `O`.

use crate::corpus::{Vocabulary, EOQ_ID};
use crate::error::{Error, Result};
use crate::numerics::{init_params, log_softmax, sigmoid, InitScheme, Matrix, Prng, Vector};

/// Model dimensions: vocabulary size `V`, query-level `d_h`, session-level
/// `d_s` and output embedding `d_e`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Hyper {
    pub vocab_size: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub d_e: usize,
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_h == 0 || self.d_s == 0 || self.d_e == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid dimensions {self:?} (need V >= 2 and d_h, d_s, d_e >= 1)"
            )));
        }
        Ok(())
    }
}

/// GRU weights. `I*` act on the input, `H*` on the previous state; there are
/// no bias terms.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub i: Matrix,
    pub i_r: Matrix,
    pub i_u: Matrix,
    pub h: Matrix,
    pub h_r: Matrix,
    pub h_u: Matrix,
}

#[derive(Debug, Clone, Copy)]
pub enum GruInput<'a> {
    /// One-hot input given by its index: selects a column of each `I` matrix.
    Token(usize),
    Dense(&'a [f64]),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GruInputOwned {
    Token(usize),
    Dense(Vector),
}

impl GruInputOwned {
    pub fn as_input(&self) -> GruInput<'_> {
        match self {
            GruInputOwned::Token(t) => GruInput::Token(*t),
            GruInputOwned::Dense(v) => GruInput::Dense(v),
        }
    }
}

/// One GRU transition with everything back-propagation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep {
    pub h_prev: Vector,
    pub input: GruInputOwned,
    pub r: Vector,
    pub u: Vector,
    /// Candidate state `tanh(I x + H (r ⊙ h_prev))`.
    pub cand: Vector,
    pub h: Vector,
}

impl GruParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let inp = || Matrix::zeros(hidden_dim, input_dim);
        let rec = || Matrix::zeros(hidden_dim, hidden_dim);
        GruParams {
            input_dim,
            hidden_dim,
            i: inp(),
            i_r: inp(),
            i_u: inp(),
            h: rec(),
            h_r: rec(),
            h_u: rec(),
        }
    }

    pub fn init(input_dim: usize, hidden_dim: usize, prng: &mut Prng) -> Result<Self> {
        let mut inp = || init_params(hidden_dim, input_dim, InitScheme::UniformScaled, prng);
        let (i, i_r, i_u) = (inp()?, inp()?, inp()?);
        let mut rec = || init_params(hidden_dim, hidden_dim, InitScheme::OrthogonalRecurrent, prng);
        let (h, h_r, h_u) = (rec()?, rec()?, rec()?);
        Ok(GruParams {
            input_dim,
            hidden_dim,
            i,
            i_r,
            i_u,
            h,
            h_r,
            h_u,
        })
    }

    /// Matrices in storage order: I, I_r, I_u, H, H_r, H_u.
    pub fn matrices(&self) -> [&Matrix; 6] {
        [&self.i, &self.i_r, &self.i_u, &self.h, &self.h_r, &self.h_u]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.i,
            &mut self.i_r,
            &mut self.i_u,
            &mut self.h,
            &mut self.h_r,
            &mut self.h_u,
        ]
    }

    fn input_acc(m: &Matrix, x: GruInput<'_>, out: &mut [f64]) {
        match x {
            GruInput::Token(t) => m.column_acc(t, out),
            GruInput::Dense(v) => m.mul_vec_acc(v, out),
        }
    }

    fn check(&self, h_prev: &[f64], x: GruInput<'_>) -> Result<()> {
        if h_prev.len() != self.hidden_dim {
            return Err(Error::Dimension {
                op: "gru_step",
                detail: format!("h_prev has dim {}, hidden_dim is {}", h_prev.len(), self.hidden_dim),
            });
        }
        match x {
            GruInput::Token(t) if t >= self.input_dim => Err(Error::Dimension {
                op: "gru_step",
                detail: format!("token index {t} >= input_dim {}", self.input_dim),
            }),
            GruInput::Dense(v) if v.len() != self.input_dim => Err(Error::Dimension {
                op: "gru_step",
                detail: format!("x has dim {}, input_dim is {}", v.len(), self.input_dim),
            }),
            _ => Ok(()),
        }
    }

    /// Unchecked transition; shapes must already agree.
    pub(crate) fn step(&self, h_prev: &[f64], x: GruInput<'_>) -> GruStep {
        let n = self.hidden_dim;
        let mut r = vec![0.0; n];
        Self::input_acc(&self.i_r, x, &mut r);
        self.h_r.mul_vec_acc(h_prev, &mut r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));

        let mut u = vec![0.0; n];
        Self::input_acc(&self.i_u, x, &mut u);
        self.h_u.mul_vec_acc(h_prev, &mut u);
        u.iter_mut().for_each(|v| *v = sigmoid(*v));

        let reset: Vector = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        let mut cand = vec![0.0; n];
        Self::input_acc(&self.i, x, &mut cand);
        self.h.mul_vec_acc(&reset, &mut cand);
        cand.iter_mut().for_each(|v| *v = v.tanh());

        let h = (0..n)
            .map(|k| (1.0 - u[k]) * h_prev[k] + u[k] * cand[k])
            .collect();
        let input = match x {
            GruInput::Token(t) => GruInputOwned::Token(t),
            GruInput::Dense(v) => GruInputOwned::Dense(v.to_vec()),
        };
        GruStep {
            h_prev: h_prev.to_vec(),
            input,
            r,
            u,
            cand,
            h,
        }
    }
}

/// One GRU transition: reset gate, update gate, candidate and the
/// interpolated new state.
pub fn gru_step(p: &GruParams, h_prev: &[f64], x: GruInput<'_>) -> Result<GruStep> {
    p.check(h_prev, x)?;
    Ok(p.step(h_prev, x))
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub gru_enc: GruParams,
    pub gru_ses: GruParams,
    pub gru_dec: GruParams,
    /// `d_h × d_s` projection of the session state into the decoder.
    pub d0: Matrix,
    pub b0: Vector,
    /// `d_e × d_h`.
    pub h_o: Matrix,
    /// `d_e × V`, previous-word term of ω.
    pub e_o: Matrix,
    pub b_o: Vector,
    /// `V × d_e`; row `v` is the output embedding of word `v`.
    pub o: Matrix,
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

const GRU_NAMES: [[&str; 6]; 3] = [
    ["gru_enc.I", "gru_enc.I_r", "gru_enc.I_u", "gru_enc.H", "gru_enc.H_r", "gru_enc.H_u"],
    ["gru_ses.I", "gru_ses.I_r", "gru_ses.I_u", "gru_ses.H", "gru_ses.H_r", "gru_ses.H_u"],
    ["gru_dec.I", "gru_dec.I_r", "gru_dec.I_u", "gru_dec.H", "gru_dec.H_r", "gru_dec.H_u"],
];

impl ModelParams {
    pub fn zeros(hyper: Hyper) -> Self {
        let Hyper {
            vocab_size: v,
            d_h,
            d_s,
            d_e,
        } = hyper;
        ModelParams {
            hyper,
            gru_enc: GruParams::zeros(v, d_h),
            gru_ses: GruParams::zeros(d_h, d_s),
            gru_dec: GruParams::zeros(v, d_h),
            d0: Matrix::zeros(d_h, d_s),
            b0: vec![0.0; d_h],
            h_o: Matrix::zeros(d_e, d_h),
            e_o: Matrix::zeros(d_e, v),
            b_o: vec![0.0; d_e],
            o: Matrix::zeros(v, d_e),
        }
    }

    /// Uniform-scaled input/projection/output matrices, orthogonal recurrent
    /// matrices, zero biases.
    pub fn init(hyper: Hyper, prng: &mut Prng) -> Result<Self> {
        hyper.validate()?;
        let Hyper {
            vocab_size: v,
            d_h,
            d_s,
            d_e,
        } = hyper;
        let gru_enc = GruParams::init(v, d_h, prng)?;
        let gru_ses = GruParams::init(d_h, d_s, prng)?;
        let gru_dec = GruParams::init(v, d_h, prng)?;
        let mut uni = |r, c| init_params(r, c, InitScheme::UniformScaled, prng);
        Ok(ModelParams {
            hyper,
            gru_enc,
            gru_ses,
            gru_dec,
            d0: uni(d_h, d_s)?,
            b0: vec![0.0; d_h],
            h_o: uni(d_e, d_h)?,
            e_o: uni(d_e, v)?,
            b_o: vec![0.0; d_e],
            o: uni(v, d_e)?,
        })
    }

    /// Tensor names and shapes in storage order.
    pub fn layout(&self) -> Vec<TensorInfo> {
        let mut out = Vec::with_capacity(24);
        for (gru, names) in self.grus().into_iter().zip(GRU_NAMES) {
            for (m, name) in gru.matrices().into_iter().zip(names) {
                out.push(TensorInfo {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                });
            }
        }
        let info = |name, m: &Matrix| TensorInfo {
            name,
            rows: m.rows(),
            cols: m.cols(),
        };
        out.push(info("D_0", &self.d0));
        out.push(TensorInfo {
            name: "b_0",
            rows: self.b0.len(),
            cols: 1,
        });
        out.push(info("H_o", &self.h_o));
        out.push(info("E_o", &self.e_o));
        out.push(TensorInfo {
            name: "b_o",
            rows: self.b_o.len(),
            cols: 1,
        });
        out.push(info("O", &self.o));
        out
    }

    fn grus(&self) -> [&GruParams; 3] {
        [&self.gru_enc, &self.gru_ses, &self.gru_dec]
    }

    /// Flat views of every tensor, in the order of [`ModelParams::layout`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(24);
        for gru in self.grus() {
            out.extend(gru.matrices().into_iter().map(Matrix::data));
        }
        out.push(self.d0.data());
        out.push(&self.b0);
        out.push(self.h_o.data());
        out.push(self.e_o.data());
        out.push(&self.b_o);
        out.push(self.o.data());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(24);
        for gru in [&mut self.gru_enc, &mut self.gru_ses, &mut self.gru_dec] {
            out.extend(gru.matrices_mut().into_iter().map(Matrix::data_mut));
        }
        out.push(self.d0.data_mut());
        out.push(&mut self.b0);
        out.push(self.h_o.data_mut());
        out.push(self.e_o.data_mut());
        out.push(&mut self.b_o);
        out.push(self.o.data_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.hyper)
    }

    /// Rounds every entry through `f32`.
    pub fn rounded_to_f32(&self) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        out
    }
}

fn check_query(tokens: &[usize], vocab_size: usize, op: &'static str) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty query")));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(Error::Dimension {
            op,
            detail: format!("token id {t} >= vocabulary size {vocab_size}"),
        });
    }
    Ok(())
}

fn check_session(params: &ModelParams, queries: &[Vec<usize>], op: &'static str) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: session has no queries")));
    }
    queries
        .iter()
        .try_for_each(|q| check_query(q, params.hyper.vocab_size, op))
}

pub(crate) fn encoder_steps(p_enc: &GruParams, tokens: &[usize]) -> Vec<GruStep> {
    let mut h = vec![0.0; p_enc.hidden_dim];
    let mut steps = Vec::with_capacity(tokens.len() + 1);
    for &t in tokens.iter().chain(std::iter::once(&EOQ_ID)) {
        let step = p_enc.step(&h, GruInput::Token(t));
        h.clone_from(&step.h);
        steps.push(step);
    }
    steps
}

/// Encodes `tokens` followed by the end-of-query token from a zero state and
/// returns the final state `q`.
pub fn encode_query(p_enc: &GruParams, tokens: &[usize]) -> Result<Vector> {
    check_query(tokens, p_enc.input_dim, "encode_query")?;
    let steps = encoder_steps(p_enc, tokens);
    Ok(steps.last().map(|s| s.h.clone()).unwrap_or_default())
}

/// Session states `s_1..s_M` from `s_0 = 0`.
pub fn encode_session(params: &ModelParams, queries: &[Vec<usize>]) -> Result<Vec<Vector>> {
    check_session(params, queries, "encode_session")?;
    let mut s = vec![0.0; params.hyper.d_s];
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let qv = encode_query(&params.gru_enc, q)?;
        s = params.gru_ses.step(&s, GruInput::Dense(&qv)).h;
        out.push(s.clone());
    }
    Ok(out)
}

/// `d_0 = tanh(D_0 s_prev + b_0)`.
pub fn decoder_init(params: &ModelParams, s_prev: &[f64]) -> Vector {
    let mut d = params.b0.clone();
    params.d0.mul_vec_acc(s_prev, &mut d);
    d.iter_mut().for_each(|v| *v = v.tanh());
    d
}

/// `ω = H_o d + E_o w + b_o`; a `None` previous word contributes nothing.
pub fn omega(params: &ModelParams, d_prev: &[f64], w_prev: Option<usize>) -> Vector {
    let mut w = params.b_o.clone();
    params.h_o.mul_vec_acc(d_prev, &mut w);
    if let Some(t) = w_prev {
        params.e_o.column_acc(t, &mut w);
    }
    w
}

pub fn output_logits(params: &ModelParams, omega: &[f64]) -> Vector {
    params.o.mul_vec(omega)
}

/// Log-probabilities of the next word (log-space softmax).
pub fn next_word_log_distribution(params: &ModelParams, d_prev: &[f64], w_prev: Option<usize>) -> Vector {
    log_softmax(&output_logits(params, &omega(params, d_prev, w_prev)))
}

/// Probabilities of the next word.
pub fn next_word_distribution(params: &ModelParams, d_prev: &[f64], w_prev: Option<usize>) -> Vector {
    crate::numerics::softmax_stable(&output_logits(params, &omega(params, d_prev, w_prev)))
}

/// Per-position cache of one teacher-forced decoding pass.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub d0: Vector,
    /// Decoder transitions over the query's words (`d_1..d_N`).
    pub steps: Vec<GruStep>,
    /// ω at each predicted position (N words + end-of-query).
    pub omegas: Vec<Vector>,
    /// Next-word probabilities at each predicted position.
    pub probs: Vec<Vector>,
    /// The predicted tokens: the query's words then end-of-query.
    pub targets: Vec<usize>,
    pub token_log_probs: Vec<f64>,
    pub log_prob: f64,
}

pub(crate) fn decode_teacher_forced(params: &ModelParams, s_prev: &[f64], tokens: &[usize]) -> DecoderTrace {
    let d0 = decoder_init(params, s_prev);
    let n = tokens.len();
    let mut targets = tokens.to_vec();
    targets.push(EOQ_ID);
    let mut steps = Vec::with_capacity(n);
    let mut omegas = Vec::with_capacity(n + 1);
    let mut probs = Vec::with_capacity(n + 1);
    let mut token_log_probs = Vec::with_capacity(n + 1);
    let mut d = d0.clone();
    for (pos, &target) in targets.iter().enumerate() {
        let w_prev = if pos == 0 { None } else { Some(tokens[pos - 1]) };
        let om = omega(params, &d, w_prev);
        let logp = log_softmax(&output_logits(params, &om));
        token_log_probs.push(logp[target]);
        probs.push(logp.iter().map(|l| l.exp()).collect());
        omegas.push(om);
        if pos < n {
            let step = params.gru_dec.step(&d, GruInput::Token(target));
            d.clone_from(&step.h);
            steps.push(step);
        }
    }
    let log_prob = token_log_probs.iter().sum();
    DecoderTrace {
        d0,
        steps,
        omegas,
        probs,
        targets,
        token_log_probs,
        log_prob,
    }
}

/// `log P(Q | context)` where the context is summarized by `s_prev`,
/// teacher-forced over the query's words and the end-of-query token.
pub fn query_log_prob(params: &ModelParams, s_prev: &[f64], tokens: &[usize]) -> Result<f64> {
    check_query(tokens, params.hyper.vocab_size, "query_log_prob")?;
    if s_prev.len() != params.hyper.d_s {
        return Err(Error::Dimension {
            op: "query_log_prob",
            detail: format!("s_prev has dim {}, d_s is {}", s_prev.len(), params.hyper.d_s),
        });
    }
    Ok(decode_teacher_forced(params, s_prev, tokens).log_prob)
}

/// `Σ_m log P(Q_m | Q_{1:m-1})`, the first query scored against `s_0 = 0`.
pub fn session_log_likelihood(params: &ModelParams, queries: &[Vec<usize>]) -> Result<f64> {
    check_session(params, queries, "session_log_likelihood")?;
    let mut s = vec![0.0; params.hyper.d_s];
    let mut total = 0.0;
    for (m, q) in queries.iter().enumerate() {
        total += query_log_prob(params, &s, q)?;
        if m + 1 < queries.len() {
            let qv = encode_query(&params.gru_enc, q)?;
            s = params.gru_ses.step(&s, GruInput::Dense(&qv)).h;
        }
    }
    Ok(total)
}

/// Everything computed for one query of a session.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryTrace {
    /// Encoder transitions over the words and end-of-query (`h_{m,1..N+1}`).
    pub encoder: Vec<GruStep>,
    /// Session transition `s_{m-1} → s_m` driven by `q_m`.
    pub session: GruStep,
    /// Decoding of this query from `s_{m-1}`.
    pub decoder: DecoderTrace,
}

impl QueryTrace {
    pub fn query_vector(&self) -> &[f64] {
        &self.encoder.last().expect("encoder always runs end-of-query").h
    }
}

/// Cached forward pass used by back-propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub queries: Vec<QueryTrace>,
    pub log_likelihood: f64,
}

impl ForwardTrace {
    pub fn session_states(&self) -> Vec<&[f64]> {
        self.queries.iter().map(|q| q.session.h.as_slice()).collect()
    }
}

pub fn forward_trace(params: &ModelParams, queries: &[Vec<usize>]) -> Result<ForwardTrace> {
    check_session(params, queries, "forward_trace")?;
    let mut s = vec![0.0; params.hyper.d_s];
    let mut traces = Vec::with_capacity(queries.len());
    let mut total = 0.0;
    for q in queries {
        let decoder = decode_teacher_forced(params, &s, q);
        total += decoder.log_prob;
        let encoder = encoder_steps(&params.gru_enc, q);
        let qv = &encoder.last().expect("non-empty").h;
        let session = params.gru_ses.step(&s, GruInput::Dense(qv));
        s.clone_from(&session.h);
        traces.push(QueryTrace {
            encoder,
            session,
            decoder,
        });
    }
    Ok(ForwardTrace {
        queries: traces,
        log_likelihood: total,
    })
}

/// Absolute session-level update-gate activations, one vector per query.
pub fn update_gate_trace(params: &ModelParams, queries: &[Vec<usize>]) -> Result<Vec<Vector>> {
    check_session(params, queries, "update_gate_trace")?;
    let mut s = vec![0.0; params.hyper.d_s];
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let qv = encode_query(&params.gru_enc, q)?;
        let step = params.gru_ses.step(&s, GruInput::Dense(&qv));
        out.push(step.u.iter().map(|x| x.abs()).collect());
        s = step.h;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `(word, o_v)` in vocabulary id order, reserved tokens included.
    pub words: Vec<(String, Vector)>,
    /// `(query text, q)` for each supplied query.
    pub queries: Vec<(String, Vector)>,
}

pub fn export_embeddings(params: &ModelParams, vocab: &Vocabulary, queries: &[String]) -> Result<Embeddings> {
    if vocab.len() != params.hyper.vocab_size {
        return Err(Error::Dimension {
            op: "export_embeddings",
            detail: format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                params.hyper.vocab_size
            ),
        });
    }
    let words = (0..vocab.len())
        .map(|v| (vocab.word(v).to_string(), params.o.row(v).to_vec()))
        .collect();
    let mut qs = Vec::with_capacity(queries.len());
    for text in queries {
        let tokens = vocab.encode_query(text);
        qs.push((text.clone(), encode_query(&params.gru_enc, &tokens)?));
    }
    Ok(Embeddings { words, queries: qs })
}
