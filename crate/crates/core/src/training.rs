//! Back-propagation through time, gradient clipping, RMSProp, early
//! stopping and checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::ops::{Deref, DerefMut};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{ByteReader, ByteWriter};
use crate::corpus::{Session, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{forward_trace, session_log_likelihood, ForwardTrace, GruInputOwned, GruParams, GruStep, Hyper, ModelParams};
use crate::numerics::{InitScheme, Prng};

/// Gradients with the exact layout of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Deref for Gradients {
    type Target = ModelParams;
    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

impl Gradients {
    pub fn zeros(hyper: Hyper) -> Self {
        Gradients(ModelParams::zeros(hyper))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// First tensor holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (info, t) in self.layout().iter().zip(self.tensors()) {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    param: info.name.to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Accumulates the parameter gradients of one GRU transition given `∂L/∂h`,
/// adds `∂L/∂h_prev` into `dh_prev` and, for dense inputs, `∂L/∂x` into `dx`.
fn gru_backward(
    p: &GruParams,
    g: &mut GruParams,
    step: &GruStep,
    dh: &[f64],
    dh_prev: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n = p.hidden_dim;
    let mut da_u = vec![0.0; n];
    let mut da_c = vec![0.0; n];
    for k in 0..n {
        let u = step.u[k];
        da_u[k] = dh[k] * (step.cand[k] - step.h_prev[k]) * u * (1.0 - u);
        da_c[k] = dh[k] * u * (1.0 - step.cand[k] * step.cand[k]);
        dh_prev[k] += dh[k] * (1.0 - u);
    }
    let reset: Vec<f64> = step.r.iter().zip(&step.h_prev).map(|(r, h)| r * h).collect();
    g.h.add_outer(&da_c, &reset);
    let mut d_reset = vec![0.0; n];
    p.h.tmul_vec_acc(&da_c, &mut d_reset);
    let mut da_r = vec![0.0; n];
    for k in 0..n {
        let r = step.r[k];
        da_r[k] = d_reset[k] * step.h_prev[k] * r * (1.0 - r);
        dh_prev[k] += d_reset[k] * r;
    }
    g.h_r.add_outer(&da_r, &step.h_prev);
    p.h_r.tmul_vec_acc(&da_r, dh_prev);
    g.h_u.add_outer(&da_u, &step.h_prev);
    p.h_u.tmul_vec_acc(&da_u, dh_prev);

    match &step.input {
        GruInputOwned::Token(t) => {
            g.i.add_to_column(*t, &da_c);
            g.i_r.add_to_column(*t, &da_r);
            g.i_u.add_to_column(*t, &da_u);
        }
        GruInputOwned::Dense(x) => {
            g.i.add_outer(&da_c, x);
            g.i_r.add_outer(&da_r, x);
            g.i_u.add_outer(&da_u, x);
            if let Some(dx) = dx {
                p.i.tmul_vec_acc(&da_c, dx);
                p.i_r.tmul_vec_acc(&da_r, dx);
                p.i_u.tmul_vec_acc(&da_u, dx);
            }
        }
    }
}

/// Accumulates `∂ log L(session) / ∂θ` into `grads`.
pub fn backward_session(params: &ModelParams, trace: &ForwardTrace, grads: &mut Gradients) {
    let Hyper { d_h, d_s, vocab_size, .. } = params.hyper;
    let m_count = trace.queries.len();
    // d_state[m] = ∂L/∂s_m for s_0..s_M
    let mut d_state = vec![vec![0.0; d_s]; m_count + 1];

    for (m, q) in trace.queries.iter().enumerate() {
        let dec = &q.decoder;
        let n = dec.steps.len();
        let mut d_cur = vec![0.0; d_h];
        for pos in (0..=n).rev() {
            let d_pos: &[f64] = if pos == 0 { &dec.d0 } else { &dec.steps[pos - 1].h };
            let mut dz: Vec<f64> = dec.probs[pos].iter().map(|p| -p).collect();
            dz[dec.targets[pos]] += 1.0;
            debug_assert_eq!(dz.len(), vocab_size);
            grads.o.add_outer(&dz, &dec.omegas[pos]);
            let mut d_omega = vec![0.0; params.hyper.d_e];
            params.o.tmul_vec_acc(&dz, &mut d_omega);
            grads.h_o.add_outer(&d_omega, d_pos);
            for (b, d) in grads.b_o.iter_mut().zip(&d_omega) {
                *b += d;
            }
            if pos > 0 {
                grads.e_o.add_to_column(dec.targets[pos - 1], &d_omega);
            }
            params.h_o.tmul_vec_acc(&d_omega, &mut d_cur);
            if pos > 0 {
                let mut d_prev = vec![0.0; d_h];
                gru_backward(&params.gru_dec, &mut grads.gru_dec, &dec.steps[pos - 1], &d_cur, &mut d_prev, None);
                d_cur = d_prev;
            }
        }
        let da: Vec<f64> = d_cur
            .iter()
            .zip(&dec.d0)
            .map(|(g, d)| g * (1.0 - d * d))
            .collect();
        let s_prev = &q.session.h_prev;
        grads.d0.add_outer(&da, s_prev);
        for (b, d) in grads.b0.iter_mut().zip(&da) {
            *b += d;
        }
        params.d0.tmul_vec_acc(&da, &mut d_state[m]);
    }

    for m in (0..m_count).rev() {
        if d_state[m + 1].iter().all(|&x| x == 0.0) {
            continue;
        }
        let q = &trace.queries[m];
        let mut d_prev = vec![0.0; d_s];
        let mut dq = vec![0.0; d_h];
        let ds = std::mem::take(&mut d_state[m + 1]);
        gru_backward(&params.gru_ses, &mut grads.gru_ses, &q.session, &ds, &mut d_prev, Some(&mut dq));
        for (a, b) in d_state[m].iter_mut().zip(&d_prev) {
            *a += b;
        }
        let mut dh = dq;
        for step in q.encoder.iter().rev() {
            let mut dh_prev = vec![0.0; d_h];
            gru_backward(&params.gru_enc, &mut grads.gru_enc, step, &dh, &mut dh_prev, None);
            dh = dh_prev;
        }
    }
}

/// Gradient of the mean per-session log-likelihood over `batch`, and that mean.
///
/// Sessions are processed in parallel; per-session gradients are summed in
/// batch order so the result does not depend on scheduling.
pub fn backward_bptt(params: &ModelParams, batch: &[Session]) -> Result<(Gradients, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_session: Vec<Result<(Gradients, f64)>> = batch
        .par_iter()
        .map(|s| {
            let trace = forward_trace(params, &s.queries)?;
            let mut g = Gradients::zeros(params.hyper);
            backward_session(params, &trace, &mut g);
            Ok((g, trace.log_likelihood))
        })
        .collect();
    let mut total = Gradients::zeros(params.hyper);
    let mut ll = 0.0;
    for r in per_session {
        let (g, l) = r?;
        total.add_assign(&g);
        ll += l;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    total.check_finite()?;
    Ok((total, ll * inv))
}

/// Central difference `(f(θ+h) − f(θ−h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, theta: f64, h: f64) -> f64 {
    (f(theta + h) - f(theta - h)) / (2.0 * h)
}

/// Central-difference gradient of `session_log_likelihood` for every scalar parameter.
pub fn finite_diff_oracle(params: &ModelParams, session: &Session, h: f64) -> Result<Gradients> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("perturbation must be positive".into()));
    }
    let mut work = params.clone();
    let mut out = Gradients::zeros(params.hyper);
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (t, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let orig = work.tensors()[t][i];
            let mut eval = |v: f64| -> Result<f64> {
                work.tensors_mut()[t][i] = v;
                session_log_likelihood(&work, &session.queries)
            };
            let plus = eval(orig + h)?;
            let minus = eval(orig - h)?;
            work.tensors_mut()[t][i] = orig;
            out.tensors_mut()[t][i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Rescales the whole gradient so that its global L2 norm is at most `c`.
/// Returns the norm before clipping.
pub fn clip_gradient_norm(g: &mut Gradients, c: f64) -> f64 {
    let norm = g.global_norm();
    if norm > c {
        g.scale(c / norm);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-3,
            rmsprop_decay: 0.95,
            epsilon: 1e-6,
            clip_threshold: 1.0,
            batch_size: 32,
            patience: 5,
            max_epochs: 50,
            seed: 1234,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be > 0");
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return bad("rmsprop_decay must lie in (0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be > 0");
        }
        if self.clip_threshold.is_nan() || self.clip_threshold <= 0.0 {
            return bad("clip_threshold must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        Ok(())
    }
}

/// Squared-gradient running averages, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub acc: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(hyper: Hyper) -> Self {
        OptimizerState {
            acc: ModelParams::zeros(hyper),
            step: 0,
        }
    }
}

/// `acc ← ρ acc + (1 − ρ) g²;  θ ← θ − lr g / (√acc + ε)`.
pub fn rmsprop_step(params: &mut ModelParams, g: &Gradients, state: &mut OptimizerState, config: &TrainConfig) {
    let rho = config.rmsprop_decay;
    let lr = config.learning_rate;
    let eps = config.epsilon;
    for ((theta, acc), grad) in params
        .tensors_mut()
        .into_iter()
        .zip(state.acc.tensors_mut())
        .zip(g.tensors())
    {
        for ((t, a), &gi) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
            *a = rho * *a + (1.0 - rho) * gi * gi;
            *t -= lr * gi / (a.sqrt() + eps);
        }
    }
    state.step += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops after `patience` consecutive evaluations without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stalled: usize,
}

impl EarlyStopping {
    /// `initial` is the score of the starting point (epoch 0).
    pub fn new(patience: usize, initial: f64) -> Self {
        EarlyStopping {
            patience,
            best: initial,
            best_epoch: 0,
            stalled: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> Progress {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            self.stalled = 0;
            Progress::Improved
        } else {
            self.stalled += 1;
            if self.stalled >= self.patience {
                Progress::Stop
            } else {
                Progress::Stalled
            }
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    /// Mean validation log-likelihood before any update.
    pub initial: f64,
    /// Mean validation log-likelihood after each epoch.
    pub epochs: Vec<f64>,
    /// 0 means the initial parameters were never improved upon.
    pub best_epoch: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"HREDCKPT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            t => Err(Error::format("checkpoint", format!("unknown precision tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: Precision,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub config: TrainConfig,
    pub vocab_digest: String,
    pub history: TrainingHistory,
}

impl Checkpoint {
    pub fn init_schemes() -> String {
        format!(
            "input={};recurrent={}",
            InitScheme::UniformScaled.name(),
            InitScheme::OrthogonalRecurrent.name()
        )
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<()> {
        let actual = vocab.digest();
        if actual != self.vocab_digest {
            return Err(Error::DigestMismatch {
                expected: self.vocab_digest.clone(),
                actual,
            });
        }
        if vocab.len() != self.params.hyper.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                self.params.hyper.vocab_size
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(self.version);
        w.u8(self.precision.tag());
        let h = self.params.hyper;
        for d in [h.vocab_size, h.d_h, h.d_s, h.d_e] {
            w.u64(d as u64);
        }
        let c = &self.config;
        for x in [c.learning_rate, c.rmsprop_decay, c.epsilon, c.clip_threshold] {
            w.f64(x);
        }
        for n in [c.batch_size as u64, c.patience as u64, c.max_epochs as u64, c.seed] {
            w.u64(n);
        }
        w.string(&Checkpoint::init_schemes());
        w.string(&self.vocab_digest);
        w.f64(self.history.initial);
        w.u64(self.history.epochs.len() as u64);
        self.history.epochs.iter().for_each(|&x| w.f64(x));
        w.u64(self.history.best_epoch as u64);
        write_tensors(&mut w, &self.params, self.precision);
        match &self.optimizer {
            None => w.u8(0),
            Some(opt) => {
                w.u8(1);
                w.u64(opt.step);
                write_tensors(&mut w, &opt.acc, self.precision);
            }
        }
        let digest = Sha256::digest(&w.buf);
        w.bytes(&digest);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(Error::format("checkpoint", "file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::format("checkpoint", "checksum mismatch (truncated or corrupt file)"));
        }
        let mut r = ByteReader::new(body, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint", "bad magic bytes"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let precision = Precision::from_tag(r.u8()?)?;
        let hyper = Hyper {
            vocab_size: r.usize()?,
            d_h: r.usize()?,
            d_s: r.usize()?,
            d_e: r.usize()?,
        };
        hyper.validate()?;
        let config = TrainConfig {
            learning_rate: r.f64()?,
            rmsprop_decay: r.f64()?,
            epsilon: r.f64()?,
            clip_threshold: r.f64()?,
            batch_size: r.usize()?,
            patience: r.usize()?,
            max_epochs: r.usize()?,
            seed: r.u64()?,
        };
        let _schemes = r.string()?;
        let vocab_digest = r.string()?;
        let initial = r.f64()?;
        let n_epochs = r.usize()?;
        if n_epochs > r.remaining() / 8 {
            return Err(Error::format("checkpoint", "history length exceeds file size"));
        }
        let epochs = (0..n_epochs).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let best_epoch = r.usize()?;
        let mut params = ModelParams::zeros(hyper);
        read_tensors(&mut r, &mut params, precision)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let mut acc = ModelParams::zeros(hyper);
                read_tensors(&mut r, &mut acc, precision)?;
                Some(OptimizerState { acc, step })
            }
            t => return Err(Error::format("checkpoint", format!("bad optimizer flag {t}"))),
        };
        if r.remaining() != 0 {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Checkpoint {
            version,
            precision,
            params,
            optimizer,
            config,
            vocab_digest,
            history: TrainingHistory {
                initial,
                epochs,
                best_epoch,
            },
        })
    }

    /// Plain-text sidecar listing shapes and digests.
    pub fn manifest(&self, file_bytes: &[u8]) -> String {
        let mut s = String::new();
        let h = self.params.hyper;
        let c = &self.config;
        let _ = writeln!(s, "format = hred-checkpoint");
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "precision = {}", self.precision.name());
        let _ = writeln!(s, "vocab_size = {}", h.vocab_size);
        let _ = writeln!(s, "d_h = {}", h.d_h);
        let _ = writeln!(s, "d_s = {}", h.d_s);
        let _ = writeln!(s, "d_e = {}", h.d_e);
        let _ = writeln!(s, "init = {}", Checkpoint::init_schemes());
        let _ = writeln!(s, "learning_rate = {:.6e}", c.learning_rate);
        let _ = writeln!(s, "rmsprop_decay = {:.6}", c.rmsprop_decay);
        let _ = writeln!(s, "epsilon = {:.6e}", c.epsilon);
        let _ = writeln!(s, "clip_threshold = {:.6}", c.clip_threshold);
        let _ = writeln!(s, "batch_size = {}", c.batch_size);
        let _ = writeln!(s, "patience = {}", c.patience);
        let _ = writeln!(s, "max_epochs = {}", c.max_epochs);
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "vocab_digest = {}", self.vocab_digest);
        let _ = writeln!(s, "best_epoch = {}", self.history.best_epoch);
        let _ = writeln!(s, "epochs_run = {}", self.history.epochs.len());
        let _ = writeln!(s, "optimizer_state = {}", self.optimizer.is_some());
        for info in self.params.layout() {
            let _ = writeln!(s, "tensor {} = {}x{}", info.name, info.rows, info.cols);
        }
        let _ = writeln!(s, "file_sha256 = {}", hex::encode(Sha256::digest(file_bytes)));
        s
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the checkpoint and its `.manifest` sidecar.
pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes();
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let mpath = manifest_path(path);
    fs::write(&mpath, ckpt.manifest(&bytes)).map_err(|e| Error::io(mpath, e))
}

/// Reads a checkpoint; when `vocab` is given its digest must match.
pub fn checkpoint_load(path: &Path, vocab: Option<&Vocabulary>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(v) = vocab {
        ckpt.check_vocabulary(v)?;
    }
    Ok(ckpt)
}

fn write_tensors(w: &mut ByteWriter, params: &ModelParams, precision: Precision) {
    let layout = params.layout();
    w.u32(layout.len() as u32);
    for (info, t) in layout.iter().zip(params.tensors()) {
        w.string(info.name);
        w.u64(info.rows as u64);
        w.u64(info.cols as u64);
        for &x in t {
            match precision {
                Precision::F32 => w.bytes(&(x as f32).to_le_bytes()),
                Precision::F64 => w.f64(x),
            }
        }
    }
}

fn read_tensors(r: &mut ByteReader<'_>, params: &mut ModelParams, precision: Precision) -> Result<()> {
    let layout = params.layout();
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(Error::format("checkpoint", format!("expected {} tensors, found {count}", layout.len())));
    }
    for (info, t) in layout.iter().zip(params.tensors_mut()) {
        let name = r.string()?;
        let (rows, cols) = (r.usize()?, r.usize()?);
        if name != info.name || rows != info.rows || cols != info.cols {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "tensor {name} {rows}x{cols} does not match expected {} {}x{}",
                    info.name, info.rows, info.cols
                ),
            ));
        }
        for x in t.iter_mut() {
            *x = match precision {
                Precision::F32 => f32::from_le_bytes(r.array()?) as f64,
                Precision::F64 => r.f64()?,
            };
            if !x.is_finite() {
                return Err(Error::format("checkpoint", format!("non-finite entry in {name}")));
            }
        }
    }
    Ok(())
}

/// Mean per-session log-likelihood.
pub fn mean_log_likelihood(params: &ModelParams, sessions: &[Session]) -> Result<f64> {
    if sessions.is_empty() {
        return Err(Error::InvalidArgument("no sessions to evaluate".into()));
    }
    let lls: Vec<Result<f64>> = sessions
        .par_iter()
        .map(|s| session_log_likelihood(params, &s.queries))
        .collect();
    let mut total = 0.0;
    for l in lls {
        total += l?;
    }
    Ok(total / sessions.len() as f64)
}

/// Trains on `train`, early-stopping on the mean validation log-likelihood.
pub fn fit(train: &[Session], valid: &[Session], hyper: Hyper, config: &TrainConfig) -> Result<Checkpoint> {
    if valid.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }
    fit_with(train, hyper, config, |p| mean_log_likelihood(p, valid))
}

/// [`fit`] with a caller-supplied validation score (higher is better).
/// The score is computed once before training and once after every epoch.
pub fn fit_with(
    train: &[Session],
    hyper: Hyper,
    config: &TrainConfig,
    mut evaluate: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<Checkpoint> {
    config.validate()?;
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let mut prng = Prng::new(config.seed);
    let mut init_rng = prng.fork();
    let mut shuffle_rng = prng.fork();
    let mut params = ModelParams::init(hyper, &mut init_rng)?;
    let mut opt = OptimizerState::new(hyper);

    let initial = evaluate(&params)?;
    let mut stopper = EarlyStopping::new(config.patience, initial);
    let mut best = Checkpoint {
        version: CHECKPOINT_VERSION,
        precision: Precision::F32,
        params: params.clone(),
        optimizer: Some(opt.clone()),
        config: *config,
        vocab_digest: String::new(),
        history: TrainingHistory {
            initial,
            epochs: Vec::new(),
            best_epoch: 0,
        },
    };
    log::info!("epoch 0: validation log-likelihood {initial:.6}");

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_ll = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Session> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (mut g, ll) = match backward_bptt(&params, &batch) {
                Ok(r) => r,
                Err(Error::NonFiniteGradient { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        checkpoint: Box::new(best),
                    })
                }
                Err(e) => return Err(e),
            };
            if !ll.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    checkpoint: Box::new(best),
                });
            }
            epoch_ll += ll * chunk.len() as f64;
            // descend on the negative log-likelihood
            g.scale(-1.0);
            clip_gradient_norm(&mut g, config.clip_threshold);
            rmsprop_step(&mut params, &g, &mut opt, config);
        }
        let value = evaluate(&params)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                checkpoint: Box::new(best),
            });
        }
        best.history.epochs.push(value);
        log::info!(
            "epoch {epoch}: train log-likelihood {:.6}, validation {value:.6}",
            epoch_ll / train.len() as f64
        );
        match stopper.observe(epoch, value) {
            Progress::Improved => {
                best.params = params.clone();
                best.optimizer = Some(opt.clone());
                best.history.best_epoch = epoch;
            }
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok(best)
}
