//! Encoder-based answer-correctness judges.
//!
//! A judge encodes one or more text pairs built from the question `q`, a
//! reference answer `r` and a candidate `t`, concatenates the pooled vectors,
//! and applies a single-logit linear head. Three families exist:
//!
//! * `A0` - any non-empty subset of `{(q,r), (q,t), (r,t)}`;
//! * `A1` - any non-empty subset of `{(q, r∘t), (r, q∘t), (t, q∘r)}`;
//! * `A2` - exactly `(r, q∘t)` and `(t, q∘r)`, encoded with peer attention.
//!
//! Each pair has its own independent encoder; all are trained jointly.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalTuple;
use crate::encoder::{concat_text, peer_forward, Encoder, EncoderError, Mode};
use crate::metrics::{self, PrecisionRecallF1};
use crate::params::{AdamW, AdamWConfig, ParamStore};
use crate::tape::{sigmoid, Gradients, Tape, Var};
use crate::tensor::Matrix;

/// Point-wise decision threshold on the judge probability.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("training data contains a single class (label {0})")]
    SingleClass(u8),
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize, loss: f64 },
    #[error("bundle {path}: {message}")]
    Bundle { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvaluatorError + '_ {
    move |source| EvaluatorError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Q,
    R,
    T,
}

impl Role {
    fn symbol(self) -> char {
        match self {
            Role::Q => 'q',
            Role::R => 'r',
            Role::T => 't',
        }
    }
}

/// One encoder input: a single role, or two roles joined by the separator.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Segment(Vec<Role>);

impl Segment {
    pub fn roles(&self) -> &[Role] {
        &self.0
    }

    fn text(&self, q: &str, r: &str, t: &str) -> String {
        let pick = |role: &Role| match role {
            Role::Q => q,
            Role::R => r,
            Role::T => t,
        };
        match self.0.as_slice() {
            [one] => pick(one).to_string(),
            [a, b] => concat_text(pick(a), pick(b)),
            _ => unreachable!("segments hold one or two roles"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PairSpec {
    pub first: Segment,
    pub second: Segment,
}

impl PairSpec {
    fn new(first: &[Role], second: &[Role]) -> Self {
        Self { first: Segment(first.to_vec()), second: Segment(second.to_vec()) }
    }

    pub fn texts(&self, q: &str, r: &str, t: &str) -> (String, String) {
        (self.first.text(q, r, t), self.second.text(q, r, t))
    }

    pub fn uses(&self, role: Role) -> bool {
        self.first.0.contains(&role) || self.second.0.contains(&role)
    }

    /// `{(q,r), (q,t), (r,t)}`
    pub fn d0() -> Vec<PairSpec> {
        use Role::*;
        vec![Self::new(&[Q], &[R]), Self::new(&[Q], &[T]), Self::new(&[R], &[T])]
    }

    /// `{(q, r∘t), (r, q∘t), (t, q∘r)}`
    pub fn d1() -> Vec<PairSpec> {
        use Role::*;
        vec![Self::new(&[Q], &[R, T]), Self::new(&[R], &[Q, T]), Self::new(&[T], &[Q, R])]
    }
}

impl fmt::Display for PairSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seg = |s: &Segment| s.0.iter().map(|r| r.symbol().to_string()).collect::<Vec<_>>().join("+");
        write!(f, "{},{}", seg(&self.first), seg(&self.second))
    }
}

impl FromStr for PairSpec {
    type Err = EvaluatorError;

    /// Parses `"r,q+t"` style specs.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || EvaluatorError::Config(format!("cannot parse pair {s:?}; expected e.g. \"q,r\" or \"r,q+t\""));
        let role = |c: &str| match c.trim() {
            "q" => Ok(Role::Q),
            "r" => Ok(Role::R),
            "t" => Ok(Role::T),
            _ => Err(bad()),
        };
        let seg = |part: &str| -> Result<Segment, EvaluatorError> {
            let roles = part.split('+').map(role).collect::<Result<Vec<_>, _>>()?;
            if roles.is_empty() || roles.len() > 2 {
                return Err(bad());
            }
            Ok(Segment(roles))
        };
        let (a, b) = s.trim().trim_start_matches('(').trim_end_matches(')').split_once(',').ok_or_else(bad)?;
        Ok(PairSpec { first: seg(a)?, second: seg(b)? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    A0,
    A1,
    A2,
}

impl FromStr for Family {
    type Err = EvaluatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "A0" => Ok(Family::A0),
            "A1" => Ok(Family::A1),
            "A2" => Ok(Family::A2),
            _ => Err(EvaluatorError::Config(format!("unknown family {s:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// A validated family + pair set. Construct with [`EvaluatorConfig::new`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorConfig {
    family: Family,
    pairs: Vec<PairSpec>,
}

impl EvaluatorConfig {
    pub fn new(family: Family, pairs: Vec<PairSpec>) -> Result<Self, EvaluatorError> {
        if pairs.is_empty() {
            return Err(EvaluatorError::Config("pair set is empty".into()));
        }
        for (i, p) in pairs.iter().enumerate() {
            if pairs[..i].contains(p) {
                return Err(EvaluatorError::Config(format!("pair ({p}) listed twice")));
            }
        }
        let allowed = match family {
            Family::A0 => PairSpec::d0(),
            Family::A1 | Family::A2 => PairSpec::d1(),
        };
        if let Some(p) = pairs.iter().find(|p| !allowed.contains(p)) {
            return Err(EvaluatorError::Config(format!("pair ({p}) is not allowed for {family}")));
        }
        if family == Family::A2 {
            let d1 = PairSpec::d1();
            let required = [d1[1].clone(), d1[2].clone()];
            if pairs.len() != 2 || !required.iter().all(|p| pairs.contains(p)) {
                return Err(EvaluatorError::Config("A2 takes exactly the pairs (r,q+t) and (t,q+r)".into()));
            }
            return Ok(Self { family, pairs: required.to_vec() });
        }
        Ok(Self { family, pairs })
    }

    /// `A2((r, q∘t), (t, q∘r))`
    pub fn a2() -> Self {
        let d1 = PairSpec::d1();
        Self::new(Family::A2, vec![d1[1].clone(), d1[2].clone()]).expect("canonical A2")
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn pairs(&self) -> &[PairSpec] {
        &self.pairs
    }
}

impl fmt::Display for EvaluatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pairs: Vec<String> = self.pairs.iter().map(|p| format!("({p})")).collect();
        write!(f, "{}({})", self.family, pairs.join(","))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    params: ParamStore,
}

impl ClassifierHead {
    const W: usize = 0;
    const B: usize = 1;

    fn new(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = ParamStore::new();
        params.push("head_w", Matrix::from_vec(width, 1, (0..width).map(|_| normal.sample(&mut rng)).collect()));
        params.push("head_b", Matrix::zeros(1, 1));
        Self { params }
    }

    pub fn input_width(&self) -> usize {
        self.params.get(Self::W).rows()
    }
}

/// An assembled judge: configuration, one encoder per pair, and the head.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluatorModel {
    config: EvaluatorConfig,
    encoders: Vec<Encoder>,
    head: ClassifierHead,
}

/// Builds a judge with a fresh encoder per pair from `factory(pair_index)`.
/// The head is seeded with `head_seed`.
pub fn assemble(
    config: EvaluatorConfig,
    mut factory: impl FnMut(usize) -> Result<Encoder, EncoderError>,
    head_seed: u64,
) -> Result<EvaluatorModel, EvaluatorError> {
    let encoders = (0..config.pairs.len()).map(&mut factory).collect::<Result<Vec<_>, _>>()?;
    let d = encoders[0].hidden();
    if let Some(e) = encoders.iter().find(|e| e.hidden() != d) {
        return Err(EncoderError::HiddenMismatch(d, e.hidden()).into());
    }
    let head = ClassifierHead::new(encoders.len() * d, head_seed);
    Ok(EvaluatorModel { config, encoders, head })
}

impl EvaluatorModel {
    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    pub fn encoders(&self) -> &[Encoder] {
        &self.encoders
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn hidden(&self) -> usize {
        self.encoders[0].hidden()
    }

    /// Number of parameter stores: one per encoder plus the head (last).
    pub fn num_stores(&self) -> usize {
        self.encoders.len() + 1
    }

    pub fn store(&self, tag: usize) -> &ParamStore {
        if tag < self.encoders.len() {
            self.encoders[tag].params()
        } else {
            &self.head.params
        }
    }

    pub fn store_mut(&mut self, tag: usize) -> &mut ParamStore {
        if tag < self.encoders.len() {
            self.encoders[tag].params_mut()
        } else {
            &mut self.head.params
        }
    }

    fn head_tag(&self) -> usize {
        self.encoders.len()
    }

    /// Pooled vector of each pair, in configuration order.
    pub fn pair_representations(&self, tape: &mut Tape, q: &str, r: &str, t: &str, mode: &mut Mode<'_>) -> Vec<Var> {
        let texts: Vec<(String, String)> = self.config.pairs.iter().map(|p| p.texts(q, r, t)).collect();
        match self.config.family {
            Family::A2 => {
                let (a, g) = peer_forward(
                    tape,
                    (&self.encoders[0], 0),
                    (&self.encoders[1], 1),
                    (&texts[0].0, &texts[0].1),
                    (&texts[1].0, &texts[1].1),
                    mode,
                )
                .expect("encoders share d by construction");
                vec![a, g]
            }
            Family::A0 | Family::A1 => {
                self.encoders.iter().zip(&texts).enumerate().map(|(i, (enc, (a, b)))| enc.forward(tape, i, a, b, None, mode)).collect()
            }
        }
    }

    /// Applies the head to concatenated pair vectors; returns the logit.
    pub fn head_logit(&self, tape: &mut Tape, reps: &[Var]) -> Var {
        let x = if reps.len() == 1 { reps[0] } else { tape.concat_cols(reps) };
        let tag = self.head_tag();
        let w = tape.param((tag, ClassifierHead::W), self.head.params.get(ClassifierHead::W));
        let b = tape.param((tag, ClassifierHead::B), self.head.params.get(ClassifierHead::B));
        let z = tape.matmul(x, w);
        tape.add(z, b)
    }

    pub fn logit_on_tape(&self, tape: &mut Tape, q: &str, r: &str, t: &str, mode: &mut Mode<'_>) -> Var {
        let reps = self.pair_representations(tape, q, r, t, mode);
        self.head_logit(tape, &reps)
    }

    /// Probability that `t` is a correct answer to `q` given reference `r`.
    pub fn forward(&self, q: &str, r: &str, t: &str) -> f64 {
        let mut tape = Tape::new();
        let z = self.logit_on_tape(&mut tape, q, r, t, &mut Mode::Eval);
        sigmoid(tape.value(z).get(0, 0))
    }

    /// Cross-entropy loss of one tuple and its gradients.
    pub fn loss_and_gradients(&self, tuple: &EvalTuple, mode: &mut Mode<'_>) -> (f64, Gradients) {
        let mut tape = Tape::new();
        let z = self.logit_on_tape(&mut tape, &tuple.question, &tuple.reference, &tuple.candidate, mode);
        let loss = tape.bce_with_logits(z, f64::from(tuple.label));
        let value = tape.value(loss).get(0, 0);
        (value, tape.backward(loss))
    }

    pub fn loss(&self, tuple: &EvalTuple) -> f64 {
        let mut tape = Tape::new();
        let z = self.logit_on_tape(&mut tape, &tuple.question, &tuple.reference, &tuple.candidate, &mut Mode::Eval);
        let loss = tape.bce_with_logits(z, f64::from(tuple.label));
        tape.value(loss).get(0, 0)
    }

    pub fn save(&self, dir: &Path) -> Result<(), EvaluatorError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = String::new();
        manifest.push_str("format = evaluator-v1\n");
        manifest.push_str(&format!("family = {}\n", self.config.family));
        for p in &self.config.pairs {
            manifest.push_str(&format!("pair = {p}\n"));
        }
        for (i, enc) in self.encoders.iter().enumerate() {
            let name = format!("encoder_{i}");
            enc.save(&dir.join(&name))?;
            manifest.push_str(&format!("encoder = {name}\n"));
        }
        manifest.push_str(&format!("head_width = {}\n", self.head.input_width()));
        fs::write(dir.join("evaluator.txt"), manifest).map_err(io_err(dir))?;
        self.head.params.write_tensors(dir).map_err(io_err(dir))
    }

    pub fn load(dir: &Path) -> Result<Self, EvaluatorError> {
        let bad = |message: String| EvaluatorError::Bundle { path: dir.display().to_string(), message };
        let text = fs::read_to_string(dir.join("evaluator.txt")).map_err(io_err(dir))?;
        let (mut family, mut pairs, mut encoders, mut width) = (None, Vec::new(), Vec::new(), None);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            let v = v.trim();
            match k.trim() {
                "format" if v == "evaluator-v1" => {}
                "format" => return Err(bad(format!("unsupported format {v}"))),
                "family" => family = Some(v.parse::<Family>()?),
                "pair" => pairs.push(v.parse::<PairSpec>()?),
                "encoder" => encoders.push(Encoder::load(&dir.join(v))?),
                "head_width" => width = Some(v.parse::<usize>().map_err(|_| bad("bad head_width".into()))?),
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        let config = EvaluatorConfig::new(family.ok_or_else(|| bad("missing family".into()))?, pairs)?;
        if encoders.len() != config.pairs.len() {
            return Err(bad(format!("{} encoders for {} pairs", encoders.len(), config.pairs.len())));
        }
        let mut head = ClassifierHead::new(encoders.len() * encoders[0].hidden(), 0);
        if Some(head.input_width()) != width {
            return Err(bad("head width does not match encoders".into()));
        }
        head.params.read_tensors(dir).map_err(|e| bad(e.to_string()))?;
        Ok(Self { config, encoders, head })
    }

    /// Rounds all parameters through `f32`, the precision of saved bundles.
    pub fn round_to_f32(&mut self) {
        for tag in 0..self.num_stores() {
            self.store_mut(tag).round_to_f32();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Passes over the training data.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Learning rate used with large pretrained encoders.
    pub const PRETRAINED_LEARNING_RATE: f64 = 1e-6;
    /// Learning rate used with the desk-scale encoder trained from scratch.
    pub const TINY_LEARNING_RATE: f64 = 1e-3;
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: Self::TINY_LEARNING_RATE, weight_decay: 0.01, epochs: 2, batch_size: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub mean_batch_loss: f64,
    /// Evaluation-mode loss over the training set at the end of the epoch.
    pub train_loss: f64,
    pub dev: PrecisionRecallF1,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Evaluation-mode loss over the training set before any update.
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }
}

/// Keeps the parameters of the epoch with the highest dev F1. Ties keep the
/// earlier epoch.
#[derive(Debug)]
pub struct BestCheckpoint<T> {
    best: Option<(usize, f64, T)>,
}

impl<T> Default for BestCheckpoint<T> {
    fn default() -> Self {
        Self { best: None }
    }
}

impl<T> BestCheckpoint<T> {
    pub fn offer(&mut self, epoch: usize, f1: f64, snapshot: impl FnOnce() -> T) {
        if self.best.as_ref().map_or(true, |(_, best, _)| f1 > *best) {
            self.best = Some((epoch, f1, snapshot()));
        }
    }

    pub fn into_best(self) -> Option<(usize, T)> {
        self.best.map(|(e, _, t)| (e, t))
    }
}

fn mean_loss(model: &EvaluatorModel, data: &[EvalTuple]) -> f64 {
    data.par_iter().map(|t| model.loss(t)).collect::<Vec<_>>().iter().sum::<f64>() / data.len() as f64
}

/// Trains with binary cross-entropy and AdamW, evaluates dev F1 at every
/// epoch boundary and returns the best epoch's parameters.
pub fn train(mut model: EvaluatorModel, train: &[EvalTuple], dev: &[EvalTuple], cfg: &TrainConfig) -> Result<(EvaluatorModel, TrainHistory), EvaluatorError> {
    if train.is_empty() {
        return Err(EvaluatorError::Empty("training"));
    }
    if dev.is_empty() {
        return Err(EvaluatorError::Empty("development"));
    }
    if train.iter().all(|t| t.label == train[0].label) {
        return Err(EvaluatorError::SingleClass(train[0].label));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(EvaluatorError::Config("epochs and batch size must be positive".into()));
    }

    let adam = AdamWConfig { learning_rate: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut optimizers: Vec<AdamW> = (0..model.num_stores()).map(|tag| AdamW::new(adam, model.store(tag))).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial_train_loss = mean_loss(&model, train);
    if !initial_train_loss.is_finite() {
        return Err(EvaluatorError::NonFinite { epoch: 0, step: 0, loss: initial_train_loss });
    }
    let mut history = TrainHistory { initial_train_loss, epochs: Vec::new(), best_epoch: 0 };
    let mut best = BestCheckpoint::default();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut batch_losses = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 48) ^ ((step as u64) << 16) ^ k as u64);
                    model.loss_and_gradients(&train[i], &mut Mode::Train(&mut rng))
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let loss = results.iter().map(|(l, _)| l).sum::<f64>() * scale;
            if !loss.is_finite() {
                return Err(EvaluatorError::NonFinite { epoch, step, loss });
            }
            batch_losses.push(loss);

            let mut grads: Vec<Gradients> = results.into_iter().map(|(_, g)| g).collect();
            for (tag, opt) in optimizers.iter_mut().enumerate() {
                let n = model.store(tag).len();
                let summed: Vec<Option<Matrix>> = (0..n)
                    .map(|i| {
                        let mut acc: Option<Matrix> = None;
                        for g in grads.iter_mut() {
                            if let Some(m) = g.take((tag, i)) {
                                match &mut acc {
                                    Some(a) => a.add_assign(&m),
                                    None => acc = Some(m),
                                }
                            }
                        }
                        acc.map(|mut a| {
                            a.scale_assign(scale);
                            a
                        })
                    })
                    .collect();
                opt.step(model.store_mut(tag), &summed);
            }
        }

        let dev_scores = predict_pointwise(&model, dev);
        let decisions: Vec<u8> = dev_scores.iter().map(|&(_, d)| d).collect();
        let labels: Vec<u8> = dev.iter().map(|t| t.label).collect();
        let dev_prf = metrics::precision_recall_f1(&decisions, &labels).expect("equal lengths");
        let train_loss = mean_loss(&model, train);
        history.epochs.push(EpochRecord {
            epoch,
            mean_batch_loss: batch_losses.iter().sum::<f64>() / batch_losses.len() as f64,
            train_loss,
            dev: dev_prf,
        });
        best.offer(epoch, dev_prf.f1, || model.clone());
    }

    let (best_epoch, best_model) = best.into_best().expect("at least one epoch");
    history.best_epoch = best_epoch;
    Ok((best_model, history))
}

/// Probability and decision (`p > 0.5`) per tuple.
pub fn predict_pointwise(model: &EvaluatorModel, tuples: &[EvalTuple]) -> Vec<(f64, u8)> {
    tuples
        .par_iter()
        .map(|t| {
            let p = model.forward(&t.question, &t.reference, &t.candidate);
            (p, decide(p))
        })
        .collect()
}

pub fn decide(probability: f64) -> u8 {
    u8::from(probability > DECISION_THRESHOLD)
}
