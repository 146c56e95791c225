//! Deterministic optimization loop.
//!
//! Each step recomputes token scores and masks from the current policy,
//! evaluates the batch objective with those masks held fixed, and applies
//! one optimizer update. Reference log-probs are computed once per pair.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{PreferenceDataset, PreferencePair};
use crate::error::{Error, Result};
use crate::fsio;
use crate::loss::{evaluate_batch, BatchItem, BatchOutput, LossConfig, Objective, ReferenceLogProbs};
use crate::policy::{BigramPolicy, LogitGradient, PolicyInit};
use crate::rng::SeededRng;

pub use crate::gradcheck::{finite_diff_check, GradCheckReport};

pub const DEFAULT_BETA: f64 = 0.01;
pub const DEFAULT_K_PERCENT: f64 = 40.0;
pub const DEFAULT_EPOCHS: usize = 2;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const DEFAULT_RANDOM_INIT_SCALE: f64 = 1.0;

/// Which policy anchors the objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ReferenceSpec {
    /// Frozen copy of the policy before training.
    InitialSnapshot,
    /// A previously trained checkpoint of the same size.
    Checkpoint(PathBuf),
    /// A stronger policy, e.g. the oracle of a generated corpus.
    Oracle(PathBuf),
}

impl fmt::Display for ReferenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReferenceSpec::InitialSnapshot => write!(f, "init"),
            ReferenceSpec::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
            ReferenceSpec::Oracle(p) => write!(f, "oracle:{}", p.display()),
        }
    }
}

impl FromStr for ReferenceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "init" {
            return Ok(ReferenceSpec::InitialSnapshot);
        }
        match s.split_once(':') {
            Some(("oracle", p)) if !p.is_empty() => Ok(ReferenceSpec::Oracle(p.into())),
            Some(("checkpoint", p)) if !p.is_empty() => Ok(ReferenceSpec::Checkpoint(p.into())),
            _ => Err(Error::validation(
                "reference",
                format!("{s:?} is not one of init | oracle:PATH | checkpoint:PATH"),
            )),
        }
    }
}

impl From<ReferenceSpec> for String {
    fn from(r: ReferenceSpec) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for ReferenceSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Starting point of the trained policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum InitSpec {
    Zeros,
    Random { scale: f64, seed: u64 },
    Checkpoint(PathBuf),
}

impl fmt::Display for InitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitSpec::Zeros => write!(f, "zeros"),
            InitSpec::Random { scale, seed } => write!(f, "random:{scale}:{seed}"),
            InitSpec::Checkpoint(p) => write!(f, "checkpoint:{}", p.display()),
        }
    }
}

impl FromStr for InitSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::validation(
                "init",
                format!("{s:?} is not one of zeros | random:SCALE[:SEED] | checkpoint:PATH"),
            )
        };
        if s == "zeros" {
            return Ok(InitSpec::Zeros);
        }
        if let Some(p) = s.strip_prefix("checkpoint:") {
            return if p.is_empty() {
                Err(bad())
            } else {
                Ok(InitSpec::Checkpoint(p.into()))
            };
        }
        if let Some(rest) = s.strip_prefix("random") {
            let mut parts = rest
                .strip_prefix(':')
                .unwrap_or(rest)
                .split(':')
                .filter(|x| !x.is_empty());
            let scale = match parts.next() {
                Some(x) => x.parse().map_err(|_| bad())?,
                None => DEFAULT_RANDOM_INIT_SCALE,
            };
            let seed = match parts.next() {
                Some(x) => x.parse().map_err(|_| bad())?,
                None => 0,
            };
            if parts.next().is_some() {
                return Err(bad());
            }
            return Ok(InitSpec::Random { scale, seed });
        }
        Err(bad())
    }
}

impl From<InitSpec> for String {
    fn from(i: InitSpec) -> String {
        i.to_string()
    }
}

impl TryFrom<String> for InitSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Epochs(usize),
    Steps(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub k_percent: f64,
    pub optimizer: OptimizerKind,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seed: u64,
    pub reference: ReferenceSpec,
    pub init: InitSpec,
    #[serde(skip)]
    pub metrics_path: Option<PathBuf>,
    #[serde(skip)]
    pub checkpoint_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::SelectiveDpo,
            beta: DEFAULT_BETA,
            k_percent: DEFAULT_K_PERCENT,
            optimizer: OptimizerKind::Sgd { lr: DEFAULT_LR },
            schedule: Schedule::Epochs(DEFAULT_EPOCHS),
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            reference: ReferenceSpec::InitialSnapshot,
            init: InitSpec::Zeros,
            metrics_path: None,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            k_percent: self.k_percent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        validate_optimizer(&self.optimizer)?;
        if self.optimizer.lr() == 0.0 {
            return Err(Error::validation("lr", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size", "must be at least 1"));
        }
        match self.schedule {
            Schedule::Epochs(0) => Err(Error::validation("epochs", "must be at least 1")),
            Schedule::Steps(0) => Err(Error::validation("steps", "must be at least 1")),
            _ => Ok(()),
        }
    }
}

fn validate_optimizer(opt: &OptimizerKind) -> Result<()> {
    let lr = opt.lr();
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::validation(
            "lr",
            format!("must be finite and non-negative, got {lr}"),
        ));
    }
    if let OptimizerKind::Adam { beta1, beta2, eps, .. } = *opt {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::validation("adam", "moment decay rates must lie in [0, 1)"));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::validation("adam", "eps must be positive"));
        }
    }
    Ok(())
}

pub fn resolve_init(spec: &InitSpec, vocab_size: usize) -> Result<BigramPolicy> {
    let policy = match spec {
        InitSpec::Zeros => BigramPolicy::new(vocab_size, PolicyInit::Zeros)?,
        InitSpec::Random { scale, seed } => BigramPolicy::new(
            vocab_size,
            PolicyInit::SeededRandom {
                scale: *scale,
                seed: *seed,
            },
        )?,
        InitSpec::Checkpoint(path) => BigramPolicy::load_checkpoint(path)?.0,
    };
    check_vocab("initial policy", &policy, vocab_size)?;
    Ok(policy)
}

/// Materializes the frozen reference. `initial` is the pre-training policy.
pub fn resolve_reference(spec: &ReferenceSpec, initial: &BigramPolicy) -> Result<BigramPolicy> {
    let reference = match spec {
        ReferenceSpec::InitialSnapshot => initial.clone(),
        ReferenceSpec::Checkpoint(path) | ReferenceSpec::Oracle(path) => BigramPolicy::load_checkpoint(path)?.0,
    };
    check_vocab("reference", &reference, initial.vocab_size())?;
    Ok(reference)
}

fn check_vocab(what: &str, policy: &BigramPolicy, expected: usize) -> Result<()> {
    if policy.vocab_size() != expected {
        return Err(Error::Config(format!(
            "{what} has vocab_size {}, expected {expected}",
            policy.vocab_size()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }
}

/// In-place update of `params`.
pub fn optimizer_update(kind: &OptimizerKind, state: &mut OptimizerState, grad: &[f64], params: &mut [f64]) {
    assert_eq!(grad.len(), params.len(), "gradient and parameter shapes differ");
    state.step += 1;
    match *kind {
        OptimizerKind::Sgd { lr } => {
            for (p, g) in params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        OptimizerKind::Adam { lr, beta1, beta2, eps } => {
            assert_eq!(state.first_moment.len(), params.len(), "optimizer state shape");
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (((p, g), m), v) in params
                .iter_mut()
                .zip(grad)
                .zip(&mut state.first_moment)
                .zip(&mut state.second_moment)
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean batch loss before this step's update.
    pub loss: f64,
    pub grad_norm: f64,
    pub selected_fraction: f64,
    /// FNV-1a digest of the masks used for this step's gradient.
    #[serde(skip)]
    pub mask_fingerprint: u64,
}

fn mask_fingerprint(out: &BatchOutput) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for m in &out.masks {
        for &bit in m.win.iter().chain(&m.lose) {
            feed(bit as u8);
        }
        feed(0xff);
    }
    h
}

#[allow(clippy::too_many_arguments)]
fn step_core(
    policy: &mut BigramPolicy,
    items: &[BatchItem<'_>],
    objective: Objective,
    loss_config: &LossConfig,
    optimizer: &OptimizerKind,
    state: &mut OptimizerState,
    step: usize,
    epoch: usize,
) -> Result<(StepRecord, LogitGradient)> {
    let table = policy.log_prob_table();
    let out = evaluate_batch(&table, policy.vocab_size(), items, loss_config, objective)?;
    let record = StepRecord {
        step,
        epoch,
        loss: out.loss,
        grad_norm: out.grad.frobenius_norm(),
        selected_fraction: out.selected_fraction(),
        mask_fingerprint: mask_fingerprint(&out),
    };
    optimizer_update(optimizer, state, out.grad.values(), policy.logits_mut());
    if policy.logits().iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            quantity: "parameters",
            pair: items[0].index,
        });
    }
    Ok((record, out.grad))
}

/// One optimizer step on `batch` from an explicit state; inputs are not modified.
pub fn train_step(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    batch: &[PreferencePair],
    objective: Objective,
    loss_config: &LossConfig,
    optimizer: &OptimizerKind,
    state: &OptimizerState,
) -> Result<(BigramPolicy, OptimizerState, StepRecord)> {
    loss_config.validate()?;
    validate_optimizer(optimizer)?;
    let refs = reference_cache(reference, batch, objective)?;
    let items: Vec<BatchItem<'_>> = batch
        .iter()
        .zip(&refs)
        .enumerate()
        .map(|(index, (pair, r))| BatchItem {
            index,
            pair,
            reference: r.as_ref(),
            frozen_mask: None,
        })
        .collect();
    let mut next = policy.clone();
    let mut next_state = state.clone();
    if next_state.first_moment.len() != next.logits().len() {
        next_state = OptimizerState {
            step: state.step,
            ..OptimizerState::new(next.logits().len())
        };
    }
    let step = state.step as usize;
    let (record, _) = step_core(
        &mut next,
        &items,
        objective,
        loss_config,
        optimizer,
        &mut next_state,
        step,
        0,
    )?;
    Ok((next, next_state, record))
}

fn reference_cache(
    reference: Option<&BigramPolicy>,
    pairs: &[PreferencePair],
    objective: Objective,
) -> Result<Vec<Option<ReferenceLogProbs>>> {
    match (objective.needs_reference(), reference) {
        (false, _) => Ok(vec![None; pairs.len()]),
        (true, None) => Err(Error::Config(format!(
            "{} requires a reference policy",
            objective.as_str()
        ))),
        (true, Some(r)) => pairs
            .iter()
            .map(|p| ReferenceLogProbs::compute(r, p).map(Some))
            .collect(),
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub policy: BigramPolicy,
    pub records: Vec<StepRecord>,
    pub wall_clock: Duration,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn mean_selected_fraction(&self) -> f64 {
        self.records.iter().map(|r| r.selected_fraction).sum::<f64>() / self.records.len().max(1) as f64
    }
}

pub fn metrics_jsonl(records: &[StepRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn checkpoint_meta(config: &TrainConfig, steps: usize) -> serde_json::Value {
    json!({ "config": config, "steps": steps })
}

/// Resolves the initial policy and reference from `config`, then trains.
pub fn train(dataset: &PreferenceDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let initial = resolve_init(&config.init, dataset.vocab.size())?;
    let reference = resolve_reference(&config.reference, &initial)?;
    train_with(dataset, config, initial, &reference)
}

/// Trains `initial` against a given frozen `reference`.
pub fn train_with(
    dataset: &PreferenceDataset,
    config: &TrainConfig,
    initial: BigramPolicy,
    reference: &BigramPolicy,
) -> Result<TrainReport> {
    config.validate()?;
    check_vocab("initial policy", &initial, dataset.vocab.size())?;
    check_vocab("reference", reference, dataset.vocab.size())?;

    let started = Instant::now();
    let objective = config.objective;
    let loss_config = config.loss_config();
    let refs = reference_cache(Some(reference), &dataset.pairs, objective)?;

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = match config.schedule {
        Schedule::Epochs(e) => e * steps_per_epoch,
        Schedule::Steps(s) => s,
    };

    let mut policy = initial;
    let mut state = OptimizerState::new(policy.logits().len());
    let mut rng = SeededRng::new(config.seed);
    let mut records = Vec::with_capacity(total_steps);
    let mut step = 0;
    let mut epoch = 0;
    let mut failure = None;

    'outer: while step < total_steps {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            if step == total_steps {
                break 'outer;
            }
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    index: i,
                    pair: &dataset.pairs[i],
                    reference: refs[i].as_ref(),
                    frozen_mask: None,
                })
                .collect();
            match step_core(
                &mut policy,
                &items,
                objective,
                &loss_config,
                &config.optimizer,
                &mut state,
                step,
                epoch,
            ) {
                Ok((record, _)) => records.push(record),
                Err(e) => {
                    failure = Some(e);
                    break 'outer;
                }
            }
            step += 1;
        }
        epoch += 1;
    }

    if let Some(path) = &config.metrics_path {
        fsio::write_atomic(path, metrics_jsonl(&records).as_bytes())?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(path) = &config.checkpoint_path {
        policy.save_checkpoint(path, checkpoint_meta(config, records.len()))?;
    }
    Ok(TrainReport {
        policy,
        records,
        wall_clock: started.elapsed(),
        config: config.clone(),
    })
}

/// Reads a metrics file back into records.
pub fn load_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fsio::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: i + 1,
                field: "<record>".into(),
                message: e.to_string(),
            })
        })
        .collect()
}
