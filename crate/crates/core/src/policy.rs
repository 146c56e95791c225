//! Tabular bigram policy: the model being optimized and the frozen reference.
//!
//! Row `c` of the logit table is the next-token distribution after token `c`.
//! The first response token is conditioned on the last prompt token; prompt
//! tokens themselves never contribute probability terms.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsio;
use crate::rng::SeededRng;

pub type TokenId = u32;

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;
pub const BIGRAM_BACKEND: &str = "bigram";

/// Per-token conditional log-probabilities of one response under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs(pub Vec<f64>);

impl TokenLogProbs {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sequence log-likelihood `log π(y|x)`.
    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for TokenLogProbs {
    fn from(v: Vec<f64>) -> Self {
        TokenLogProbs(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyInit {
    Zeros,
    /// Entries i.i.d. uniform on `[-scale, scale]`.
    SeededRandom {
        scale: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigramPolicy {
    vocab_size: usize,
    logits: Vec<f64>,
}

impl BigramPolicy {
    pub fn new(vocab_size: usize, mode: PolicyInit) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be at least 2, got {vocab_size}"),
            ));
        }
        let n = vocab_size * vocab_size;
        let logits = match mode {
            PolicyInit::Zeros => vec![0.0; n],
            PolicyInit::SeededRandom { scale, seed } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(Error::validation(
                        "scale",
                        format!("must be positive and finite, got {scale}"),
                    ));
                }
                let mut rng = SeededRng::new(seed);
                (0..n).map(|_| rng.uniform(-scale, scale)).collect()
            }
        };
        Ok(Self { vocab_size, logits })
    }

    /// Builds a policy from a row-major `V×V` logit table.
    pub fn from_logits(vocab_size: usize, logits: Vec<f64>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be at least 2, got {vocab_size}"),
            ));
        }
        if logits.len() != vocab_size * vocab_size {
            return Err(Error::validation(
                "logits",
                format!(
                    "expected {} entries (V²), got {}",
                    vocab_size * vocab_size,
                    logits.len()
                ),
            ));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::validation("logits", format!("entry {i} is not finite")));
        }
        Ok(Self { vocab_size, logits })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, context: TokenId) -> &[f64] {
        let v = self.vocab_size;
        let c = context as usize;
        &self.logits[c * v..(c + 1) * v]
    }

    /// Adds `delta` to every entry of one row.
    pub fn shift_row(&mut self, context: TokenId, delta: f64) {
        let v = self.vocab_size;
        let c = context as usize;
        for x in &mut self.logits[c * v..(c + 1) * v] {
            *x += delta;
        }
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn row_log_softmax(&self, context: TokenId) -> Vec<f64> {
        log_softmax(self.row(context))
    }

    pub fn row_probs(&self, context: TokenId) -> Vec<f64> {
        self.row_log_softmax(context).into_iter().map(f64::exp).collect()
    }

    /// Log-probabilities for every (context, token) cell, computed once.
    pub fn log_prob_table(&self) -> LogProbTable {
        let v = self.vocab_size;
        let mut values = Vec::with_capacity(v * v);
        for c in 0..v {
            values.extend(log_softmax(self.row(c as TokenId)));
        }
        LogProbTable { vocab_size: v, values }
    }

    pub fn log_prob_tokens(&self, prompt: &[TokenId], response: &[TokenId]) -> Result<TokenLogProbs> {
        self.check_ids("prompt", prompt)?;
        self.check_ids("response", response)?;
        if prompt.is_empty() {
            return Err(Error::validation("prompt", "must be non-empty"));
        }
        if response.is_empty() {
            return Err(Error::validation("response", "must be non-empty"));
        }
        let cache = self.log_prob_table();
        Ok(cache.token_log_probs(prompt, response))
    }

    /// `∂ log p(t|c) / ∂ logits[c][j] = 1[j = t] − p(j|c)`; all other rows are zero.
    pub fn grad_log_prob_token(&self, context: TokenId, token: TokenId) -> Result<RowGradient> {
        self.check_ids("context", &[context])?;
        self.check_ids("token", &[token])?;
        let mut values: Vec<f64> = self.row_probs(context).into_iter().map(|p| -p).collect();
        values[token as usize] += 1.0;
        Ok(RowGradient { row: context, values })
    }

    /// Ancestral sampling by inverse CDF over each row's conditional.
    pub fn sample_response(&self, prompt: &[TokenId], length: usize, seed: u64) -> Result<Vec<TokenId>> {
        if length == 0 {
            return Err(Error::validation("length", "must be at least 1"));
        }
        self.check_ids("prompt", prompt)?;
        let last = *prompt
            .last()
            .ok_or_else(|| Error::validation("prompt", "must be non-empty"))?;
        let mut rng = SeededRng::new(seed);
        Ok(self.sample_with(&mut rng, last, length))
    }

    pub(crate) fn sample_with(&self, rng: &mut SeededRng, mut context: TokenId, length: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(length);
        for _ in 0..length {
            let probs = self.row_probs(context);
            let next = inverse_cdf(&probs, rng.next_f64()) as TokenId;
            out.push(next);
            context = next;
        }
        out
    }

    pub(crate) fn check_ids(&self, field: &str, ids: &[TokenId]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::validation(
                field,
                format!("token id {bad} out of range for vocab_size {}", self.vocab_size),
            ));
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path, meta: Value) -> Result<()> {
        let ckpt = PolicyCheckpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            backend: BIGRAM_BACKEND.to_string(),
            vocab_size: self.vocab_size,
            logits: self.logits.clone(),
            meta,
        };
        let mut text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        text.push('\n');
        fsio::write_atomic(path, text.as_bytes())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Self, Value)> {
        let text = fsio::read_to_string(path)?;
        Self::parse_checkpoint(&text, path)
    }

    pub(crate) fn parse_checkpoint(text: &str, path: &Path) -> Result<(Self, Value)> {
        let format_err = |field: &str, message: String| Error::Format {
            path: path.to_path_buf(),
            line: 1,
            field: field.to_string(),
            message,
        };
        let raw: Value = serde_json::from_str(text).map_err(|e| format_err("<json>", e.to_string()))?;
        let obj = raw
            .as_object()
            .ok_or_else(|| format_err("<root>", "expected a JSON object".into()))?;
        let version = obj
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| format_err("format_version", "missing or not an integer".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let ckpt: PolicyCheckpoint =
            serde_json::from_value(raw).map_err(|e| format_err("<checkpoint>", e.to_string()))?;
        if ckpt.backend != BIGRAM_BACKEND {
            return Err(format_err("backend", format!("unsupported backend {:?}", ckpt.backend)));
        }
        let expected = ckpt.vocab_size * ckpt.vocab_size;
        if ckpt.logits.len() != expected {
            return Err(format_err(
                "logits",
                format!(
                    "expected {expected} values (vocab_size² = {}²), found {}",
                    ckpt.vocab_size,
                    ckpt.logits.len()
                ),
            ));
        }
        let policy = Self::from_logits(ckpt.vocab_size, ckpt.logits)?;
        Ok((policy, ckpt.meta))
    }
}

/// On-disk policy representation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub format_version: u64,
    pub backend: String,
    pub vocab_size: usize,
    pub logits: Vec<f64>,
    #[serde(default)]
    pub meta: Value,
}

/// Precomputed log-softmax of every row.
#[derive(Debug, Clone)]
pub struct LogProbTable {
    vocab_size: usize,
    values: Vec<f64>,
}

impl LogProbTable {
    #[inline]
    pub fn log_prob(&self, context: TokenId, token: TokenId) -> f64 {
        self.values[context as usize * self.vocab_size + token as usize]
    }

    pub fn row(&self, context: TokenId) -> &[f64] {
        let v = self.vocab_size;
        let c = context as usize;
        &self.values[c * v..(c + 1) * v]
    }

    /// Ids are assumed validated.
    pub fn token_log_probs(&self, prompt: &[TokenId], response: &[TokenId]) -> TokenLogProbs {
        let mut context = *prompt.last().expect("non-empty prompt");
        let mut out = Vec::with_capacity(response.len());
        for &t in response {
            out.push(self.log_prob(context, t));
            context = t;
        }
        TokenLogProbs(out)
    }
}

/// Gradient of one token log-probability: nonzero only in `row`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient {
    pub row: TokenId,
    pub values: Vec<f64>,
}

/// Dense gradient with the shape of the logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitGradient {
    vocab_size: usize,
    values: Vec<f64>,
}

impl LogitGradient {
    pub fn zeros(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            values: vec![0.0; vocab_size * vocab_size],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, context: TokenId, token: TokenId) -> f64 {
        self.values[context as usize * self.vocab_size + token as usize]
    }

    /// Adds `coef · ∇ log p(token | context)` using the row's log-probs.
    pub(crate) fn add_token(&mut self, table: &LogProbTable, context: TokenId, token: TokenId, coef: f64) {
        let v = self.vocab_size;
        let c = context as usize;
        let row = &mut self.values[c * v..(c + 1) * v];
        for (g, lp) in row.iter_mut().zip(table.row(context)) {
            *g -= coef * lp.exp();
        }
        row[token as usize] += coef;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn inverse_cdf(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding slack above the last partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn zeros_is_uniform() {
        let p = BigramPolicy::new(2, PolicyInit::Zeros).unwrap();
        assert_eq!(p.row_probs(0), vec![0.5, 0.5]);
        assert_eq!(p.row_probs(1), vec![0.5, 0.5]);
        let lp = p.log_prob_tokens(&[1], &[0, 1]).unwrap();
        for v in lp.as_slice() {
            assert!((v + LN2).abs() < 1e-15);
        }
    }

    #[test]
    fn zeros_v32_log_prob() {
        let p = BigramPolicy::new(32, PolicyInit::Zeros).unwrap();
        let lp = p.log_prob_tokens(&[3], &[7, 31, 0]).unwrap();
        for v in lp.as_slice() {
            assert!((v - (1.0f64 / 32.0).ln()).abs() < 1e-12);
            assert!((v + 3.465736).abs() < 1e-6);
        }
    }

    #[test]
    fn vocab_below_two_rejected() {
        assert!(matches!(
            BigramPolicy::new(1, PolicyInit::Zeros),
            Err(Error::Validation { ref field, .. }) if field == "vocab_size"
        ));
    }

    #[test]
    fn random_init_deterministic() {
        let a = BigramPolicy::new(8, PolicyInit::SeededRandom { scale: 1.0, seed: 42 }).unwrap();
        let b = BigramPolicy::new(8, PolicyInit::SeededRandom { scale: 1.0, seed: 42 }).unwrap();
        assert_eq!(a, b);
        assert!(a.logits().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(BigramPolicy::new(8, PolicyInit::SeededRandom { scale: 0.0, seed: 1 }).is_err());
    }

    #[test]
    fn log_three_to_one_row() {
        // log(3/4): the digits below come from an independent decimal evaluation
        let p = BigramPolicy::from_logits(2, vec![3f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let lp = p.log_prob_tokens(&[0], &[0]).unwrap();
        assert!((lp.0[0] - (-0.287_682_072_451_780_9)).abs() < 1e-15);
    }

    #[test]
    fn sum_matches_joint_enumeration() {
        let p = BigramPolicy::from_logits(2, vec![0.3, -1.2, 2.0, 0.5]).unwrap();
        // joint probability of response [1, 0, 1] after prompt [0], by direct ratio of exponentials
        let cond = |c: usize, t: usize| {
            let r = &p.logits()[c * 2..c * 2 + 2];
            r[t].exp() / (r[0].exp() + r[1].exp())
        };
        let joint = cond(0, 1) * cond(1, 0) * cond(0, 1);
        let mut total = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    total += cond(0, a) * cond(a, b) * cond(b, c);
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
        let lp = p.log_prob_tokens(&[0], &[1, 0, 1]).unwrap();
        assert!((lp.sum() - joint.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_response_rejected() {
        let p = BigramPolicy::new(4, PolicyInit::Zeros).unwrap();
        assert!(p.log_prob_tokens(&[0], &[]).is_err());
        assert!(p.log_prob_tokens(&[0], &[4]).is_err());
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let p = BigramPolicy::from_logits(2, vec![1e300, -1e300, 700.0, 710.0]).unwrap();
        let lp = p.log_prob_tokens(&[0], &[0, 1, 0]).unwrap();
        assert!(lp.as_slice().iter().all(|x| x.is_finite()));
        assert_eq!(lp.0[0], 0.0);
    }

    #[test]
    fn uniform_gradient() {
        let p = BigramPolicy::new(2, PolicyInit::Zeros).unwrap();
        let g = p.grad_log_prob_token(1, 0).unwrap();
        assert_eq!(g.row, 1);
        assert_eq!(g.values, vec![0.5, -0.5]);
    }

    #[test]
    fn gradient_matches_central_difference() {
        let p = BigramPolicy::new(6, PolicyInit::SeededRandom { scale: 2.0, seed: 17 }).unwrap();
        let (c, t) = (2u32, 4u32);
        let g = p.grad_log_prob_token(c, t).unwrap();
        assert!(g.values.iter().sum::<f64>().abs() < 1e-12);
        let eps = 1e-6;
        for j in 0..6 {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus.logits_mut()[c as usize * 6 + j] += eps;
            minus.logits_mut()[c as usize * 6 + j] -= eps;
            let fd = (plus.row_log_softmax(c)[t as usize] - minus.row_log_softmax(c)[t as usize]) / (2.0 * eps);
            let rel = (fd - g.values[j]).abs() / g.values[j].abs();
            assert!(rel < 1e-6, "entry {j}: fd {fd} analytic {} rel {rel}", g.values[j]);
        }
    }

    #[test]
    fn degenerate_row_samples_argmax() {
        let mut logits = vec![0.0; 9];
        for c in 0..3 {
            logits[c * 3 + 2] = 1e9;
        }
        let p = BigramPolicy::from_logits(3, logits).unwrap();
        assert_eq!(p.sample_response(&[0], 6, 1).unwrap(), vec![2; 6]);
    }

    #[test]
    fn sampling_deterministic_and_balanced() {
        let p = BigramPolicy::new(2, PolicyInit::Zeros).unwrap();
        assert_eq!(
            p.sample_response(&[1], 20, 5).unwrap(),
            p.sample_response(&[1], 20, 5).unwrap()
        );
        let n = 100_000;
        let zeros = (0..n)
            .filter(|&s| p.sample_response(&[0], 1, s).unwrap()[0] == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = BigramPolicy::new(7, PolicyInit::SeededRandom { scale: 3.0, seed: 8 }).unwrap();
        p.save_checkpoint(&path, serde_json::json!({"note": "x"})).unwrap();
        let (q, meta) = BigramPolicy::load_checkpoint(&path).unwrap();
        assert_eq!(meta["note"], "x");
        for (a, b) in p.logits().iter().zip(q.logits()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let probe = (&[1u32, 2][..], &[3u32, 6, 0, 5][..]);
        assert_eq!(
            p.log_prob_tokens(probe.0, probe.1).unwrap(),
            q.log_prob_tokens(probe.0, probe.1).unwrap()
        );
    }

    #[test]
    fn checkpoint_wrong_length_names_expected() {
        let text = r#"{"format_version":1,"backend":"bigram","vocab_size":3,"logits":[0.0,1.0]}"#;
        let err = BigramPolicy::parse_checkpoint(text, Path::new("t.json")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 9"), "{msg}");
    }

    #[test]
    fn checkpoint_version_two_rejected() {
        let text = r#"{"format_version":2,"backend":"bigram","vocab_size":2,"logits":[0,0,0,0]}"#;
        let err = BigramPolicy::parse_checkpoint(text, Path::new("t.json")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 2, .. }));
    }
}
