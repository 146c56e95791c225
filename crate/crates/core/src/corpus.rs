//! Synthetic preference corpora with ground-truth divergence annotations.
//!
//! The controlled generator samples chosen responses from a random bigram
//! oracle and corrupts a known set of positions in the rejected copy with
//! tokens the oracle disfavors, so the tokens that carry the preference
//! signal are known exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fsio;
use crate::policy::{BigramPolicy, TokenId};
use crate::rng::{SeededRng, RNG_ALGORITHM};

pub const DATASET_FORMAT_VERSION: u64 = 1;

/// Logit penalty applied to each context's bad subset in the oracle.
pub const BAD_LOGIT_OFFSET: f64 = 4.0;
/// Oracle logits are drawn uniform on `[-ORACLE_LOGIT_SCALE, ORACLE_LOGIT_SCALE]`.
pub const ORACLE_LOGIT_SCALE: f64 = 1.0;
/// Attempts per pair before the generator gives up on the oracle-gap check.
const MAX_PAIR_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::validation(
                "vocab_size",
                format!("must be at least 2, got {size}"),
            ));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// `(x, y^w, y^l)` plus the generator's record of which rejected positions were corrupted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub divergent_positions: Option<Vec<usize>>,
}

impl PreferencePair {
    pub fn new(prompt: Vec<TokenId>, chosen: Vec<TokenId>, rejected: Vec<TokenId>) -> Self {
        Self {
            prompt,
            chosen,
            rejected,
            divergent_positions: None,
        }
    }

    /// `T_w + T_l`.
    pub fn response_tokens(&self) -> usize {
        self.chosen.len() + self.rejected.len()
    }

    pub fn validate(&self, vocab: Vocab) -> std::result::Result<(), String> {
        for (name, seq) in [
            ("prompt", &self.prompt),
            ("chosen", &self.chosen),
            ("rejected", &self.rejected),
        ] {
            if seq.is_empty() {
                return Err(format!("{name} is empty"));
            }
            if let Some(&t) = seq.iter().find(|&&t| t as usize >= vocab.size()) {
                return Err(format!("{name} token id {t} >= vocab_size {}", vocab.size()));
            }
        }
        if let Some(pos) = &self.divergent_positions {
            if let Some(&p) = pos.iter().find(|&&p| p >= self.rejected.len()) {
                return Err(format!(
                    "divergent position {p} outside rejected response of length {}",
                    self.rejected.len()
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of the controlled generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_pairs: usize,
    pub prompt_len: usize,
    pub resp_len: usize,
    pub divergent_count: usize,
    pub noise_count: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        // a bad subset of one token cannot always differ from the chosen token
        if self.vocab_size < 5 {
            return Err(Error::validation(
                "vocab_size",
                format!("controlled corpus needs at least 5 tokens, got {}", self.vocab_size),
            ));
        }
        for (name, v) in [
            ("num_pairs", self.num_pairs),
            ("prompt_len", self.prompt_len),
            ("resp_len", self.resp_len),
            ("divergent_count", self.divergent_count),
        ] {
            if v == 0 {
                return Err(Error::validation(name, "must be at least 1"));
            }
        }
        if self.divergent_count + self.noise_count > self.resp_len {
            return Err(Error::validation(
                "noise_count",
                format!(
                    "divergent_count + noise_count = {} exceeds resp_len {}",
                    self.divergent_count + self.noise_count,
                    self.resp_len
                ),
            ));
        }
        Ok(())
    }
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generated(CorpusSpec),
    External(Value),
}

impl Provenance {
    fn to_json(&self) -> Value {
        match self {
            Provenance::Generated(spec) => json!({
                "generator": "controlled-bigram",
                "spec": spec,
                "bad_subset_size": "ceil(V/4)",
                "bad_logit_offset": BAD_LOGIT_OFFSET,
                "oracle_logit_scale": ORACLE_LOGIT_SCALE,
                "rng": RNG_ALGORITHM,
            }),
            Provenance::External(v) => v.clone(),
        }
    }

    fn from_json(v: Value) -> Self {
        let spec = v
            .as_object()
            .filter(|o| o.get("generator").and_then(Value::as_str) == Some("controlled-bigram"))
            .and_then(|o| o.get("spec"))
            .and_then(|s| serde_json::from_value::<CorpusSpec>(s.clone()).ok());
        match spec {
            Some(spec) => Provenance::Generated(spec),
            None => Provenance::External(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    pub vocab: Vocab,
    pub pairs: Vec<PreferencePair>,
    pub provenance: Provenance,
}

impl PreferenceDataset {
    pub fn new(vocab: Vocab, pairs: Vec<PreferencePair>, provenance: Provenance) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::validation("pairs", "dataset must contain at least one pair"));
        }
        for (i, pair) in pairs.iter().enumerate() {
            pair.validate(vocab)
                .map_err(|m| Error::validation(format!("pair {i}"), m))?;
        }
        Ok(Self {
            vocab,
            pairs,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        self.pairs.iter().all(|p| p.divergent_positions.is_some())
    }

    /// Serializes to the line-delimited JSON dataset format.
    pub fn to_jsonl(&self) -> String {
        let header = json!({
            "format_version": DATASET_FORMAT_VERSION,
            "vocab_size": self.vocab.size(),
            "provenance": self.provenance.to_json(),
        });
        let mut out = String::new();
        writeln!(out, "{header}").unwrap();
        for pair in &self.pairs {
            let mut obj = Map::new();
            obj.insert("prompt".into(), json!(pair.prompt));
            obj.insert("chosen".into(), json!(pair.chosen));
            obj.insert("rejected".into(), json!(pair.rejected));
            if let Some(pos) = &pair.divergent_positions {
                obj.insert("divergent_positions".into(), json!(pos));
            }
            writeln!(out, "{}", Value::Object(obj)).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        Self::parse_jsonl(&text, path)
    }

    pub fn parse_jsonl(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, field: &str, message: String| Error::Format {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hidx, hline) = lines
            .next()
            .ok_or_else(|| err(1, "format_version", "empty file".into()))?;
        let header: Value = serde_json::from_str(hline).map_err(|e| err(hidx + 1, "<header>", e.to_string()))?;
        let version = header
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| err(hidx + 1, "format_version", "missing or not an integer".into()))?;
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: DATASET_FORMAT_VERSION,
            });
        }
        let vocab_size = header
            .get("vocab_size")
            .and_then(Value::as_u64)
            .ok_or_else(|| err(hidx + 1, "vocab_size", "missing or not an integer".into()))?;
        let vocab = Vocab::new(vocab_size as usize).map_err(|e| err(hidx + 1, "vocab_size", e.to_string()))?;
        let provenance = Provenance::from_json(
            header
                .get("provenance")
                .cloned()
                .unwrap_or_else(|| Value::String("external".into())),
        );

        let mut pairs = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let obj: Value = serde_json::from_str(line).map_err(|e| err(lineno, "<record>", e.to_string()))?;
            let ids = |field: &str| -> Result<Option<Vec<u64>>> {
                match obj.get(field) {
                    None | Some(Value::Null) => Ok(None),
                    Some(Value::Array(items)) => items
                        .iter()
                        .map(|x| {
                            x.as_u64()
                                .ok_or_else(|| err(lineno, field, format!("expected non-negative integer, found {x}")))
                        })
                        .collect::<Result<Vec<_>>>()
                        .map(Some),
                    Some(other) => Err(err(lineno, field, format!("expected integer array, found {other}"))),
                }
            };
            let required = |field: &str| -> Result<Vec<TokenId>> {
                let v = ids(field)?.ok_or_else(|| err(lineno, field, "missing".into()))?;
                v.into_iter()
                    .map(|t| u32::try_from(t).map_err(|_| err(lineno, field, format!("token id {t} too large"))))
                    .collect()
            };
            let pair = PreferencePair {
                prompt: required("prompt")?,
                chosen: required("chosen")?,
                rejected: required("rejected")?,
                divergent_positions: ids("divergent_positions")?.map(|v| v.into_iter().map(|p| p as usize).collect()),
            };
            let pair_index = pairs.len();
            pair.validate(vocab)
                .map_err(|m| err(lineno, &format!("pair {pair_index}"), m))?;
            pairs.push(pair);
        }
        Self::new(vocab, pairs, provenance)
    }
}

/// The oracle's bad-token sets, one per context row.
#[derive(Debug, Clone, PartialEq)]
pub struct BadSubsets {
    vocab_size: usize,
    sets: Vec<Vec<TokenId>>,
    flags: Vec<bool>,
}

impl BadSubsets {
    pub fn contains(&self, context: TokenId, token: TokenId) -> bool {
        self.flags[context as usize * self.vocab_size + token as usize]
    }

    pub fn of(&self, context: TokenId) -> &[TokenId] {
        &self.sets[context as usize]
    }

    pub fn subset_size(vocab_size: usize) -> usize {
        vocab_size.div_ceil(4)
    }
}

/// Output of [`generate_controlled_corpus`].
#[derive(Debug, Clone)]
pub struct GeneratedCorpus {
    pub dataset: PreferenceDataset,
    pub oracle: BigramPolicy,
    pub bad: BadSubsets,
    /// Noise positions per pair (shared by both responses), ascending.
    pub noise_positions: Vec<Vec<usize>>,
}

pub fn generate_controlled_corpus(spec: &CorpusSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let v = spec.vocab_size;
    let mut rng = SeededRng::new(spec.seed);

    let mut logits: Vec<f64> = (0..v * v)
        .map(|_| rng.uniform(-ORACLE_LOGIT_SCALE, ORACLE_LOGIT_SCALE))
        .collect();
    let bad_size = BadSubsets::subset_size(v);
    let mut sets = Vec::with_capacity(v);
    let mut flags = vec![false; v * v];
    for c in 0..v {
        let mut set: Vec<TokenId> = rng
            .choose_distinct(v, bad_size)
            .into_iter()
            .map(|t| t as TokenId)
            .collect();
        set.sort_unstable();
        for &t in &set {
            logits[c * v + t as usize] -= BAD_LOGIT_OFFSET;
            flags[c * v + t as usize] = true;
        }
        sets.push(set);
    }
    let oracle = BigramPolicy::from_logits(v, logits)?;
    let bad = BadSubsets {
        vocab_size: v,
        sets,
        flags,
    };
    let table = oracle.log_prob_table();

    let mut pairs = Vec::with_capacity(spec.num_pairs);
    let mut noise_positions = Vec::with_capacity(spec.num_pairs);
    for index in 0..spec.num_pairs {
        let mut attempt = 0;
        let (pair, noise) = loop {
            let (pair, noise) = sample_pair(spec, &oracle, &bad, &mut rng);
            let lw = table.token_log_probs(&pair.prompt, &pair.chosen).sum();
            let ll = table.token_log_probs(&pair.prompt, &pair.rejected).sum();
            if lw > ll {
                break (pair, noise);
            }
            attempt += 1;
            if attempt >= MAX_PAIR_ATTEMPTS {
                return Err(Error::validation(
                    "divergent_count",
                    format!("pair {index}: no sample with an oracle preference gap after {MAX_PAIR_ATTEMPTS} attempts"),
                ));
            }
        };
        pairs.push(pair);
        noise_positions.push(noise);
    }

    let dataset = PreferenceDataset::new(Vocab::new(v)?, pairs, Provenance::Generated(*spec))?;
    Ok(GeneratedCorpus {
        dataset,
        oracle,
        bad,
        noise_positions,
    })
}

fn sample_pair(
    spec: &CorpusSpec,
    oracle: &BigramPolicy,
    bad: &BadSubsets,
    rng: &mut SeededRng,
) -> (PreferencePair, Vec<usize>) {
    let v = spec.vocab_size;
    let prompt: Vec<TokenId> = (0..spec.prompt_len).map(|_| rng.below(v) as TokenId).collect();
    let last = *prompt.last().unwrap();
    let mut chosen = oracle.sample_with(rng, last, spec.resp_len);

    let picks = rng.choose_distinct(spec.resp_len, spec.divergent_count + spec.noise_count);
    let mut divergent = picks[..spec.divergent_count].to_vec();
    divergent.sort_unstable();
    let mut noise = picks[spec.divergent_count..].to_vec();
    noise.sort_unstable();

    let mut rejected = chosen.clone();
    // ascending order, so every substitution sees its final left context
    let mut order = picks.clone();
    order.sort_unstable();
    for i in order {
        let ctx_w = if i == 0 { last } else { chosen[i - 1] };
        let ctx_l = if i == 0 { last } else { rejected[i - 1] };
        if noise.contains(&i) {
            chosen[i] = sample_good(rng, bad, ctx_w, v);
            rejected[i] = sample_good(rng, bad, ctx_l, v);
        } else {
            let options: Vec<TokenId> = bad.of(ctx_l).iter().copied().filter(|&t| t != chosen[i]).collect();
            rejected[i] = options[rng.below(options.len())];
        }
    }
    let pair = PreferencePair {
        prompt,
        chosen,
        rejected,
        divergent_positions: Some(divergent),
    };
    (pair, noise)
}

fn sample_good(rng: &mut SeededRng, bad: &BadSubsets, context: TokenId, v: usize) -> TokenId {
    let good: Vec<TokenId> = (0..v as TokenId).filter(|&t| !bad.contains(context, t)).collect();
    good[rng.below(good.len())]
}

/// Heldout size is `max(1, round_half_up(fraction · N))`; both sides must be non-empty.
pub fn split_dataset(
    dataset: &PreferenceDataset,
    heldout_fraction: f64,
    seed: u64,
) -> Result<(PreferenceDataset, PreferenceDataset)> {
    if !(heldout_fraction > 0.0 && heldout_fraction < 1.0) {
        return Err(Error::validation(
            "heldout_fraction",
            format!("must lie strictly between 0 and 1, got {heldout_fraction}"),
        ));
    }
    let n = dataset.len();
    let heldout = ((heldout_fraction * n as f64 + 0.5).floor() as usize).max(1);
    if heldout >= n {
        return Err(Error::validation(
            "heldout_fraction",
            format!("{heldout_fraction} leaves no training pairs out of {n}"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset.pairs[i].clone()).collect::<Vec<_>>();
    let (held_idx, train_idx) = order.split_at(heldout);
    Ok((
        PreferenceDataset::new(dataset.vocab, pick(train_idx), dataset.provenance.clone())?,
        PreferenceDataset::new(dataset.vocab, pick(held_idx), dataset.provenance.clone())?,
    ))
}
