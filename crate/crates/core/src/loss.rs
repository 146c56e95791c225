//! Preference objectives and their exact gradients for the bigram backend.
//!
//! All sequence scores are sums of per-token log-ratios `log π_θ − log π_ref`.
//! The partition term of the reward reparameterization cancels in every
//! pairwise difference and is never computed.

use serde::{Deserialize, Serialize};

use crate::align::{alignment_scores, select_top_k, validate_k_percent, SelectionMask};
use crate::corpus::PreferencePair;
use crate::error::{Error, Result};
use crate::policy::{BigramPolicy, LogProbTable, LogitGradient, TokenLogProbs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Sft,
    Dpo,
    SelectiveDpo,
}

impl Objective {
    pub fn needs_reference(self) -> bool {
        !matches!(self, Objective::Sft)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Sft => "sft",
            Objective::Dpo => "dpo",
            Objective::SelectiveDpo => "selective_dpo",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sft" => Ok(Objective::Sft),
            "dpo" => Ok(Objective::Dpo),
            "selective_dpo" | "selective-dpo" => Ok(Objective::SelectiveDpo),
            other => Err(Error::validation(
                "objective",
                format!("unknown objective {other:?} (expected sft, dpo or selective_dpo)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub k_percent: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::validation(
                "beta",
                format!("must be positive and finite, got {}", self.beta),
            ));
        }
        validate_k_percent(self.k_percent)
    }
}

/// Log-probs of both responses under the policy and the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLogProbs {
    pub pol_w: TokenLogProbs,
    pub pol_l: TokenLogProbs,
    pub ref_w: TokenLogProbs,
    pub ref_l: TokenLogProbs,
}

impl PairLogProbs {
    pub fn compute(policy: &BigramPolicy, reference: &BigramPolicy, pair: &PreferencePair) -> Result<Self> {
        Ok(Self {
            pol_w: policy.log_prob_tokens(&pair.prompt, &pair.chosen)?,
            pol_l: policy.log_prob_tokens(&pair.prompt, &pair.rejected)?,
            ref_w: reference.log_prob_tokens(&pair.prompt, &pair.chosen)?,
            ref_l: reference.log_prob_tokens(&pair.prompt, &pair.rejected)?,
        })
    }

    fn check_lengths(&self) -> Result<()> {
        if self.pol_w.len() != self.ref_w.len() {
            return Err(Error::validation("win", "policy and reference log-prob lengths differ"));
        }
        if self.pol_l.len() != self.ref_l.len() {
            return Err(Error::validation(
                "lose",
                "policy and reference log-prob lengths differ",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLossBreakdown {
    pub loss: f64,
    /// `β (R_w − R_l)`.
    pub margin: f64,
    pub reward_win: f64,
    pub reward_lose: f64,
    pub mask: SelectionMask,
}

fn check_finite(x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::validation("x", format!("must be finite, got {x}")));
    }
    Ok(())
}

pub(crate) fn sigmoid_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sigmoid_unchecked(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn stable_sigmoid(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(sigmoid_unchecked(x))
}

pub fn log_sigmoid(x: f64) -> Result<f64> {
    check_finite(x)?;
    Ok(log_sigmoid_unchecked(x))
}

/// `exp(r_w) / (exp(r_w) + exp(r_l))`, evaluated as `σ(r_w − r_l)`.
pub fn bradley_terry_prob(r_w: f64, r_l: f64) -> Result<f64> {
    check_finite(r_w)?;
    check_finite(r_l)?;
    stable_sigmoid(r_w - r_l)
}

/// `R(y) = Σ_i mask_i · (pol_i − ref_i)`.
pub fn selective_reward(pol: &TokenLogProbs, reference: &TokenLogProbs, mask: &[bool]) -> Result<f64> {
    if pol.len() != reference.len() || pol.len() != mask.len() {
        return Err(Error::validation(
            "mask",
            format!(
                "length mismatch: policy {}, reference {}, mask {}",
                pol.len(),
                reference.len(),
                mask.len()
            ),
        ));
    }
    Ok(pol
        .0
        .iter()
        .zip(&reference.0)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((p, r), _)| p - r)
        .sum())
}

/// `β Σ (pol − ref)`, the implicit reward without the partition term.
pub fn implicit_reward(pol: &TokenLogProbs, reference: &TokenLogProbs, beta: f64) -> f64 {
    beta * (pol.sum() - reference.sum())
}

fn breakdown(reward_win: f64, reward_lose: f64, beta: f64, mask: SelectionMask) -> PairLossBreakdown {
    let margin = beta * (reward_win - reward_lose);
    PairLossBreakdown {
        loss: -log_sigmoid_unchecked(margin),
        margin,
        reward_win,
        reward_lose,
        mask,
    }
}

pub fn dpo_loss(lps: &PairLogProbs, beta: f64) -> Result<PairLossBreakdown> {
    LossConfig { beta, k_percent: 100.0 }.validate()?;
    lps.check_lengths()?;
    let reward_win = lps.pol_w.sum() - lps.ref_w.sum();
    let reward_lose = lps.pol_l.sum() - lps.ref_l.sum();
    Ok(breakdown(
        reward_win,
        reward_lose,
        beta,
        SelectionMask::full(lps.pol_w.len(), lps.pol_l.len()),
    ))
}

/// Scores the tokens, selects the top `k%`, and applies the DPO loss to the
/// selected log-ratios only.
pub fn selective_dpo_loss(lps: &PairLogProbs, config: &LossConfig) -> Result<PairLossBreakdown> {
    config.validate()?;
    lps.check_lengths()?;
    let scores = alignment_scores(&lps.ref_w, &lps.pol_w, &lps.ref_l, &lps.pol_l)?;
    let mask = select_top_k(&scores, config.k_percent)?;
    selective_dpo_loss_with_mask(lps, mask, config.beta)
}

/// Selective loss under a given mask (no re-selection).
pub fn selective_dpo_loss_with_mask(lps: &PairLogProbs, mask: SelectionMask, beta: f64) -> Result<PairLossBreakdown> {
    let reward_win = selective_reward(&lps.pol_w, &lps.ref_w, &mask.win)?;
    let reward_lose = selective_reward(&lps.pol_l, &lps.ref_l, &mask.lose)?;
    Ok(breakdown(reward_win, reward_lose, beta, mask))
}

/// Negative mean per-token log-likelihood of the chosen response.
pub fn sft_loss(pol_w: &TokenLogProbs) -> Result<f64> {
    if pol_w.is_empty() {
        return Err(Error::validation("chosen", "must be non-empty"));
    }
    Ok(-pol_w.sum() / pol_w.len() as f64)
}

/// Reference log-probs for one pair; the reference is frozen so these can be cached.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLogProbs {
    pub win: TokenLogProbs,
    pub lose: TokenLogProbs,
}

impl ReferenceLogProbs {
    pub fn compute(reference: &BigramPolicy, pair: &PreferencePair) -> Result<Self> {
        Ok(Self {
            win: reference.log_prob_tokens(&pair.prompt, &pair.chosen)?,
            lose: reference.log_prob_tokens(&pair.prompt, &pair.rejected)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub grad: LogitGradient,
    /// Mask used for each pair, in batch order.
    pub masks: Vec<SelectionMask>,
    pub selected_tokens: usize,
    pub total_tokens: usize,
}

impl BatchOutput {
    pub fn selected_fraction(&self) -> f64 {
        self.selected_tokens as f64 / self.total_tokens as f64
    }
}

/// One element of a batch: dataset index (for diagnostics), the pair, its
/// cached reference log-probs and optionally a mask to hold fixed.
pub(crate) struct BatchItem<'a> {
    pub index: usize,
    pub pair: &'a PreferencePair,
    pub reference: Option<&'a ReferenceLogProbs>,
    pub frozen_mask: Option<&'a SelectionMask>,
}

pub(crate) fn evaluate_batch(
    table: &LogProbTable,
    vocab_size: usize,
    items: &[BatchItem<'_>],
    config: &LossConfig,
    objective: Objective,
) -> Result<BatchOutput> {
    if items.is_empty() {
        return Err(Error::validation("batch", "must contain at least one pair"));
    }
    let weight = 1.0 / items.len() as f64;
    let mut grad = LogitGradient::zeros(vocab_size);
    let mut total_loss = 0.0;
    let mut masks = Vec::with_capacity(items.len());
    let (mut selected_tokens, mut total_tokens) = (0usize, 0usize);

    for item in items {
        let pair = item.pair;
        let pol_w = table.token_log_probs(&pair.prompt, &pair.chosen);
        total_tokens += pair.response_tokens();

        let (loss, mask, coef) = match objective {
            Objective::Sft => {
                let loss = sft_loss(&pol_w)?;
                let mask = SelectionMask {
                    win: vec![true; pair.chosen.len()],
                    lose: vec![false; pair.rejected.len()],
                    k_percent: 100.0,
                    selected_count: pair.chosen.len(),
                };
                (loss, mask, -1.0 / pair.chosen.len() as f64)
            }
            Objective::Dpo | Objective::SelectiveDpo => {
                let reference = item
                    .reference
                    .ok_or_else(|| Error::Config(format!("{} requires a reference policy", objective.as_str())))?;
                let lps = PairLogProbs {
                    pol_w,
                    pol_l: table.token_log_probs(&pair.prompt, &pair.rejected),
                    ref_w: reference.win.clone(),
                    ref_l: reference.lose.clone(),
                };
                let b = match (objective, item.frozen_mask) {
                    (Objective::Dpo, _) => dpo_loss(&lps, config.beta)?,
                    (_, Some(mask)) => selective_dpo_loss_with_mask(&lps, mask.clone(), config.beta)?,
                    _ => selective_dpo_loss(&lps, config)?,
                };
                if !b.margin.is_finite() {
                    return Err(Error::NonFinite {
                        quantity: "margin",
                        pair: item.index,
                    });
                }
                // d(-log σ(m))/dm = -σ(-m)
                let coef = -sigmoid_unchecked(-b.margin) * config.beta;
                (b.loss, b.mask, coef)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                quantity: "loss",
                pair: item.index,
            });
        }

        let scaled = coef * weight;
        let mut context = *pair.prompt.last().expect("validated pair");
        for (&t, &on) in pair.chosen.iter().zip(&mask.win) {
            if on {
                grad.add_token(table, context, t, scaled);
            }
            context = t;
        }
        let mut context = *pair.prompt.last().expect("validated pair");
        for (&t, &on) in pair.rejected.iter().zip(&mask.lose) {
            if on {
                grad.add_token(table, context, t, -scaled);
            }
            context = t;
        }

        total_loss += loss;
        selected_tokens += mask.selected_count;
        masks.push(mask);
    }

    if !grad.is_finite() {
        let first = items.first().map(|i| i.index).unwrap_or(0);
        return Err(Error::NonFinite {
            quantity: "gradient",
            pair: first,
        });
    }
    Ok(BatchOutput {
        loss: total_loss * weight,
        grad,
        masks,
        selected_tokens,
        total_tokens,
    })
}

/// Mean loss over `pairs` and its exact gradient with respect to the policy
/// logits; reference and selection masks are held constant.
pub fn batch_loss_and_grad(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    pairs: &[PreferencePair],
    config: &LossConfig,
    objective: Objective,
) -> Result<BatchOutput> {
    config.validate()?;
    if objective.needs_reference() && reference.is_none() {
        return Err(Error::Config(format!(
            "{} requires a reference policy",
            objective.as_str()
        )));
    }
    if let Some(r) = reference {
        if r.vocab_size() != policy.vocab_size() {
            return Err(Error::Config(format!(
                "reference vocab_size {} differs from policy vocab_size {}",
                r.vocab_size(),
                policy.vocab_size()
            )));
        }
    }
    for pair in pairs {
        policy.check_ids("pair", &pair.prompt)?;
        policy.check_ids("pair", &pair.chosen)?;
        policy.check_ids("pair", &pair.rejected)?;
    }
    let refs = match reference {
        Some(r) if objective.needs_reference() => pairs
            .iter()
            .map(|p| ReferenceLogProbs::compute(r, p).map(Some))
            .collect::<Result<Vec<_>>>()?,
        _ => vec![None; pairs.len()],
    };
    let items: Vec<BatchItem<'_>> = pairs
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
    evaluate_batch(&policy.log_prob_table(), policy.vocab_size(), &items, config, objective)
}
