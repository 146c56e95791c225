//! Central finite-difference verification of the analytic gradients.
//!
//! `(L(θ + εe) − L(θ − εe)) / 2ε` is evaluated without subtracting two
//! nearly equal loss values: the change of each perturbed row's
//! log-normalizer is computed with `ln_1p`/`exp_m1`, and the change of
//! `softplus(−margin)` likewise. A direct subtraction loses about
//! `ulp(L) / 2ε ≈ 1e-10` absolute, which is too coarse for gradient entries
//! scaled by small `β`. Selection masks are frozen across the two probes.

use crate::align::SelectionMask;
use crate::corpus::PreferencePair;
use crate::error::{Error, Result};
use crate::loss::{
    evaluate_batch, selective_dpo_loss, sft_loss, sigmoid_unchecked, BatchItem, LossConfig, Objective, PairLogProbs,
    ReferenceLogProbs,
};
use crate::policy::{log_softmax, BigramPolicy, TokenId};

/// Entries whose analytic and numeric magnitudes are both below this are
/// treated as exact zeros.
pub const ABSOLUTE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
    /// Entries skipped because both values fell under [`ABSOLUTE_FLOOR`].
    pub entries_below_floor: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> Option<f64> {
    let scale = analytic.abs().max(numeric.abs());
    (scale >= ABSOLUTE_FLOOR).then(|| (analytic - numeric).abs() / scale)
}

/// Context rows read by the pair's response tokens.
pub fn touched_rows(pair: &PreferencePair) -> Vec<TokenId> {
    let mut rows = Vec::new();
    for resp in [&pair.chosen, &pair.rejected] {
        let mut ctx = *pair.prompt.last().expect("validated pair");
        for &t in resp.iter() {
            rows.push(ctx);
            ctx = t;
        }
    }
    rows.sort_unstable();
    rows.dedup();
    rows
}

struct Probe<'a> {
    pair: &'a PreferencePair,
    reference: Option<&'a ReferenceLogProbs>,
    mask: SelectionMask,
}

/// Compares the analytic gradient of one pair's loss against central
/// differences over every entry of every touched row.
pub fn finite_diff_check(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    pair: &PreferencePair,
    objective: Objective,
    config: &LossConfig,
    epsilon: f64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::validation("epsilon", format!("must be positive, got {epsilon}")));
    }
    config.validate()?;
    let ref_lps = match (objective.needs_reference(), reference) {
        (true, Some(r)) => Some(ReferenceLogProbs::compute(r, pair)?),
        (true, None) => {
            return Err(Error::Config(format!(
                "{} requires a reference policy",
                objective.as_str()
            )));
        }
        (false, _) => None,
    };

    // mask chosen at the unperturbed point, then held fixed
    let table = policy.log_prob_table();
    let mask = match (objective, &ref_lps) {
        (Objective::SelectiveDpo, Some(r)) => {
            let lps = PairLogProbs {
                pol_w: table.token_log_probs(&pair.prompt, &pair.chosen),
                pol_l: table.token_log_probs(&pair.prompt, &pair.rejected),
                ref_w: r.win.clone(),
                ref_l: r.lose.clone(),
            };
            selective_dpo_loss(&lps, config)?.mask
        }
        (Objective::Sft, _) => SelectionMask {
            win: vec![true; pair.chosen.len()],
            lose: vec![false; pair.rejected.len()],
            k_percent: 100.0,
            selected_count: pair.chosen.len(),
        },
        _ => SelectionMask::full(pair.chosen.len(), pair.rejected.len()),
    };
    let item = BatchItem {
        index: 0,
        pair,
        reference: ref_lps.as_ref(),
        frozen_mask: Some(&mask),
    };
    let analytic = evaluate_batch(&table, policy.vocab_size(), &[item], config, objective)?.grad;

    let probe = Probe {
        pair,
        reference: ref_lps.as_ref(),
        mask,
    };
    let v = policy.vocab_size();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        entries_checked: 0,
        entries_below_floor: 0,
    };
    for row in touched_rows(pair) {
        for col in 0..v as TokenId {
            let numeric = central_difference(policy, &probe, objective, config.beta, row, col, epsilon);
            let a = analytic.get(row, col);
            report.entries_checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            match relative_error(a, numeric) {
                Some(rel) => report.max_rel_error = report.max_rel_error.max(rel),
                None => report.entries_below_floor += 1,
            }
        }
    }
    Ok(report)
}

/// Positions of tokens conditioned on `row`, with the token read there.
fn tokens_in_row(prompt: &[TokenId], resp: &[TokenId], mask: &[bool], row: TokenId) -> Vec<TokenId> {
    let mut ctx = *prompt.last().expect("validated pair");
    let mut out = Vec::new();
    for (&t, &on) in resp.iter().zip(mask) {
        if on && ctx == row {
            out.push(t);
        }
        ctx = t;
    }
    out
}

fn central_difference(
    policy: &BigramPolicy,
    probe: &Probe<'_>,
    objective: Objective,
    beta: f64,
    row: TokenId,
    col: TokenId,
    eps: f64,
) -> f64 {
    let pair = probe.pair;
    let v = policy.vocab_size();

    // the "minus" point θ − εe, evaluated in ordinary arithmetic
    let mut minus = policy.clone();
    minus.logits_mut()[row as usize * v + col as usize] -= eps;
    let row_lp = log_softmax(minus.row(row));
    let p_col = row_lp[col as usize].exp();
    // LSE(θ + εe) − LSE(θ − εe) for the perturbed row
    let d_lse = (p_col * (2.0 * eps).exp_m1()).ln_1p();
    let delta = |tokens: &[TokenId]| -> f64 {
        let hits = tokens.iter().filter(|&&t| t == col).count() as f64;
        hits * 2.0 * eps - tokens.len() as f64 * d_lse
    };

    let win_tokens = tokens_in_row(&pair.prompt, &pair.chosen, &probe.mask.win, row);
    let lose_tokens = tokens_in_row(&pair.prompt, &pair.rejected, &probe.mask.lose, row);

    let d_loss = match objective {
        Objective::Sft => -delta(&win_tokens) / pair.chosen.len() as f64,
        Objective::Dpo | Objective::SelectiveDpo => {
            let r = probe.reference.expect("reference checked by caller");
            let table = minus.log_prob_table();
            let pol_w = table.token_log_probs(&pair.prompt, &pair.chosen);
            let pol_l = table.token_log_probs(&pair.prompt, &pair.rejected);
            let masked = |pol: &[f64], rf: &[f64], m: &[bool]| -> f64 {
                pol.iter()
                    .zip(rf)
                    .zip(m)
                    .filter(|(_, &on)| on)
                    .map(|((p, q), _)| p - q)
                    .sum()
            };
            let m_minus =
                beta * (masked(&pol_w.0, &r.win.0, &probe.mask.win) - masked(&pol_l.0, &r.lose.0, &probe.mask.lose));
            let d_margin = beta * (delta(&win_tokens) - delta(&lose_tokens));
            // softplus(x + h) − softplus(x) = ln_1p(σ(x)·expm1(h)), x = −m, h = −Δm
            (sigmoid_unchecked(-m_minus) * (-d_margin).exp_m1()).ln_1p()
        }
    };
    d_loss / (2.0 * eps)
}

/// Plain `(L(θ+εe) − L(θ−εe)) / 2ε` from two full loss evaluations; used to
/// cross-check the cancellation-free route at a looser tolerance.
#[allow(clippy::too_many_arguments)]
pub fn naive_central_difference(
    policy: &BigramPolicy,
    reference: Option<&BigramPolicy>,
    pair: &PreferencePair,
    objective: Objective,
    config: &LossConfig,
    mask: &SelectionMask,
    row: TokenId,
    col: TokenId,
    eps: f64,
) -> Result<f64> {
    let v = policy.vocab_size();
    let eval = |delta: f64| -> Result<f64> {
        let mut p = policy.clone();
        p.logits_mut()[row as usize * v + col as usize] += delta;
        let pol_w = p.log_prob_tokens(&pair.prompt, &pair.chosen)?;
        match objective {
            Objective::Sft => sft_loss(&pol_w),
            _ => {
                let r = reference.ok_or_else(|| Error::Config("reference required".into()))?;
                let lps = PairLogProbs {
                    pol_w,
                    pol_l: p.log_prob_tokens(&pair.prompt, &pair.rejected)?,
                    ref_w: r.log_prob_tokens(&pair.prompt, &pair.chosen)?,
                    ref_l: r.log_prob_tokens(&pair.prompt, &pair.rejected)?,
                };
                Ok(crate::loss::selective_dpo_loss_with_mask(&lps, mask.clone(), config.beta)?.loss)
            }
        }
    };
    Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
}
