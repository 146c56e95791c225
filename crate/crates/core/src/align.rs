//! Token alignment scores and top-k% selection.
//!
//! A chosen token scores `log π_ref − log π_θ` (high when the policy still
//! under-weights a token the reference likes); a rejected token scores the
//! negation (high when the policy over-weights it). Scores from both
//! responses of a pair are pooled and the highest `k%` are selected.

use crate::corpus::PreferencePair;
use crate::error::{Error, Result};
use crate::policy::TokenLogProbs;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentScores {
    pub win: Vec<f64>,
    pub lose: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Side {
    Win,
    Lose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMask {
    pub win: Vec<bool>,
    pub lose: Vec<bool>,
    pub k_percent: f64,
    pub selected_count: usize,
}

impl SelectionMask {
    /// Every token selected, as used by plain DPO.
    pub fn full(win_len: usize, lose_len: usize) -> Self {
        Self {
            win: vec![true; win_len],
            lose: vec![true; lose_len],
            k_percent: 100.0,
            selected_count: win_len + lose_len,
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.win.len() + self.lose.len()
    }

    pub fn selected_fraction(&self) -> f64 {
        self.selected_count as f64 / self.total_tokens() as f64
    }
}

pub fn alignment_scores(
    ref_w: &TokenLogProbs,
    pol_w: &TokenLogProbs,
    ref_l: &TokenLogProbs,
    pol_l: &TokenLogProbs,
) -> Result<AlignmentScores> {
    if ref_w.len() != pol_w.len() {
        return Err(Error::validation(
            "win",
            format!("reference has {} log-probs, policy has {}", ref_w.len(), pol_w.len()),
        ));
    }
    if ref_l.len() != pol_l.len() {
        return Err(Error::validation(
            "lose",
            format!("reference has {} log-probs, policy has {}", ref_l.len(), pol_l.len()),
        ));
    }
    let win = ref_w.0.iter().zip(&pol_w.0).map(|(r, p)| r - p).collect();
    let lose = ref_l.0.iter().zip(&pol_l.0).map(|(r, p)| p - r).collect();
    Ok(AlignmentScores { win, lose })
}

pub fn validate_k_percent(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(Error::validation(
            "k_percent",
            format!("must lie in (0, 100], got {k_percent}"),
        ));
    }
    Ok(())
}

/// `max(1, round_half_up(k/100 · total))`, capped at `total`.
pub fn selection_budget(total_tokens: usize, k_percent: f64) -> usize {
    let raw = (k_percent * total_tokens as f64 / 100.0 + 0.5).floor() as usize;
    raw.clamp(1, total_tokens.max(1))
}

/// Ranks the pooled scores (descending, ties by win-then-lose position order)
/// and keeps the first `selection_budget` tokens.
pub fn select_top_k(scores: &AlignmentScores, k_percent: f64) -> Result<SelectionMask> {
    validate_k_percent(k_percent)?;
    let tw = scores.win.len();
    let total = tw + scores.lose.len();
    let count = selection_budget(total, k_percent);

    let pooled: Vec<f64> = scores.win.iter().chain(&scores.lose).copied().collect();
    let mut order: Vec<usize> = (0..total).collect();
    // stable sort keeps canonical order among equal scores
    order.sort_by(|&a, &b| pooled[b].total_cmp(&pooled[a]));

    let mut win = vec![false; tw];
    let mut lose = vec![false; scores.lose.len()];
    for &idx in &order[..count] {
        if idx < tw {
            win[idx] = true;
        } else {
            lose[idx - tw] = true;
        }
    }
    Ok(SelectionMask {
        win,
        lose,
        k_percent,
        selected_count: count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionStats {
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall of a mask against the pair's substituted positions
/// (the annotated rejected indices, counted on both sides).
pub fn selection_stats(mask: &SelectionMask, pair: &PreferencePair) -> Result<SelectionStats> {
    let positions = pair.divergent_positions.as_ref().ok_or_else(|| {
        Error::Config("selection statistics need divergent_positions; use an annotated (generated) corpus".into())
    })?;
    if mask.win.len() != pair.chosen.len() || mask.lose.len() != pair.rejected.len() {
        return Err(Error::validation("mask", "mask lengths do not match the pair"));
    }
    let mut positives = 0usize;
    let mut hits = 0usize;
    for &p in positions {
        if p < mask.lose.len() {
            positives += 1;
            hits += mask.lose[p] as usize;
        }
        if p < mask.win.len() {
            positives += 1;
            hits += mask.win[p] as usize;
        }
    }
    let selected = mask.win.iter().chain(&mask.lose).filter(|&&b| b).count();
    let precision = if selected == 0 {
        0.0
    } else {
        hits as f64 / selected as f64
    };
    let recall = if positives == 0 {
        0.0
    } else {
        hits as f64 / positives as f64
    };
    Ok(SelectionStats { precision, recall })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lp(v: &[f64]) -> TokenLogProbs {
        TokenLogProbs(v.to_vec())
    }

    #[test]
    fn scores_follow_sign_convention() {
        let s = alignment_scores(&lp(&[-0.1]), &lp(&[-2.3]), &lp(&[-3.0]), &lp(&[-0.5])).unwrap();
        assert!((s.win[0] - 2.2).abs() < 1e-12);
        assert!((s.lose[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn identical_log_probs_score_zero() {
        let w = lp(&[-1.0, -2.0, -0.3]);
        let l = lp(&[-0.7, -4.0]);
        let s = alignment_scores(&w, &w, &l, &l).unwrap();
        assert!(s.win.iter().chain(&s.lose).all(|&x| x == 0.0));
    }

    #[test]
    fn length_mismatch_names_side() {
        let err = alignment_scores(&lp(&[-1.0]), &lp(&[-1.0]), &lp(&[-1.0, -2.0]), &lp(&[-1.0])).unwrap_err();
        assert!(matches!(err, Error::Validation { ref field, .. } if field == "lose"));
    }

    #[test]
    fn top_half_of_four() {
        let s = AlignmentScores {
            win: vec![0.5, -0.5],
            lose: vec![1.0, -1.0],
        };
        let m = select_top_k(&s, 50.0).unwrap();
        assert_eq!(m.win, vec![true, false]);
        assert_eq!(m.lose, vec![true, false]);
        assert_eq!(m.selected_count, 2);
    }

    #[test]
    fn full_k_selects_everything() {
        let s = AlignmentScores {
            win: vec![3.0, -9.0, 0.1],
            lose: vec![f64::MIN_POSITIVE, -1.0],
        };
        let m = select_top_k(&s, 100.0).unwrap();
        assert!(m.win.iter().chain(&m.lose).all(|&b| b));
        assert_eq!(m.selected_count, 5);
    }

    #[test]
    fn ties_prefer_win_then_position() {
        let s = AlignmentScores {
            win: vec![0.3, 0.3],
            lose: vec![0.3, 0.1],
        };
        let m = select_top_k(&s, 50.0).unwrap();
        assert_eq!(m.win, vec![true, true]);
        assert_eq!(m.lose, vec![false, false]);
    }

    #[test]
    fn k_out_of_range_rejected() {
        let s = AlignmentScores {
            win: vec![0.0],
            lose: vec![0.0],
        };
        for k in [0.0, -5.0, 100.5, f64::NAN] {
            assert!(select_top_k(&s, k).is_err(), "k={k}");
        }
    }

    #[test]
    fn budget_rounding() {
        assert_eq!(selection_budget(32, 40.0), 13);
        assert_eq!(selection_budget(32, 18.75), 6);
        assert_eq!(selection_budget(2, 1.0), 1);
        assert_eq!(selection_budget(4, 62.5), 3);
        assert_eq!(selection_budget(7, 100.0), 7);
    }

    fn annotated() -> PreferencePair {
        PreferencePair {
            prompt: vec![0],
            chosen: vec![1, 2, 3, 4],
            rejected: vec![1, 5, 3, 6],
            divergent_positions: Some(vec![1, 3]),
        }
    }

    #[test]
    fn stats_exact_selection() {
        let mask = SelectionMask {
            win: vec![false, true, false, true],
            lose: vec![false, true, false, true],
            k_percent: 50.0,
            selected_count: 4,
        };
        let s = selection_stats(&mask, &annotated()).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
    }

    #[test]
    fn stats_full_selection() {
        let s = selection_stats(&SelectionMask::full(4, 4), &annotated()).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 4.0 / 8.0);
    }

    #[test]
    fn stats_disjoint_selection() {
        let mask = SelectionMask {
            win: vec![true, false, true, false],
            lose: vec![false; 4],
            k_percent: 25.0,
            selected_count: 2,
        };
        let s = selection_stats(&mask, &annotated()).unwrap();
        assert_eq!((s.precision, s.recall), (0.0, 0.0));
    }

    #[test]
    fn stats_need_annotations() {
        let mut p = annotated();
        p.divergent_positions = None;
        assert!(selection_stats(&SelectionMask::full(4, 4), &p).is_err());
    }
}
