//! Token-selective preference optimization on tabular bigram policies.
//!
//! The pipeline: score every response token by how far the policy lags the
//! reference ([`align`]), keep the top `k%` of a pair's tokens, and
//! optimize the DPO objective restricted to those tokens ([`loss`],
//! [`train`]). [`corpus`] generates preference data whose informative
//! tokens are known, and [`eval`] measures accuracy and selection quality.

pub mod align;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod fsio;
pub mod gradcheck;
pub mod loss;
pub mod policy;
pub mod rng;
pub mod train;

pub use align::{alignment_scores, select_top_k, selection_stats, AlignmentScores, SelectionMask, SelectionStats};
pub use corpus::{
    generate_controlled_corpus, split_dataset, CorpusSpec, GeneratedCorpus, PreferenceDataset, PreferencePair,
    Provenance, Vocab,
};
pub use error::{Error, Result};
pub use eval::{
    evaluate, preference_accuracy, render_report, selection_quality_report, sweep, EvalReport, SweepAxis, SweepRow,
    SweepSpec, SweepTable,
};
pub use loss::{
    batch_loss_and_grad, bradley_terry_prob, dpo_loss, log_sigmoid, selective_dpo_loss, selective_reward, sft_loss,
    stable_sigmoid, LossConfig, Objective, PairLogProbs, PairLossBreakdown,
};
pub use policy::{BigramPolicy, LogitGradient, PolicyInit, TokenId, TokenLogProbs};
pub use train::{
    optimizer_update, resolve_init, resolve_reference, train, train_step, train_with, InitSpec, OptimizerKind,
    OptimizerState, ReferenceSpec, Schedule, StepRecord, TrainConfig, TrainReport,
};
