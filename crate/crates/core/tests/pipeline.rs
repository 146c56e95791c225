use sdpo_core::corpus::{generate_controlled_corpus, split_dataset, CorpusSpec, PreferenceDataset, Provenance, Vocab};
use sdpo_core::eval::{preference_accuracy, selection_quality_report, sweep, SweepAxis, SweepSpec};
use sdpo_core::loss::{batch_loss_and_grad, LossConfig, Objective, PairLogProbs};
use sdpo_core::train::{
    finite_diff_check, load_metrics, optimizer_update, resolve_reference, train, train_step, train_with, InitSpec,
    OptimizerKind, OptimizerState, ReferenceSpec, Schedule, TrainConfig,
};
use sdpo_core::{alignment_scores, select_top_k, BigramPolicy, Error, PolicyInit, PreferencePair};

const LN2: f64 = std::f64::consts::LN_2;

fn small_spec(num_pairs: usize) -> CorpusSpec {
    CorpusSpec {
        vocab_size: 16,
        num_pairs,
        prompt_len: 3,
        resp_len: 10,
        divergent_count: 2,
        noise_count: 1,
        seed: 3,
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_controlled_corpus(&CorpusSpec {
        vocab_size: 32,
        num_pairs: 4,
        prompt_len: 4,
        resp_len: 16,
        divergent_count: 3,
        noise_count: 2,
        seed: 7,
    })
    .unwrap();
    let path = dir.path().join("d.jsonl");
    g.dataset.save(&path).unwrap();
    let back = PreferenceDataset::load(&path).unwrap();
    assert_eq!(back, g.dataset);
    assert!(matches!(back.provenance, Provenance::Generated(_)));
    let header = std::fs::read_to_string(&path).unwrap();
    let first: serde_json::Value = serde_json::from_str(header.lines().next().unwrap()).unwrap();
    assert_eq!(first["format_version"], 1);
    assert_eq!(first["vocab_size"], 32);
    assert!(first["provenance"]["rng"].as_str().unwrap().contains("chacha8"));
}

#[test]
fn sgd_step_on_two_by_two_table() {
    // uniform 2x2 policy, reference = policy, pair x=[0], y_w=[1], y_l=[0]
    let policy = BigramPolicy::new(2, PolicyInit::Zeros).unwrap();
    let pair = PreferencePair::new(vec![0], vec![1], vec![0]);
    let cfg = LossConfig {
        beta: 0.5,
        k_percent: 100.0,
    };
    let (next, _, rec) = train_step(
        &policy,
        Some(&policy),
        &[pair],
        Objective::Dpo,
        &cfg,
        &OptimizerKind::Sgd { lr: 0.2 },
        &OptimizerState::new(4),
    )
    .unwrap();
    assert!((rec.loss - LN2).abs() < 1e-15);
    // margin 0: coef = -σ(0)·β = -0.25.
    // ∇ log p(1|0) = [-0.5, 0.5], ∇ log p(0|0) = [0.5, -0.5] in row 0
    // grad row 0 = -0.25·([-0.5, 0.5] - [0.5, -0.5]) = [0.25, -0.25]
    // update: 0 - 0.2·0.25 = -0.05, 0 + 0.05 = 0.05; row 1 untouched
    let expected = [-0.05, 0.05, 0.0, 0.0];
    for (a, b) in next.logits().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15, "{:?}", next.logits());
    }
    assert!((rec.grad_norm - (2.0f64 * 0.25 * 0.25).sqrt()).abs() < 1e-15);
}

#[test]
fn zero_lr_leaves_policy_and_is_deterministic() {
    let g = generate_controlled_corpus(&small_spec(8)).unwrap();
    let p = BigramPolicy::new(16, PolicyInit::SeededRandom { scale: 0.5, seed: 1 }).unwrap();
    let cfg = LossConfig {
        beta: 0.1,
        k_percent: 40.0,
    };
    let st = OptimizerState::new(256);
    let (next, _, rec) = train_step(
        &p,
        Some(&g.oracle),
        &g.dataset.pairs,
        Objective::SelectiveDpo,
        &cfg,
        &OptimizerKind::Sgd { lr: 0.0 },
        &st,
    )
    .unwrap();
    assert_eq!(next, p);
    assert!(rec.loss.is_finite() && rec.loss > 0.0);

    let run = || {
        train_step(
            &p,
            Some(&g.oracle),
            &g.dataset.pairs,
            Objective::SelectiveDpo,
            &cfg,
            &OptimizerKind::adam(0.01),
            &st,
        )
        .unwrap()
    };
    let (a, sa, ra) = run();
    let (b, sb, rb) = run();
    assert_eq!(
        a.logits().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.logits().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(sa, sb);
    assert_eq!(ra, rb);
}

#[test]
fn step_masks_come_from_pre_update_policy() {
    let g = generate_controlled_corpus(&small_spec(6)).unwrap();
    let p = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    let cfg = LossConfig {
        beta: 0.05,
        k_percent: 30.0,
    };
    let out = batch_loss_and_grad(&p, Some(&g.oracle), &g.dataset.pairs, &cfg, Objective::SelectiveDpo).unwrap();
    for (pair, mask) in g.dataset.pairs.iter().zip(&out.masks) {
        let lps = PairLogProbs::compute(&p, &g.oracle, pair).unwrap();
        let scores = alignment_scores(&lps.ref_w, &lps.pol_w, &lps.ref_l, &lps.pol_l).unwrap();
        assert_eq!(&select_top_k(&scores, 30.0).unwrap(), mask);
    }
    // masks are refreshed between steps: the fingerprint changes once the policy moves
    let (next, st, r0) = train_step(
        &p,
        Some(&g.oracle),
        &g.dataset.pairs,
        Objective::SelectiveDpo,
        &cfg,
        &OptimizerKind::Sgd { lr: 200.0 },
        &OptimizerState::new(256),
    )
    .unwrap();
    let (_, _, r1) = train_step(
        &next,
        Some(&g.oracle),
        &g.dataset.pairs,
        Objective::SelectiveDpo,
        &cfg,
        &OptimizerKind::Sgd { lr: 200.0 },
        &st,
    )
    .unwrap();
    assert_ne!(r0.mask_fingerprint, r1.mask_fingerprint);
}

#[test]
fn initial_snapshot_reference_matches_policy() {
    let g = generate_controlled_corpus(&small_spec(5)).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::SeededRandom { scale: 1.0, seed: 4 }).unwrap();
    let r = resolve_reference(&ReferenceSpec::InitialSnapshot, &init).unwrap();
    for pair in &g.dataset.pairs {
        assert_eq!(
            r.log_prob_tokens(&pair.prompt, &pair.chosen).unwrap(),
            init.log_prob_tokens(&pair.prompt, &pair.chosen).unwrap()
        );
    }
}

#[test]
fn oracle_reference_loads_and_vocab_mismatch_fails_early() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_controlled_corpus(&small_spec(5)).unwrap();
    let oracle_path = dir.path().join("oracle.json");
    g.oracle.save_checkpoint(&oracle_path, serde_json::json!({})).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    let r = resolve_reference(&ReferenceSpec::Oracle(oracle_path), &init).unwrap();
    let pair = &g.dataset.pairs[0];
    assert_eq!(
        r.log_prob_tokens(&pair.prompt, &pair.rejected).unwrap(),
        g.oracle.log_prob_tokens(&pair.prompt, &pair.rejected).unwrap()
    );

    let wrong = dir.path().join("wrong.json");
    BigramPolicy::new(8, PolicyInit::Zeros)
        .unwrap()
        .save_checkpoint(&wrong, serde_json::json!({}))
        .unwrap();
    let metrics = dir.path().join("m.jsonl");
    let cfg = TrainConfig {
        reference: ReferenceSpec::Checkpoint(wrong),
        metrics_path: Some(metrics.clone()),
        ..TrainConfig::default()
    };
    assert!(matches!(train(&g.dataset, &cfg), Err(Error::Config(_))));
    assert!(!metrics.exists(), "no step may run before the reference is validated");
}

#[test]
fn training_is_reproducible_and_records_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_controlled_corpus(&small_spec(50)).unwrap();
    let oracle_path = dir.path().join("oracle.json");
    g.oracle.save_checkpoint(&oracle_path, serde_json::json!({})).unwrap();
    let run = |tag: &str| {
        let cfg = TrainConfig {
            reference: ReferenceSpec::Oracle(oracle_path.clone()),
            batch_size: 8,
            seed: 5,
            metrics_path: Some(dir.path().join(format!("m{tag}.jsonl"))),
            checkpoint_path: Some(dir.path().join(format!("c{tag}.json"))),
            ..TrainConfig::default()
        };
        train(&g.dataset, &cfg).unwrap()
    };
    let a = run("a");
    let b = run("b");
    // 50 pairs / batch 8 = 7 batches per epoch (last one short), 2 epochs
    assert_eq!(a.records.len(), 14);
    assert_eq!(a.records.iter().map(|r| r.epoch).max(), Some(1));
    for name in ["m", "c"] {
        let ext = if name == "m" { "jsonl" } else { "json" };
        let x = std::fs::read(dir.path().join(format!("{name}a.{ext}"))).unwrap();
        let y = std::fs::read(dir.path().join(format!("{name}b.{ext}"))).unwrap();
        assert_eq!(x, y, "{name} files differ");
    }
    let loaded = load_metrics(&dir.path().join("ma.jsonl")).unwrap();
    assert_eq!(loaded.len(), a.records.len());
    for (x, y) in loaded.iter().zip(&a.records) {
        assert_eq!(
            (x.step, x.epoch, x.loss, x.grad_norm, x.selected_fraction),
            (y.step, y.epoch, y.loss, y.grad_norm, y.selected_fraction)
        );
    }
    assert_eq!(a.policy, b.policy);
    let (_, meta) = BigramPolicy::load_checkpoint(&dir.path().join("ca.json")).unwrap();
    assert_eq!(meta["config"]["objective"], "selective_dpo");
    assert_eq!(meta["steps"], 14);
}

#[test]
fn selected_fraction_tracks_k() {
    let g = generate_controlled_corpus(&small_spec(40)).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    let cfg = TrainConfig {
        k_percent: 40.0,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let rep = train_with(&g.dataset, &cfg, init, &g.oracle).unwrap();
    // 20 tokens per pair: round(0.4·20) = 8
    for r in &rep.records {
        assert!((r.selected_fraction - 0.4).abs() < 1e-12);
    }
}

#[test]
fn identity_start_loss_is_ln2() {
    let g = generate_controlled_corpus(&small_spec(30)).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::SeededRandom { scale: 1.0, seed: 2 }).unwrap();
    for obj in [Objective::Dpo, Objective::SelectiveDpo] {
        let cfg = TrainConfig {
            objective: obj,
            schedule: Schedule::Steps(3),
            batch_size: 10,
            ..TrainConfig::default()
        };
        let rep = train_with(&g.dataset, &cfg, init.clone(), &init).unwrap();
        assert!((rep.records[0].loss - LN2).abs() < 1e-9);
    }
}

#[test]
fn training_reduces_full_training_loss() {
    let g = generate_controlled_corpus(&small_spec(64)).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    for obj in [Objective::Sft, Objective::Dpo, Objective::SelectiveDpo] {
        let cfg = TrainConfig {
            objective: obj,
            beta: 0.1,
            batch_size: 16,
            optimizer: OptimizerKind::Sgd { lr: 0.05 },
            ..TrainConfig::default()
        };
        let rep = train_with(&g.dataset, &cfg, init.clone(), &g.oracle).unwrap();
        let lc = cfg.loss_config();
        let before = batch_loss_and_grad(&init, Some(&g.oracle), &g.dataset.pairs, &lc, obj)
            .unwrap()
            .loss;
        let after = batch_loss_and_grad(&rep.policy, Some(&g.oracle), &g.dataset.pairs, &lc, obj)
            .unwrap()
            .loss;
        assert!(after < before, "{obj:?}: {before} -> {after}");
    }
}

#[test]
fn reference_log_probs_never_change() {
    let g = generate_controlled_corpus(&small_spec(20)).unwrap();
    let oracle_before = g.oracle.clone();
    let init = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        ..TrainConfig::default()
    };
    train_with(&g.dataset, &cfg, init, &g.oracle).unwrap();
    assert_eq!(g.oracle, oracle_before);
}

#[test]
fn finite_difference_on_random_instances() {
    let g = generate_controlled_corpus(&small_spec(10)).unwrap();
    for (i, pair) in g.dataset.pairs.iter().enumerate() {
        let p = BigramPolicy::new(
            16,
            PolicyInit::SeededRandom {
                scale: 1.0,
                seed: i as u64,
            },
        )
        .unwrap();
        for obj in [Objective::Dpo, Objective::SelectiveDpo, Objective::Sft] {
            let cfg = LossConfig {
                beta: 0.01,
                k_percent: 40.0,
            };
            let rep = finite_diff_check(&p, Some(&g.oracle), pair, obj, &cfg, 1e-6).unwrap();
            assert!(rep.max_rel_error < 1e-6, "{obj:?} pair {i}: {rep:?}");
        }
    }
}

#[test]
fn oracle_accuracy_matches_joint_enumeration() {
    // V=4, T=3 micro-corpus; compare against explicit joint probabilities
    let g = generate_controlled_corpus(&CorpusSpec {
        vocab_size: 5,
        num_pairs: 40,
        prompt_len: 2,
        resp_len: 3,
        divergent_count: 1,
        noise_count: 1,
        seed: 19,
    })
    .unwrap();
    let uniform = BigramPolicy::new(5, PolicyInit::Zeros).unwrap();
    let joint = |y: &[u32], first_ctx: u32| -> f64 {
        let mut prob = 1.0;
        let mut c = first_ctx as usize;
        for &t in y {
            let row = &g.oracle.logits()[c * 5..c * 5 + 5];
            prob *= row[t as usize].exp() / row.iter().map(|x| x.exp()).sum::<f64>();
            c = t as usize;
        }
        prob
    };
    let mut wins = 0.0;
    for pair in &g.dataset.pairs {
        let ctx = *pair.prompt.last().unwrap();
        let (pw, pl) = (joint(&pair.chosen, ctx), joint(&pair.rejected, ctx));
        // uniform reference assigns equal probability to equal-length responses
        if pw > pl {
            wins += 1.0;
        } else if pw == pl {
            wins += 0.5;
        }
    }
    let expected = wins / g.dataset.len() as f64;
    let acc = preference_accuracy(&g.oracle, &uniform, &g.dataset, 0.01).unwrap();
    assert_eq!(acc.accuracy, expected);
    assert_eq!(acc.accuracy, 1.0);
}

#[test]
fn selection_quality_edge_cases() {
    let g = generate_controlled_corpus(&small_spec(30)).unwrap();
    let uniform = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    // budget = |positives| = 2d = 4 of 20 tokens → precision equals recall
    let q = selection_quality_report(&uniform, &g.oracle, &g.dataset, 20.0).unwrap();
    assert!((q.precision - q.recall).abs() < 1e-15);
    // reference = policy → tie-break takes win[0..4]
    let q = selection_quality_report(&uniform, &uniform, &g.dataset, 20.0).unwrap();
    let expected: f64 = g
        .dataset
        .pairs
        .iter()
        .map(|p| {
            p.divergent_positions
                .as_ref()
                .unwrap()
                .iter()
                .filter(|&&i| i < 4)
                .count() as f64
                / 4.0
        })
        .sum::<f64>()
        / 30.0;
    assert!((q.precision - expected).abs() < 1e-15);
}

#[test]
fn sweep_tables_have_requested_rows_and_match_direct_runs() {
    let g = generate_controlled_corpus(&small_spec(80)).unwrap();
    let init = BigramPolicy::new(16, PolicyInit::Zeros).unwrap();
    let base = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    let spec = SweepSpec {
        k_values: vec![40.0],
        beta_values: vec![0.001, 0.01, 0.1],
        heldout_fraction: 0.25,
        split_seed: 2,
    };
    let tables = sweep(&g.dataset, &base, &init, &g.oracle, &spec).unwrap();
    assert_eq!(tables.len(), 2);
    assert_eq!(tables[0].axis, SweepAxis::TopKPercent);
    assert_eq!(
        tables[1].rows.iter().map(|r| r.value).collect::<Vec<_>>(),
        vec![0.001, 0.01, 0.1]
    );
    assert!(tables
        .iter()
        .flat_map(|t| &t.rows)
        .all(|r| r.preference_accuracy.is_some() && r.error.is_none()));

    let (train_set, held) = split_dataset(&g.dataset, 0.25, 2).unwrap();
    let direct = train_with(&train_set, &base, init.clone(), &g.oracle).unwrap();
    let acc = preference_accuracy(&direct.policy, &init, &held, base.beta).unwrap();
    let prec = selection_quality_report(&direct.policy, &g.oracle, &held, 40.0).unwrap();
    assert_eq!(tables[0].rows[0].preference_accuracy, Some(acc.accuracy));
    assert_eq!(tables[0].rows[0].selection_precision, Some(prec.precision));
    // the default cell appears in both tables
    let (a, b) = (&tables[0].rows[0], &tables[1].rows[1]);
    assert_eq!(
        (a.preference_accuracy, a.selection_precision),
        (b.preference_accuracy, b.selection_precision)
    );
    let again = sweep(&g.dataset, &base, &init, &g.oracle, &spec).unwrap();
    assert_eq!(tables, again);
}

#[test]
fn divergence_aborts_with_pair_index_and_flushes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = vec![
        PreferencePair::new(vec![0], vec![1, 1], vec![0, 0]),
        PreferencePair::new(vec![1], vec![0, 1], vec![1, 0]),
    ];
    let ds = PreferenceDataset::new(
        Vocab::new(2).unwrap(),
        pairs,
        Provenance::External(serde_json::json!("t")),
    )
    .unwrap();
    let init = BigramPolicy::new(2, PolicyInit::Zeros).unwrap();
    let metrics = dir.path().join("m.jsonl");
    let cfg = TrainConfig {
        objective: Objective::Dpo,
        beta: 1.0,
        batch_size: 1,
        optimizer: OptimizerKind::adam(1e308),
        schedule: Schedule::Steps(6),
        metrics_path: Some(metrics.clone()),
        ..TrainConfig::default()
    };
    let err = train_with(&ds, &cfg, init.clone(), &init).unwrap_err();
    assert!(matches!(err, Error::NonFinite { pair: 0, .. }), "{err:?}");
    let written = load_metrics(&metrics).unwrap();
    assert!(!written.is_empty());
}

#[test]
fn init_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let g = generate_controlled_corpus(&small_spec(4)).unwrap();
    let path = dir.path().join("o.json");
    g.oracle.save_checkpoint(&path, serde_json::json!({})).unwrap();
    let p = sdpo_core::resolve_init(&InitSpec::Checkpoint(path), 16).unwrap();
    assert_eq!(p, g.oracle);
    let mut st = OptimizerState::new(1);
    let mut x = [1.0];
    optimizer_update(&OptimizerKind::Sgd { lr: 0.5 }, &mut st, &[2.0], &mut x);
    assert_eq!(x, [0.0]);
}
