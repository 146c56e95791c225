use std::io::Write;
use std::path::Path;

use clap::parser::ValueSource;
use clap::ArgMatches;
use sdpo_core::eval::save_report;
use sdpo_core::train::finite_diff_check;
use sdpo_core::{
    alignment_scores, evaluate, fsio, generate_controlled_corpus, render_report, resolve_init, resolve_reference,
    select_top_k, sweep, train, BigramPolicy, CorpusSpec, Error, LossConfig, OptimizerKind, PairLogProbs,
    PreferenceDataset, Schedule, SweepSpec, TrainConfig,
};
use serde_json::json;

use crate::args::{
    Command, CommonTrainArgs, EvalArgs, GenDataArgs, GradCheckArgs, PolicyArgs, ScoreArgs, SweepArgs, TrainArgs,
};
use crate::config::FileConfig;
use crate::Failure;

pub fn run(command: Command, matches: &ArgMatches) -> Result<(), Failure> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a, matches),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a, matches),
        Command::GradCheck(a) => grad_check(a),
        Command::Score(a) => score(a),
    }
}

fn on_command_line(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Flag value if given explicitly, else the file value, else the flag default.
fn pick<T>(m: &ArgMatches, id: &str, flag: T, file: Option<T>) -> T {
    match file {
        Some(v) if !on_command_line(m, id) => v,
        _ => flag,
    }
}

fn optimizer(name: &str, lr: f64) -> sdpo_core::Result<OptimizerKind> {
    match name {
        "sgd" => Ok(OptimizerKind::Sgd { lr }),
        "adam" => Ok(OptimizerKind::adam(lr)),
        other => Err(Error::validation(
            "optimizer",
            format!("{other:?} is not one of sgd | adam"),
        )),
    }
}

struct Resolved {
    config: TrainConfig,
    data: std::path::PathBuf,
    file: FileConfig,
}

fn resolve_common(a: CommonTrainArgs, m: &ArgMatches) -> sdpo_core::Result<Resolved> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let data = pick(m, "data", a.data, file.data.clone().map(Some))
        .ok_or_else(|| Error::validation("data", "no dataset given (--data or `data` in --config)"))?;
    let opt_name = pick(m, "optimizer", a.optimizer, file.optimizer.clone());
    let lr = pick(m, "lr", a.lr, file.lr);
    let schedule = if let Some(s) = a.steps {
        Schedule::Steps(s)
    } else if on_command_line(m, "epochs") {
        Schedule::Epochs(a.epochs)
    } else if let Some(s) = file.steps {
        Schedule::Steps(s)
    } else {
        Schedule::Epochs(file.epochs.unwrap_or(a.epochs))
    };
    let reference = match &file.reference {
        Some(r) if !on_command_line(m, "reference") => r.to_spec()?,
        _ => a.reference,
    };
    let config = TrainConfig {
        objective: pick(m, "objective", a.objective, file.objective),
        optimizer: optimizer(&opt_name, lr)?,
        schedule,
        batch_size: pick(m, "batch_size", a.batch_size, file.batch_size),
        seed: pick(m, "seed", a.seed, file.seed),
        reference,
        init: pick(m, "init", a.init, file.init.clone()),
        ..TrainConfig::default()
    };
    Ok(Resolved { config, data, file })
}

fn gen_data(a: GenDataArgs) -> Result<(), Failure> {
    let spec = CorpusSpec {
        vocab_size: a.vocab,
        num_pairs: a.pairs,
        prompt_len: a.prompt_len,
        resp_len: a.resp_len,
        divergent_count: a.divergent,
        noise_count: a.noise,
        seed: a.seed,
    };
    let corpus = generate_controlled_corpus(&spec)?;
    corpus.dataset.save(&a.out)?;
    corpus
        .oracle
        .save_checkpoint(&a.oracle_out, json!({ "role": "oracle", "corpus": spec }))?;
    println!(
        "{}",
        json!({ "pairs": corpus.dataset.len(), "data": a.out, "oracle": a.oracle_out })
    );
    Ok(())
}

fn run_train(a: TrainArgs, m: &ArgMatches) -> Result<(), Failure> {
    let Resolved { mut config, data, file } = resolve_common(a.common, m)?;
    config.beta = pick(m, "beta", a.beta, file.beta);
    config.k_percent = pick(m, "top_k", a.top_k, file.top_k_percent);
    config.checkpoint_path = pick(m, "out", a.out, file.out.map(Some));
    config.metrics_path = pick(m, "metrics", a.metrics, file.metrics.map(Some));
    config.validate()?;
    let dataset = PreferenceDataset::load(&data)?;
    let report = train(&dataset, &config)?;
    let last = report.records.last().map(|r| r.loss);
    println!(
        "{}",
        json!({
            "steps": report.records.len(),
            "final_batch_loss": last,
            "mean_selected_fraction": report.mean_selected_fraction(),
            "wall_clock_seconds": report.wall_clock.as_secs_f64(),
        })
    );
    Ok(())
}

fn run_sweep(a: SweepArgs, m: &ArgMatches) -> Result<(), Failure> {
    let Resolved { mut config, data, file } = resolve_common(a.common, m)?;
    config.beta = pick(m, "fixed_beta", a.fixed_beta, file.beta);
    config.k_percent = pick(m, "fixed_k", a.fixed_k, file.top_k_percent);
    config.validate()?;
    let out = pick(m, "out", a.out, file.out.map(Some));
    let spec = SweepSpec {
        k_values: a.k_values,
        beta_values: a.beta_values,
        heldout_fraction: a.heldout,
        split_seed: a.split_seed,
    };
    let dataset = PreferenceDataset::load(&data)?;
    let initial = resolve_init(&config.init, dataset.vocab.size())?;
    let reference = resolve_reference(&config.reference, &initial)?;
    let tables = sweep(&dataset, &config, &initial, &reference, &spec)?;
    let (text, _) = render_report(&tables);
    print!("{text}");
    if let Some(path) = out {
        save_report(&tables, &path)?;
    }
    let failed: Vec<_> = tables
        .iter()
        .flat_map(|t| &t.rows)
        .filter_map(|r| r.error.as_deref())
        .collect();
    if !failed.is_empty() {
        return Err(Failure::Check(format!(
            "{} sweep cell(s) failed: {}",
            failed.len(),
            failed.join("; ")
        )));
    }
    Ok(())
}

struct Loaded {
    dataset: PreferenceDataset,
    policy: BigramPolicy,
    reference: BigramPolicy,
}

fn load_policies(a: &PolicyArgs) -> sdpo_core::Result<Loaded> {
    let dataset = PreferenceDataset::load(&a.data)?;
    let v = dataset.vocab.size();
    let initial = resolve_init(&a.init, v)?;
    let policy = resolve_init(&a.policy, v)?;
    let reference = resolve_reference(&a.reference, &initial)?;
    Ok(Loaded {
        dataset,
        policy,
        reference,
    })
}

fn run_eval(a: EvalArgs) -> Result<(), Failure> {
    let l = load_policies(&a.policy)?;
    let report = evaluate(&l.policy, &l.reference, &l.dataset, a.beta, a.policy.top_k)?;
    let text = serde_json::to_string(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = &a.out {
        fsio::write_atomic(path, format!("{text}\n").as_bytes())?;
    }
    Ok(())
}

fn grad_check(a: GradCheckArgs) -> Result<(), Failure> {
    let l = load_policies(&a.policy)?;
    let cfg = LossConfig {
        beta: a.beta,
        k_percent: a.policy.top_k,
    };
    let mut worst = 0.0f64;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, pair) in l.dataset.pairs.iter().take(a.pairs).enumerate() {
        let r = finite_diff_check(&l.policy, Some(&l.reference), pair, a.objective, &cfg, a.epsilon)?;
        worst = worst.max(r.max_rel_error);
        let line = json!({
            "pair": i,
            "max_rel_error": r.max_rel_error,
            "max_abs_error": r.max_abs_error,
            "entries_checked": r.entries_checked,
            "entries_below_floor": r.entries_below_floor,
        });
        let _ = writeln!(out, "{line}");
    }
    if worst.is_nan() || worst >= a.tolerance {
        return Err(Failure::Check(format!(
            "gradient check failed: max relative error {worst:e} >= tolerance {:e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn score_lines(l: &Loaded, index: usize, k: f64) -> sdpo_core::Result<String> {
    let pair = l.dataset.pairs.get(index).ok_or_else(|| {
        Error::validation(
            "pair",
            format!("index {index} out of range for {} pairs", l.dataset.len()),
        )
    })?;
    let lps = PairLogProbs::compute(&l.policy, &l.reference, pair)?;
    let scores = alignment_scores(&lps.ref_w, &lps.pol_w, &lps.ref_l, &lps.pol_l)?;
    let mask = select_top_k(&scores, k)?;
    let mut text = String::new();
    let sides = [
        ("win", &lps.ref_w, &lps.pol_w, &scores.win, &mask.win),
        ("lose", &lps.ref_l, &lps.pol_l, &scores.lose, &mask.lose),
    ];
    for (side, r, p, s, sel) in sides {
        for pos in 0..s.len() {
            let line = json!({
                "pair": index,
                "side": side,
                "pos": pos,
                "ref_lp": r.as_slice()[pos],
                "pol_lp": p.as_slice()[pos],
                "score": s[pos],
                "selected": sel[pos],
            });
            text.push_str(&line.to_string());
            text.push('\n');
        }
    }
    Ok(text)
}

fn score(a: ScoreArgs) -> Result<(), Failure> {
    let l = load_policies(&a.policy)?;
    let text = score_lines(&l, a.pair, a.policy.top_k)?;
    match &a.out {
        Some(path) => write_out(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn write_out(path: &Path, text: &str) -> sdpo_core::Result<()> {
    fsio::write_atomic(path, text.as_bytes())
}
