use std::fs;

use anyhow::{Context, Result};
use serde::Serialize;

use permubias::debias::train;
use permubias::engine::{
    aggregate_savings_pct, attention_fluctuation, ledger_for, render_all, OptionProbMatrix, Region, ScoreOptions,
    Scorer, TokenLedger,
};
use permubias::metrics::{majority_vote, mv_pbm_certificate, BiasReport, PredictionRecord, ReportInput};
use permubias::permute::{instance_seed, permutations_for};

use crate::config::{init_threads, Cli, Command, RunConfig};
use crate::output::{cell, csv_bytes, write_atomic};

pub const PREDICTION_COLUMNS: [&str; 7] =
    ["instance_id", "mv_choice", "single_pass_choice", "gold", "mv_correct", "single_pass_correct", "certificate"];
pub const LEDGER_COLUMNS: [&str; 7] =
    ["instance_id", "prefix_len", "option_tokens", "k", "naive_cost", "cached_cost", "savings_pct"];
pub const ATTENTION_COLUMNS: [&str; 7] =
    ["instance_id", "layer", "head", "position", "region", "std", "suffix_dominates"];

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Evaluate { common, dump_matrices } => evaluate(&RunConfig::resolve(&common, dump_matrices)?),
        Command::Vote { common } => vote(&RunConfig::resolve(&common, false)?),
        Command::Train { common, train } => {
            let rc = RunConfig::resolve(&common, false)?;
            if rc.adapters.is_some() {
                return Err(
                    crate::config::ConfigError("train starts from fresh adapters; drop --adapters".into()).into()
                );
            }
            let cfg = rc.debias_config(&train)?;
            let eval = rc.eval_dataset(&train)?;
            run_train(&rc, &cfg, eval.as_deref())
        }
        Command::Savings { common } => savings(&RunConfig::resolve(&common, false)?),
        Command::Analyze { common } => analyze(&RunConfig::resolve(&common, false)?),
    }
}

fn out_dir(rc: &RunConfig) -> Result<()> {
    fs::create_dir_all(&rc.out).with_context(|| format!("creating {}", rc.out.display()))
}

fn score_all(rc: &RunConfig) -> Result<Vec<(OptionProbMatrix, TokenLedger)>> {
    let scorer = Scorer::new(rc.view(), &rc.template, &rc.tokenizer);
    Ok(scorer.score_dataset(
        &rc.dataset,
        &ScoreOptions {
            mode: rc.mode,
            precision: rc.precision,
            perm_cap: rc.perm_cap,
            seed: rc.seed,
            ..ScoreOptions::default()
        },
    )?)
}

#[derive(Serialize)]
struct MatrixDump<'a> {
    instance_id: &'a str,
    permutations: Vec<&'a [usize]>,
    probs: Vec<&'a [f64]>,
}

fn evaluate(rc: &RunConfig) -> Result<()> {
    rc.require_pairs()?;
    let scored = score_all(rc)?;
    let (matrices, ledgers): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let golds: Vec<Option<usize>> = rc.dataset.iter().map(|i| i.answer).collect();
    let report = BiasReport::compute(&ReportInput { matrices: &matrices, ledgers: &ledgers, golds: &golds })?;
    out_dir(rc)?;
    write_atomic(&rc.out.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&rc.out.join("report.csv"), report.to_csv().as_bytes())?;
    if rc.dump_matrices {
        let mut lines = String::new();
        for m in &matrices {
            let dump = MatrixDump {
                instance_id: &m.instance_id,
                permutations: m.perms.perms().iter().map(|p| p.sigma()).collect(),
                probs: (0..m.m()).map(|p| m.row(p)).collect(),
            };
            lines.push_str(&serde_json::to_string(&dump)?);
            lines.push('\n');
        }
        write_atomic(&rc.out.join("matrices.jsonl"), lines.as_bytes())?;
    }
    println!(
        "{} instances: pbm {:.6} fr {:.4} accuracy {} -> {}",
        report.n_instances,
        report.pbm,
        report.fr,
        cell(report.accuracy),
        rc.out.display()
    );
    Ok(())
}

fn vote(rc: &RunConfig) -> Result<()> {
    rc.require_pairs()?;
    let scored = score_all(rc)?;
    let rows = scored.iter().zip(&rc.dataset).map(|((m, _), inst)| {
        let mv = majority_vote(m);
        let single = PredictionRecord::from_matrix(m, inst.answer).identity_choice();
        vec![
            inst.id.clone(),
            mv.to_string(),
            cell(single),
            cell(inst.answer),
            cell(inst.answer.map(|g| u8::from(g == mv))),
            cell(inst.answer.zip(single).map(|(g, s)| u8::from(g == s))),
            format!("{:e}", mv_pbm_certificate(m)),
        ]
    });
    let bytes = csv_bytes(&PREDICTION_COLUMNS, rows)?;
    out_dir(rc)?;
    write_atomic(&rc.out.join("predictions.csv"), &bytes)?;
    println!("{} predictions -> {}", scored.len(), rc.out.display());
    Ok(())
}

fn run_train(
    rc: &RunConfig,
    cfg: &permubias::debias::DebiasConfig,
    eval: Option<&[permubias::data::McqInstance]>,
) -> Result<()> {
    let eval = eval.unwrap_or(&rc.dataset);
    let (adapters, log) = match train(&rc.model, &rc.dataset, eval, &rc.tokenizer, &rc.template, cfg) {
        Err(permubias::Error::Divergence { step, detail }) => {
            anyhow::bail!("training diverged at step {step} ({detail}); last finite step {}", step.saturating_sub(1))
        }
        other => other?,
    };
    out_dir(rc)?;
    write_atomic(&rc.out.join("adapters.json"), adapters.to_json().as_bytes())?;
    write_atomic(&rc.out.join("train_log.csv"), log.to_csv().as_bytes())?;
    if rc.model_built {
        write_atomic(&rc.out.join("model.json"), rc.model.to_json().as_bytes())?;
    }
    match (log.initial(), log.last_eval()) {
        (Some(first), Some(last)) => println!(
            "{} steps: held-out pbm {:.6} -> {:.6} -> {}",
            log.steps.len(),
            first.pbm,
            last.pbm,
            rc.out.display()
        ),
        _ => println!("{} steps -> {}", log.steps.len(), rc.out.display()),
    }
    Ok(())
}

fn savings(rc: &RunConfig) -> Result<()> {
    let mut ledgers = Vec::with_capacity(rc.dataset.len());
    for (i, inst) in rc.dataset.iter().enumerate() {
        let perms = permutations_for(inst.n(), rc.perm_cap, instance_seed(rc.seed, i))?;
        let prompts = render_all(&rc.tokenizer, &rc.template, inst, &perms)?;
        ledgers.push(ledger_for(&inst.id, &prompts));
    }
    let mut rows: Vec<Vec<String>> = ledgers
        .iter()
        .map(|l| {
            vec![
                l.instance_id.clone(),
                l.prefix_len.to_string(),
                l.sum_option_lens().to_string(),
                l.k.to_string(),
                l.naive_cost.to_string(),
                l.cached_cost.to_string(),
                l.savings_pct().to_string(),
            ]
        })
        .collect();
    let sum = |f: fn(&TokenLedger) -> usize| ledgers.iter().map(f).sum::<usize>().to_string();
    rows.push(vec![
        "aggregate".into(),
        sum(|l| l.prefix_len),
        sum(TokenLedger::sum_option_lens),
        sum(|l| l.k),
        sum(|l| l.naive_cost),
        sum(|l| l.cached_cost),
        aggregate_savings_pct(&ledgers).to_string(),
    ]);
    let bytes = csv_bytes(&LEDGER_COLUMNS, rows)?;
    out_dir(rc)?;
    write_atomic(&rc.out.join("ledger.csv"), &bytes)?;
    println!(
        "{} instances: aggregate savings {:.4}% -> {}",
        ledgers.len(),
        aggregate_savings_pct(&ledgers),
        rc.out.display()
    );
    Ok(())
}

fn analyze(rc: &RunConfig) -> Result<()> {
    let view = rc.view();
    let mut rows = Vec::new();
    for (i, inst) in rc.dataset.iter().enumerate() {
        let perms = permutations_for(inst.n(), rc.perm_cap, instance_seed(rc.seed, i))?;
        let profile = attention_fluctuation(&view, &rc.tokenizer, &rc.template, inst, &perms)?;
        let flag = cell(profile.suffix_dominates().map(u8::from));
        for layer in 0..profile.layers() {
            for head in 0..profile.heads() {
                for pos in 0..profile.key_len() {
                    let region = match profile.region(pos) {
                        Region::Prefix => "prefix",
                        Region::Suffix => "suffix",
                    };
                    rows.push(vec![
                        inst.id.clone(),
                        layer.to_string(),
                        head.to_string(),
                        pos.to_string(),
                        region.into(),
                        profile.value(layer, head, pos).to_string(),
                        flag.clone(),
                    ]);
                }
            }
        }
    }
    let bytes = csv_bytes(&ATTENTION_COLUMNS, rows)?;
    out_dir(rc)?;
    write_atomic(&rc.out.join("attention.csv"), &bytes)?;
    println!("{} instances analyzed -> {}", rc.dataset.len(), rc.out.display());
    Ok(())
}
