//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs sequentially so the wall-clock budgets are honest.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use permubias::data::{synthetic_dataset, McqInstance, PromptTemplate, SyntheticSpec, Tokenizer};
use permubias::debias::{grad_check_loss, train, AdapterInit, AdapterSet, DebiasConfig};
use permubias::engine::{
    attention_fluctuation, closed_form_savings_pct, ledger_for, render_all, MetricCost, OptionProbMatrix, Precision,
    Region, ScoreOptions, Scorer, ScoringMode,
};
use permubias::metrics::{ckld, fluctuation_rate, kl_divergence, mv_pbm_certificate, pbm, rstd, PredictionRecord};
use permubias::model::{Model, ModelConfig};
use permubias::permute::{enumerate_permutations, permutations_for, PermutationSet};
use permubias::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn toy(seed: u64, d_model: usize) -> Model {
    Model::build(ModelConfig { d_model, n_heads: 4, d_ff: 4 * d_model, init_seed: seed, ..ModelConfig::default() })
        .expect("toy model")
}

fn dataset(n: usize, count: usize, seed: u64) -> Vec<McqInstance> {
    let spec = SyntheticSpec { n_options: n, question_words: 4, ..SyntheticSpec::default() };
    synthetic_dataset(&spec, count, seed)
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mv_zero_bias() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let mut worst: f64 = 0.0;
    for pair in 0..100u64 {
        let model = toy(pair / 10, 32);
        let n = 2 + (pair as usize % 4);
        let inst = &dataset(n, 1, 1000 + pair)[0];
        let perms = permutations_for(n, 24, pair).map_err(|e| e.to_string())?;
        let (matrix, _) = Scorer::new(model.view(), &t, &tok).score_baqckv(inst, &perms).map_err(|e| e.to_string())?;
        worst = worst.max(mv_pbm_certificate(&matrix));
    }
    check(worst <= 1e-12, || format!("max certificate {worst:e}"))?;
    Ok(format!("max certificate {worst:e} over 100 pairs"))
}

fn baqckv_correctness() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let (mut d64, mut d32): (f64, f64) = (0.0, 0.0);
    for model_seed in 0..3u64 {
        let model = toy(model_seed, 32);
        let scorer = Scorer::new(model.view(), &t, &tok);
        for i in 0..50usize {
            let n = 2 + i % 7;
            let inst = &dataset(n, 1, 7 * model_seed + i as u64)[0];
            let perms = permutations_for(n, 24, i as u64).map_err(|e| e.to_string())?;
            let score = |mode, precision| scorer.score(inst, &perms, mode, precision).map(|(m, _)| m.probs);
            let run = |precision| -> Result<f64, String> {
                let naive = score(ScoringMode::Naive, precision).map_err(|e| e.to_string())?;
                let cached = score(ScoringMode::Baqckv, precision).map_err(|e| e.to_string())?;
                Ok(naive.max_abs_diff(&cached))
            };
            d64 = d64.max(run(Precision::F64)?);
            d32 = d32.max(run(Precision::F32)?);
        }
    }
    check(d64 <= 1e-10 && d32 <= 1e-5, || format!("max diff f64 {d64:e}, f32 {d32:e}"))?;
    Ok(format!("max diff f64 {d64:e}, f32 {d32:e}"))
}

fn token_savings() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let mut checked = 0;
    for n in 2..=8 {
        for (i, inst) in dataset(n, 10, 40 + n as u64).iter().enumerate() {
            let perms = permutations_for(n, 24, i as u64).map_err(|e| e.to_string())?;
            let prompts = render_all(&tok, &t, inst, &perms).map_err(|e| e.to_string())?;
            let l = ledger_for(&inst.id, &prompts);
            check(l.naive_cost - l.cached_cost == (l.k - 1) * l.prefix_len, || {
                format!(
                    "{}: naive {} cached {} k {} prefix {}",
                    l.instance_id, l.naive_cost, l.cached_cost, l.k, l.prefix_len
                )
            })?;
            // every suffix of one instance has the same length
            let closed = closed_form_savings_pct(l.k, l.prefix_len, l.option_lens[0]);
            check((closed - l.savings_pct()).abs() <= 1e-12, || {
                format!("{}: closed form {closed} vs measured {}", l.instance_id, l.savings_pct())
            })?;
            checked += 1;
        }
    }
    let spots = [(closed_form_savings_pct(2, 50, 50), 25.0), (closed_form_savings_pct(4, 60, 20), 56.25)];
    for (got, want) in spots {
        check((got - want).abs() <= 1e-12, || format!("spot value {got} vs {want}"))?;
    }
    Ok(format!("{checked} ledgers exact, spot values 25% and 56.25%"))
}

fn random_matrix(rng: &mut ChaCha8Rng, id: &str, perms: &PermutationSet) -> OptionProbMatrix {
    let (m, n) = (perms.len(), perms.n());
    let mut data = Vec::with_capacity(m * n);
    for _ in 0..m {
        let row: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let z: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / z));
    }
    OptionProbMatrix::new(id, perms.clone(), Tensor::new(vec![m, n], data).unwrap()).unwrap()
}

// Brute-force references, written straight from the definitions.

fn oracle_pbm(probs: &[Vec<f64>]) -> f64 {
    let (m, n) = (probs.len(), probs[0].len());
    let mut total = 0.0;
    for c in 0..n {
        let mut mean = 0.0;
        for row in probs {
            mean += row[c];
        }
        mean /= m as f64;
        let mut var = 0.0;
        for row in probs {
            var += (row[c] - mean) * (row[c] - mean);
        }
        total += var / m as f64;
    }
    total / n as f64
}

fn oracle_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let perms = enumerate_permutations(3).map_err(|e| e.to_string())?;
    let (id, rev) = (perms.identity_index().unwrap(), perms.reverse_index().unwrap());
    let mut worst: f64 = 0.0;
    for set in 0..20 {
        let mut records = Vec::new();
        let mut rows_per_q = Vec::new();
        let mut golds = Vec::new();
        for q in 0..5 {
            let matrix = random_matrix(&mut rng, &format!("{set}-{q}"), &perms);
            let gold = rng.random_range(0..3);
            let rows: Vec<Vec<f64>> = (0..matrix.m()).map(|p| matrix.row(p).to_vec()).collect();
            worst = worst.max((pbm(&matrix) - oracle_pbm(&rows)).abs());
            records.push(PredictionRecord::from_matrix(&matrix, Some(gold)));
            rows_per_q.push(rows);
            golds.push(gold);
        }
        let flips = rows_per_q.iter().filter(|r| oracle_argmax(&r[id]) != oracle_argmax(&r[rev])).count();
        let fr = fluctuation_rate(&records).map_err(|e| e.to_string())?;
        worst = worst.max((fr - flips as f64 / 5.0).abs());

        let preds: Vec<usize> = rows_per_q.iter().map(|r| oracle_argmax(&r[id])).collect();
        let mut recalls = Vec::new();
        for symbol in 0..3 {
            let (mut hit, mut total) = (0.0, 0.0);
            for q in 0..5 {
                if golds[q] == symbol {
                    total += 1.0;
                    if preds[q] == symbol {
                        hit += 1.0;
                    }
                }
            }
            if total > 0.0 {
                recalls.push(hit / total);
            }
        }
        let mean = recalls.iter().sum::<f64>() / recalls.len() as f64;
        let var = recalls.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / recalls.len() as f64;
        let got = rstd(&records).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - var.sqrt()).abs());

        let mut kl = 0.0;
        let eps = 1e-9;
        for symbol in 0..3 {
            let p = golds.iter().filter(|&&g| g == symbol).count() as f64 / 5.0;
            let q = preds.iter().filter(|&&c| c == symbol).count() as f64 / 5.0;
            if p > 0.0 {
                kl += p * (p / ((q + eps) / (1.0 + 3.0 * eps))).ln();
            }
        }
        let got = ckld(&records).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - kl).abs());
    }
    check(worst <= 1e-12, || format!("max deviation from brute force {worst:e}"))?;

    let two = PermutationSet::from_perms(2, enumerate_permutations(2).unwrap().perms().to_vec()).unwrap();
    let hand = OptionProbMatrix::new("hand", two, Tensor::from_rows(&[vec![0.8, 0.2], vec![0.6, 0.4]]).unwrap())
        .map_err(|e| e.to_string())?;
    let hand_pbm = pbm(&hand);
    check((hand_pbm - 0.01).abs() <= 1e-12, || format!("hand PBM {hand_pbm}"))?;
    let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]);
    check((kl - 2f64.ln()).abs() <= 1e-12, || format!("CKLD case {kl}"))?;
    Ok(format!("max deviation {worst:e}, hand PBM {hand_pbm:.12}, CKLD case {kl:.12}"))
}

fn gradient_correctness() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let model = toy(9, 16);
    let mut adapters =
        AdapterSet::init(model.config(), &AdapterInit::attention(model.config(), 9)).map_err(|e| e.to_string())?;
    // Nonzero A so every factor receives a gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ad in &mut adapters.adapters {
        let shape = ad.a.shape().to_vec();
        let values = (0..ad.a.len()).map(|_| rng.random_range(-0.1..0.1)).collect();
        ad.a = Tensor::new(shape, values).unwrap();
    }
    let inst = &dataset(3, 1, 5)[0];
    let perms = enumerate_permutations(3).map_err(|e| e.to_string())?;
    let mut errs = Vec::new();
    for lambda in [0.0, 0.1] {
        let scorer = Scorer::new(model.attach(&adapters).map_err(|e| e.to_string())?, &t, &tok);
        let err = grad_check_loss(&scorer, inst, &perms, lambda, 1e-4).map_err(|e| e.to_string())?;
        check(err < 1e-4, || format!("lambda {lambda}: max relative error {err:e}"))?;
        errs.push(format!("λ={lambda}: {err:.2e}"));
    }
    Ok(format!("max relative error {}", errs.join(", ")))
}

fn debias_training() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let one = tok.single_token("1").ok_or("label 1 is not a single token")?;
    let mut passed = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let model = toy(seed, 32).with_logit_shift(one, 2.0).map_err(|e| e.to_string())?;
        let train_set = dataset(3, 64, 2 * seed + 100);
        let eval = dataset(3, 128, 2 * seed + 101);
        let cfg = DebiasConfig { epochs: 25, max_steps: Some(200), seed, ..DebiasConfig::default() };
        let (_, log) = train(&model, &train_set, &eval, &tok, &t, &cfg).map_err(|e| e.to_string())?;
        let (first, last) = (log.initial().unwrap(), log.last_eval().unwrap());
        let drop = 1.0 - last.pbm / first.pbm;
        let ok = drop >= 0.5 && last.acc_std <= first.acc_std;
        passed += usize::from(ok);
        lines.push(format!(
            "seed {seed}: PBM -{:.1}%, AccStd {:.4}->{:.4}",
            100.0 * drop,
            first.acc_std.unwrap_or(f64::NAN),
            last.acc_std.unwrap_or(f64::NAN)
        ));
    }
    let summary = format!("{passed}/5 seeds ({})", lines.join("; "));
    check(passed >= 4, || summary.clone())?;
    Ok(summary)
}

fn permutation_cap() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let model = toy(1, 16);
    let scorer = Scorer::new(model.view(), &t, &tok);
    let opts = ScoreOptions { seed: 3, ..ScoreOptions::default() };
    for n in [4, 8] {
        let data = dataset(n, 4, n as u64);
        let a = scorer.score_dataset(&data, &opts).map_err(|e| e.to_string())?;
        let b = scorer.score_dataset(&data, &opts).map_err(|e| e.to_string())?;
        for ((ma, _), (mb, _)) in a.iter().zip(&b) {
            let perms = &ma.perms;
            check(perms.len() == 24, || format!("n={n}: {} permutations", perms.len()))?;
            check(perms.includes_identity() && perms.includes_reverse(), || {
                format!("n={n}: identity or reverse missing")
            })?;
            check(perms == &mb.perms, || format!("n={n}: not deterministic"))?;
            if n == 4 {
                check(perms.perms() == enumerate_permutations(4).unwrap().perms(), || {
                    "n=4: not the full enumeration".into()
                })?;
            }
        }
    }
    Ok("n=4 uses all 24, n=8 samples 24 with identity and reverse, deterministic".into())
}

fn complexity_accounting() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let mut checked = 0;
    for n in 2..=5 {
        for (i, inst) in dataset(n, 5, 300 + n as u64).iter().enumerate() {
            let full = permutations_for(n, 24, i as u64).map_err(|e| e.to_string())?;
            let id = full.get(full.identity_index().unwrap()).clone();
            let single = PermutationSet::from_perms(n, vec![id.clone()]).map_err(|e| e.to_string())?;
            let pair = PermutationSet::from_perms(n, vec![id.clone(), id.reverse()]).map_err(|e| e.to_string())?;
            let ledger = |perms: &PermutationSet| render_all(&tok, &t, inst, perms).map(|p| ledger_for(&inst.id, &p));
            let (l1, l2, lm) = (
                ledger(&single).map_err(|e| e.to_string())?,
                ledger(&pair).map_err(|e| e.to_string())?,
                ledger(&full).map_err(|e| e.to_string())?,
            );
            let (prefix, option, m) = (lm.prefix_len, lm.option_lens[0], lm.k);
            let cases = [
                (MetricCost::SinglePass, &l1),
                (MetricCost::ForwardReverse, &l2),
                (MetricCost::PbmSampled, &lm),
                (MetricCost::PbmCached, &lm),
            ];
            for (cost, l) in cases {
                let measured = cost.measured(l).map_err(|e| e.to_string())?;
                let expected = cost.tokens(prefix, option, n, m);
                check(measured == expected, || {
                    format!("{}: {cost:?} measured {measured} expected {expected}", inst.id)
                })?;
                checked += 1;
            }
            if n <= 4 {
                let measured = MetricCost::PbmFull.measured(&lm).map_err(|e| e.to_string())?;
                check(measured == MetricCost::PbmFull.tokens(prefix, option, n, m), || {
                    format!("{}: full enumeration cost {measured}", inst.id)
                })?;
            }
        }
    }
    Ok(format!("{checked} ledger/cost-expression pairs exact"))
}

fn attention_fluctuation_analog() -> Outcome {
    let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
    let mut dominated = 0;
    for trial in 0..100u64 {
        let model = toy(10_000 + trial, 32);
        let inst = &dataset(4, 1, trial)[0];
        let perms = enumerate_permutations(4).map_err(|e| e.to_string())?;
        let profile = attention_fluctuation(&model.view(), &tok, &t, inst, &perms).map_err(|e| e.to_string())?;
        let (pre, suf) = (profile.mean(Region::Prefix), profile.mean(Region::Suffix));
        if let (Some(pre), Some(suf)) = (pre, suf) {
            dominated += usize::from(suf >= pre);
        }
    }
    let summary = format!("suffix ≥ prefix in {dominated}/100 trials");
    check(dominated >= 80, || summary.clone())?;
    Ok(summary)
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("1 majority-vote zero bias", mv_zero_bias, Duration::from_secs(60)),
        ("2 cached scoring correctness", baqckv_correctness, Duration::from_secs(120)),
        ("3 token-savings identity", token_savings, Duration::from_secs(10)),
        ("4 metric oracles", metric_oracles, Duration::from_secs(30)),
        ("5 gradient correctness", gradient_correctness, Duration::from_secs(120)),
        ("6 debias training", debias_training, Duration::from_secs(600)),
        ("7 permutation cap", permutation_cap, Duration::from_secs(10)),
        ("8 complexity accounting", complexity_accounting, Duration::from_secs(30)),
        ("9 attention fluctuation", attention_fluctuation_analog, Duration::from_secs(300)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.1?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("criterion {name}: PASS ({detail}; {elapsed:.1?})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}; {elapsed:.1?})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
