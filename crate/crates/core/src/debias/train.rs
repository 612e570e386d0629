use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{debias_loss_graph, LossTerms, Normalization};
use super::optim::{AdamW, AdamWConfig};
use crate::data::{McqInstance, PromptTemplate, RenderedPrompt, Tokenizer};
use crate::engine::{option_probs, render_all, ScoreOptions, Scorer, ScoringMode};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_and_std, pbm, PredictionRecord};
use crate::model::{AdapterInit, AdapterSet, Bound, Model, ModelView};
use crate::par::{try_map_ordered, ExecPolicy};
use crate::permute::{instance_seed, permutations_for, PermutationSet, DEFAULT_PERM_CAP};
use crate::tensor::{finite_diff_check, Tape, Tensor, TensorError, Var};

// Salts keep permutation, dropout and sampling streams independent.
const PERM_SALT: u64 = 0x5045_524d;
const DROPOUT_SALT: u64 = 0x4452_4f50;
const SAMPLE_SALT: u64 = 0x5341_4d50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasConfig {
    /// Entropy weight.
    pub lambda: f64,
    pub perm_cap: usize,
    pub samples_per_epoch: usize,
    /// Instances per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub optimizer: AdamWConfig,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Std of the random `B` factors; `1/√d_model` when unset.
    pub b_std: Option<f64>,
    pub normalization: Normalization,
    pub mode: ScoringMode,
    pub seed: u64,
    #[serde(skip)]
    pub policy: ExecPolicy,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            perm_cap: DEFAULT_PERM_CAP,
            samples_per_epoch: 64,
            batch_size: 8,
            epochs: 1,
            max_steps: None,
            optimizer: AdamWConfig::default(),
            rank: crate::model::DEFAULT_RANK,
            alpha: crate::model::DEFAULT_ALPHA,
            dropout: crate::model::DEFAULT_DROPOUT,
            b_std: None,
            normalization: Normalization::Mean,
            mode: ScoringMode::Baqckv,
            seed: 0,
            policy: ExecPolicy::Parallel,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("samples_per_epoch and batch_size must be positive".into()));
        }
        if self.perm_cap < 2 {
            return Err(Error::Config("perm_cap must be at least 2".into()));
        }
        Ok(())
    }

    pub fn adapter_init(&self, model: &Model) -> AdapterInit {
        let mut init = AdapterInit::attention(model.config(), self.seed);
        init.rank = self.rank;
        init.alpha = self.alpha;
        init.dropout = self.dropout;
        if let Some(s) = self.b_std {
            init.b_std = s;
        }
        init
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub b_log: f64,
    pub entropy: f64,
}

/// Held-out metrics; epoch 0 is the state before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub epoch: usize,
    pub step: usize,
    pub pbm: f64,
    pub accuracy: Option<f64>,
    pub acc_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
}

impl TrainLog {
    pub fn initial(&self) -> Option<&EvalLog> {
        self.evals.first().filter(|e| e.epoch == 0)
    }

    pub fn last_eval(&self) -> Option<&EvalLog> {
        self.evals.last()
    }

    /// `step,loss,b_log,entropy,epoch_pbm,epoch_acc`; the epoch columns are
    /// filled on the last step of each epoch. A leading step-0 row carries
    /// the held-out metrics before training.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,b_log,entropy,epoch_pbm,epoch_acc\n");
        if let Some(e) = self.initial() {
            let acc = e.accuracy.map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("0,,,,{},{acc}\n", e.pbm));
        }
        for st in &self.steps {
            let eval = self.evals.iter().find(|e| e.epoch > 0 && e.step == st.step);
            let pbm = eval.map(|e| e.pbm.to_string()).unwrap_or_default();
            let acc = eval.and_then(|e| e.accuracy).map(|a| a.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{pbm},{acc}\n", st.step, st.loss, st.b_log, st.entropy));
        }
        s
    }
}

/// Binds `view` on a tape with adapter factors taken from `vars`
/// (`[a₀, b₀, a₁, b₁, …]` in adapter-set order).
fn bind_with_vars(tape: &mut Tape, view: &ModelView<'_>, vars: &[Var]) -> Bound<Var> {
    let set = view.adapters.expect("adapters attached");
    Bound::new(tape, view, |_, ad| {
        let i = set.adapters.iter().position(|o| o.target == ad.target).expect("adapter from this set");
        (vars[2 * i], vars[2 * i + 1])
    })
}

fn adapter_leaves(set: &AdapterSet) -> Vec<Tensor<f64>> {
    set.adapters.iter().flat_map(|a| [a.a.clone(), a.b.clone()]).collect()
}

/// Loss and adapter gradients (`[a₀, b₀, …]`) for one instance.
fn instance_gradients(
    view: &ModelView<'_>,
    prompts: &[RenderedPrompt],
    m: usize,
    n: usize,
    cfg: &DebiasConfig,
    dropout_seed: Option<u64>,
) -> Result<(LossTerms, Vec<Tensor<f64>>)> {
    let set = view.adapters.expect("adapters attached");
    let mut tape = Tape::new();
    let vars: Vec<Var> = adapter_leaves(set).into_iter().map(|t| tape.leaf(t)).collect();
    let bound = bind_with_vars(&mut tape, view, &vars);
    let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
    let probs = option_probs(&mut tape, &bound, view.model, prompts, cfg.mode, rng.as_mut())?;
    let (loss, b_log, h) = debias_loss_graph(&mut tape, &probs, m, n, cfg.lambda, cfg.normalization)?;
    let grads = tape.backward(loss)?;
    let terms = LossTerms { loss: tape.get(loss).item(), b_log: tape.get(b_log).item(), entropy: tape.get(h).item() };
    let grads = vars.iter().map(|v| grads.get(*v).cloned().expect("leaf gradient")).collect();
    Ok((terms, grads))
}

/// Loss terms of one instance with dropout off, scored either way.
pub fn instance_loss(
    scorer: &Scorer<'_>,
    instance: &McqInstance,
    perms: &PermutationSet,
    lambda: f64,
    norm: Normalization,
    mode: ScoringMode,
) -> Result<LossTerms> {
    let (matrix, _) = scorer.score(instance, perms, mode, crate::engine::Precision::F64)?;
    super::loss::debias_loss(&matrix, lambda, norm)
}

/// Max relative error between taped and central-difference gradients of
/// the full render → shared-prefix scoring → loss pipeline with respect to
/// every adapter factor. Dropout is off.
pub fn grad_check_loss(
    scorer: &Scorer<'_>,
    instance: &McqInstance,
    perms: &PermutationSet,
    lambda: f64,
    step: f64,
) -> Result<f64> {
    let view = scorer.view;
    let adapters = view.adapters.ok_or_else(|| Error::Contract("gradient check needs attached adapters".into()))?;
    let prompts = render_all(scorer.tokenizer, scorer.template, instance, perms)?;
    let (m, n) = (perms.len(), perms.n());
    Ok(finite_diff_check(
        |tape, vars| {
            let bound = bind_with_vars(tape, &view, vars);
            let loss = option_probs(tape, &bound, view.model, &prompts, ScoringMode::Baqckv, None)
                .and_then(|probs| debias_loss_graph(tape, &probs, m, n, lambda, Normalization::Mean));
            loss.map(|(l, _, _)| l).map_err(|e| match e {
                Error::Tensor(t) => t,
                other => TensorError::Contract(other.to_string()),
            })
        },
        &adapter_leaves(adapters),
        step,
    )?)
}

/// Mean PBM and (when labeled) accuracy / accuracy std on `data`.
pub fn evaluate(
    view: &ModelView<'_>,
    tok: &Tokenizer,
    template: &PromptTemplate,
    data: &[McqInstance],
    perm_cap: usize,
    seed: u64,
    policy: ExecPolicy,
) -> Result<(f64, Option<f64>, Option<f64>)> {
    let scored = Scorer::new(*view, template, tok)
        .score_dataset(data, &ScoreOptions { perm_cap, seed, policy, ..ScoreOptions::default() })?;
    let mean_pbm = scored.iter().map(|(m, _)| pbm(m)).sum::<f64>() / scored.len().max(1) as f64;
    let labeled: Vec<PredictionRecord> = scored
        .iter()
        .zip(data)
        .filter(|(_, inst)| inst.answer.is_some())
        .map(|((m, _), inst)| PredictionRecord::from_matrix(m, inst.answer))
        .collect();
    if labeled.is_empty() {
        return Ok((mean_pbm, None, None));
    }
    let (acc, std) = accuracy_and_std(&labeled)?;
    Ok((mean_pbm, Some(acc), Some(std)))
}

/// Trains rank-`r` adapters on the frozen `model` with the unsupervised
/// log-variance + entropy objective. `eval` may be empty.
pub fn train(
    model: &Model,
    train_set: &[McqInstance],
    eval: &[McqInstance],
    tok: &Tokenizer,
    template: &PromptTemplate,
    cfg: &DebiasConfig,
) -> Result<(AdapterSet, TrainLog)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adapters = AdapterSet::init(model.config(), &cfg.adapter_init(model))?;
    let shapes: Vec<usize> = adapter_leaves(&adapters).iter().map(Tensor::len).collect();
    let mut opt = AdamW::new(cfg.optimizer, &shapes);
    let mut log = TrainLog::default();
    let eval_seed = cfg.seed ^ PERM_SALT;
    let record_eval = |adapters: &AdapterSet, epoch: usize, step: usize, log: &mut TrainLog| -> Result<()> {
        if eval.is_empty() {
            return Ok(());
        }
        let view = model.attach(adapters)?;
        let (pbm, accuracy, acc_std) = evaluate(&view, tok, template, eval, cfg.perm_cap, eval_seed, cfg.policy)?;
        log.evals.push(EvalLog { epoch, step, pbm, accuracy, acc_std });
        Ok(())
    };
    record_eval(&adapters, 0, 0, &mut log)?;

    let mut step = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_seed(cfg.seed ^ SAMPLE_SALT, epoch));
        let draws: Vec<usize> = (0..cfg.samples_per_epoch).map(|_| rng.random_range(0..train_set.len())).collect();
        for batch in draws.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|max| step >= max) {
                break 'epochs;
            }
            step += 1;
            let view = model.attach(&adapters)?;
            let results = try_map_ordered(batch, cfg.policy, |slot, &idx| {
                let inst = &train_set[idx];
                let draw = step * cfg.batch_size + slot;
                let perms = permutations_for(inst.n(), cfg.perm_cap, instance_seed(cfg.seed ^ PERM_SALT, draw))?;
                let prompts = render_all(tok, template, inst, &perms)?;
                let dropout = (cfg.dropout > 0.0).then(|| instance_seed(cfg.seed ^ DROPOUT_SALT, draw));
                instance_gradients(&view, &prompts, perms.len(), perms.n(), cfg, dropout)
            })
            .map_err(|e| match e {
                Error::Tensor(t) => Error::Divergence { step, detail: t.to_string() },
                other => other,
            })?;
            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Tensor<f64>> = shapes.iter().map(|&n| Tensor::zeros(&[n])).collect();
            let mut terms = LossTerms { loss: 0.0, b_log: 0.0, entropy: 0.0 };
            for (t, g) in &results {
                terms.loss += scale * t.loss;
                terms.b_log += scale * t.b_log;
                terms.entropy += scale * t.entropy;
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += scale * v;
                    }
                }
            }
            if !terms.loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { step, detail: format!("loss {}", terms.loss) });
            }
            let mut params: Vec<&mut Tensor<f64>> =
                adapters.adapters.iter_mut().flat_map(|a| [&mut a.a, &mut a.b]).collect();
            let grads: Vec<Tensor<f64>> = grads
                .into_iter()
                .zip(&params)
                .map(|(g, p)| g.reshape(p.shape().to_vec()))
                .collect::<std::result::Result<_, _>>()?;
            opt.update(&mut params, &grads);
            log.steps.push(StepLog { step, epoch, loss: terms.loss, b_log: terms.b_log, entropy: terms.entropy });
        }
        record_eval(&adapters, epoch, step, &mut log)?;
    }
    Ok((adapters, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::model::ModelConfig;
    use crate::permute::enumerate_permutations;

    fn tiny() -> Model {
        Model::build(ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, init_seed: 3, ..ModelConfig::default() }).unwrap()
    }

    fn data(count: usize, seed: u64) -> Vec<McqInstance> {
        let spec = SyntheticSpec { n_options: 3, question_words: 3, ..SyntheticSpec::default() };
        synthetic_dataset(&spec, count, seed)
    }

    fn quick() -> DebiasConfig {
        DebiasConfig { samples_per_epoch: 4, batch_size: 2, epochs: 1, ..DebiasConfig::default() }
    }

    #[test]
    fn zero_epochs_leave_adapters_inert() {
        let m = tiny();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let cfg = DebiasConfig { epochs: 0, ..quick() };
        let (set, log) = train(&m, &data(4, 0), &[], &tok, &t, &cfg).unwrap();
        assert_eq!(set, AdapterSet::init(m.config(), &cfg.adapter_init(&m)).unwrap());
        assert!(log.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_untouched() {
        let m = tiny();
        let before = m.checksum();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let (a, la) = train(&m, &data(6, 1), &data(2, 2), &tok, &t, &quick()).unwrap();
        let seq = DebiasConfig { policy: ExecPolicy::Sequential, ..quick() };
        let (b, lb) = train(&m, &data(6, 1), &data(2, 2), &tok, &t, &seq).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(m.checksum(), before);
        assert_eq!(la.steps.len(), 2);
        assert_eq!(la.evals.len(), 2);
        assert!(la.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert!(a.adapters.iter().any(|ad| ad.a.data().iter().any(|&v| v != 0.0)));
        let csv = la.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,,,,"));
        assert!(csv.lines().last().unwrap().split(',').nth(4).is_some_and(|c| !c.is_empty()));
    }

    #[test]
    fn cached_and_full_pass_losses_agree() {
        let m = tiny();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let mut set = AdapterSet::init(m.config(), &AdapterInit::attention(m.config(), 1)).unwrap();
        for ad in &mut set.adapters {
            ad.a = ad.b.transpose().unwrap();
        }
        let scorer = Scorer::new(m.attach(&set).unwrap(), &t, &tok);
        let perms = enumerate_permutations(3).unwrap();
        let inst = &data(1, 4)[0];
        let a = instance_loss(&scorer, inst, &perms, 0.1, Normalization::Mean, ScoringMode::Naive).unwrap();
        let b = instance_loss(&scorer, inst, &perms, 0.1, Normalization::Mean, ScoringMode::Baqckv).unwrap();
        assert!((a.loss - b.loss).abs() <= 1e-10);
        assert!(a.loss >= 0.0);
    }

    #[test]
    fn zero_a_still_gets_a_gradient() {
        let m = tiny();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let set = AdapterSet::init(m.config(), &AdapterInit::attention(m.config(), 1)).unwrap();
        let view = m.attach(&set).unwrap();
        let perms = enumerate_permutations(3).unwrap();
        let prompts = render_all(&tok, &t, &data(1, 5)[0], &perms).unwrap();
        let (_, grads) = instance_gradients(&view, &prompts, 6, 3, &quick(), None).unwrap();
        // grads alternate a, b; a-gradients are nonzero, b-gradients vanish at A = 0
        assert!(grads[0].data().iter().any(|&g| g != 0.0));
        assert!(grads[1].data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = DebiasConfig { lambda: -1.0, ..quick() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let m = tiny();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        assert!(train(&m, &[], &[], &tok, &t, &quick()).is_err());
    }
}
