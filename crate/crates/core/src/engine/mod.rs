//! Option scoring over permutation sets, by repeated full passes or with
//! the question/context encoded once and reused (BaQCKV), plus exact token
//! accounting and attention-fluctuation analysis.

mod fluctuation;
mod ledger;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{McqInstance, PromptTemplate, RenderedPrompt, Tokenizer};
use crate::error::{Error, Result};
use crate::model::{Bound, ForwardSpec, Model, ModelView};
use crate::par::{try_map_ordered, ExecPolicy};
use crate::permute::{instance_seed, permutations_for, PermutationSet, DEFAULT_PERM_CAP};
use crate::tensor::{AttentionLayout, Eager, Element, Graph, KeySpan, Tensor};

pub use fluctuation::{attention_fluctuation, AttentionProfile, Region};
pub use ledger::{aggregate_savings_pct, closed_form_savings_pct, savings_pct, MetricCost, TokenLedger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    /// One full forward pass per permutation.
    Naive,
    /// Shared prefix encoded once; all option suffixes in one batch.
    #[default]
    Baqckv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// `probs[p][c]`: probability of option content `c` under permutation `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionProbMatrix {
    pub instance_id: String,
    pub perms: PermutationSet,
    pub probs: Tensor<f64>,
}

impl OptionProbMatrix {
    pub fn new(instance_id: impl Into<String>, perms: PermutationSet, probs: Tensor<f64>) -> Result<Self> {
        if probs.shape() != [perms.len(), perms.n()] {
            return Err(Error::Contract(format!(
                "probability table {:?} for {} permutations of {} options",
                probs.shape(),
                perms.len(),
                perms.n()
            )));
        }
        for p in 0..perms.len() {
            let row = probs.row(p);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Contract(format!("row {p} is not a distribution: {row:?}")));
            }
        }
        Ok(Self { instance_id: instance_id.into(), perms, probs })
    }

    pub fn m(&self) -> usize {
        self.perms.len()
    }

    pub fn n(&self) -> usize {
        self.perms.n()
    }

    pub fn row(&self, p: usize) -> &[f64] {
        self.probs.row(p)
    }

    pub fn get(&self, p: usize, content: usize) -> f64 {
        self.probs.at(p, content)
    }
}

/// Renders every permutation of `instance`.
pub fn render_all(
    tok: &Tokenizer,
    template: &PromptTemplate,
    instance: &McqInstance,
    perms: &PermutationSet,
) -> Result<Vec<RenderedPrompt>> {
    if perms.n() != instance.n() {
        return Err(Error::Range(format!(
            "permutations over {} options for an instance with {}",
            perms.n(),
            instance.n()
        )));
    }
    perms.perms().iter().map(|p| template.render(tok, instance, p)).collect()
}

/// Token ledger of a rendered permutation set.
pub fn ledger_for(instance_id: &str, prompts: &[RenderedPrompt]) -> TokenLedger {
    let prefix_len = prompts.first().map_or(0, |p| p.prefix_tokens.len());
    TokenLedger::new(instance_id, prefix_len, prompts.iter().map(|p| p.suffix_tokens.len()).collect())
}

fn check_prompts(model: &Model, prompts: &[RenderedPrompt]) -> Result<()> {
    let first = prompts.first().ok_or_else(|| Error::Contract("no prompts to score".into()))?;
    for p in prompts {
        if p.prefix_tokens != first.prefix_tokens || p.label_token_ids != first.label_token_ids {
            return Err(Error::Contract("prompts of one instance must share prefix and labels".into()));
        }
        if p.suffix_tokens.is_empty() {
            return Err(Error::Contract("empty option suffix".into()));
        }
        if p.len() > model.config().max_positions {
            return Err(Error::Capacity(format!(
                "prompt of {} tokens exceeds max_positions {}",
                p.len(),
                model.config().max_positions
            )));
        }
    }
    Ok(())
}

/// Restricts final-position logits `[m × vocab]` to the label ids, applies
/// softmax and reorders columns from display position to content index.
pub(crate) fn restrict_to_contents<G: Graph>(
    g: &mut G,
    logits: &G::Value,
    prompts: &[RenderedPrompt],
) -> Result<G::Value> {
    let labels: Vec<Vec<usize>> =
        prompts.iter().map(|p| p.label_token_ids.iter().map(|&t| t as usize).collect()).collect();
    let restricted = g.gather_cols(logits, &labels)?;
    let by_position = g.row_softmax(&restricted)?;
    let by_content: Vec<Vec<usize>> = prompts.iter().map(|p| p.permutation.positions()).collect();
    Ok(g.gather_cols(&by_position, &by_content)?)
}

/// Final-position logits `[m × vocab]`, one full causal pass per prompt.
pub(crate) fn naive_logits<G: Graph>(
    g: &mut G,
    bound: &Bound<G::Value>,
    model: &Model,
    prompts: &[RenderedPrompt],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<G::Value> {
    let mut rows: Option<G::Value> = None;
    for p in prompts {
        let tokens = p.tokens();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let out = bound.run(
            g,
            model,
            &ForwardSpec {
                tokens: &tokens,
                positions: &positions,
                layout: Arc::new(AttentionLayout::causal(tokens.len(), 0)),
                past: None,
                read_rows: Some(&[tokens.len() - 1]),
                capture: false,
            },
            dropout.as_deref_mut(),
        )?;
        rows = Some(match rows {
            Some(acc) => g.concat_rows(&acc, &out.logits)?,
            None => out.logits,
        });
    }
    rows.ok_or_else(|| Error::Contract("no prompts to score".into()))
}

/// Final-position logits `[m × vocab]` with the prefix encoded once and the
/// right-padded suffixes attending to it in a single batch.
pub(crate) fn baqckv_logits<G: Graph>(
    g: &mut G,
    bound: &Bound<G::Value>,
    model: &Model,
    prompts: &[RenderedPrompt],
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<G::Value> {
    let prefix = &prompts[0].prefix_tokens;
    let plen = prefix.len();
    let past = if plen > 0 {
        let positions: Vec<usize> = (0..plen).collect();
        let out = bound.run(
            g,
            model,
            &ForwardSpec {
                tokens: prefix,
                positions: &positions,
                layout: Arc::new(AttentionLayout::causal(plen, 0)),
                past: None,
                read_rows: Some(&[plen - 1]),
                capture: false,
            },
            dropout.as_deref_mut(),
        )?;
        Some(out.kv)
    } else {
        None
    };
    let lmax = prompts.iter().map(|p| p.suffix_tokens.len()).max().unwrap_or(0);
    let batch = prompts.len();
    let mut tokens = Vec::with_capacity(batch * lmax);
    let mut positions = Vec::with_capacity(batch * lmax);
    let mut spans = Vec::with_capacity(batch * lmax);
    let mut read = Vec::with_capacity(batch);
    for (b, p) in prompts.iter().enumerate() {
        let s = &p.suffix_tokens;
        let start = plen + b * lmax;
        for j in 0..lmax {
            // padding repeats the last real token; nothing real attends to it
            tokens.push(*s.get(j).unwrap_or(&s[s.len() - 1]));
            positions.push(plen + j);
            spans.push(KeySpan { shared: plen, own: start..start + j + 1 });
        }
        read.push(b * lmax + s.len() - 1);
    }
    let layout = Arc::new(AttentionLayout::new(spans, plen + batch * lmax)?);
    let out = bound.run(
        g,
        model,
        &ForwardSpec {
            tokens: &tokens,
            positions: &positions,
            layout,
            past: past.as_deref(),
            read_rows: Some(&read),
            capture: false,
        },
        dropout,
    )?;
    Ok(out.logits)
}

/// Content-ordered option probabilities `[m × n]` on any graph.
pub(crate) fn option_probs<G: Graph>(
    g: &mut G,
    bound: &Bound<G::Value>,
    model: &Model,
    prompts: &[RenderedPrompt],
    mode: ScoringMode,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<G::Value> {
    check_prompts(model, prompts)?;
    let logits = match mode {
        ScoringMode::Naive => naive_logits(g, bound, model, prompts, dropout)?,
        ScoringMode::Baqckv => baqckv_logits(g, bound, model, prompts, dropout)?,
    };
    restrict_to_contents(g, &logits, prompts)
}

fn eager_probs<T: Element>(view: &ModelView<'_>, prompts: &[RenderedPrompt], mode: ScoringMode) -> Result<Tensor<f64>> {
    let mut g = Eager::<T>::new();
    let bound = Bound::constants(&mut g, view);
    let probs = option_probs(&mut g, &bound, view.model, prompts, mode, None)?;
    let probs = g.value(&probs);
    // Rows computed in f32 sum to 1 only to f32 precision; renormalize in f64.
    let n = probs.cols();
    let mut data = probs.into_data();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Tensor::new(vec![prompts.len(), n], data)?)
}

/// Everything needed to score instances.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub view: ModelView<'a>,
    pub template: &'a PromptTemplate,
    pub tokenizer: &'a Tokenizer,
}

impl<'a> Scorer<'a> {
    pub fn new(view: ModelView<'a>, template: &'a PromptTemplate, tokenizer: &'a Tokenizer) -> Self {
        Self { view, template, tokenizer }
    }

    pub fn score(
        &self,
        instance: &McqInstance,
        perms: &PermutationSet,
        mode: ScoringMode,
        precision: Precision,
    ) -> Result<(OptionProbMatrix, TokenLedger)> {
        let prompts = render_all(self.tokenizer, self.template, instance, perms)?;
        let probs = match precision {
            Precision::F64 => eager_probs::<f64>(&self.view, &prompts, mode)?,
            Precision::F32 => eager_probs::<f32>(&self.view, &prompts, mode)?,
        };
        let matrix = OptionProbMatrix::new(instance.id.clone(), perms.clone(), probs)?;
        Ok((matrix, ledger_for(&instance.id, &prompts)))
    }

    pub fn score_naive(
        &self,
        instance: &McqInstance,
        perms: &PermutationSet,
    ) -> Result<(OptionProbMatrix, TokenLedger)> {
        self.score(instance, perms, ScoringMode::Naive, Precision::F64)
    }

    pub fn score_baqckv(
        &self,
        instance: &McqInstance,
        perms: &PermutationSet,
    ) -> Result<(OptionProbMatrix, TokenLedger)> {
        self.score(instance, perms, ScoringMode::Baqckv, Precision::F64)
    }

    /// Scores every instance with its own permutation set (full enumeration
    /// up to four options, otherwise capped seeded sampling).
    pub fn score_dataset(
        &self,
        instances: &[McqInstance],
        opts: &ScoreOptions,
    ) -> Result<Vec<(OptionProbMatrix, TokenLedger)>> {
        try_map_ordered(instances, opts.policy, |i, inst| {
            let perms = permutations_for(inst.n(), opts.perm_cap, instance_seed(opts.seed, i))?;
            self.score(inst, &perms, opts.mode, opts.precision)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreOptions {
    pub mode: ScoringMode,
    pub precision: Precision,
    pub perm_cap: usize,
    pub seed: u64,
    pub policy: ExecPolicy,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            mode: ScoringMode::Baqckv,
            precision: Precision::F64,
            perm_cap: DEFAULT_PERM_CAP,
            seed: 0,
            policy: ExecPolicy::Parallel,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::model::{AdapterInit, AdapterSet, ModelConfig};
    use crate::permute::{enumerate_permutations, sample_permutations, Permutation};

    fn model(seed: u64) -> Model {
        Model::build(ModelConfig { d_model: 32, d_ff: 64, init_seed: seed, ..ModelConfig::default() }).unwrap()
    }

    fn instances(n: usize, count: usize, seed: u64) -> Vec<McqInstance> {
        let spec = SyntheticSpec { n_options: n, question_words: 5, ..SyntheticSpec::default() };
        synthetic_dataset(&spec, count, seed)
    }

    #[test]
    fn rows_are_distributions() {
        let (m, tok, t) = (model(0), Tokenizer::new(), PromptTemplate::instruct());
        let s = Scorer::new(m.view(), &t, &tok);
        let inst = &instances(2, 1, 0)[0];
        let (mat, _) = s.score_naive(inst, &enumerate_permutations(2).unwrap()).unwrap();
        for p in 0..2 {
            assert!((mat.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_unembedding_is_uniform() {
        let (m, tok, t) = (model(0).with_zero_unembedding(), Tokenizer::new(), PromptTemplate::instruct());
        let s = Scorer::new(m.view(), &t, &tok);
        let inst = &instances(4, 1, 1)[0];
        let (mat, _) = s.score_baqckv(inst, &enumerate_permutations(4).unwrap()).unwrap();
        assert!(mat.probs.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn baqckv_matches_naive() {
        let (tok, t) = (Tokenizer::new(), PromptTemplate::context_repeat());
        for seed in 0..2 {
            let m = model(seed);
            let s = Scorer::new(m.view(), &t, &tok);
            for inst in instances(3, 3, seed) {
                let perms = enumerate_permutations(3).unwrap();
                let (a, la) = s.score_naive(&inst, &perms).unwrap();
                let (b, lb) = s.score_baqckv(&inst, &perms).unwrap();
                assert!(a.probs.max_abs_diff(&b.probs) <= 1e-10);
                assert_eq!(la, lb);
                let (c, _) = s.score(&inst, &perms, ScoringMode::Baqckv, Precision::F32).unwrap();
                let (d, _) = s.score(&inst, &perms, ScoringMode::Naive, Precision::F32).unwrap();
                assert!(c.probs.max_abs_diff(&d.probs) <= 1e-5);
                assert!(c.probs.max_abs_diff(&a.probs) <= 1e-3);
            }
        }
    }

    #[test]
    fn ragged_suffixes_are_padded_correctly() {
        // Options of different word counts give suffixes of different lengths
        // when the last line has a different label width; force raggedness by
        // scoring prompts rendered from two templates with a shared prefix.
        let (m, tok) = (model(3), Tokenizer::new());
        let t1 = PromptTemplate::instruct();
        let mut t2 = PromptTemplate::instruct();
        t2.suffix = "Please answer the question. Output: option ".into();
        let inst = &instances(3, 1, 9)[0];
        let id = Permutation::identity(3);
        let prompts = vec![t1.render(&tok, inst, &id).unwrap(), t2.render(&tok, inst, &id.reverse()).unwrap()];
        assert_ne!(prompts[0].suffix_tokens.len(), prompts[1].suffix_tokens.len());
        let view = m.view();
        let a = eager_probs::<f64>(&view, &prompts, ScoringMode::Naive).unwrap();
        let b = eager_probs::<f64>(&view, &prompts, ScoringMode::Baqckv).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn ledger_counts() {
        let (m, tok, t) = (model(1), Tokenizer::new(), PromptTemplate::instruct());
        let s = Scorer::new(m.view(), &t, &tok);
        let inst = &instances(8, 1, 2)[0];
        let perms = sample_permutations(8, 24, 7).unwrap();
        let (_, l) = s.score_baqckv(inst, &perms).unwrap();
        assert_eq!(l.k, 24);
        assert_eq!(l.naive_cost, 24 * l.prefix_len + l.sum_option_lens());
        assert_eq!(l.cached_cost, l.prefix_len + l.sum_option_lens());
        let one = PermutationSet::from_perms(8, vec![Permutation::identity(8)]).unwrap();
        let (_, l1) = s.score_baqckv(inst, &one).unwrap();
        assert_eq!(l1.cached_cost, l1.naive_cost);
    }

    #[test]
    fn inert_adapters_score_like_base() {
        let (m, tok, t) = (model(2), Tokenizer::new(), PromptTemplate::instruct());
        let set = AdapterSet::init(m.config(), &AdapterInit::attention(m.config(), 4)).unwrap();
        let inst = &instances(3, 1, 5)[0];
        let perms = enumerate_permutations(3).unwrap();
        let (a, _) = Scorer::new(m.view(), &t, &tok).score_baqckv(inst, &perms).unwrap();
        let (b, _) = Scorer::new(m.attach(&set).unwrap(), &t, &tok).score_baqckv(inst, &perms).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn capacity_error_for_long_prompts() {
        let m =
            Model::build(ModelConfig { d_model: 16, d_ff: 16, max_positions: 20, ..ModelConfig::default() }).unwrap();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let inst = &instances(3, 1, 5)[0];
        let err = Scorer::new(m.view(), &t, &tok).score_naive(inst, &enumerate_permutations(3).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn dataset_scoring_is_policy_independent() {
        let (m, tok, t) = (model(4), Tokenizer::new(), PromptTemplate::instruct());
        let s = Scorer::new(m.view(), &t, &tok);
        let data = instances(5, 4, 3);
        let seq = s
            .score_dataset(
                &data,
                &ScoreOptions { policy: ExecPolicy::Sequential, perm_cap: 6, ..ScoreOptions::default() },
            )
            .unwrap();
        let par = s.score_dataset(&data, &ScoreOptions { perm_cap: 6, ..ScoreOptions::default() }).unwrap();
        assert_eq!(seq, par);
        assert!(seq.iter().all(|(m, _)| m.m() == 6));
    }
}
