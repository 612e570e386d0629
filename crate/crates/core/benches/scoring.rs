use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use permubias::data::{synthetic_dataset, PromptTemplate, SyntheticSpec, Tokenizer};
use permubias::engine::{Precision, ScoreOptions, Scorer, ScoringMode};
use permubias::model::{Model, ModelConfig};
use permubias::par::ExecPolicy;
use permubias::permute::permutations_for;

fn model() -> Model {
    Model::build(ModelConfig { d_model: 32, n_heads: 4, d_ff: 128, ..ModelConfig::default() }).expect("bench model")
}

fn scoring_modes(c: &mut Criterion) {
    let (m, tok, t) = (model(), Tokenizer::new(), PromptTemplate::context_repeat());
    let scorer = Scorer::new(m.view(), &t, &tok);
    let mut group = c.benchmark_group("scoring_mode");
    for context_words in [8, 64] {
        let spec = SyntheticSpec { context_words: Some(context_words), ..SyntheticSpec::default() };
        let inst = &synthetic_dataset(&spec, 1, 0)[0];
        let perms = permutations_for(inst.n(), 24, 0).expect("perms");
        for (name, mode) in [("naive", ScoringMode::Naive), ("cached", ScoringMode::Baqckv)] {
            group.bench_with_input(BenchmarkId::new(name, context_words), &mode, |b, &mode| {
                b.iter(|| scorer.score(inst, &perms, mode, Precision::F64).expect("score"))
            });
        }
    }
    group.finish();
}

fn exec_policies(c: &mut Criterion) {
    let (m, tok, t) = (model(), Tokenizer::new(), PromptTemplate::instruct());
    let scorer = Scorer::new(m.view(), &t, &tok);
    let data = synthetic_dataset(&SyntheticSpec::default(), 16, 1);
    let mut group = c.benchmark_group("exec_policy");
    group.sample_size(10);
    for (name, policy) in [("sequential", ExecPolicy::Sequential), ("parallel", ExecPolicy::Parallel)] {
        let opts = ScoreOptions { policy, ..ScoreOptions::default() };
        group.bench_function(name, |b| b.iter(|| scorer.score_dataset(&data, &opts).expect("score")));
    }
    group.finish();
}

criterion_group!(benches, scoring_modes, exec_policies);
criterion_main!(benches);
