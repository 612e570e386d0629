use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tokenizer::CONTENT;
use super::McqInstance;

/// Shape of generated questions. Every word is a single lexicon token, so
/// token counts are exact functions of these word counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n_options: usize,
    pub question_words: usize,
    pub context_words: Option<usize>,
    pub option_words: usize,
    pub labeled: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_options: 4, question_words: 6, context_words: None, option_words: 1, labeled: true }
    }
}

fn phrase(rng: &mut ChaCha8Rng, words: usize) -> String {
    (0..words).map(|_| *CONTENT.choose(rng).expect("content vocabulary")).collect::<Vec<_>>().join(" ")
}

/// `count` seeded instances. Options within one instance are distinct.
pub fn synthetic_dataset(spec: &SyntheticSpec, count: usize, seed: u64) -> Vec<McqInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let question = format!("{}?", phrase(&mut rng, spec.question_words));
            let context = spec.context_words.map(|w| phrase(&mut rng, w));
            let mut options: Vec<String> = Vec::with_capacity(spec.n_options);
            while options.len() < spec.n_options {
                let o = phrase(&mut rng, spec.option_words.max(1));
                if !options.contains(&o) {
                    options.push(o);
                }
            }
            options.shuffle(&mut rng);
            let answer = spec.labeled.then(|| rng.random_range(0..spec.n_options));
            McqInstance { id: format!("syn-{i}"), question, context, options, answer }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PromptTemplate, Tokenizer};
    use crate::permute::Permutation;

    #[test]
    fn generated_instances_are_valid_and_seeded() {
        let spec = SyntheticSpec { n_options: 8, ..SyntheticSpec::default() };
        let a = synthetic_dataset(&spec, 10, 3);
        assert_eq!(a, synthetic_dataset(&spec, 10, 3));
        assert_ne!(a, synthetic_dataset(&spec, 10, 4));
        assert!(a.iter().all(|i| i.validate().is_ok() && i.n() == 8));
    }

    #[test]
    fn token_counts_follow_word_counts() {
        let tok = Tokenizer::new();
        let spec = SyntheticSpec { n_options: 3, question_words: 5, option_words: 2, ..SyntheticSpec::default() };
        let t = PromptTemplate::instruct();
        let lens: Vec<(usize, usize)> = synthetic_dataset(&spec, 5, 1)
            .iter()
            .map(|i| {
                let r = t.render(&tok, i, &Permutation::identity(3)).unwrap();
                (r.prefix_tokens.len(), r.suffix_tokens.len())
            })
            .collect();
        assert!(lens.iter().all(|l| *l == lens[0]));
        // each option line: label . space w space w newline
        assert_eq!(lens[0].1, 3 * 7 + 5);
    }
}
