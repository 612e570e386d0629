use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exact token counts for scoring one instance over `k` permutations.
///
/// `naive_cost` counts every full prompt once per permutation;
/// `cached_cost` counts the shared prefix once plus every option suffix.
/// Padding added to batch suffixes is not counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub instance_id: String,
    pub prefix_len: usize,
    pub option_lens: Vec<usize>,
    pub k: usize,
    pub naive_cost: usize,
    pub cached_cost: usize,
}

impl TokenLedger {
    pub fn new(instance_id: impl Into<String>, prefix_len: usize, option_lens: Vec<usize>) -> Self {
        let k = option_lens.len();
        let options: usize = option_lens.iter().sum();
        Self {
            instance_id: instance_id.into(),
            prefix_len,
            k,
            naive_cost: k * prefix_len + options,
            cached_cost: if k == 0 { 0 } else { prefix_len + options },
            option_lens,
        }
    }

    pub fn sum_option_lens(&self) -> usize {
        self.option_lens.iter().sum()
    }

    /// `100 · (naive − cached) / naive`.
    pub fn savings_pct(&self) -> f64 {
        savings_pct(self.naive_cost, self.cached_cost)
    }
}

/// Percentage of `naive` tokens avoided by processing only `cached`.
pub fn savings_pct(naive: usize, cached: usize) -> f64 {
    if naive == 0 {
        return 0.0;
    }
    100.0 * (naive - cached) as f64 / naive as f64
}

/// Closed form `(k − 1)·|Q⊕C| / (k·|Q⊕C⊕O|) · 100` for uniform option
/// lengths.
pub fn closed_form_savings_pct(k: usize, prefix_len: usize, option_len: usize) -> f64 {
    if k == 0 || prefix_len + option_len == 0 {
        return 0.0;
    }
    100.0 * ((k - 1) * prefix_len) as f64 / (k * (prefix_len + option_len)) as f64
}

/// Token-weighted aggregate over many ledgers: `(Σ naive − Σ cached) / Σ naive`.
pub fn aggregate_savings_pct(ledgers: &[TokenLedger]) -> f64 {
    let naive = ledgers.iter().map(|l| l.naive_cost).sum();
    let cached = ledgers.iter().map(|l| l.cached_cost).sum();
    savings_pct(naive, cached)
}

/// Ways of scoring one question and the tokens each one touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricCost {
    /// RStd and CKLD: the original ordering only.
    SinglePass,
    /// FR: original and reversed orderings.
    ForwardReverse,
    /// PBM over all `n!` orderings, one full pass each.
    PbmFull,
    /// PBM over `m` sampled orderings, one full pass each.
    PbmSampled,
    /// PBM over `m` orderings with the question and context encoded once.
    PbmCached,
}

impl MetricCost {
    /// Tokens processed for a question with prefix `|Q⊕C|`, options block
    /// `|O|`, `n` options and `m` sampled permutations.
    pub fn tokens(self, prefix_len: usize, option_len: usize, n: usize, m: usize) -> usize {
        let full = prefix_len + option_len;
        match self {
            MetricCost::SinglePass => full,
            MetricCost::ForwardReverse => 2 * full,
            MetricCost::PbmFull => (1..=n).product::<usize>() * full,
            MetricCost::PbmSampled => m * full,
            MetricCost::PbmCached => prefix_len + m * option_len,
        }
    }

    /// Measured tokens for this cost model from a ledger of the matching
    /// permutation set.
    pub fn measured(self, ledger: &TokenLedger) -> Result<usize> {
        match self {
            MetricCost::PbmCached => Ok(ledger.cached_cost),
            _ => {
                let expected_k = match self {
                    MetricCost::SinglePass => Some(1),
                    MetricCost::ForwardReverse => Some(2),
                    _ => None,
                };
                if expected_k.is_some_and(|k| k != ledger.k) {
                    return Err(Error::Contract(format!(
                        "{self:?} needs a ledger over {} permutations, got {}",
                        expected_k.unwrap_or(0),
                        ledger.k
                    )));
                }
                Ok(ledger.naive_cost)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn spot_values() {
        let l = TokenLedger::new("a", 50, vec![50, 50]);
        assert_eq!(l.savings_pct(), 25.0);
        let l = TokenLedger::new("b", 60, vec![20; 4]);
        assert_eq!(l.savings_pct(), 56.25);
        assert_eq!(closed_form_savings_pct(4, 60, 20), 56.25);
        let l = TokenLedger::new("c", 60, vec![20]);
        assert_eq!(l.naive_cost, l.cached_cost);
        assert_eq!(l.savings_pct(), 0.0);
    }

    #[test]
    fn aggregate_is_token_weighted() {
        let ls = [TokenLedger::new("a", 10, vec![5, 5]), TokenLedger::new("b", 100, vec![1; 3])];
        let naive = 30 + 303;
        let cached = 20 + 103;
        assert_eq!(aggregate_savings_pct(&ls), 100.0 * (naive - cached) as f64 / naive as f64);
    }

    #[test]
    fn cost_table() {
        assert_eq!(MetricCost::SinglePass.tokens(30, 10, 4, 24), 40);
        assert_eq!(MetricCost::ForwardReverse.tokens(30, 10, 4, 24), 80);
        assert_eq!(MetricCost::PbmFull.tokens(30, 10, 4, 24), 960);
        assert_eq!(MetricCost::PbmSampled.tokens(30, 10, 8, 24), 960);
        assert_eq!(MetricCost::PbmCached.tokens(30, 10, 8, 24), 270);
        let l = TokenLedger::new("x", 30, vec![10; 3]);
        assert!(MetricCost::ForwardReverse.measured(&l).is_err());
    }

    proptest! {
        #[test]
        fn identities(prefix in 0usize..200, lens in prop::collection::vec(1usize..60, 1..25)) {
            let l = TokenLedger::new("p", prefix, lens.clone());
            prop_assert_eq!(l.naive_cost - l.cached_cost, (l.k - 1) * prefix);
            prop_assert!(l.cached_cost <= l.naive_cost);
            prop_assert_eq!(l.cached_cost == l.naive_cost, l.k == 1 || prefix == 0);
            let uniform = TokenLedger::new("u", prefix, vec![lens[0]; lens.len()]);
            let closed = closed_form_savings_pct(lens.len(), prefix, lens[0]);
            prop_assert!((uniform.savings_pct() - closed).abs() <= 1e-12);
        }
    }
}
