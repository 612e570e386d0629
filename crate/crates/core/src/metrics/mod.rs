//! Bias and accuracy metrics over option-probability matrices.
//!
//! Conventions: natural logarithms, argmax ties go to the lowest content
//! index, variances and standard deviations use the population divisor.

mod report;

use serde::{Deserialize, Serialize};

use crate::engine::OptionProbMatrix;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use report::{BiasReport, ReportInput, CSV_COLUMNS};

/// Smoothing added to predicted-symbol frequencies before the KL term.
pub const CKLD_EPSILON: f64 = 1e-9;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-permutation predictions for one instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub n: usize,
    /// Argmax content index per permutation.
    pub chosen_content: Vec<usize>,
    /// Display position of that content per permutation.
    pub chosen_position: Vec<usize>,
    pub gold: Option<usize>,
    pub identity: Option<usize>,
    pub reverse: Option<usize>,
}

impl PredictionRecord {
    pub fn from_matrix(matrix: &OptionProbMatrix, gold: Option<usize>) -> Self {
        let chosen_content: Vec<usize> = (0..matrix.m()).map(|p| argmax(matrix.row(p))).collect();
        let chosen_position =
            chosen_content.iter().enumerate().map(|(p, &c)| matrix.perms.get(p).positions()[c]).collect();
        Self {
            instance_id: matrix.instance_id.clone(),
            n: matrix.n(),
            chosen_content,
            chosen_position,
            gold,
            identity: matrix.perms.identity_index(),
            reverse: matrix.perms.reverse_index(),
        }
    }

    /// Content chosen under the original ordering.
    pub fn identity_choice(&self) -> Option<usize> {
        self.identity.map(|i| self.chosen_content[i])
    }
}

fn population_variance(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64
}

/// Mean over contents of the population variance across permutations of
/// that content's probability.
pub fn pbm(matrix: &OptionProbMatrix) -> f64 {
    pbm_of(&matrix.probs)
}

fn pbm_of(probs: &Tensor<f64>) -> f64 {
    let (m, n) = (probs.rows(), probs.cols());
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|c| population_variance((0..m).map(move |p| probs.at(p, c)))).sum::<f64>() / n as f64
}

/// Mean probability of each content across permutations.
pub fn mean_probs(matrix: &OptionProbMatrix) -> Vec<f64> {
    let (m, n) = (matrix.m(), matrix.n());
    (0..n).map(|c| (0..m).map(|p| matrix.get(p, c)).sum::<f64>() / m as f64).collect()
}

/// Content with the highest mean probability (lowest index on ties).
pub fn majority_vote(matrix: &OptionProbMatrix) -> usize {
    argmax(&mean_probs(matrix))
}

/// PBM of the majority-voting predictor: every row replaced by the mean
/// row. Zero up to rounding.
pub fn mv_pbm_certificate(matrix: &OptionProbMatrix) -> f64 {
    let mean = mean_probs(matrix);
    let data = (0..matrix.m()).flat_map(|_| mean.iter().copied()).collect();
    pbm_of(&Tensor::new(vec![matrix.m(), matrix.n()], data).expect("mean rows"))
}

/// Fraction of instances whose chosen content differs between the original
/// and the reversed ordering.
pub fn fluctuation_rate(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut flips = 0;
    for r in records {
        let (Some(i), Some(v)) = (r.identity, r.reverse) else {
            return Err(Error::Contract(format!(
                "instance {}: fluctuation rate needs identity and reverse predictions",
                r.instance_id
            )));
        };
        if r.chosen_content[i] != r.chosen_content[v] {
            flips += 1;
        }
    }
    Ok(flips as f64 / records.len() as f64)
}

fn labeled_identity(records: &[PredictionRecord]) -> Result<Vec<(usize, usize, usize)>> {
    records
        .iter()
        .map(|r| {
            let gold =
                r.gold.ok_or_else(|| Error::Contract(format!("instance {} has no gold answer", r.instance_id)))?;
            let pred = r
                .identity_choice()
                .ok_or_else(|| Error::Contract(format!("instance {} has no identity prediction", r.instance_id)))?;
            Ok((r.n, gold, pred))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RstdReport {
    pub value: f64,
    /// Recall per symbol position; `None` for symbols never holding the gold answer.
    pub recalls: Vec<Option<f64>>,
    pub mean_recall: f64,
    /// Symbol positions excluded because no gold answer sits there.
    pub excluded: Vec<usize>,
}

/// Population std of per-symbol recalls under the original ordering.
pub fn rstd(records: &[PredictionRecord]) -> Result<RstdReport> {
    let rows = labeled_identity(records)?;
    let n = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let mut hits = vec![0usize; n];
    let mut totals = vec![0usize; n];
    for &(_, gold, pred) in &rows {
        totals[gold] += 1;
        hits[gold] += usize::from(pred == gold);
    }
    let recalls: Vec<Option<f64>> =
        (0..n).map(|i| (totals[i] > 0).then(|| hits[i] as f64 / totals[i] as f64)).collect();
    let present: Vec<f64> = recalls.iter().flatten().copied().collect();
    let excluded = (0..n).filter(|&i| totals[i] == 0).collect();
    if present.is_empty() {
        return Ok(RstdReport { value: 0.0, recalls, mean_recall: 0.0, excluded });
    }
    let mean_recall = present.iter().sum::<f64>() / present.len() as f64;
    let value = population_variance(present.iter().copied()).sqrt();
    Ok(RstdReport { value, recalls, mean_recall, excluded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkldReport {
    pub value: f64,
    /// Gold-answer frequency per symbol.
    pub p: Vec<f64>,
    /// Predicted-symbol frequency per symbol (before smoothing).
    pub q: Vec<f64>,
}

/// `Σ p ln(p / q)` with `q` smoothed by [`CKLD_EPSILON`] and renormalized;
/// terms with `p = 0` contribute 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let z: f64 = q.iter().map(|v| v + CKLD_EPSILON).sum();
    p.iter().zip(q).filter(|(&pi, _)| pi > 0.0).map(|(&pi, &qi)| pi * (pi / ((qi + CKLD_EPSILON) / z)).ln()).sum()
}

/// KL divergence from the gold-symbol distribution to the predicted-symbol
/// distribution under the original ordering.
pub fn ckld(records: &[PredictionRecord]) -> Result<CkldReport> {
    let rows = labeled_identity(records)?;
    let n = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let total = rows.len().max(1) as f64;
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for &(_, gold, pred) in &rows {
        p[gold] += 1.0;
        q[pred] += 1.0;
    }
    p.iter_mut().for_each(|v| *v /= total);
    q.iter_mut().for_each(|v| *v /= total);
    Ok(CkldReport { value: kl_divergence(&p, &q), p, q })
}

/// Accuracy under the original ordering and the population std of the
/// dataset-level accuracies obtained under each permutation index.
///
/// Permutation index `p` is evaluated over the records that have at least
/// `p + 1` permutations.
pub fn accuracy_and_std(records: &[PredictionRecord]) -> Result<(f64, f64)> {
    let rows = labeled_identity(records)?;
    if rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let accuracy = rows.iter().filter(|r| r.1 == r.2).count() as f64 / rows.len() as f64;
    let max_m = records.iter().map(|r| r.chosen_content.len()).max().unwrap_or(0);
    let per_perm: Vec<f64> = (0..max_m)
        .map(|p| {
            let (hit, total) = records
                .iter()
                .filter(|r| r.chosen_content.len() > p)
                .fold((0, 0), |(h, t), r| (h + usize::from(Some(r.chosen_content[p]) == r.gold), t + 1));
            hit as f64 / total as f64
        })
        .collect();
    Ok((accuracy, population_variance(per_perm.iter().copied()).sqrt()))
}
