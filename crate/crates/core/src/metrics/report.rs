use serde::{Deserialize, Serialize};

use super::{accuracy_and_std, ckld, fluctuation_rate, pbm, rstd, PredictionRecord};
use crate::engine::{aggregate_savings_pct, OptionProbMatrix, TokenLedger};
use crate::error::{Error, Result};

/// Column order of the one-row CSV export.
pub const CSV_COLUMNS: [&str; 7] = ["pbm", "fr", "rstd", "ckld", "accuracy", "acc_std", "savings_pct"];

/// Dataset-level metrics. Label-dependent fields are `null` when no
/// instance carries a gold answer; when only some do, they are computed
/// over the labeled ones (`n_labeled`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    /// Mean PBM over instances.
    pub pbm: f64,
    pub fr: f64,
    pub rstd: Option<f64>,
    pub ckld: Option<f64>,
    pub accuracy: Option<f64>,
    pub acc_std: Option<f64>,
    /// Token-weighted savings of shared-prefix scoring over full passes.
    pub savings_pct: f64,
    pub n_instances: usize,
    pub n_labeled: usize,
    pub naive_tokens: usize,
    pub cached_tokens: usize,
    /// Recall per symbol position (`null` for symbols with no gold answers).
    pub rstd_recalls: Option<Vec<Option<f64>>>,
    pub rstd_excluded_symbols: Option<Vec<usize>>,
    pub ckld_gold_ratios: Option<Vec<f64>>,
    pub ckld_pred_ratios: Option<Vec<f64>>,
}

/// Scored instances with their gold answers, in dataset order.
pub struct ReportInput<'a> {
    pub matrices: &'a [OptionProbMatrix],
    pub ledgers: &'a [TokenLedger],
    pub golds: &'a [Option<usize>],
}

impl BiasReport {
    pub fn compute(input: &ReportInput<'_>) -> Result<Self> {
        let ReportInput { matrices, ledgers, golds } = *input;
        if matrices.len() != golds.len() || matrices.len() != ledgers.len() {
            return Err(Error::Contract(format!(
                "{} matrices, {} ledgers, {} gold entries",
                matrices.len(),
                ledgers.len(),
                golds.len()
            )));
        }
        if matrices.is_empty() {
            return Err(Error::Contract("cannot report on an empty dataset".into()));
        }
        let records: Vec<PredictionRecord> =
            matrices.iter().zip(golds).map(|(m, &g)| PredictionRecord::from_matrix(m, g)).collect();
        let labeled: Vec<PredictionRecord> = records.iter().filter(|r| r.gold.is_some()).cloned().collect();
        let pbm_mean = matrices.iter().map(pbm).sum::<f64>() / matrices.len() as f64;
        let fr = fluctuation_rate(&records)?;
        let (rstd_r, ckld_r, acc) = if labeled.is_empty() {
            (None, None, None)
        } else {
            (Some(rstd(&labeled)?), Some(ckld(&labeled)?), Some(accuracy_and_std(&labeled)?))
        };
        Ok(Self {
            pbm: pbm_mean,
            fr,
            rstd: rstd_r.as_ref().map(|r| r.value),
            ckld: ckld_r.as_ref().map(|r| r.value),
            accuracy: acc.map(|a| a.0),
            acc_std: acc.map(|a| a.1),
            savings_pct: aggregate_savings_pct(ledgers),
            n_instances: matrices.len(),
            n_labeled: labeled.len(),
            naive_tokens: ledgers.iter().map(|l| l.naive_cost).sum(),
            cached_tokens: ledgers.iter().map(|l| l.cached_cost).sum(),
            rstd_recalls: rstd_r.as_ref().map(|r| r.recalls.clone()),
            rstd_excluded_symbols: rstd_r.map(|r| r.excluded),
            ckld_gold_ratios: ckld_r.as_ref().map(|r| r.p.clone()),
            ckld_pred_ratios: ckld_r.map(|r| r.q),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header plus one row; nulls are empty cells.
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let row = [
            cell(Some(self.pbm)),
            cell(Some(self.fr)),
            cell(self.rstd),
            cell(self.ckld),
            cell(self.accuracy),
            cell(self.acc_std),
            cell(Some(self.savings_pct)),
        ];
        format!("{}\n{}\n", CSV_COLUMNS.join(","), row.join(","))
    }
}
