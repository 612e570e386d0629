use serde::{Deserialize, Serialize};

use crate::engine::OptionProbMatrix;
use crate::error::Result;
use crate::tensor::{Eager, Graph};

/// How the log-variance and entropy sums are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Log-variance divided by `m·n`, entropy averaged over permutations.
    #[default]
    Mean,
    /// Raw sums.
    Sum,
}

/// Loss value and its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub loss: f64,
    pub b_log: f64,
    pub entropy: f64,
}

/// `Σ_p Σ_c (ln P[p][c] − ln mean_p P[p][c])²` over a `[m × n]` table,
/// divided by `m·n` under [`Normalization::Mean`].
pub fn pbm_log_loss_graph<G: Graph>(
    g: &mut G,
    probs: &G::Value,
    m: usize,
    n: usize,
    norm: Normalization,
) -> Result<G::Value> {
    let log_p = g.ln(probs)?;
    let mean = g.col_mean(probs)?;
    let log_mean = g.ln(&mean)?;
    let neg = g.scale(&log_mean, -1.0);
    let dev = g.add_row(&log_p, &neg)?;
    let sq = g.square(&dev);
    let total = g.sum(&sq);
    Ok(match norm {
        Normalization::Mean => g.scale(&total, 1.0 / (m * n) as f64),
        Normalization::Sum => total,
    })
}

/// `−Σ_p Σ_c P ln P`, averaged over permutations under
/// [`Normalization::Mean`].
pub fn entropy_graph<G: Graph>(g: &mut G, probs: &G::Value, m: usize, norm: Normalization) -> Result<G::Value> {
    let log_p = g.ln(probs)?;
    let plogp = g.mul(probs, &log_p)?;
    let total = g.sum(&plogp);
    Ok(match norm {
        Normalization::Mean => g.scale(&total, -1.0 / m as f64),
        Normalization::Sum => g.scale(&total, -1.0),
    })
}

/// `B_log + λ·H` together with both terms as graph values.
pub fn debias_loss_graph<G: Graph>(
    g: &mut G,
    probs: &G::Value,
    m: usize,
    n: usize,
    lambda: f64,
    norm: Normalization,
) -> Result<(G::Value, G::Value, G::Value)> {
    let b_log = pbm_log_loss_graph(g, probs, m, n, norm)?;
    let h = entropy_graph(g, probs, m, norm)?;
    let weighted = g.scale(&h, lambda);
    let loss = g.add(&b_log, &weighted)?;
    Ok((loss, b_log, h))
}

pub fn pbm_log_loss(matrix: &OptionProbMatrix, norm: Normalization) -> Result<f64> {
    let mut g = Eager::<f64>::new();
    Ok(pbm_log_loss_graph(&mut g, &matrix.probs, matrix.m(), matrix.n(), norm)?.item())
}

pub fn entropy_reg(matrix: &OptionProbMatrix, norm: Normalization) -> Result<f64> {
    let mut g = Eager::<f64>::new();
    Ok(entropy_graph(&mut g, &matrix.probs, matrix.m(), norm)?.item())
}

pub fn debias_loss(matrix: &OptionProbMatrix, lambda: f64, norm: Normalization) -> Result<LossTerms> {
    let mut g = Eager::<f64>::new();
    let (loss, b_log, h) = debias_loss_graph(&mut g, &matrix.probs, matrix.m(), matrix.n(), lambda, norm)?;
    Ok(LossTerms { loss: loss.item(), b_log: b_log.item(), entropy: h.item() })
}
