use serde::{Deserialize, Serialize};

use super::render_all;
use crate::data::{McqInstance, PromptTemplate, Tokenizer};
use crate::error::{Error, Result};
use crate::model::ModelView;
use crate::permute::PermutationSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Prefix,
    Suffix,
}

/// Standard deviation across permutations of the last token's attention to
/// every absolute key position, per layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProfile {
    /// `[layers × heads × key_len]`
    pub std: Tensor<f64>,
    pub prefix_len: usize,
    pub n_perms: usize,
}

impl AttentionProfile {
    pub fn layers(&self) -> usize {
        self.std.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.std.shape()[1]
    }

    pub fn key_len(&self) -> usize {
        self.std.shape()[2]
    }

    pub fn region(&self, position: usize) -> Region {
        if position < self.prefix_len {
            Region::Prefix
        } else {
            Region::Suffix
        }
    }

    pub fn value(&self, layer: usize, head: usize, position: usize) -> f64 {
        let s = self.std.shape();
        self.std.data()[(layer * s[1] + head) * s[2] + position]
    }

    /// Mean std over all layers, heads and positions of `region`; `None`
    /// when the region is empty.
    pub fn mean(&self, region: Region) -> Option<f64> {
        let positions: Vec<usize> = (0..self.key_len()).filter(|&p| self.region(p) == region).collect();
        if positions.is_empty() {
            return None;
        }
        let mut sum = 0.0;
        for l in 0..self.layers() {
            for h in 0..self.heads() {
                sum += positions.iter().map(|&p| self.value(l, h, p)).sum::<f64>();
            }
        }
        Some(sum / (positions.len() * self.layers() * self.heads()) as f64)
    }

    /// Whether option positions fluctuate at least as much as the prefix.
    pub fn suffix_dominates(&self) -> Option<bool> {
        Some(self.mean(Region::Suffix)? >= self.mean(Region::Prefix)?)
    }
}

/// Runs every permutation with attention capture and summarizes the last
/// query's attention. Positions beyond a shorter prompt's length are
/// summarized over the permutations that reach them.
pub fn attention_fluctuation(
    view: &ModelView<'_>,
    tok: &Tokenizer,
    template: &PromptTemplate,
    instance: &McqInstance,
    perms: &PermutationSet,
) -> Result<AttentionProfile> {
    let prompts = render_all(tok, template, instance, perms)?;
    let cfg = view.model.config();
    let (layers, heads) = (cfg.n_layers, cfg.n_heads);
    let key_len = prompts.iter().map(|p| p.len()).max().unwrap_or(0);
    if key_len == 0 {
        return Err(Error::Contract("empty prompts".into()));
    }
    // rows[l][h][p] = last-token attention of permutation p
    let mut rows: Vec<Vec<Vec<Vec<f64>>>> = vec![vec![Vec::new(); heads]; layers];
    for p in &prompts {
        let tokens = p.tokens();
        let out = view.forward::<f64>(&tokens, None, true)?;
        let cap = out.attention.expect("capture requested");
        for (l, per_layer) in rows.iter_mut().enumerate() {
            for (h, per_head) in per_layer.iter_mut().enumerate() {
                per_head.push(cap.row(l, h, tokens.len() - 1).to_vec());
            }
        }
    }
    let mut std = Vec::with_capacity(layers * heads * key_len);
    for per_layer in &rows {
        for per_head in per_layer {
            for pos in 0..key_len {
                let vals: Vec<f64> = per_head.iter().filter_map(|r| r.get(pos).copied()).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                std.push(var.sqrt());
            }
        }
    }
    Ok(AttentionProfile {
        std: Tensor::new(vec![layers, heads, key_len], std)?,
        prefix_len: prompts[0].prefix_tokens.len(),
        n_perms: prompts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::model::{Model, ModelConfig};
    use crate::permute::{enumerate_permutations, Permutation};

    #[test]
    fn single_permutation_has_zero_std() {
        let m = Model::build(ModelConfig { d_model: 16, d_ff: 32, ..ModelConfig::default() }).unwrap();
        let (tok, t) = (Tokenizer::new(), PromptTemplate::instruct());
        let inst = &synthetic_dataset(&SyntheticSpec::default(), 1, 0)[0];
        let one = PermutationSet::from_perms(4, vec![Permutation::identity(4)]).unwrap();
        let prof = attention_fluctuation(&m.view(), &tok, &t, inst, &one).unwrap();
        assert!(prof.std.data().iter().all(|&v| v == 0.0));
        let all = enumerate_permutations(4).unwrap();
        let prof = attention_fluctuation(&m.view(), &tok, &t, inst, &all).unwrap();
        let len = t.render(&tok, inst, &Permutation::identity(4)).unwrap().len();
        assert_eq!(prof.std.shape(), &[2, 4, len]);
        assert!(prof.std.data().iter().all(|&v| v >= 0.0));
        assert!(prof.suffix_dominates().is_some());
    }
}
