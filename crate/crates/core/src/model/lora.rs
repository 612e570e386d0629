use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{ops, Tensor};

/// Attention projection an adapter can modify.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        };
        f.write_str(s)
    }
}

impl FromStr for Projection {
    type Err = Error;

    /// Accepts `q`, `w_q`, `W_q` and friends; anything else (feed-forward
    /// layers in particular) is rejected.
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        match key.trim_start_matches("w_") {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            _ => Err(Error::Config(format!("adapter target {s:?} is not an attention projection (q, k, v, o)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl FromStr for AdapterTarget {
    type Err = Error;

    /// Parses `"<layer>.<projection>"`, e.g. `"1.w_o"`.
    fn from_str(s: &str) -> Result<Self> {
        let (layer, proj) =
            s.split_once('.').ok_or_else(|| Error::Config(format!("adapter target {s:?} must look like 0.q")))?;
        let layer = layer.parse().map_err(|_| Error::Config(format!("bad layer index in {s:?}")))?;
        Ok(Self { layer, projection: proj.parse()? })
    }
}

/// Low-rank delta `(alpha / rank) · B · A` on one attention projection.
///
/// Weights are applied as `x · W` with `W: [d_in × d_out]`, so the delta
/// enters as `x · (B·A)ᵀ = (x · Aᵀ) · Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    pub rank: usize,
    pub alpha: f64,
    /// `[rank × d_in]`
    pub a: Tensor<f64>,
    /// `[d_out × rank]`
    pub b: Tensor<f64>,
    pub dropout: f64,
}

pub const DEFAULT_RANK: usize = 1;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_DROPOUT: f64 = 0.05;

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// Effective `[d_in × d_out]` weight `W + scale · (B·A)ᵀ`.
    pub fn effective_weight(&self, base: &Tensor<f64>) -> Result<Tensor<f64>> {
        let delta = ops::matmul_tn(&self.a, &ops::transpose(&self.b)?)?;
        let s = self.scale();
        Ok(ops::zip_map("effective_weight", base, &delta, |w, d| w + s * d)?)
    }
}

/// Options for [`AdapterSet::init`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterInit {
    pub targets: Vec<AdapterTarget>,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Standard deviation of the random `B` entries (`A` starts at zero).
    pub b_std: f64,
    pub seed: u64,
}

impl AdapterInit {
    /// Q, K, V and O of every layer with rank 1, alpha 16, dropout 0.05.
    pub fn attention(config: &ModelConfig, seed: u64) -> Self {
        let targets = (0..config.n_layers)
            .flat_map(|layer| Projection::ALL.map(|projection| AdapterTarget { layer, projection }))
            .collect();
        Self {
            targets,
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            dropout: DEFAULT_DROPOUT,
            b_std: 1.0 / (config.d_model as f64).sqrt(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdapterSet {
    pub adapters: Vec<LoraAdapter>,
}

const ADAPTER_FORMAT: &str = "permubias-adapters";
const ADAPTER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct AdapterFile {
    format: String,
    version: u32,
    adapters: Vec<LoraAdapter>,
}

impl AdapterSet {
    /// Inert adapters: `A = 0`, `B ~ N(0, b_std²)`.
    pub fn init(config: &ModelConfig, init: &AdapterInit) -> Result<Self> {
        if init.rank == 0 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&init.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", init.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let normal = Normal::new(0.0, init.b_std).map_err(|e| Error::Config(e.to_string()))?;
        let d = config.d_model;
        let adapters = init
            .targets
            .iter()
            .map(|&target| LoraAdapter {
                target,
                rank: init.rank,
                alpha: init.alpha,
                a: Tensor::zeros(&[init.rank, d]),
                b: Tensor::new(vec![d, init.rank], (0..d * init.rank).map(|_| normal.sample(&mut rng)).collect())
                    .expect("b shape"),
                dropout: init.dropout,
            })
            .collect();
        let set = Self { adapters };
        set.validate(config)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    pub fn get(&self, target: AdapterTarget) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.target == target)
    }

    /// Checks layer indices, duplicate targets and factor shapes.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        for (i, ad) in self.adapters.iter().enumerate() {
            if ad.target.layer >= config.n_layers {
                return Err(Error::Config(format!(
                    "adapter {i} targets layer {} of a {}-layer model",
                    ad.target.layer, config.n_layers
                )));
            }
            if self.adapters[..i].iter().any(|o| o.target == ad.target) {
                return Err(Error::Config(format!("duplicate adapter target {:?}", ad.target)));
            }
            if ad.rank == 0 || ad.a.shape() != [ad.rank, d] || ad.b.shape() != [d, ad.rank] {
                return Err(crate::tensor::TensorError::Dimension {
                    op: "attach_adapters",
                    left: ad.a.shape().to_vec(),
                    right: ad.b.shape().to_vec(),
                }
                .into());
            }
            if !ad.a.all_finite() || !ad.b.all_finite() {
                return Err(Error::Numeric(format!("adapter {i} has non-finite weights")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&AdapterFile {
            format: ADAPTER_FORMAT.into(),
            version: ADAPTER_VERSION,
            adapters: self.adapters.clone(),
        })
        .expect("adapters serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: AdapterFile = serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if f.format != ADAPTER_FORMAT || f.version != ADAPTER_VERSION {
            return Err(Error::Checkpoint(format!("unsupported adapter file {} v{}", f.format, f.version)));
        }
        Ok(Self { adapters: f.adapters })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_parsing() {
        assert_eq!("W_q".parse::<Projection>().unwrap(), Projection::Q);
        assert_eq!("1.o".parse::<AdapterTarget>().unwrap(), AdapterTarget { layer: 1, projection: Projection::O });
        assert!(matches!("ffn".parse::<Projection>(), Err(Error::Config(_))));
        assert!("0.w_up".parse::<AdapterTarget>().is_err());
    }

    #[test]
    fn rank_one_param_count() {
        let cfg = ModelConfig::default();
        let set = AdapterSet::init(&cfg, &AdapterInit::attention(&cfg, 0)).unwrap();
        assert_eq!(set.len(), 4 * cfg.n_layers);
        assert_eq!(set.param_count(), set.len() * (cfg.d_model + cfg.d_model));
        assert!(set.adapters.iter().all(|a| a.a.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn effective_weight_with_zero_a_is_base() {
        let cfg = ModelConfig::default();
        let set = AdapterSet::init(&cfg, &AdapterInit::attention(&cfg, 0)).unwrap();
        let base = Tensor::full(&[cfg.d_model, cfg.d_model], 0.5);
        assert_eq!(set.adapters[0].effective_weight(&base).unwrap(), base);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let cfg = ModelConfig::default();
        let mut set = AdapterSet::init(&cfg, &AdapterInit::attention(&cfg, 0)).unwrap();
        set.adapters[0].a = Tensor::zeros(&[1, 3]);
        assert!(matches!(set.validate(&cfg), Err(Error::Tensor(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let cfg = ModelConfig::default();
        let set = AdapterSet::init(&cfg, &AdapterInit::attention(&cfg, 9)).unwrap();
        assert_eq!(AdapterSet::from_json(&set.to_json()).unwrap(), set);
        assert!(AdapterSet::from_json("{\"format\":\"x\",\"version\":1,\"adapters\":[]}").is_err());
    }
}
