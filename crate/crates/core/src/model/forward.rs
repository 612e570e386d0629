use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AdapterSet, LoraAdapter, Model, Projection};
use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Eager, Element, Graph, Tensor};

/// A model together with the adapters applied at use.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a> {
    pub model: &'a Model,
    pub adapters: Option<&'a AdapterSet>,
}

/// Per-layer keys and values `[len × d_model]` (heads side by side) for a
/// contiguous span of absolute positions starting at `base_position`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvSegment<T = f64> {
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    pub base_position: usize,
    pub len: usize,
}

impl<T: Element> KvSegment<T> {
    /// Position right after the segment.
    pub fn end(&self) -> usize {
        self.base_position + self.len
    }
}

/// Attention weights `[layers × heads × queries × keys]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture {
    pub scores: Tensor<f64>,
}

impl AttentionCapture {
    /// Weights of one query row over all keys.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let s = self.scores.shape();
        let (h, q, k) = (s[1], s[2], s[3]);
        let start = ((layer * h + head) * q + query) * k;
        &self.scores.data()[start..start + k]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult<T = f64> {
    /// `[len × vocab]`
    pub logits: Tensor<T>,
    /// Keys and values of the new tokens only.
    pub cache: KvSegment<T>,
    pub attention: Option<AttentionCapture>,
}

pub(crate) struct BoundAdapter<V> {
    a: V,
    b: V,
    scale: f64,
    dropout: f64,
}

struct BoundLayer<V> {
    ln1: (V, V),
    proj: [V; 4],
    adapters: [Option<BoundAdapter<V>>; 4],
    ln2: (V, V),
    up: (V, V),
    down: (V, V),
}

/// Model weights (and adapters) placed on a graph once, reused across
/// forward calls on that graph.
pub(crate) struct Bound<V> {
    layers: Vec<BoundLayer<V>>,
    final_ln: (V, V),
    unembedding: V,
    output_bias: V,
}

/// What to run: `tokens` at absolute `positions`, attending per `layout` over
/// `past` keys followed by the new rows.
pub(crate) struct ForwardSpec<'a, V> {
    pub tokens: &'a [u32],
    pub positions: &'a [usize],
    pub layout: Arc<AttentionLayout>,
    pub past: Option<&'a [(V, V)]>,
    /// Rows whose logits are needed; all rows when `None`.
    pub read_rows: Option<&'a [usize]>,
    pub capture: bool,
}

pub(crate) struct GraphOutput<V> {
    pub logits: V,
    pub kv: Vec<(V, V)>,
    /// Per layer, `[heads × queries × keys]`.
    pub attention: Option<Vec<Tensor<f64>>>,
}

fn projection_index(p: Projection) -> usize {
    match p {
        Projection::Q => 0,
        Projection::K => 1,
        Projection::V => 2,
        Projection::O => 3,
    }
}

impl<V: Clone> Bound<V> {
    /// Binds base weights as constants and adapter factors via `adapter`.
    pub(crate) fn new<G: Graph<Value = V>>(
        g: &mut G,
        view: &ModelView<'_>,
        mut adapter: impl FnMut(&mut G, &LoraAdapter) -> (V, V),
    ) -> Self {
        let w = view.model.weights();
        let layers = w
            .layers
            .iter()
            .enumerate()
            .map(|(l, lw)| {
                let mut adapters: [Option<BoundAdapter<V>>; 4] = Default::default();
                for ad in view.adapters.iter().flat_map(|s| &s.adapters) {
                    if ad.target.layer == l {
                        let (a, b) = adapter(g, ad);
                        adapters[projection_index(ad.target.projection)] =
                            Some(BoundAdapter { a, b, scale: ad.scale(), dropout: ad.dropout });
                    }
                }
                BoundLayer {
                    ln1: (g.constant(&lw.ln1_gain), g.constant(&lw.ln1_bias)),
                    proj: Projection::ALL.map(|p| g.constant(lw.projection(p))),
                    adapters,
                    ln2: (g.constant(&lw.ln2_gain), g.constant(&lw.ln2_bias)),
                    up: (g.constant(&lw.w_up), g.constant(&lw.b_up)),
                    down: (g.constant(&lw.w_down), g.constant(&lw.b_down)),
                }
            })
            .collect();
        Self {
            layers,
            final_ln: (g.constant(&w.final_gain), g.constant(&w.final_bias)),
            unembedding: g.constant(&w.unembedding),
            output_bias: g.constant(&w.output_bias),
        }
    }

    /// Binds everything, adapters included, as constants.
    pub(crate) fn constants<G: Graph<Value = V>>(g: &mut G, view: &ModelView<'_>) -> Self {
        Self::new(g, view, |g, ad| (g.constant(&ad.a), g.constant(&ad.b)))
    }

    #[allow(clippy::too_many_arguments)]
    fn project<G: Graph<Value = V>>(
        &self,
        g: &mut G,
        layer: usize,
        p: Projection,
        x: &V,
        rows: usize,
        cols: usize,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<V> {
        let i = projection_index(p);
        let l = &self.layers[layer];
        let base = g.matmul(x, &l.proj[i])?;
        let Some(ad) = &l.adapters[i] else {
            return Ok(base);
        };
        let input = match dropout {
            Some(rng) if ad.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - ad.dropout);
                let mask =
                    (0..rows * cols).map(|_| if rng.random::<f64>() < ad.dropout { 0.0 } else { keep }).collect();
                g.mask(x, &Tensor::new(vec![rows, cols], mask)?)?
            }
            _ => x.clone(),
        };
        let low = g.matmul_nt(&input, &ad.a)?;
        let delta = g.matmul_nt(&low, &ad.b)?;
        let delta = g.scale(&delta, ad.scale);
        Ok(g.add(&base, &delta)?)
    }

    pub(crate) fn run<G: Graph<Value = V>>(
        &self,
        g: &mut G,
        model: &Model,
        spec: &ForwardSpec<'_, V>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<GraphOutput<V>> {
        let cfg = model.config();
        let n = spec.tokens.len();
        if spec.positions.len() != n || spec.layout.queries() != n {
            return Err(Error::Contract(format!(
                "{n} tokens, {} positions, {} layout queries",
                spec.positions.len(),
                spec.layout.queries()
            )));
        }
        if let Some(&p) = spec.positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(Error::Capacity(format!("position {p} exceeds max_positions {}", cfg.max_positions)));
        }
        if let Some(&t) = spec.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Range(format!("token id {t} outside vocabulary {}", cfg.vocab_size)));
        }
        let d = cfg.d_model;
        let ids: Vec<usize> = spec.tokens.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(&model.weights().token_embedding, &ids)?;
        let pos = g.gather_rows(model.positions(), spec.positions)?;
        let mut x = g.add(&tok, &pos)?;
        let mut kv = Vec::with_capacity(self.layers.len());
        let mut attention = spec.capture.then(Vec::new);
        for (l, layer) in self.layers.iter().enumerate() {
            let h = g.layer_norm(&x, &layer.ln1.0, &layer.ln1.1)?;
            let q = self.project(g, l, Projection::Q, &h, n, d, &mut dropout)?;
            let k = self.project(g, l, Projection::K, &h, n, d, &mut dropout)?;
            let v = self.project(g, l, Projection::V, &h, n, d, &mut dropout)?;
            let (k_all, v_all) = match spec.past {
                Some(past) => (g.concat_rows(&past[l].0, &k)?, g.concat_rows(&past[l].1, &v)?),
                None => (k.clone(), v.clone()),
            };
            let (att, probs) = g.attention(&q, &k_all, &v_all, &spec.layout, cfg.n_heads, spec.capture)?;
            if let (Some(store), Some(p)) = (attention.as_mut(), probs) {
                store.push(p);
            }
            let o = self.project(g, l, Projection::O, &att, n, d, &mut dropout)?;
            x = g.add(&x, &o)?;
            let h = g.layer_norm(&x, &layer.ln2.0, &layer.ln2.1)?;
            let up = g.matmul(&h, &layer.up.0)?;
            let up = g.add_row(&up, &layer.up.1)?;
            let up = g.gelu(&up);
            let down = g.matmul(&up, &layer.down.0)?;
            let down = g.add_row(&down, &layer.down.1)?;
            x = g.add(&x, &down)?;
            kv.push((k, v));
        }
        if let Some(rows) = spec.read_rows {
            x = g.select_rows(&x, rows)?;
        }
        let h = g.layer_norm(&x, &self.final_ln.0, &self.final_ln.1)?;
        let logits = g.matmul_nt(&h, &self.unembedding)?;
        let logits = g.add_row(&logits, &self.output_bias)?;
        Ok(GraphOutput { logits, kv, attention })
    }
}

impl ModelView<'_> {
    /// Causal forward over `tokens`, continuing after `cache_in` if given.
    pub fn forward<T: Element>(
        &self,
        tokens: &[u32],
        cache_in: Option<&KvSegment<T>>,
        capture: bool,
    ) -> Result<ForwardResult<T>> {
        let cfg = self.model.config();
        let (base, past_len) = cache_in.map_or((0, 0), |c| (c.end(), c.len));
        if let Some(c) = cache_in {
            if c.keys.len() != cfg.n_layers || c.values.len() != cfg.n_layers {
                return Err(Error::Contract(format!("cache has {} layers, model has {}", c.keys.len(), cfg.n_layers)));
            }
        }
        if base + tokens.len() > cfg.max_positions {
            return Err(Error::Capacity(format!(
                "positions {}..{} exceed max_positions {}",
                base,
                base + tokens.len(),
                cfg.max_positions
            )));
        }
        let positions: Vec<usize> = (base..base + tokens.len()).collect();
        let past: Option<Vec<(Tensor<T>, Tensor<T>)>> =
            cache_in.map(|c| c.keys.iter().cloned().zip(c.values.iter().cloned()).collect());
        let mut g = Eager::<T>::new();
        let bound = Bound::constants(&mut g, self);
        let layout = Arc::new(AttentionLayout::causal(tokens.len(), past_len));
        let out = bound.run(
            &mut g,
            self.model,
            &ForwardSpec { tokens, positions: &positions, layout, past: past.as_deref(), read_rows: None, capture },
            None,
        )?;
        let (keys, values) = out.kv.into_iter().unzip();
        let attention = match out.attention {
            Some(layers) => {
                let key_len = past_len + tokens.len();
                let shape = vec![cfg.n_layers, cfg.n_heads, tokens.len(), key_len];
                let data = layers.into_iter().flat_map(Tensor::into_data).collect();
                Some(AttentionCapture { scores: Tensor::new(shape, data)? })
            }
            None => None,
        };
        Ok(ForwardResult {
            logits: out.logits,
            cache: KvSegment { keys, values, base_position: base, len: tokens.len() },
            attention,
        })
    }
}
