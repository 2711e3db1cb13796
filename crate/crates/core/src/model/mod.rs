//! Llama-style decoder: inference with a KV cache, a tape-recorded training
//! forward, hidden-state capture, and weights-only MAC accounting.

mod config;
mod macs;
mod tape_forward;
mod weights;

pub use config::TransformerConfig;
pub use macs::{count_macs, ComponentMacs, MacReport};
pub use tape_forward::{bind_params, forward_on_tape};
pub use weights::{
    attn_norm_path, expected_shapes, mlp_norm_path, parse_block_path, proj_path, prunable_paths,
    ModelWeights, Proj, EMBED, FINAL_NORM, LM_HEAD,
};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::tensor::{argmax, ops, Tensor};

/// Per-block key/value rows for every position processed so far.
///
/// Storage is position-major: row `p` of block `b` holds the keys of all
/// `n_kv_heads` at position `p`. Rolling back is a truncation.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    width: usize,
    len: usize,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(c: &TransformerConfig) -> Self {
        Self {
            keys: vec![Vec::new(); c.n_layers],
            values: vec![Vec::new(); c.n_layers],
            width: c.kv_width(),
            len: 0,
        }
    }

    /// Number of cached positions (shared by all blocks).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops every position at or beyond `len`.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.len {
            return;
        }
        for k in &mut self.keys {
            k.truncate(len * self.width);
        }
        for v in &mut self.values {
            v.truncate(len * self.width);
        }
        self.len = len;
    }

    /// Cached keys of `block` at `position` for every kv head.
    pub fn key(&self, block: usize, position: usize) -> &[T] {
        &self.keys[block][position * self.width..(position + 1) * self.width]
    }
}

/// Observer for intermediate activations during an inference forward.
pub trait Probe<T> {
    /// Residual-stream input to `block`, one row per processed position.
    fn block_input(&mut self, _block: usize, _hidden: &Tensor<T>) {}
    /// Residual stream after the last block, before the final norm.
    fn final_hidden(&mut self, _hidden: &Tensor<T>) {}
    /// Input rows entering the projection stored at `path`.
    fn linear_input(&mut self, _path: &str, _input: &Tensor<T>) {}
}

/// Anything that maps a token prefix (plus its cache) to next-token logits.
pub trait LanguageModel: Sync {
    type Cache: Clone;

    fn vocab_size(&self) -> usize;
    fn max_seq(&self) -> usize;
    fn new_cache(&self) -> Self::Cache;
    fn cache_len(cache: &Self::Cache) -> usize;
    fn truncate_cache(cache: &mut Self::Cache, len: usize);

    /// Logits `[tokens.len() × vocab]` for `tokens` appended after the cached
    /// positions; the cache grows by `tokens.len()`.
    fn forward_logits(&self, tokens: &[usize], cache: &mut Self::Cache) -> Result<Vec<Vec<f32>>>;
}

/// A decoder: config plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer<T> {
    pub config: TransformerConfig,
    pub weights: ModelWeights<T>,
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: TransformerConfig, weights: ModelWeights<T>) -> Result<Self> {
        config.validate()?;
        weights.validate(&config)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: TransformerConfig, seed: u64) -> Result<Self> {
        let weights = ModelWeights::init(&config, seed)?;
        Ok(Self { config, weights })
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(&self.config)
    }

    fn check_tokens(&self, tokens: &[usize], cached: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::usage("forward on an empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        let needed = cached + tokens.len();
        if needed > self.config.max_seq {
            return Err(Error::SequenceOverflow {
                needed,
                max_seq: self.config.max_seq,
            });
        }
        Ok(())
    }

    /// Logits `[len × vocab]`. Row `j` conditions only on the cached prefix
    /// and `tokens[..=j]`. With a cache, it is extended by `tokens.len()`.
    ///
    /// Every row is computed with the same fixed-order arithmetic whether
    /// tokens arrive one at a time or in a batch, so cached and uncached
    /// decoding agree bit for bit.
    pub fn forward(&self, tokens: &[usize], cache: Option<&mut KvCache<T>>) -> Result<Tensor<T>> {
        match cache {
            Some(c) => self.forward_probed(tokens, c, None),
            None => self.forward_probed(tokens, &mut self.new_cache(), None),
        }
    }

    pub fn forward_probed(
        &self,
        tokens: &[usize],
        cache: &mut KvCache<T>,
        mut probe: Option<&mut dyn Probe<T>>,
    ) -> Result<Tensor<T>> {
        self.check_tokens(tokens, cache.len)?;
        let c = &self.config;
        let w = &self.weights;
        let eps = T::c(c.norm_eps);
        let start = cache.len;
        let len = tokens.len();
        let mut x = ops::embedding(w.get(EMBED)?, tokens)?;

        for b in 0..c.n_layers {
            if let Some(p) = probe.as_deref_mut() {
                p.block_input(b, &x);
            }
            let (h, _) = ops::rms_norm(&x, w.get(&attn_norm_path(b))?, eps)?;
            let project = |proj: Proj, input: &Tensor<T>, probe: &mut Option<&mut dyn Probe<T>>| {
                let path = proj_path(b, proj);
                if let Some(p) = probe.as_deref_mut() {
                    p.linear_input(&path, input);
                }
                ops::linear_rowwise(input, w.get(&path)?)
            };
            let q = project(Proj::Q, &h, &mut probe)?;
            let k = project(Proj::K, &h, &mut probe)?;
            let v = project(Proj::V, &h, &mut probe)?;
            let q = ops::rope(&q, c.d_head, start, c.rope_base, false)?;
            let k = ops::rope(&k, c.d_head, start, c.rope_base, false)?;
            cache.keys[b].extend_from_slice(k.data());
            cache.values[b].extend_from_slice(v.data());

            let attn = self.attend(&q, &cache.keys[b], &cache.values[b], start)?;
            let o = project(Proj::O, &attn, &mut probe)?;
            x = ops::add(&x, &o)?;

            let (h, _) = ops::rms_norm(&x, w.get(&mlp_norm_path(b))?, eps)?;
            let gate = project(Proj::Gate, &h, &mut probe)?;
            let up = project(Proj::Up, &h, &mut probe)?;
            let act = ops::mul(&ops::silu(&gate), &up)?;
            let down = project(Proj::Down, &act, &mut probe)?;
            x = ops::add(&x, &down)?;
        }
        cache.len = start + len;
        if let Some(p) = probe.as_deref_mut() {
            p.final_hidden(&x);
        }
        let (h, _) = ops::rms_norm(&x, w.get(FINAL_NORM)?, eps)?;
        ops::linear_rowwise(&h, w.lm_head(c)?)
    }

    /// Causal grouped-query attention of `q` rows (at positions
    /// `start..start+rows`) over every cached key/value up to each row.
    fn attend(&self, q: &Tensor<T>, keys: &[T], values: &[T], start: usize) -> Result<Tensor<T>> {
        let c = &self.config;
        let (dh, kvw, group) = (c.d_head, c.kv_width(), c.group_size());
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[q.rows(), c.n_heads * dh])?;
        let mut scores = Vec::with_capacity(start + q.rows());
        for i in 0..q.rows() {
            let visible = start + i + 1;
            for h in 0..c.n_heads {
                let g = h / group;
                let qh = &q.row(i)[h * dh..(h + 1) * dh];
                scores.clear();
                for j in 0..visible {
                    let kj = &keys[j * kvw + g * dh..j * kvw + (g + 1) * dh];
                    scores.push(dot(qh, kj) * scale);
                }
                ops::softmax_in_place(&mut scores)?;
                let oh = &mut out.row_mut(i)[h * dh..(h + 1) * dh];
                for (j, &p) in scores.iter().enumerate() {
                    let vj = &values[j * kvw + g * dh..j * kvw + (g + 1) * dh];
                    for (o, &vv) in oh.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Residual-stream vectors at the last position: `[x¹, …, x^{N+1}]` where
    /// `xⁱ` enters block `i` and `x^{N+1}` leaves the final block.
    pub fn capture_block_inputs(&self, tokens: &[usize]) -> Result<Vec<Vec<T>>> {
        struct LastRow<T>(Vec<Vec<T>>);
        impl<T: Scalar> Probe<T> for LastRow<T> {
            fn block_input(&mut self, _block: usize, hidden: &Tensor<T>) {
                self.0.push(hidden.row(hidden.rows() - 1).to_vec());
            }
            fn final_hidden(&mut self, hidden: &Tensor<T>) {
                self.0.push(hidden.row(hidden.rows() - 1).to_vec());
            }
        }
        let mut probe = LastRow(Vec::with_capacity(self.config.n_layers + 1));
        self.forward_probed(tokens, &mut self.new_cache(), Some(&mut probe))?;
        Ok(probe.0)
    }

    /// Greedy next token after `tokens` with no cache.
    pub fn next_token(&self, tokens: &[usize]) -> Result<usize> {
        let logits = self.forward(tokens, None)?;
        Ok(argmax(logits.row(logits.rows() - 1)))
    }

    /// Number of decoder blocks.
    pub fn depth(&self) -> usize {
        self.config.n_layers
    }
}

impl<T: Scalar> LanguageModel for Transformer<T> {
    type Cache = KvCache<T>;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_seq(&self) -> usize {
        self.config.max_seq
    }

    fn new_cache(&self) -> KvCache<T> {
        KvCache::new(&self.config)
    }

    fn cache_len(cache: &KvCache<T>) -> usize {
        cache.len
    }

    fn truncate_cache(cache: &mut KvCache<T>, len: usize) {
        cache.truncate(len);
    }

    fn forward_logits(&self, tokens: &[usize], cache: &mut KvCache<T>) -> Result<Vec<Vec<f32>>> {
        let logits = self.forward(tokens, Some(cache))?;
        Ok((0..logits.rows())
            .map(|r| logits.row(r).iter().map(|x| x.to_f64_lossy() as f32).collect())
            .collect())
    }
}
