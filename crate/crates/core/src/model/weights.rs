use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TransformerConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const EMBED: &str = "embed";
pub const LM_HEAD: &str = "lm_head";
pub const FINAL_NORM: &str = "final_norm";

/// The seven linear projections of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "attn.q",
            Proj::K => "attn.k",
            Proj::V => "attn.v",
            Proj::O => "attn.o",
            Proj::Gate => "mlp.gate",
            Proj::Up => "mlp.up",
            Proj::Down => "mlp.down",
        }
    }

    /// `(out, in)`: weights are stored `[out × in]`.
    pub fn shape(self, c: &TransformerConfig) -> (usize, usize) {
        let q = c.n_heads * c.d_head;
        match self {
            Proj::Q => (q, c.d_model),
            Proj::K | Proj::V => (c.kv_width(), c.d_model),
            Proj::O => (c.d_model, q),
            Proj::Gate | Proj::Up => (c.d_ff, c.d_model),
            Proj::Down => (c.d_model, c.d_ff),
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Proj::Q | Proj::K | Proj::V | Proj::O)
    }
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn proj_path(block: usize, proj: Proj) -> String {
    format!("blocks.{block}.{}", proj.name())
}

pub fn attn_norm_path(block: usize) -> String {
    format!("blocks.{block}.attn_norm")
}

pub fn mlp_norm_path(block: usize) -> String {
    format!("blocks.{block}.mlp_norm")
}

/// Splits `blocks.{i}.{rest}` into `(i, rest)`.
pub fn parse_block_path(path: &str) -> Option<(usize, &str)> {
    let rest = path.strip_prefix("blocks.")?;
    let (idx, tail) = rest.split_once('.')?;
    Some((idx.parse().ok()?, tail))
}

/// Every matrix eligible for pruning: all decoder-block projections.
/// Embedding and lm-head are never included.
pub fn prunable_paths(c: &TransformerConfig) -> Vec<String> {
    (0..c.n_layers)
        .flat_map(|b| Proj::ALL.iter().map(move |&p| proj_path(b, p)))
        .collect()
}

/// Shape of every tensor a config implies.
pub fn expected_shapes(c: &TransformerConfig) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    m.insert(EMBED.to_string(), vec![c.vocab_size, c.d_model]);
    for b in 0..c.n_layers {
        m.insert(attn_norm_path(b), vec![c.d_model]);
        m.insert(mlp_norm_path(b), vec![c.d_model]);
        for p in Proj::ALL {
            let (o, i) = p.shape(c);
            m.insert(proj_path(b, p), vec![o, i]);
        }
    }
    m.insert(FINAL_NORM.to_string(), vec![c.d_model]);
    if !c.tie_embeddings {
        m.insert(LM_HEAD.to_string(), vec![c.vocab_size, c.d_model]);
    }
    m
}

/// Named parameter set of a decoder. With tied embeddings there is no
/// separate lm-head tensor; the embedding table serves both roles.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        Self { tensors }
    }

    /// Gaussian init (std 0.02; output projections scaled by `1/√(2N)`),
    /// unit norm gains.
    pub fn init(c: &TransformerConfig, seed: u64) -> Result<Self> {
        c.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0f64, 0.02).expect("valid std");
        let resid = 0.02 / (2.0 * c.n_layers.max(1) as f64).sqrt();
        let resid = Normal::new(0.0f64, resid).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (path, shape) in expected_shapes(c) {
            let numel: usize = shape.iter().product();
            let data: Vec<T> = if shape.len() == 1 {
                vec![T::one(); numel]
            } else {
                let dist = if path.ends_with(Proj::O.name()) || path.ends_with(Proj::Down.name()) {
                    &resid
                } else {
                    &base
                };
                (0..numel).map(|_| T::c(dist.sample(&mut rng))).collect()
            };
            tensors.insert(path, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Checks that the map holds exactly the tensors `c` implies.
    pub fn validate(&self, c: &TransformerConfig) -> Result<()> {
        let expected = expected_shapes(c);
        for (path, shape) in &expected {
            let t = self
                .tensors
                .get(path)
                .ok_or_else(|| Error::shape(format!("missing weight `{path}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "weight `{path}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::shape(format!("unexpected weight `{extra}`")));
        }
        Ok(())
    }

    pub fn get(&self, path: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(path)
            .ok_or_else(|| Error::shape(format!("no weight named `{path}`")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(path)
            .ok_or_else(|| Error::shape(format!("no weight named `{path}`")))
    }

    /// The lm-head matrix `[vocab × d_model]`, which is the embedding table
    /// itself when tied.
    pub fn lm_head(&self, c: &TransformerConfig) -> Result<&Tensor<T>> {
        self.get(if c.tie_embeddings { EMBED } else { LM_HEAD })
    }

    pub fn insert(&mut self, path: String, t: Tensor<T>) {
        self.tensors.insert(path, t);
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor<T>> {
        self.tensors.remove(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}
