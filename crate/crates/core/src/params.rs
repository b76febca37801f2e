//! Named parameter tensors and their deterministic initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of token and position embeddings.
pub const EMBED_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// `N(0, 1/fan_in)` so that unit-variance inputs give unit-variance
    /// projections and unit-variance scaled attention scores.
    Fan,
    Embed,
    Zeros,
    Ones,
}

/// Ordered list of `(name, shape, init)` for a config. The order is the
/// binding order used by the model and the checkpoint table order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    push("tok_emb".into(), vec![cfg.vocab_size, d], Init::Embed);

    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        for w in ["q", "k", "v", "o"] {
            push(format!("{p}.w{w}"), vec![d, d], Init::Fan);
            push(format!("{p}.b{w}"), vec![d], Init::Zeros);
        }
    };
    let ln = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.gain"), vec![d], Init::Ones);
        push(format!("{p}.bias"), vec![d], Init::Zeros);
    };
    let ff = |push: &mut dyn FnMut(String, Vec<usize>, Init), p: &str| {
        push(format!("{p}.w1"), vec![d, f], Init::Fan);
        push(format!("{p}.b1"), vec![f], Init::Zeros);
        push(format!("{p}.w2"), vec![f, d], Init::Fan);
        push(format!("{p}.b2"), vec![d], Init::Zeros);
    };

    push("enc.pos".into(), vec![cfg.max_positions, d], Init::Embed);
    ln(&mut push, "enc.emb_ln");
    for l in 0..cfg.n_enc_layers {
        attn(&mut push, &format!("enc.{l}.self"));
        ln(&mut push, &format!("enc.{l}.self_ln"));
        ff(&mut push, &format!("enc.{l}.ff"));
        ln(&mut push, &format!("enc.{l}.ff_ln"));
    }
    push("dec.pos".into(), vec![cfg.max_positions, d], Init::Embed);
    ln(&mut push, "dec.emb_ln");
    for l in 0..cfg.n_dec_layers {
        attn(&mut push, &format!("dec.{l}.self"));
        ln(&mut push, &format!("dec.{l}.self_ln"));
        attn(&mut push, &format!("dec.{l}.cross"));
        ln(&mut push, &format!("dec.{l}.cross_ln"));
        ff(&mut push, &format!("dec.{l}.ff"));
        ln(&mut push, &format!("dec.{l}.ff_ln"));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::Validation("parameter names and tensors differ in count".into()));
        }
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate parameter `{n}`")));
            }
        }
        Ok(ParamStore {
            names,
            tensors,
            index,
        })
    }

    /// Deterministic initialization for `cfg` from `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Fan | Init::Embed => {
                    let std = if init == Init::Fan {
                        (1.0 / shape[0] as f64).sqrt()
                    } else {
                        EMBED_STD
                    };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    // values are kept f32-representable so checkpoints are exact
                    (0..n)
                        .map(|_| normal.sample(&mut rng) as f32 as f64)
                        .collect()
                }
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Self::from_parts(names, tensors)
    }

    /// Checks names and shapes against the layout for `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expect = layout(cfg);
        if expect.len() != self.names.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expect.len(),
                self.names.len()
            )));
        }
        for ((name, shape, _), (have_name, t)) in expect.iter().zip(self.iter()) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{have_name}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
