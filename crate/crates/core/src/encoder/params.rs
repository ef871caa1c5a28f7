use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    /// Registers every tensor on `tape` as a named parameter.
    pub fn register(&self, tape: &mut Tape) -> Result<BTreeMap<String, Var>> {
        self.tensors
            .iter()
            .map(|(name, t)| Ok((name.clone(), tape.param(name, t.clone())?)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn: AttentionVars,
    pub ln1: NormVars,
    pub ffn_in_w: Var,
    pub ffn_in_b: Var,
    pub ffn_out_w: Var,
    pub ffn_out_b: Var,
    pub ln2: NormVars,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
}

fn lookup(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
}

impl EncoderVars {
    pub fn from_registered(vars: &BTreeMap<String, Var>, config: &EncoderConfig) -> Result<Self> {
        let layers = (1..=config.num_layers)
            .map(|l| {
                let p = |s: &str| lookup(vars, &format!("layer{l}.{s}"));
                Ok(LayerVars {
                    attn: AttentionVars {
                        wq: p("attn.wq")?,
                        wk: p("attn.wk")?,
                        wv: p("attn.wv")?,
                        wo: p("attn.wo")?,
                    },
                    ln1: NormVars {
                        gain: p("ln1.gain")?,
                        bias: p("ln1.bias")?,
                    },
                    ffn_in_w: p("ffn.w1")?,
                    ffn_in_b: p("ffn.b1")?,
                    ffn_out_w: p("ffn.w2")?,
                    ffn_out_b: p("ffn.b2")?,
                    ln2: NormVars {
                        gain: p("ln2.gain")?,
                        bias: p("ln2.bias")?,
                    },
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderVars {
            tok_emb: lookup(vars, "emb.tok")?,
            pos_emb: lookup(vars, "emb.pos")?,
            layers,
        })
    }
}

pub(crate) fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
    let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Fresh encoder weights: Gaussian embeddings, Xavier-uniform projections,
/// unit layer-norm gains and zero biases.
pub fn init_encoder_params(config: &EncoderConfig, rng: &mut impl Rng) -> Result<ModelParams> {
    config.validate()?;
    let d = config.d_model;
    let mut p = ModelParams::new();
    p.insert("emb.tok", normal(rng, config.vocab_size, d, 0.3));
    p.insert("emb.pos", normal(rng, config.max_len, d, 0.1));
    for l in 1..=config.num_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("layer{l}.attn.{w}"), xavier(rng, d, d));
        }
        p.insert(format!("layer{l}.ln1.gain"), Tensor::filled(&[d], 1.0));
        p.insert(format!("layer{l}.ln1.bias"), Tensor::zeros(&[d]));
        p.insert(format!("layer{l}.ffn.w1"), xavier(rng, d, config.ffn_dim));
        p.insert(format!("layer{l}.ffn.b1"), Tensor::zeros(&[config.ffn_dim]));
        p.insert(format!("layer{l}.ffn.w2"), xavier(rng, config.ffn_dim, d));
        p.insert(format!("layer{l}.ffn.b2"), Tensor::zeros(&[d]));
        p.insert(format!("layer{l}.ln2.gain"), Tensor::filled(&[d], 1.0));
        p.insert(format!("layer{l}.ln2.bias"), Tensor::zeros(&[d]));
    }
    Ok(p)
}
