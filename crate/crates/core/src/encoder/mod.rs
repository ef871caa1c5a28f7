//! Post-LN transformer encoder with a dual-stream mixup hook.
//!
//! Each layer is a self-attention sub-layer followed by a feed-forward
//! sub-layer, each wrapped as `LN(x + sublayer(x))`. [`encode_pair`] runs
//! source and target through the same weights and, at one chosen layer,
//! replaces the target's attention sub-layer output with the manifold-mixed
//! states produced by [`crate::mixup`].

mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixup::{self, EntropyVars, MixupConfig};
use crate::numerics::{Tape, Var, LAYER_NORM_EPS};

pub use params::{init_encoder_params, AttentionVars, EncoderVars, LayerVars, ModelParams, NormVars};
pub(crate) use params::xavier as xavier_init;

/// Padding token id. Padded positions are masked out of attention and pooling.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            d_model: 32,
            num_heads: 4,
            ffn_dim: 64,
            vocab_size: 50,
            max_len: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::invalid("num_layers must be at least 1"));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_model < 2 || self.ffn_dim == 0 || self.vocab_size < 2 || self.max_len == 0 {
            return Err(Error::invalid("encoder dimensions too small"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Per-layer outputs of one stream, all on the same tape.
#[derive(Clone, Debug)]
pub struct HiddenStates {
    /// `layers[0]` is the embedding output, `layers[l]` the output of layer `l`.
    pub layers: Vec<Var>,
    /// Pre-LN residual of each layer's attention sub-layer (`x + Attn(x)`).
    pub attn_residuals: Vec<Var>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl HiddenStates {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("hidden states always hold the embedding layer")
    }

    pub fn unmasked_rows(&self) -> Vec<usize> {
        unmasked(&self.mask)
    }
}

pub(crate) fn unmasked(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect()
}

/// `Concat(head₁..head_h) · Wᴼ` with `headᵢ = softmax(Q Wqᵢ (K Wkᵢ)ᵀ / √d) · V Wvᵢ`.
pub fn multi_head_attention(
    tape: &mut Tape,
    query: Var,
    key: Var,
    value: Var,
    attn: &AttentionVars,
    num_heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d_model = tape.value(query).cols();
    if tape.value(key).cols() != d_model || tape.value(value).cols() != d_model {
        return Err(Error::shape("multi_head_attention", "query/key/value widths differ"));
    }
    if tape.value(key).rows() != tape.value(value).rows() {
        return Err(Error::shape("multi_head_attention", "key and value row counts differ"));
    }
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(Error::shape("multi_head_attention", format!("{num_heads} heads for width {d_model}")));
    }
    let head_dim = d_model / num_heads;
    let q = tape.matmul(query, attn.wq)?;
    let k = tape.matmul(key, attn.wk)?;
    let v = tape.matmul(value, attn.wv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (qh, kh, vh) = if num_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * head_dim, head_dim)?,
                tape.slice_cols(k, h * head_dim, head_dim)?,
                tape.slice_cols(v, h * head_dim, head_dim)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows_masked(scores, key_mask)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let concat = if num_heads == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    tape.matmul(concat, attn.wo)
}

/// Token plus learned absolute position embeddings, and the padding mask.
pub fn embed(tape: &mut Tape, tokens: &[usize], config: &EncoderConfig, vars: &EncoderVars) -> Result<(Var, Vec<bool>)> {
    if tokens.is_empty() {
        return Err(Error::AllMasked);
    }
    if tokens.len() > config.max_len {
        return Err(Error::TooLong {
            len: tokens.len(),
            max_len: config.max_len,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::OutOfVocab {
            token,
            vocab_size: config.vocab_size,
        });
    }
    let tok = tape.gather_rows(vars.tok_emb, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let pos = tape.gather_rows(vars.pos_emb, &positions)?;
    let x = tape.add(tok, pos)?;
    let mask = tokens.iter().map(|&t| t != PAD).collect();
    Ok((x, mask))
}

struct AttentionOut {
    /// Raw attention output.
    attn: Var,
    /// `x + attn`, before layer norm.
    residual: Var,
    /// `LN(x + attn)`.
    normed: Var,
}

fn attention_sublayer(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    layer: &LayerVars,
    num_heads: usize,
) -> Result<AttentionOut> {
    let attn = multi_head_attention(tape, x, x, x, &layer.attn, num_heads, Some(mask))?;
    let residual = tape.add(x, attn)?;
    let normed = tape.layer_norm(residual, layer.ln1.gain, layer.ln1.bias, LAYER_NORM_EPS)?;
    Ok(AttentionOut { attn, residual, normed })
}

fn ffn_sublayer(tape: &mut Tape, h: Var, layer: &LayerVars) -> Result<Var> {
    let inner = tape.matmul(h, layer.ffn_in_w)?;
    let inner = tape.add_row(inner, layer.ffn_in_b)?;
    let inner = tape.gelu(inner);
    let out = tape.matmul(inner, layer.ffn_out_w)?;
    let out = tape.add_row(out, layer.ffn_out_b)?;
    let residual = tape.add(h, out)?;
    tape.layer_norm(residual, layer.ln2.gain, layer.ln2.bias, LAYER_NORM_EPS)
}

/// Single-stream encoding.
pub fn encode_single(tape: &mut Tape, tokens: &[usize], config: &EncoderConfig, vars: &EncoderVars) -> Result<HiddenStates> {
    let (mut x, mask) = embed(tape, tokens, config, vars)?;
    let mut layers = vec![x];
    let mut attn_residuals = Vec::with_capacity(config.num_layers);
    for layer in &vars.layers {
        let a = attention_sublayer(tape, x, &mask, layer, config.num_heads)?;
        attn_residuals.push(a.residual);
        x = ffn_sublayer(tape, a.normed, layer)?;
        layers.push(x);
    }
    Ok(HiddenStates {
        layers,
        attn_residuals,
        mask,
    })
}

/// How the mixup ratio is obtained inside [`encode_pair`].
#[derive(Clone, Copy, Debug)]
pub enum Gate {
    /// `λ₀ · σ((H(A) + H(Aᵀ))·W + b)` with trainable `W`, `b`.
    Learned { w: Var, b: Var },
    /// A fixed ratio, bypassing the entropy gate.
    Constant(f64),
}

/// Result of dual-stream encoding.
#[derive(Clone, Debug)]
pub struct PairEncoding {
    pub source: HiddenStates,
    pub target: HiddenStates,
    /// Mixup ratio used at the mix layer; `None` when mixing is disabled.
    pub lambda: Option<Var>,
    pub entropy: Option<EntropyVars>,
    /// Projection parameters the cross-attention used.
    pub cross_attention_params: Option<AttentionVars>,
}

/// Shared-weight encoding of a source/target pair with manifold mixup of the
/// target stream at `mix.mix_layer`. With no mix layer this is exactly two
/// [`encode_single`] calls.
pub fn encode_pair(
    tape: &mut Tape,
    src: &[usize],
    tgt: &[usize],
    config: &EncoderConfig,
    vars: &EncoderVars,
    mix: &MixupConfig,
    gate: Gate,
) -> Result<PairEncoding> {
    let Some(mix_layer) = mix.mix_layer else {
        let source = encode_single(tape, src, config, vars)?;
        let target = encode_single(tape, tgt, config, vars)?;
        return Ok(PairEncoding {
            source,
            target,
            lambda: None,
            entropy: None,
            cross_attention_params: None,
        });
    };
    if mix_layer == 0 || mix_layer > config.num_layers {
        return Err(Error::invalid(format!(
            "mix layer {mix_layer} outside [1, {}]",
            config.num_layers
        )));
    }
    let (mut xs, mask_s) = embed(tape, src, config, vars)?;
    let (mut xt, mask_t) = embed(tape, tgt, config, vars)?;
    let mut source = HiddenStates {
        layers: vec![xs],
        attn_residuals: vec![],
        mask: mask_s,
    };
    let mut target = HiddenStates {
        layers: vec![xt],
        attn_residuals: vec![],
        mask: mask_t,
    };
    let mut lambda = None;
    let mut entropy = None;
    let mut cross_params = None;
    for (idx, layer) in vars.layers.iter().enumerate() {
        let a_s = attention_sublayer(tape, xs, &source.mask, layer, config.num_heads)?;
        let a_t = attention_sublayer(tape, xt, &target.mask, layer, config.num_heads)?;
        source.attn_residuals.push(a_s.residual);
        target.attn_residuals.push(a_t.residual);
        let h_t = if idx + 1 == mix_layer {
            let n_scale = mix.n_scale.unwrap_or(config.d_model as f64);
            let stats = mixup::attention_entropy_vars(tape, a_t.normed, a_s.normed, &target.mask, &source.mask, n_scale)?;
            let lam = match gate {
                Gate::Learned { w, b } => mixup::gate_lambda(tape, &stats, w, b, mix.lambda0)?,
                Gate::Constant(value) => tape.constant(crate::numerics::Tensor::scalar(value)),
            };
            let cross = mixup::cross_attention_vars(tape, a_t.normed, a_s.normed, &layer.attn, config.num_heads, &source.mask)?;
            // The residual from the layer input carries into both mixed terms,
            // so λ·(x + cross) + (1−λ)·(x + attn) = x + λ·cross + (1−λ)·attn.
            let cross_residual = tape.add(xt, cross)?;
            debug_assert_eq!(tape.value(a_t.attn).shape(), tape.value(cross).shape());
            let mixed = mixup::manifold_mix_vars(tape, a_t.residual, cross_residual, lam, &layer.ln1)?;
            lambda = Some(lam);
            entropy = Some(stats);
            cross_params = Some(layer.attn);
            mixed
        } else {
            a_t.normed
        };
        xs = ffn_sublayer(tape, a_s.normed, layer)?;
        xt = ffn_sublayer(tape, h_t, layer)?;
        source.layers.push(xs);
        target.layers.push(xt);
    }
    Ok(PairEncoding {
        source,
        target,
        lambda,
        entropy,
        cross_attention_params: cross_params,
    })
}

/// Mean of the last layer's hidden states over unmasked positions, `[1 × d_model]`.
pub fn sequence_representation(tape: &mut Tape, h: &HiddenStates) -> Result<Var> {
    let rows = h.unmasked_rows();
    if rows.is_empty() {
        return Err(Error::AllMasked);
    }
    tape.mean_rows(h.last(), &rows)
}

#[cfg(test)]
mod tests;
