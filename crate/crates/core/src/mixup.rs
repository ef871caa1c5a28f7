//! Cross-lingual manifold mixup: source-aware cross-attention, an
//! attention-entropy estimate of translation quality, the gated mixup ratio,
//! the mixing step itself, and scheduled sampling of the source sequence.

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelExample;
use crate::encoder::{self, AttentionVars, NormVars};
use crate::error::{Error, Result};
use crate::numerics::kernels::sigmoid;
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupConfig {
    /// Upper bound on the mixup ratio.
    pub lambda0: f64,
    /// 1-based encoder layer where mixing happens; `None` disables mixing.
    pub mix_layer: Option<usize>,
    /// Inverse-sigmoid decay constant `k` for scheduled sampling.
    pub schedule_k: f64,
    /// Similarity scale inside the entropy estimate; `None` means `d_model`.
    pub n_scale: Option<f64>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            lambda0: 0.5,
            mix_layer: Some(1),
            schedule_k: 1000.0,
            n_scale: None,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 > 0.0 && self.lambda0 <= 1.0) {
            return Err(Error::invalid(format!("lambda0 {} outside (0, 1]", self.lambda0)));
        }
        if !(self.schedule_k >= 1.0) {
            return Err(Error::invalid(format!("schedule_k {} must be >= 1", self.schedule_k)));
        }
        if let Some(n) = self.n_scale {
            if !(n > 0.0) {
                return Err(Error::invalid("n_scale must be positive"));
            }
        }
        Ok(())
    }
}

/// Value-level attention projection weights (`[d_model × d_model]` each).
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub num_heads: usize,
}

impl AttentionWeights {
    pub fn identity(d_model: usize, num_heads: usize) -> Self {
        AttentionWeights {
            wq: Tensor::eye(d_model),
            wk: Tensor::eye(d_model),
            wv: Tensor::eye(d_model),
            wo: Tensor::eye(d_model),
            num_heads,
        }
    }

    fn on_tape(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            wq: tape.constant(self.wq.clone()),
            wk: tape.constant(self.wk.clone()),
            wv: tape.constant(self.wv.clone()),
            wo: tape.constant(self.wo.clone()),
        }
    }
}

/// Entropy-based alignment statistics between a target and a source sequence.
#[derive(Clone, Debug)]
pub struct AttentionStats {
    /// Target-query over source-key attention weights, unmasked rows/cols only.
    pub weights: Tensor,
    /// `H(A)`, averaged over target queries.
    pub forward: f64,
    /// `H(Aᵀ)`, softmax recomputed with source as query, averaged over source rows.
    pub backward: f64,
}

/// Tape handles for [`AttentionStats`].
#[derive(Clone, Copy, Debug)]
pub struct EntropyVars {
    pub weights: Var,
    pub forward: Var,
    pub backward: Var,
}

/// `MultiHead(H_T, H_S, H_S)`: target queries attend over source keys and values.
pub fn cross_attention_vars(
    tape: &mut Tape,
    h_t: Var,
    h_s: Var,
    attn: &AttentionVars,
    num_heads: usize,
    src_mask: &[bool],
) -> Result<Var> {
    if tape.value(h_s).rows() == 0 {
        return Err(Error::shape("cross_attention", "empty source"));
    }
    encoder::multi_head_attention(tape, h_t, h_s, h_s, attn, num_heads, Some(src_mask))
}

pub fn cross_attention(h_t: &Tensor, h_s: &Tensor, weights: &AttentionWeights, src_mask: Option<&[bool]>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let attn = weights.on_tape(&mut tape);
    let t = tape.constant(h_t.clone());
    let s = tape.constant(h_s.clone());
    let all = vec![true; h_s.rows()];
    let out = cross_attention_vars(&mut tape, t, s, &attn, weights.num_heads, src_mask.unwrap_or(&all))?;
    Ok(tape.value(out).clone())
}

fn mean_entropy(tape: &mut Tape, probs: Var) -> Var {
    let rows = tape.value(probs).rows() as f64;
    let logp = tape.log_clamped(probs, f64::MIN_POSITIVE);
    let plogp = tape.mul(probs, logp).expect("same shape");
    let total = tape.sum(plogp);
    tape.scale(total, -1.0 / rows)
}

/// `A = softmax_j(h_Tᵢ · h_Sⱼ / √n)`, with `H(A) = −(1/I) Σᵢ Σⱼ Aᵢⱼ log Aᵢⱼ` and
/// the same quantity with source and target roles swapped.
pub fn attention_entropy_vars(
    tape: &mut Tape,
    h_t: Var,
    h_s: Var,
    mask_t: &[bool],
    mask_s: &[bool],
    n_scale: f64,
) -> Result<EntropyVars> {
    if !(n_scale > 0.0) {
        return Err(Error::invalid("n_scale must be positive"));
    }
    if mask_t.len() != tape.value(h_t).rows() || mask_s.len() != tape.value(h_s).rows() {
        return Err(Error::shape("attention_entropy", "mask length differs from row count"));
    }
    let rows_t = encoder::unmasked(mask_t);
    let rows_s = encoder::unmasked(mask_s);
    if rows_t.is_empty() || rows_s.is_empty() {
        return Err(Error::AllMasked);
    }
    let t = tape.gather_rows(h_t, &rows_t)?;
    let s = tape.gather_rows(h_s, &rows_s)?;
    let logits = tape.matmul_t(t, s)?;
    let logits = tape.scale(logits, 1.0 / n_scale.sqrt());
    let weights = tape.softmax_rows(logits)?;
    let forward = mean_entropy(tape, weights);
    let reversed = tape.transpose(logits);
    let reversed = tape.softmax_rows(reversed)?;
    let backward = mean_entropy(tape, reversed);
    Ok(EntropyVars {
        weights,
        forward,
        backward,
    })
}

pub fn attention_entropy(
    h_t: &Tensor,
    h_s: &Tensor,
    mask_t: Option<&[bool]>,
    mask_s: Option<&[bool]>,
    n_scale: f64,
) -> Result<AttentionStats> {
    let mut tape = Tape::new();
    let t = tape.constant(h_t.clone());
    let s = tape.constant(h_s.clone());
    let all_t = vec![true; h_t.rows()];
    let all_s = vec![true; h_s.rows()];
    let vars = attention_entropy_vars(
        &mut tape,
        t,
        s,
        mask_t.unwrap_or(&all_t),
        mask_s.unwrap_or(&all_s),
        n_scale,
    )?;
    Ok(AttentionStats {
        weights: tape.value(vars.weights).clone(),
        forward: tape.scalar(vars.forward),
        backward: tape.scalar(vars.backward),
    })
}

/// `λ = λ₀ · σ((H(A) + H(Aᵀ))·W + b)` on the tape; `w`, `b` are one-element tensors.
pub fn gate_lambda(tape: &mut Tape, stats: &EntropyVars, w: Var, b: Var, lambda0: f64) -> Result<Var> {
    let total = tape.add(stats.forward, stats.backward)?;
    let z = tape.mul(total, w)?;
    let z = tape.add(z, b)?;
    let s = tape.sigmoid(z);
    Ok(tape.scale(s, lambda0))
}

pub fn mixup_ratio(stats: &AttentionStats, w: f64, b: f64, lambda0: f64) -> Result<f64> {
    if ![stats.forward, stats.backward, w, b, lambda0].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("mixup_ratio"));
    }
    Ok(lambda0 * sigmoid((stats.forward + stats.backward) * w + b))
}

/// `LN(λ·h_{T|S} + (1−λ)·h_T)`.
pub fn manifold_mix_vars(tape: &mut Tape, h_t: Var, h_ts: Var, lambda: Var, ln: &NormVars) -> Result<Var> {
    if tape.value(h_t).shape() != tape.value(h_ts).shape() {
        return Err(Error::shape(
            "manifold_mix",
            format!("{:?} vs {:?}", tape.value(h_t).shape(), tape.value(h_ts).shape()),
        ));
    }
    let keep = tape.one_minus(lambda);
    let mixed_in = tape.scale_by(h_ts, lambda)?;
    let kept = tape.scale_by(h_t, keep)?;
    let sum = tape.add(mixed_in, kept)?;
    tape.layer_norm(sum, ln.gain, ln.bias, LAYER_NORM_EPS)
}

pub fn manifold_mix(h_t: &Tensor, h_ts: &Tensor, lambda: f64, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.constant(h_t.clone());
    let ts = tape.constant(h_ts.clone());
    let lam = tape.constant(Tensor::scalar(lambda));
    let ln = NormVars {
        gain: tape.constant(gain.clone()),
        bias: tape.constant(bias.clone()),
    };
    let out = manifold_mix_vars(&mut tape, t, ts, lam, &ln)?;
    Ok(tape.value(out).clone())
}

/// Inverse sigmoid decay `p* = k / (k + exp(i / k))` at mini-batch index `i`.
pub fn sampling_threshold(step: u64, k: f64) -> f64 {
    k / (k + (step as f64 / k).exp())
}

/// Picks the source fed into the mixup during training: the real source when
/// `u ≤ p*`, its back-translation otherwise.
pub fn sample_source(example: &ParallelExample, p_star: f64, u: f64) -> Result<&[usize]> {
    if u <= p_star {
        Ok(&example.src)
    } else {
        example.bt_src.as_deref().ok_or(Error::MissingBackTranslation)
    }
}
