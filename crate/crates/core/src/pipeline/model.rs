use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::{label_count, SeqLabel};
use crate::encoder::{self, init_encoder_params, EncoderVars, Gate, HiddenStates, ModelParams, PairEncoding};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{self, TaskKind};

pub const MIX_W: &str = "mix.w";
pub const MIX_B: &str = "mix.b";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Trained (or freshly initialised) weights together with the config that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: TrainConfig,
    pub params: ModelParams,
}

/// Encoder weights, the two mixup gate scalars, and a linear task head.
pub fn init_model(config: &TrainConfig, rng: &mut impl Rng) -> Result<Model> {
    config.validate()?;
    let mut params = init_encoder_params(&config.encoder, rng)?;
    params.insert(MIX_W, Tensor::scalar(0.0));
    params.insert(MIX_B, Tensor::scalar(0.0));
    let d = config.encoder.d_model;
    let c = label_count(config.task);
    params.insert(HEAD_W, crate::encoder::xavier_init(rng, d, c));
    params.insert(HEAD_B, Tensor::zeros(&[c]));
    Ok(Model {
        config: config.clone(),
        params,
    })
}

/// Model parameters registered on one tape.
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub mix_w: Var,
    pub mix_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    pub by_name: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, model: &Model) -> Result<Self> {
        let by_name = model.params.register(tape)?;
        let get = |n: &str| by_name.get(n).copied().ok_or_else(|| Error::UnknownParam(n.to_string()));
        Ok(ModelVars {
            encoder: EncoderVars::from_registered(&by_name, &model.config.encoder)?,
            mix_w: get(MIX_W)?,
            mix_b: get(MIX_B)?,
            head_w: get(HEAD_W)?,
            head_b: get(HEAD_B)?,
            by_name,
        })
    }

    pub fn gate(&self, config: &TrainConfig) -> Gate {
        if config.toggles.constant_lambda {
            Gate::Constant(config.mixup.lambda0)
        } else {
            Gate::Learned {
                w: self.mix_w,
                b: self.mix_b,
            }
        }
    }
}

/// Task-head output of one stream plus its pooled representation.
#[derive(Clone, Copy, Debug)]
pub struct StreamOutput {
    /// Classification: `[1 × C]`; structured: `[n × C]`; span: `[2 × n]` (start row, end row).
    pub probs: Var,
    /// `[1 × d_model]`.
    pub rep: Var,
}

pub fn head(tape: &mut Tape, task: TaskKind, h: &HiddenStates, vars: &ModelVars) -> Result<StreamOutput> {
    let rep = encoder::sequence_representation(tape, h)?;
    let probs = match task {
        TaskKind::Classification => {
            let logits = tape.matmul(rep, vars.head_w)?;
            let logits = tape.add_row(logits, vars.head_b)?;
            tape.softmax_rows(logits)?
        }
        TaskKind::Structured => {
            let logits = tape.matmul(h.last(), vars.head_w)?;
            let logits = tape.add_row(logits, vars.head_b)?;
            tape.softmax_rows(logits)?
        }
        TaskKind::Span => {
            let logits = tape.matmul(h.last(), vars.head_w)?;
            let logits = tape.add_row(logits, vars.head_b)?;
            let by_position = tape.transpose(logits);
            tape.softmax_rows_masked(by_position, Some(&h.mask))?
        }
    };
    Ok(StreamOutput { probs, rep })
}

fn one_hot(c: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[c] = 1.0;
    v
}

/// Task loss of one stream. For tag sequences, positions whose gold tag was
/// lost take the matching row of `pseudo` (source-head predictions) when given
/// and are skipped otherwise.
pub fn task_loss(
    tape: &mut Tape,
    task: TaskKind,
    out: &StreamOutput,
    label: &SeqLabel,
    mask: &[bool],
    pseudo: Option<&Tensor>,
) -> Result<Var> {
    let probs = tape.value(out.probs);
    let (rows, cols) = (probs.rows(), probs.cols());
    let (target, keep): (Vec<f64>, Vec<usize>) = match (task, label) {
        (TaskKind::Classification, SeqLabel::Class(c)) => (one_hot(*c, cols), vec![0]),
        (TaskKind::Structured, SeqLabel::Tags(tags)) => {
            if tags.len() != rows {
                return Err(Error::shape("task_loss", "tag count differs from sequence length"));
            }
            let mut data = Vec::with_capacity(rows * cols);
            let mut keep = Vec::new();
            for (i, tag) in tags.iter().enumerate() {
                match (tag, pseudo) {
                    (Some(t), _) => {
                        data.extend(one_hot(*t, cols));
                        keep.push(i);
                    }
                    (None, Some(p)) if i < p.rows() => {
                        data.extend_from_slice(p.row(i));
                        keep.push(i);
                    }
                    (None, _) => data.extend(vec![0.0; cols]),
                }
            }
            let keep = keep.into_iter().filter(|&i| mask[i]).collect();
            (data, keep)
        }
        (TaskKind::Span, SeqLabel::Span { start, end }) => {
            if *end >= cols {
                return Err(Error::shape("task_loss", "span outside the sequence"));
            }
            let mut data = one_hot(*start, cols);
            data.extend(one_hot(*end, cols));
            (data, vec![0, 1])
        }
        _ => return Err(Error::invalid(format!("label {label:?} does not match task {task}"))),
    };
    let target = tape.constant(Tensor::matrix(rows, cols, target)?);
    objectives::cross_entropy_vars(tape, out.probs, target, &keep)
}

/// Both streams of a pair with their task heads.
pub struct PairOutput {
    pub encoding: PairEncoding,
    pub source: StreamOutput,
    pub target: StreamOutput,
}

pub fn forward_pair(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    src: &[usize],
    tgt: &[usize],
) -> Result<PairOutput> {
    let cfg = &model.config;
    let encoding = encoder::encode_pair(tape, src, tgt, &cfg.encoder, &vars.encoder, &cfg.mixup, vars.gate(cfg))?;
    let source = head(tape, cfg.task, &encoding.source, vars)?;
    let target = head(tape, cfg.task, &encoding.target, vars)?;
    Ok(PairOutput {
        encoding,
        source,
        target,
    })
}

pub fn forward_single(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    tokens: &[usize],
) -> Result<(HiddenStates, StreamOutput)> {
    let h = encoder::encode_single(tape, tokens, &model.config.encoder, &vars.encoder)?;
    let out = head(tape, model.config.task, &h, vars)?;
    Ok((h, out))
}
