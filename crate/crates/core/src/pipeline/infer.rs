use serde::{Deserialize, Serialize};

use super::model::{forward_pair, forward_single, Model, ModelVars};
use crate::corpus::{ParallelExample, SeqLabel};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::objectives::TaskKind;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Equal-weight mean of two distributions.
pub fn average_probs(p_s: &[f64], p_t: &[f64]) -> Result<Vec<f64>> {
    if p_s.len() != p_t.len() {
        return Err(Error::shape("average_probs", "length mismatch"));
    }
    Ok(p_s.iter().zip(p_t).map(|(a, b)| (a + b) / 2.0).collect())
}

fn mixup_at_inference(model: &Model) -> bool {
    model.config.toggles.use_mixup && model.config.toggles.mixup_inference
}

fn require_source(src: Option<&[usize]>) -> Result<&[usize]> {
    src.ok_or(Error::MissingTranslateTest)
}

/// Label and final distribution for one target sentence. With mixup
/// inference the pair is encoded jointly and the two heads are averaged.
pub fn infer_classification(model: &Model, tgt: &[usize], translate_test_src: Option<&[usize]>) -> Result<(usize, Vec<f64>)> {
    if model.config.task != TaskKind::Classification {
        return Err(Error::invalid("infer_classification needs a classification model"));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model)?;
    let p = if mixup_at_inference(model) {
        let src = require_source(translate_test_src)?;
        let out = forward_pair(&mut tape, model, &vars, src, tgt)?;
        average_probs(tape.value(out.source.probs).data(), tape.value(out.target.probs).data())?
    } else {
        let (_, out) = forward_single(&mut tape, model, &vars, tgt)?;
        tape.value(out.probs).data().to_vec()
    };
    Ok((argmax(&p), p))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenPrediction {
    Tags(Vec<usize>),
    Span { start: usize, end: usize },
}

/// Per-token prediction from the target stream only.
pub fn infer_token(model: &Model, tgt: &[usize], translate_test_src: Option<&[usize]>) -> Result<TokenPrediction> {
    let task = model.config.task;
    if task == TaskKind::Classification {
        return Err(Error::invalid("infer_token needs a token-level model"));
    }
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model)?;
    let (probs, mask) = if mixup_at_inference(model) {
        let src = require_source(translate_test_src)?;
        let out = forward_pair(&mut tape, model, &vars, src, tgt)?;
        (tape.value(out.target.probs).clone(), out.encoding.target.mask.clone())
    } else {
        let (h, out) = forward_single(&mut tape, model, &vars, tgt)?;
        (tape.value(out.probs).clone(), h.mask)
    };
    Ok(match task {
        TaskKind::Structured => TokenPrediction::Tags(
            (0..probs.rows()).filter(|&i| mask[i]).map(|i| argmax(probs.row(i))).collect(),
        ),
        _ => {
            let start = argmax(probs.row(0));
            let end = start + argmax(&probs.row(1)[start..]);
            TokenPrediction::Span { start, end }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    /// Accuracy, tag F1 or span F1 depending on the task.
    pub metric: f64,
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub exact_match: Option<f64>,
    pub count: usize,
}

fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    let lo = pred.0.max(gold.0);
    let hi = pred.1.min(gold.1);
    if hi < lo {
        return 0.0;
    }
    let overlap = (hi - lo + 1) as f64;
    let precision = overlap / (pred.1 - pred.0 + 1) as f64;
    let recall = overlap / (gold.1 - gold.0 + 1) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Scores the model on examples whose target side carries gold labels.
pub fn evaluate(model: &Model, examples: &[ParallelExample]) -> Result<EvalReport> {
    let task = model.config.task;
    let n = examples.len();
    if n == 0 {
        return Err(Error::invalid("nothing to evaluate"));
    }
    match task {
        TaskKind::Classification => {
            let mut correct = 0usize;
            for ex in examples {
                let (pred, _) = infer_classification(model, &ex.tgt, Some(&ex.src))?;
                match ex.label.tgt {
                    SeqLabel::Class(c) => correct += (pred == c) as usize,
                    _ => return Err(Error::invalid("expected a class label")),
                }
            }
            let acc = correct as f64 / n as f64;
            Ok(EvalReport {
                task,
                metric: acc,
                accuracy: Some(acc),
                f1: None,
                exact_match: None,
                count: n,
            })
        }
        TaskKind::Structured => {
            let (mut tp, mut fp, mut fnn, mut correct, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
            for ex in examples {
                let TokenPrediction::Tags(pred) = infer_token(model, &ex.tgt, Some(&ex.src))? else {
                    unreachable!("structured models predict tags")
                };
                let SeqLabel::Tags(gold) = &ex.label.tgt else {
                    return Err(Error::invalid("expected tags"));
                };
                for (&p, g) in pred.iter().zip(gold) {
                    let Some(g) = *g else { continue };
                    total += 1;
                    correct += (p == g) as usize;
                    match (p == 1, g == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnn += 1,
                        _ => {}
                    }
                }
            }
            let denom = 2 * tp + fp + fnn;
            let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
            Ok(EvalReport {
                task,
                metric: f1,
                accuracy: Some(correct as f64 / total.max(1) as f64),
                f1: Some(f1),
                exact_match: None,
                count: n,
            })
        }
        TaskKind::Span => {
            let (mut f1_sum, mut em) = (0.0, 0usize);
            for ex in examples {
                let TokenPrediction::Span { start, end } = infer_token(model, &ex.tgt, Some(&ex.src))? else {
                    unreachable!("span models predict spans")
                };
                let SeqLabel::Span { start: gs, end: ge } = ex.label.tgt else {
                    return Err(Error::invalid("expected a span"));
                };
                f1_sum += span_f1((start, end), (gs, ge));
                em += (start == gs && end == ge) as usize;
            }
            let f1 = f1_sum / n as f64;
            Ok(EvalReport {
                task,
                metric: f1,
                accuracy: None,
                f1: Some(f1),
                exact_match: Some(em as f64 / n as f64),
                count: n,
            })
        }
    }
}

/// Pooled last-layer representations of both sides of a pair, either from
/// independent single-stream passes or with the target stream mixed.
pub fn pair_representations(model: &Model, src: &[usize], tgt: &[usize], with_mixup: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, model)?;
    if with_mixup {
        if model.config.mixup.mix_layer.is_none() {
            return Err(Error::invalid("model has no mix layer"));
        }
        let out = forward_pair(&mut tape, model, &vars, src, tgt)?;
        Ok((
            tape.value(out.source.rep).data().to_vec(),
            tape.value(out.target.rep).data().to_vec(),
        ))
    } else {
        let (_, s) = forward_single(&mut tape, model, &vars, src)?;
        let (_, t) = forward_single(&mut tape, model, &vars, tgt)?;
        Ok((tape.value(s.rep).data().to_vec(), tape.value(t.rep).data().to_vec()))
    }
}
