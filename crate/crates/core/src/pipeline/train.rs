use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::evaluate;
use super::model::{forward_pair, forward_single, init_model, task_loss, Model, ModelVars};
use super::optim::{Adam, AdamConfig};
use super::TrainConfig;
use crate::corpus::{DatasetBundle, ParallelExample};
use crate::encoder;
use crate::error::{Error, Result};
use crate::mixup::{sample_source, sampling_threshold};
use crate::numerics::{Tape, Var};
use crate::objectives::{self, LossVars, TaskKind};

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub run_id: String,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_task_s: f64,
    pub loss_task_t: f64,
    pub loss_mse: f64,
    pub loss_kl: f64,
    pub lambda_mean: Option<f64>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    /// Sampling threshold at the last mini-batch of the epoch.
    pub p_star: Option<f64>,
    pub eval_metric: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    pub optimizer: Adam,
    /// Number of optimizer steps taken.
    pub step: u64,
    /// `p*` at every mini-batch while scheduled sampling is active.
    pub p_star_trace: Vec<f64>,
}

#[derive(Default)]
struct Running {
    count: usize,
    total: f64,
    task_s: f64,
    task_t: f64,
    mse: f64,
    kl: f64,
    lambdas: Vec<f64>,
}

impl Running {
    fn record(&mut self, tape: &Tape, parts: &LossVars, total: Var, lambda: Option<Var>) {
        self.count += 1;
        self.total += tape.scalar(total);
        self.task_s += tape.scalar(parts.task_source);
        self.task_t += tape.scalar(parts.task_target);
        self.mse += parts.mse.map_or(0.0, |v| tape.scalar(v));
        self.kl += parts.kl.map_or(0.0, |v| tape.scalar(v));
        if let Some(l) = lambda {
            self.lambdas.push(tape.scalar(l));
        }
    }
}

fn baseline_example_loss(tape: &mut Tape, model: &Model, vars: &ModelVars, ex: &ParallelExample) -> Result<(LossVars, Var)> {
    let task = model.config.task;
    let (hs, out_s) = forward_single(tape, model, vars, &ex.src)?;
    let l_s = task_loss(tape, task, &out_s, &ex.label.src, &hs.mask, None)?;
    let (ht, out_t) = forward_single(tape, model, vars, &ex.tgt)?;
    let l_t = task_loss(tape, task, &out_t, &ex.label.tgt, &ht.mask, None)?;
    let parts = LossVars {
        task_source: l_s,
        task_target: l_t,
        mse: None,
        kl: None,
    };
    let total = objectives::total_loss_vars(tape, &parts, 0.5)?;
    Ok((parts, total))
}

fn mixup_example_loss(
    tape: &mut Tape,
    model: &Model,
    vars: &ModelVars,
    ex: &ParallelExample,
    src: &[usize],
) -> Result<(LossVars, Var, Option<Var>)> {
    let cfg = &model.config;
    let task = cfg.task;
    let out = forward_pair(tape, model, vars, src, &ex.tgt)?;
    let l_s = task_loss(tape, task, &out.source, ex.source_label_for(src), &out.encoding.source.mask, None)?;
    let pseudo = if task == TaskKind::Structured {
        let detached = objectives::pseudo_labels_vars(tape, out.source.probs)?;
        Some(tape.value(detached).clone())
    } else {
        None
    };
    let l_t = task_loss(tape, task, &out.target, &ex.label.tgt, &out.encoding.target.mask, pseudo.as_ref())?;
    let mse = if cfg.toggles.mse_consistency {
        let r_t = if cfg.toggles.mse_on_mixed {
            out.target.rep
        } else {
            let h = encoder::encode_single(tape, &ex.tgt, &cfg.encoder, &vars.encoder)?;
            encoder::sequence_representation(tape, &h)?
        };
        Some(objectives::mse_vars(tape, out.source.rep, r_t)?)
    } else {
        None
    };
    let kl = if task == TaskKind::Classification && cfg.toggles.kl_consistency {
        Some(objectives::kl_vars(tape, out.source.probs, out.target.probs)?)
    } else {
        None
    };
    let parts = LossVars {
        task_source: l_s,
        task_target: l_t,
        mse,
        kl,
    };
    let total = objectives::total_loss_vars(tape, &parts, cfg.alpha)?;
    Ok((parts, total, out.encoding.lambda))
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains from a fresh initialisation seeded by `config.seed`.
///
/// Every mini-batch builds one tape, averages the per-example objective over
/// the batch and takes one Adam step. Test-set metrics are recorded after
/// each epoch when `bundle.test` is non-empty.
pub fn train(config: &TrainConfig, bundle: &DatasetBundle, run_id: &str) -> Result<TrainOutput> {
    config.validate()?;
    if bundle.task != config.task {
        return Err(Error::invalid(format!(
            "bundle holds {} data but the config trains {}",
            bundle.task, config.task
        )));
    }
    if config.epochs > 0 && bundle.train.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(config, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut step: u64 = 0;
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut p_star_trace = Vec::new();
    let sampling = config.mixing() && config.toggles.scheduled_sampling;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut run = Running::default();
        let mut last_p_star = None;
        for batch in order.chunks(config.batch_size) {
            let p_star = sampling.then(|| sampling_threshold(step, config.mixup.schedule_k));
            if let Some(p) = p_star {
                p_star_trace.push(p);
                last_p_star = Some(p);
            }
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &model)?;
            let mut acc: Option<Var> = None;
            for &idx in batch {
                let ex = &bundle.train[idx];
                let (parts, total, lambda) = if config.mixing() {
                    let src = match p_star {
                        Some(p) => sample_source(ex, p, rng.random::<f64>())?,
                        None => ex.src.as_slice(),
                    };
                    mixup_example_loss(&mut tape, &model, &vars, ex, src)?
                } else {
                    let (parts, total) = baseline_example_loss(&mut tape, &model, &vars, ex)?;
                    (parts, total, None)
                };
                run.record(&tape, &parts, total, lambda);
                acc = Some(match acc {
                    None => total,
                    Some(a) => tape.add(a, total)?,
                });
            }
            let sum = acc.expect("chunks are non-empty");
            let loss = tape.scale(sum, 1.0 / batch.len() as f64);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Diverged { step: step as usize });
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, &grads)?;
            step += 1;
        }
        let eval_metric = if bundle.test.is_empty() {
            None
        } else {
            Some(evaluate(&model, &bundle.test)?.metric)
        };
        let lam = &run.lambdas;
        let m = EpochMetrics {
            run_id: run_id.to_string(),
            epoch,
            loss_total: mean(run.total, run.count),
            loss_task_s: mean(run.task_s, run.count),
            loss_task_t: mean(run.task_t, run.count),
            loss_mse: mean(run.mse, run.count),
            loss_kl: mean(run.kl, run.count),
            lambda_mean: (!lam.is_empty()).then(|| lam.iter().sum::<f64>() / lam.len() as f64),
            lambda_min: lam.iter().copied().reduce(f64::min),
            lambda_max: lam.iter().copied().reduce(f64::max),
            p_star: last_p_star,
            eval_metric,
        };
        log::info!(
            "[{run_id}] epoch {epoch}: loss {:.5} (S {:.5}, T {:.5}, mse {:.5}, kl {:.5}) lambda {:?} [{:?}, {:?}] p* {:?} eval {:?}",
            m.loss_total,
            m.loss_task_s,
            m.loss_task_t,
            m.loss_mse,
            m.loss_kl,
            m.lambda_mean,
            m.lambda_min,
            m.lambda_max,
            m.p_star,
            m.eval_metric
        );
        metrics.push(m);
    }
    Ok(TrainOutput {
        model,
        metrics,
        optimizer: adam,
        step,
        p_star_trace,
    })
}

pub const METRICS_HEADER: &str =
    "run_id,epoch,loss_total,loss_task_S,loss_task_T,loss_mse,loss_kl,lambda_mean,p_star,eval_metric";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.epoch,
            r.loss_total,
            r.loss_task_s,
            r.loss_task_t,
            r.loss_mse,
            r.loss_kl,
            opt(r.lambda_mean),
            opt(r.p_star),
            opt(r.eval_metric)
        );
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}
