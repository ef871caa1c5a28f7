//! Backward-vs-finite-difference checks over every differentiable operation,
//! from single tape ops up to the full composite training objective.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SeqLabel;
use crate::encoder::{self, AttentionVars, EncoderConfig, EncoderVars, Gate, NormVars};
use crate::error::Result;
use crate::mixup::{self, MixupConfig};
use crate::numerics::gradcheck::{finite_diff_grad, max_relative_error, ParamMap, DEFAULT_STEP};
use crate::numerics::{Tape, Tensor, Var};
use crate::objectives::{self, LossVars, TaskKind};
use crate::pipeline::{self, Model, ModelVars, TrainConfig, Toggles};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.cases.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        !self.cases.is_empty() && self.max_rel_err() <= SUITE_TOLERANCE
    }
}

/// Compares `backward` against central differences for a scalar built by `build`.
fn check<F>(params: &ParamMap, build: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamMap) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = build(&mut tape, params)?;
    let analytic = tape.backward(loss)?;
    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let l = build(&mut t, p)?;
            Ok(t.scalar(l))
        },
        params,
        DEFAULT_STEP,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn register(tape: &mut Tape, p: &ParamMap) -> Result<BTreeMap<String, Var>> {
    p.iter().map(|(k, t)| Ok((k.clone(), tape.param(k, t.clone())?))).collect()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn readout(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let prod = tape.mul(out, r)?;
    Ok(tape.sum(prod))
}

fn attention_params(rng: &mut impl Rng, prefix: &str, d: usize, p: &mut ParamMap) {
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("{prefix}.{w}"), uniform(rng, &[d, d], 0.6));
    }
}

fn attention_vars(v: &BTreeMap<String, Var>, prefix: &str) -> AttentionVars {
    AttentionVars {
        wq: v[&format!("{prefix}.wq")],
        wk: v[&format!("{prefix}.wk")],
        wv: v[&format!("{prefix}.wv")],
        wo: v[&format!("{prefix}.wo")],
    }
}

fn tape_ops(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("x".into(), uniform(rng, &[3, 4], 1.5));
    p.insert("w".into(), uniform(rng, &[4, 5], 1.0));
    p.insert("b".into(), uniform(rng, &[5], 1.0));
    p.insert("s".into(), Tensor::scalar(rng.random_range(0.1..0.9)));
    let r1 = uniform(rng, &[3, 5], 1.0);
    let r2 = uniform(rng, &[4, 4], 1.0);
    let r3 = uniform(rng, &[1, 7], 1.0);
    check(&p, |t, p| {
        let v = register(t, p)?;
        let (x, w, b, s) = (v["x"], v["w"], v["b"], v["s"]);
        let g = t.gelu(x);
        let sg = t.sigmoid(x);
        let sq = t.square(x);
        let a = t.add(g, sg)?;
        let a = t.sub(a, sq)?;
        let a = t.mul(a, x)?;
        let a = t.scale(a, 0.7);
        let m = t.matmul(a, w)?;
        let m = t.add_row(m, b)?;
        let m = t.scale_by(m, s)?;
        let one = t.one_minus(s);
        let m2 = t.scale_by(m, one)?;
        let l1 = readout(t, m2, &r1)?;
        let xt = t.transpose(x);
        let gram = t.matmul(xt, x)?;
        let gram2 = t.matmul_t(gram, gram)?;
        let l2 = readout(t, gram2, &r2)?;
        let left = t.slice_cols(x, 0, 3)?;
        let right = t.slice_cols(m, 1, 4)?;
        let cat = t.concat_cols(&[left, right])?;
        let pooled = t.mean_rows(cat, &[0, 2])?;
        let l3 = readout(t, pooled, &r3)?;
        let l = t.add(l1, l2)?;
        let l = t.scale(l, 0.01);
        t.add(l, l3)
    })
}

fn softmax_and_log(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("z".into(), uniform(rng, &[4, 5], 2.0));
    let mask = [true, false, true, true, false];
    let r = uniform(rng, &[4, 5], 1.0);
    check(&p, |t, p| {
        let z = register(t, p)?["z"];
        let a = t.softmax_rows(z)?;
        let b = t.softmax_rows_masked(z, Some(&mask))?;
        let la = t.log_clamped(a, objectives::PROB_FLOOR);
        let l1 = readout(t, la, &r)?;
        let l2 = readout(t, b, &r)?;
        t.add(l1, l2)
    })
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("x".into(), uniform(rng, &[3, 6], 2.0));
    p.insert("g".into(), uniform(rng, &[6], 1.5));
    p.insert("b".into(), uniform(rng, &[6], 1.0));
    let r = uniform(rng, &[3, 6], 1.0);
    check(&p, |t, p| {
        let v = register(t, p)?;
        let y = t.layer_norm(v["x"], v["g"], v["b"], 1e-5)?;
        readout(t, y, &r)
    })
}

fn embedding_lookup(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("table".into(), uniform(rng, &[7, 3], 1.0));
    let ids = [2, 5, 2, 0];
    let r = uniform(rng, &[4, 3], 1.0);
    check(&p, |t, p| {
        let table = register(t, p)?["table"];
        let e = t.gather_rows(table, &ids)?;
        readout(t, e, &r)
    })
}

fn attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 4;
    let mut p = ParamMap::new();
    attention_params(rng, "attn", d, &mut p);
    p.insert("q".into(), uniform(rng, &[3, d], 1.0));
    p.insert("kv".into(), uniform(rng, &[5, d], 1.0));
    let mask = [true, true, false, true, true];
    let r = uniform(rng, &[3, d], 1.0);
    check(&p, |t, p| {
        let v = register(t, p)?;
        let attn = attention_vars(&v, "attn");
        let out = encoder::multi_head_attention(t, v["q"], v["kv"], v["kv"], &attn, 2, Some(&mask))?;
        readout(t, out, &r)
    })
}

fn cross_attention(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 4;
    let mut p = ParamMap::new();
    attention_params(rng, "attn", d, &mut p);
    p.insert("h_t".into(), uniform(rng, &[3, d], 1.0));
    p.insert("h_s".into(), uniform(rng, &[4, d], 1.0));
    let mask = [true, true, true, false];
    let r = uniform(rng, &[3, d], 1.0);
    check(&p, |t, p| {
        let v = register(t, p)?;
        let attn = attention_vars(&v, "attn");
        let out = mixup::cross_attention_vars(t, v["h_t"], v["h_s"], &attn, 2, &mask)?;
        readout(t, out, &r)
    })
}

fn entropy_gate(rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = 4;
    let mut p = ParamMap::new();
    p.insert("h_t".into(), uniform(rng, &[3, d], 1.5));
    p.insert("h_s".into(), uniform(rng, &[4, d], 1.5));
    p.insert("w".into(), Tensor::scalar(rng.random_range(-1.0..1.0)));
    p.insert("b".into(), Tensor::scalar(rng.random_range(-1.0..1.0)));
    let mask_t = [true, true, true];
    let mask_s = [true, false, true, true];
    check(&p, |t, p| {
        let v = register(t, p)?;
        let stats = mixup::attention_entropy_vars(t, v["h_t"], v["h_s"], &mask_t, &mask_s, d as f64)?;
        let lambda = mixup::gate_lambda(t, &stats, v["w"], v["b"], 0.5)?;
        let h = t.add(stats.forward, stats.backward)?;
        let h = t.scale(h, 0.3);
        t.add(lambda, h)
    })
}

fn manifold_mix(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("h_t".into(), uniform(rng, &[3, 5], 1.5));
    p.insert("h_ts".into(), uniform(rng, &[3, 5], 1.5));
    p.insert("lambda".into(), Tensor::scalar(rng.random_range(0.05..0.5)));
    p.insert("g".into(), uniform(rng, &[5], 1.5));
    p.insert("b".into(), uniform(rng, &[5], 1.0));
    let r = uniform(rng, &[3, 5], 1.0);
    check(&p, |t, p| {
        let v = register(t, p)?;
        let ln = NormVars {
            gain: v["g"],
            bias: v["b"],
        };
        let out = mixup::manifold_mix_vars(t, v["h_t"], v["h_ts"], v["lambda"], &ln)?;
        readout(t, out, &r)
    })
}

fn losses(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut p = ParamMap::new();
    p.insert("zp".into(), uniform(rng, &[3, 4], 2.0));
    p.insert("zq".into(), uniform(rng, &[1, 4], 2.0));
    p.insert("zr".into(), uniform(rng, &[1, 4], 2.0));
    p.insert("a".into(), uniform(rng, &[1, 6], 1.0));
    p.insert("c".into(), uniform(rng, &[1, 6], 1.0));
    let mut onehot = vec![0.0; 12];
    for row in 0..3 {
        onehot[row * 4 + rng.random_range(0..4)] = 1.0;
    }
    let y = Tensor::matrix(3, 4, onehot)?;
    check(&p, |t, p| {
        let v = register(t, p)?;
        let probs = t.softmax_rows(v["zp"])?;
        let target = t.constant(y.clone());
        let ce = objectives::cross_entropy_vars(t, probs, target, &[0, 2])?;
        let mse = objectives::mse_vars(t, v["a"], v["c"])?;
        let q = t.softmax_rows(v["zq"])?;
        let r = t.softmax_rows(v["zr"])?;
        let kl = objectives::kl_vars(t, q, r)?;
        let l = t.add(ce, mse)?;
        t.add(l, kl)
    })
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 20,
        max_len: 8,
    }
}

fn tokens(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(1..vocab)).collect()
}

fn encoder_stack(rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = small_encoder();
    let params = encoder::init_encoder_params(&config, rng)?;
    let mut toks = tokens(rng, 5, config.vocab_size);
    toks[4] = 0;
    let r = uniform(rng, &[5, config.d_model], 1.0);
    check(params.as_map(), |t, p| {
        let v = register(t, p)?;
        let vars = EncoderVars::from_registered(&v, &config)?;
        let h = encoder::encode_single(t, &toks, &config, &vars)?;
        let pooled = encoder::sequence_representation(t, &h)?;
        let l1 = readout(t, h.last(), &r)?;
        let l2 = t.sum(pooled);
        t.add(l1, l2)
    })
}

fn pair_encoder(rng: &mut ChaCha8Rng) -> Result<f64> {
    let config = small_encoder();
    let mut params = encoder::init_encoder_params(&config, rng)?.as_map().clone();
    params.insert("mix.w".into(), Tensor::scalar(rng.random_range(-0.5..0.5)));
    params.insert("mix.b".into(), Tensor::scalar(rng.random_range(-0.5..0.5)));
    let src = tokens(rng, 5, config.vocab_size);
    let tgt = tokens(rng, 4, config.vocab_size);
    let mix = MixupConfig {
        mix_layer: Some(1),
        ..MixupConfig::default()
    };
    let r_s = uniform(rng, &[5, config.d_model], 1.0);
    let r_t = uniform(rng, &[4, config.d_model], 1.0);
    check(&params, |t, p| {
        let v = register(t, p)?;
        let vars = EncoderVars::from_registered(&v, &config)?;
        let gate = Gate::Learned {
            w: v["mix.w"],
            b: v["mix.b"],
        };
        let enc = encoder::encode_pair(t, &src, &tgt, &config, &vars, &mix, gate)?;
        let l1 = readout(t, enc.source.last(), &r_s)?;
        let l2 = readout(t, enc.target.last(), &r_t)?;
        t.add(l1, l2)
    })
}

/// The complete per-example objective: both heads, pseudo labels where the
/// task has them, MSE and KL consistency, combined with the task's `α`.
fn composite(rng: &mut ChaCha8Rng, task: TaskKind) -> Result<f64> {
    let mut config = TrainConfig::for_task(task);
    config.encoder = small_encoder();
    config.toggles = Toggles::full();
    let mut model = pipeline::init_model(&config, rng)?;
    *model.params.get_mut(pipeline::MIX_W)? = Tensor::scalar(rng.random_range(-0.5..0.5));
    *model.params.get_mut(pipeline::MIX_B)? = Tensor::scalar(rng.random_range(-0.5..0.5));
    let src = tokens(rng, 6, config.encoder.vocab_size);
    let tgt = tokens(rng, 5, config.encoder.vocab_size);
    let (label_s, label_t) = match task {
        TaskKind::Classification => (SeqLabel::Class(rng.random_range(0..4)), SeqLabel::Class(rng.random_range(0..4))),
        TaskKind::Structured => (
            SeqLabel::Tags((0..6).map(|_| Some(rng.random_range(0..2))).collect()),
            SeqLabel::Tags(vec![Some(1), None, Some(0), None, Some(1)]),
        ),
        TaskKind::Span => (SeqLabel::Span { start: 1, end: 3 }, SeqLabel::Span { start: 2, end: 4 }),
    };
    // pseudo labels are a stop-gradient, so the probe holds them at their base value
    let pseudo = if task == TaskKind::Structured {
        let mut t = Tape::new();
        let vars = ModelVars::register(&mut t, &model)?;
        let out = pipeline::forward_pair(&mut t, &model, &vars, &src, &tgt)?;
        let d = objectives::pseudo_labels_vars(&mut t, out.source.probs)?;
        Some(t.value(d).clone())
    } else {
        None
    };
    check(model.params.as_map(), |t, p| {
        let m = Model {
            config: config.clone(),
            params: encoder::ModelParams::from_map(p.clone()),
        };
        let vars = ModelVars::register(t, &m)?;
        let out = pipeline::forward_pair(t, &m, &vars, &src, &tgt)?;
        let l_s = pipeline::task_loss(t, task, &out.source, &label_s, &out.encoding.source.mask, None)?;
        let l_t = pipeline::task_loss(t, task, &out.target, &label_t, &out.encoding.target.mask, pseudo.as_ref())?;
        let mse = objectives::mse_vars(t, out.source.rep, out.target.rep)?;
        let kl = match task {
            TaskKind::Classification => Some(objectives::kl_vars(t, out.source.probs, out.target.probs)?),
            _ => None,
        };
        let parts = LossVars {
            task_source: l_s,
            task_target: l_t,
            mse: Some(mse),
            kl,
        };
        objectives::total_loss_vars(t, &parts, config.alpha)
    })
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

const CASES: &[(&str, Case)] = &[
    ("tape_ops", tape_ops),
    ("softmax_log", softmax_and_log),
    ("layer_norm", layer_norm),
    ("embedding", embedding_lookup),
    ("attention", attention),
    ("cross_attention", cross_attention),
    ("entropy_gate", entropy_gate),
    ("manifold_mix", manifold_mix),
    ("losses", losses),
    ("encoder", encoder_stack),
    ("pair_encoder", pair_encoder),
    ("total_classification", |r| composite(r, TaskKind::Classification)),
    ("total_structured", |r| composite(r, TaskKind::Structured)),
    ("total_span", |r| composite(r, TaskKind::Span)),
];

pub fn case_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Runs every case on seeds `base_seed .. base_seed + seeds`.
pub fn run_suite(base_seed: u64, seeds: usize) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for (i, (name, case)) in CASES.iter().enumerate() {
        for s in 0..seeds as u64 {
            let seed = base_seed.wrapping_add(s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            let err = case(&mut rng)?;
            log::debug!("gradcheck {name} seed {seed}: {err:e}");
            report.cases.push(CaseResult {
                name: name.to_string(),
                seed,
                max_rel_err: err,
            });
        }
    }
    Ok(report)
}
