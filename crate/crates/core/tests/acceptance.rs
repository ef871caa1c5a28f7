//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails that is not listed in `KNOWN_UNMET`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmixup::analysis::{cka, discrepancy_report, spearman, transfer_gap};
use xmixup::corpus::{gen_bundle, BundleSizes, DatasetBundle, ToyLanguageSpec};
use xmixup::gradsuite::{run_suite, DEFAULT_SEEDS, SUITE_TOLERANCE};
use xmixup::mixup::{attention_entropy, manifold_mix, mixup_ratio, sampling_threshold, AttentionStats};
use xmixup::numerics::{layer_norm, Tape, Tensor, LAYER_NORM_EPS};
use xmixup::objectives::{self, kl_divergence, total_loss, LossParts, TaskKind};
use xmixup::pipeline::{
    ablate, evaluate, forward_single, infer_classification, init_model, load_checkpoint, pair_representations,
    save_checkpoint, task_loss, train, write_metrics_csv, Adam, AdamConfig, Checkpoint, EpochMetrics, ModelVars,
    TrainConfig,
};
use xmixup::runconfig::DataConfig;

/// Criteria that cannot be met, with the reason printed next to the FAIL line.
const KNOWN_UNMET: &[(usize, &str)] = &[(
    9,
    "the published per-language scores give 89.9 - 1189.1/14 = 4.964, outside 4.9 +/- 0.05",
)];

type Check<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_suite(0, DEFAULT_SEEDS).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = report.worst().unwrap();
    outcome(
        report.passed() && secs < 120.0 && DEFAULT_SEEDS >= 20,
        format!(
            "{} checks over {DEFAULT_SEEDS} seeds, max rel err {:.3e} ({} seed {}) <= {SUITE_TOLERANCE:e}, {secs:.1}s",
            report.cases.len(),
            report.max_rel_err(),
            worst.name,
            worst.seed
        ),
    )
}

// 2 -------------------------------------------------------------------------

/// Product of random Givens rotations.
fn orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut q = Tensor::eye(d);
    for _ in 0..4 * d {
        let (i, j) = (rng.random_range(0..d), rng.random_range(0..d));
        if i == j {
            continue;
        }
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (c, s) = (th.cos(), th.sin());
        let data = q.data_mut();
        for r in 0..d {
            let (a, b) = (data[r * d + i], data[r * d + j]);
            data[r * d + i] = c * a - s * b;
            data[r * d + j] = s * a + c * b;
        }
    }
    q
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    xmixup::numerics::matmul(a, b).unwrap()
}

fn cka_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut self_err, mut inv_err, mut sym_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut in_range = true;
    for _ in 0..100 {
        let n = rng.random_range(5..20);
        let (dx, dy) = (rng.random_range(2..8), rng.random_range(2..8));
        let x = random(&mut rng, n, dx);
        let y = random(&mut rng, n, dy);
        let base = cka(&x, &y).unwrap();
        in_range &= (0.0..=1.0).contains(&base);
        self_err = self_err.max((cka(&x, &x).unwrap() - 1.0).abs());
        sym_err = sym_err.max((base - cka(&y, &x).unwrap()).abs());
        let scale = rng.random_range(0.1..10.0);
        let mut xq = matmul(&x, &orthogonal(&mut rng, dx));
        xq.data_mut().iter_mut().for_each(|v| *v *= scale);
        inv_err = inv_err.max((cka(&xq, &y).unwrap() - base).abs());
    }
    outcome(
        in_range && self_err <= 1e-9 && inv_err <= 1e-9 && sym_err <= 1e-12,
        format!("100 pairs: |cka(X,X)-1| {self_err:.1e}, rotation+scale {inv_err:.1e}, symmetry {sym_err:.1e}"),
    )
}

// 3 -------------------------------------------------------------------------

fn naive_entropy(h_t: &Tensor, h_s: &Tensor, n: f64) -> (f64, f64) {
    let rows = |q: &Tensor, k: &Tensor| {
        let mut total = 0.0;
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>() / n.sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for l in &logits {
                let a = (l - m).exp() / z;
                total -= a * a.ln();
            }
        }
        total / q.rows() as f64
    };
    (rows(h_t, h_s), rows(h_s, h_t))
}

fn mixup_mechanics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lambda0 = 0.5;
    let (mut lambda_ok, mut bounds_ok) = (true, true);
    let mut oracle_err = 0.0f64;
    for _ in 0..1000 {
        let d = 4;
        let (jt, js) = (rng.random_range(1..7), rng.random_range(1..7));
        let h_t = random(&mut rng, jt, d);
        let h_s = random(&mut rng, js, d);
        let stats = attention_entropy(&h_t, &h_s, None, None, d as f64).unwrap();
        let (f, b) = naive_entropy(&h_t, &h_s, d as f64);
        oracle_err = oracle_err.max((stats.forward - f).abs()).max((stats.backward - b).abs());
        bounds_ok &= stats.forward >= -1e-12 && stats.forward <= (js as f64).ln() + 1e-12;
        bounds_ok &= stats.backward >= -1e-12 && stats.backward <= (jt as f64).ln() + 1e-12;
        let l = mixup_ratio(&stats, rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), lambda0).unwrap();
        lambda_ok &= l > 0.0 && l < lambda0;
    }
    let any = AttentionStats {
        weights: Tensor::eye(2),
        forward: 0.7,
        backward: 1.3,
    };
    let half = (mixup_ratio(&any, 0.0, 0.0, lambda0).unwrap() - lambda0 / 2.0).abs();
    let h_t = random(&mut rng, 3, 5);
    let h_ts = random(&mut rng, 3, 5);
    let g = random(&mut rng, 1, 5);
    let g = Tensor::vector(g.data().to_vec()).unwrap();
    let bias = Tensor::vector(random(&mut rng, 1, 5).data().to_vec()).unwrap();
    let at0 = manifold_mix(&h_t, &h_ts, 0.0, &g, &bias).unwrap() == layer_norm(&h_t, &g, &bias, LAYER_NORM_EPS).unwrap();
    let at1 = manifold_mix(&h_t, &h_ts, 1.0, &g, &bias).unwrap() == layer_norm(&h_ts, &g, &bias, LAYER_NORM_EPS).unwrap();
    outcome(
        lambda_ok && bounds_ok && oracle_err <= 1e-10 && half <= 1e-12 && at0 && at1,
        format!(
            "lambda in (0, 0.5) x1000: {lambda_ok}; W=b=0 gives 0.25 (err {half:.0e}); entropy bounds {bounds_ok}, naive oracle err {oracle_err:.1e}; endpoints bit-exact {}",
            at0 && at1
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn schedule() -> Outcome {
    let k = 1000.0;
    let trace: Vec<f64> = (0..20_000).map(|i| sampling_threshold(i, k)).collect();
    let decreasing = trace.windows(2).all(|w| w[1] < w[0]);
    let first = sampling_threshold(0, k) == k / (k + 1.0);
    let tail = sampling_threshold(20_000, k);
    let again: Vec<f64> = (0..20_000).map(|i| sampling_threshold(i, k)).collect();
    outcome(
        decreasing && first && tail < 1e-5 && trace == again,
        format!("strictly decreasing {decreasing}, p*(0) = k/(k+1) {first}, p*(20000) = {tail:.2e}, deterministic"),
    )
}

// 5 -------------------------------------------------------------------------

fn loss_recomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut err = 0.0f64;
    for _ in 0..1000 {
        let parts = LossParts {
            task_source: rng.random_range(0.0..5.0),
            task_target: rng.random_range(0.0..5.0),
            mse: rng.random_range(0.0..2.0),
            kl: rng.random_range(0.0..2.0),
        };
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let b = total_loss(parts, alpha, TaskKind::Classification).unwrap();
        let want = alpha * parts.task_source + (1.0 - alpha) * parts.task_target + parts.mse + parts.kl;
        err = err.max((b.total - want).abs());
    }
    let p = [0.1, 0.6, 0.3];
    let kl_self = kl_divergence(&p, &p).unwrap();
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::matrix(2, 3, vec![0.2, -1.0, 0.5, 1.5, 0.1, -0.3]).unwrap());
    let probs = tape.softmax_rows(logits).unwrap();
    let pseudo = objectives::pseudo_labels_vars(&mut tape, probs).unwrap();
    let target_logits = tape.leaf(Tensor::matrix(2, 3, vec![0.3, 0.3, -0.2, 0.0, 1.0, 0.4]).unwrap());
    let target_probs = tape.softmax_rows(target_logits).unwrap();
    let loss = objectives::cross_entropy_vars(&mut tape, target_probs, pseudo, &[0, 1]).unwrap();
    let detached = !tape.depends_on(loss, logits) && tape.depends_on(loss, target_logits);
    outcome(
        err <= 1e-12 && kl_self == 0.0 && detached,
        format!("max recomposition err {err:.1e} over 1000 sets; KL(p||p) = {kl_self}; pseudo labels cut from the graph {detached}"),
    )
}

// 6 -------------------------------------------------------------------------

fn small_bundle() -> DatasetBundle {
    let spec = ToyLanguageSpec::new(50, 0.1, 0.1, 0.3, 11).unwrap();
    gen_bundle(TaskKind::Classification, BundleSizes { train: 200, test: 50 }, &spec, 11).unwrap()
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::for_task(TaskKind::Classification);
    c.epochs = 2;
    c.seed = 11;
    c
}

/// Translate-train written directly against the model building blocks:
/// source and target examples as independent inputs, equal weights.
fn plain_translate_train(config: &TrainConfig, bundle: &DatasetBundle) -> Vec<EpochMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = init_model(config, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut rows = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut n, mut total, mut ls, mut lt) = (0usize, 0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let vars = ModelVars::register(&mut tape, &model).unwrap();
            let mut sum = None;
            for &i in batch {
                let ex = &bundle.train[i];
                let (hs, os) = forward_single(&mut tape, &model, &vars, &ex.src).unwrap();
                let l_s = task_loss(&mut tape, config.task, &os, &ex.label.src, &hs.mask, None).unwrap();
                let (ht, ot) = forward_single(&mut tape, &model, &vars, &ex.tgt).unwrap();
                let l_t = task_loss(&mut tape, config.task, &ot, &ex.label.tgt, &ht.mask, None).unwrap();
                let a = tape.scale(l_s, 0.5);
                let b = tape.scale(l_t, 0.5);
                let l = tape.add(a, b).unwrap();
                n += 1;
                total += tape.scalar(l);
                ls += tape.scalar(l_s);
                lt += tape.scalar(l_t);
                sum = Some(match sum {
                    None => l,
                    Some(s) => tape.add(s, l).unwrap(),
                });
            }
            let loss = tape.scale(sum.unwrap(), 1.0 / batch.len() as f64);
            let grads = tape.backward(loss).unwrap();
            adam.step(&mut model.params, &grads).unwrap();
        }
        rows.push(EpochMetrics {
            run_id: String::new(),
            epoch,
            loss_total: total / n as f64,
            loss_task_s: ls / n as f64,
            loss_task_t: lt / n as f64,
            loss_mse: 0.0,
            loss_kl: 0.0,
            lambda_mean: None,
            lambda_min: None,
            lambda_max: None,
            p_star: None,
            eval_metric: Some(evaluate(&model, &bundle.test).unwrap().metric),
        });
    }
    rows
}

fn same_numbers(a: &[EpochMetrics], b: &[EpochMetrics]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            let bits = |v: f64| v.to_bits();
            x.epoch == y.epoch
                && bits(x.loss_total) == bits(y.loss_total)
                && bits(x.loss_task_s) == bits(y.loss_task_s)
                && bits(x.loss_task_t) == bits(y.loss_task_t)
                && bits(x.loss_mse) == bits(y.loss_mse)
                && bits(x.loss_kl) == bits(y.loss_kl)
                && x.lambda_mean == y.lambda_mean
                && x.p_star == y.p_star
                && x.eval_metric.map(bits) == y.eval_metric.map(bits)
        })
}

fn baseline_equivalence(oracle: &[EpochMetrics]) -> Outcome {
    let bundle = small_bundle();
    let out = train(&small_config().baseline(), &bundle, "baseline").unwrap();
    let ok = same_numbers(&out.metrics, oracle);
    outcome(
        ok,
        format!(
            "200-example bundle, {} epochs: pipeline vs hand-written loop bit-identical {ok} (final loss {})",
            oracle.len(),
            oracle.last().unwrap().loss_total
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn transfer_experiment() -> Outcome {
    let start = Instant::now();
    let data = DataConfig::default();
    let mut lines = Vec::new();
    let (mut acc_x, mut acc_b, mut wins) = (0.0, 0.0, 0);
    let (mut cka_x, mut cka_b, mut cka_x_raw) = (0.0, 0.0, 0.0);
    for seed in 0..4u64 {
        let spec = ToyLanguageSpec::new(50, data.swap_rate, data.noise_rate, data.variant_rate, seed).unwrap();
        let bundle = gen_bundle(
            TaskKind::Classification,
            BundleSizes {
                train: data.train_size,
                test: data.test_size,
            },
            &spec,
            seed,
        )
        .unwrap();
        let mut config = TrainConfig::for_task(TaskKind::Classification);
        config.seed = seed;
        let full = train(&config, &bundle, "xmixup").unwrap();
        let base = train(&config.baseline(), &bundle, "baseline").unwrap();
        let ax = evaluate(&full.model, &bundle.test).unwrap().metric;
        let ab = evaluate(&base.model, &bundle.test).unwrap().metric;
        let rx = discrepancy_report(&full.model, &bundle.test).unwrap();
        let rb = discrepancy_report(&base.model, &bundle.test).unwrap();
        let cx = rx.cka_between("mixup", "source", "target").unwrap();
        let cxr = rx.cka_between("raw", "source", "target").unwrap();
        let cb = rb.cka_between("raw", "source", "target").unwrap();
        wins += (ax > ab) as usize;
        acc_x += ax / 4.0;
        acc_b += ab / 4.0;
        cka_x += cx / 4.0;
        cka_x_raw += cxr / 4.0;
        cka_b += cb / 4.0;
        lines.push(format!(
            "      seed {seed}: acc X-Mixup {ax:.3} vs baseline {ab:.3}; CKA {cx:.3} (unmixed {cxr:.3}) vs {cb:.3}"
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = acc_x > acc_b && wins >= 3 && cka_x > cka_b && secs <= 600.0;
    let mut detail = format!(
        "variant_rate {}: mean acc {acc_x:.3} vs {acc_b:.3}, wins {wins}/4; mean CKA {cka_x:.3} vs {cka_b:.3} (X-Mixup unmixed encoder {cka_x_raw:.3}); {secs:.0}s",
        data.variant_rate
    );
    for l in lines {
        detail.push('\n');
        detail.push_str(&l);
    }
    outcome(pass, detail)
}

// 8 -------------------------------------------------------------------------

fn ablation_harness(oracle: &[EpochMetrics]) -> Outcome {
    let bundle = small_bundle();
    let rows = ablate(&small_config(), &bundle).unwrap();
    let complete = rows.len() == 8
        && rows.iter().all(|r| {
            r.metrics.len() == r.config.epochs && r.metrics.iter().all(|m| m.loss_total.is_finite()) && r.eval.count > 0
        });
    let no_mixup = rows.iter().find(|r| r.name == "w/o mixup").unwrap();
    let equal = same_numbers(&no_mixup.metrics, oracle);
    let summary: Vec<String> = rows.iter().map(|r| format!("{} {:.3}", r.name, r.eval.metric)).collect();
    outcome(
        complete && equal,
        format!("8 rows complete {complete}; w/o mixup equals baseline {equal}; {}", summary.join(", ")),
    )
}

// 9 -------------------------------------------------------------------------

fn analysis_fidelity() -> Outcome {
    let scores: BTreeMap<String, f64> = [
        ("en", 89.9),
        ("es", 87.7),
        ("de", 86.9),
        ("vi", 85.4),
        ("fr", 87.1),
        ("bg", 87.3),
        ("tr", 84.9),
        ("el", 86.8),
        ("ru", 85.1),
        ("ar", 85.2),
        ("hi", 83.5),
        ("sw", 81.2),
        ("ur", 79.6),
        ("th", 83.2),
        ("zh", 85.2),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let gap = transfer_gap(&scores, "en").unwrap();
    let gap_ok = (gap - 4.9).abs() <= 0.05;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut monotone_ok = true;
    for _ in 0..100 {
        let n = rng.random_range(2..30);
        let mut a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        a.sort_by(f64::total_cmp);
        a.dedup();
        if a.len() < 2 {
            continue;
        }
        let up: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0).collect();
        let down: Vec<f64> = a.iter().map(|v| (-v).exp()).collect();
        monotone_ok &= spearman(&a, &up).unwrap() == 1.0 && spearman(&a, &down).unwrap() == -1.0;
    }
    outcome(
        gap_ok && monotone_ok,
        format!("XNLI gap {gap:.4} (target 4.9 +/- 0.05: {gap_ok}); spearman exactly +/-1 on 100 monotone pairs: {monotone_ok}"),
    )
}

// 10 ------------------------------------------------------------------------

fn reproducibility() -> Outcome {
    let bundle = small_bundle();
    let mut config = small_config();
    config.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let a = train(&config, &bundle, "run").unwrap();
    let b = train(&config, &bundle, "run").unwrap();
    write_metrics_csv(dir.path().join("a.csv"), &a.metrics).unwrap();
    write_metrics_csv(dir.path().join("b.csv"), &b.metrics).unwrap();
    let bytes_equal =
        std::fs::read(dir.path().join("a.csv")).unwrap() == std::fs::read(dir.path().join("b.csv")).unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&path, &Checkpoint::from_output(&a)).unwrap();
    let loaded = load_checkpoint(&path).unwrap().model();
    let mut worst = 0.0f64;
    for ex in &bundle.test {
        let (_, p) = infer_classification(&a.model, &ex.tgt, Some(&ex.src)).unwrap();
        let (_, q) = infer_classification(&loaded, &ex.tgt, Some(&ex.src)).unwrap();
        let (rs, rt) = pair_representations(&a.model, &ex.src, &ex.tgt, true).unwrap();
        let (qs, qt) = pair_representations(&loaded, &ex.src, &ex.tgt, true).unwrap();
        for (x, y) in p.iter().chain(&rs).chain(&rt).zip(q.iter().chain(&qs).chain(&qt)) {
            worst = worst.max((x - y).abs());
        }
    }
    outcome(
        bytes_equal && worst <= 1e-12,
        format!("metric CSVs byte-identical {bytes_equal}; checkpoint round trip max output diff {worst:.1e}"),
    )
}

fn main() {
    let start = Instant::now();
    let oracle = plain_translate_train(&small_config().baseline(), &small_bundle());
    let checks: Vec<Check> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "CKA properties", Box::new(cka_properties)),
        (3, "mixup mechanics", Box::new(mixup_mechanics)),
        (4, "sampling schedule", Box::new(schedule)),
        (5, "loss recomposition", Box::new(loss_recomposition)),
        (6, "baseline equivalence", Box::new(|| baseline_equivalence(&oracle))),
        (7, "desk-scale transfer", Box::new(transfer_experiment)),
        (8, "ablation harness", Box::new(|| ablation_harness(&oracle))),
        (9, "analysis fidelity", Box::new(analysis_fidelity)),
        (10, "reproducibility", Box::new(reproducibility)),
    ];
    let mut unexpected = 0;
    for (id, name, check) in &checks {
        let o = check();
        let known = KNOWN_UNMET.iter().find(|(k, _)| k == id);
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2}. {name}: {}", o.detail);
        match (o.pass, known) {
            (false, Some((_, why))) => println!("       known limitation: {why}"),
            (false, None) => unexpected += 1,
            _ => {}
        }
    }
    println!("acceptance finished in {:.0}s", start.elapsed().as_secs_f64());
    if unexpected > 0 {
        eprintln!("{unexpected} acceptance criteria failed");
        std::process::exit(1);
    }
}
