use serde::{Deserialize, Serialize};

use super::infer::{evaluate, EvalReport};
use super::train::{train, EpochMetrics};
use super::TrainConfig;
use crate::corpus::DatasetBundle;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub run_id: String,
    pub config: TrainConfig,
    pub metrics: Vec<EpochMetrics>,
    pub eval: EvalReport,
}

/// The eight ablation variants of `base`, as `(name, run_id, config)`.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(String, String, TrainConfig)> {
    let variant = |name: &str, id: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), id.to_string(), c)
    };
    vec![
        variant("full", "full", &|_| {}),
        variant("w/o mixup", "no_mixup", &|c| {
            c.toggles.use_mixup = false;
            c.toggles.mixup_inference = false;
        }),
        variant("w/o mixup inference", "no_mixup_inference", &|c| c.toggles.mixup_inference = false),
        variant("w/o scheduled sampling", "no_scheduled_sampling", &|c| {
            c.toggles.scheduled_sampling = false
        }),
        variant("w/o consistency", "no_consistency", &|c| {
            c.toggles.mse_consistency = false;
            c.toggles.kl_consistency = false;
        }),
        variant("lambda=lambda0", "constant_lambda", &|c| c.toggles.constant_lambda = true),
        variant("w/o MSE", "no_mse", &|c| c.toggles.mse_consistency = false),
        variant("w/o KL", "no_kl", &|c| c.toggles.kl_consistency = false),
    ]
}

fn run(config: &TrainConfig, bundle: &DatasetBundle, run_id: &str) -> Result<(Vec<EpochMetrics>, EvalReport)> {
    if bundle.test.is_empty() {
        return Err(Error::invalid("ablation and sweep runs need test examples"));
    }
    let out = train(config, bundle, run_id)?;
    let eval = evaluate(&out.model, &bundle.test)?;
    Ok((out.metrics, eval))
}

/// Trains and evaluates every ablation variant with the same seed.
pub fn ablate(base: &TrainConfig, bundle: &DatasetBundle) -> Result<Vec<AblationRow>> {
    ablation_rows(base)
        .into_iter()
        .map(|(name, run_id, config)| {
            log::info!("ablation row `{name}`");
            let (metrics, eval) = run(&config, bundle, &run_id)?;
            Ok(AblationRow {
                name,
                run_id,
                config,
                metrics,
                eval,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// `None` marks the translate-train baseline row.
    pub mix_layer: Option<usize>,
    pub run_id: String,
    pub metrics: Vec<EpochMetrics>,
    pub eval: EvalReport,
}

/// One run per mix layer plus the no-mixup baseline, all with the same seed.
pub fn sweep_layer(base: &TrainConfig, layers: &[usize], bundle: &DatasetBundle) -> Result<Vec<SweepRow>> {
    for &l in layers {
        if l == 0 || l > base.encoder.num_layers {
            return Err(Error::invalid(format!("layer {l} outside [1, {}]", base.encoder.num_layers)));
        }
    }
    let mut rows = Vec::with_capacity(layers.len() + 1);
    for &l in layers {
        let mut c = base.clone();
        c.mixup.mix_layer = Some(l);
        c.toggles.use_mixup = true;
        let run_id = format!("layer{l}");
        let (metrics, eval) = run(&c, bundle, &run_id)?;
        rows.push(SweepRow {
            mix_layer: Some(l),
            run_id,
            metrics,
            eval,
        });
    }
    let (metrics, eval) = run(&base.baseline(), bundle, "baseline")?;
    rows.push(SweepRow {
        mix_layer: None,
        run_id: "baseline".to_string(),
        metrics,
        eval,
    });
    Ok(rows)
}
