//! End-to-end attack evaluation: batch the test windows, run the configured
//! setting/method/selector, and score the outcome in raw speed units.

use crate::attack::{
    blackbox_attack, greybox_attack, whitebox_attack, AttackConfig, AttackResult, Setting,
};
use crate::data::{DatasetSplit, StateWindow, TrafficNetwork};
use crate::error::{Result, StadvError};
use crate::forecaster::{denormalize_forecast, StModel};
use crate::metrics::{g_mae, metrics_report, MetricsReport};
use crate::rng::SeedStream;
use crate::saliency::SaliencyVector;
use crate::tensor::Tensor;

/// Outcome of one attack evaluation over the test split.
#[derive(Debug, Clone)]
pub struct AttackEvaluation {
    pub report: MetricsReport,
    pub clean_g_mae: f64,
    /// Per-window results in test order (first `evaluated` windows).
    pub results: Vec<AttackResult>,
    /// Saliency of the first TDNS batch, when the selector was TDNS.
    pub saliency: Option<SaliencyVector>,
    pub evaluated: usize,
}

/// Evaluate one (setting, method, selector) combination on the test split.
///
/// TDNS masks are fused per batch of `batch_size` windows; the Random
/// selector draws one mask per batch; topology selectors are global. For
/// grey- and black-box settings each test window is paired with the window
/// `T` steps earlier, so the pipeline never reads the current inputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_attack(
    target: &StModel,
    surrogate: Option<&StModel>,
    split: &DatasetSplit,
    graph: &TrafficNetwork,
    setting: Setting,
    cfg: &AttackConfig,
    batch_size: usize,
    max_windows: Option<usize>,
) -> Result<AttackEvaluation> {
    cfg.validate(graph.node_count())?;
    let t_in = target.config().t_in;
    let test = split.test();
    let limit = max_windows.unwrap_or(test.len()).min(test.len());
    if limit == 0 {
        return Err(StadvError::invalid("no test windows to evaluate"));
    }
    if matches!(setting, Setting::Grey | Setting::Black) && split.test_start() < t_in {
        return Err(StadvError::invalid(
            "test split starts too early to pair previous windows",
        ));
    }
    if matches!(setting, Setting::Black) && surrogate.is_none() {
        return Err(StadvError::invalid(
            "black-box evaluation needs a surrogate model",
        ));
    }

    let streams = SeedStream::new(cfg.seed);
    let mut rng = streams.stream("attack");
    let mut delta_rng = streams.stream("delta");

    let mut results: Vec<AttackResult> = Vec::with_capacity(limit);
    let mut saliency = None;
    for range in crate::data::batch_indices(limit, batch_size)? {
        let windows: Vec<&StateWindow> = test[range.clone()].iter().collect();
        let batch = match setting {
            Setting::White => whitebox_attack(
                target,
                &windows,
                graph,
                &split.normalizer,
                cfg,
                &mut rng,
            )?,
            Setting::Grey => {
                let pairs: Vec<(&StateWindow, &StateWindow)> = range
                    .clone()
                    .map(|k| {
                        let global = split.test_start() + k;
                        (&split.all()[global - t_in], &test[k])
                    })
                    .collect();
                greybox_attack(
                    target, target, target, &pairs, graph, cfg, &mut rng, &mut delta_rng,
                )?
            }
            Setting::Black => {
                let pairs: Vec<(&StateWindow, &StateWindow)> = range
                    .clone()
                    .map(|k| {
                        let global = split.test_start() + k;
                        (&split.all()[global - t_in], &test[k])
                    })
                    .collect();
                blackbox_attack(
                    surrogate.unwrap(),
                    &pairs,
                    graph,
                    cfg,
                    &mut rng,
                    &mut delta_rng,
                )?
            }
        };
        if saliency.is_none() {
            saliency = batch.saliency;
        }
        results.extend(batch.results);
    }

    // Score against the target model in raw units.
    let norm = &split.normalizer;
    let mut adv_preds = Vec::with_capacity(limit);
    let mut clean_preds = Vec::with_capacity(limit);
    let mut labels: Vec<Tensor> = Vec::with_capacity(limit);
    for (res, window) in results.iter().zip(&test[..limit]) {
        adv_preds.push(denormalize_forecast(
            &target.predict(&res.adversarial)?,
            norm,
        ));
        clean_preds.push(denormalize_forecast(&target.predict(window)?, norm));
        labels.push(window.labels.clone());
    }
    let clean_g_mae = g_mae(&clean_preds, &labels)?;
    let report = metrics_report(&adv_preds, &clean_preds, &labels, Some(clean_g_mae))?;
    Ok(AttackEvaluation {
        report,
        clean_g_mae,
        results,
        saliency,
        evaluated: limit,
    })
}

/// Clean-model G-MAE over the first `max_windows` test windows.
pub fn clean_g_mae(
    model: &StModel,
    split: &DatasetSplit,
    max_windows: Option<usize>,
) -> Result<f64> {
    let test = split.test();
    let limit = max_windows.unwrap_or(test.len()).min(test.len());
    if limit == 0 {
        return Err(StadvError::invalid("no test windows to evaluate"));
    }
    let norm = &split.normalizer;
    let mut preds = Vec::with_capacity(limit);
    let mut labels = Vec::with_capacity(limit);
    for window in &test[..limit] {
        preds.push(denormalize_forecast(&model.predict(window)?, norm));
        labels.push(window.labels.clone());
    }
    g_mae(&preds, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{check_result_invariants, Method, Selector};
    use crate::data::{chronological_split, generate_synthetic, make_windows, normalize};
    use crate::forecaster::ModelConfig;
    use crate::tape::Activation;

    fn world() -> (TrafficNetwork, DatasetSplit, StModel) {
        let (graph, series) = generate_synthetic(10, 200, 8).unwrap();
        let (_, norm) = normalize(&series).unwrap();
        let windows = make_windows(&series, &graph, &norm, 6, 6).unwrap();
        let split = chronological_split(windows, norm).unwrap();
        let cfg = ModelConfig {
            nodes: 10,
            t_in: 6,
            horizon: 6,
            features: 1,
            temporal_layers: 1,
            temporal_hidden: 4,
            conv_layers: 1,
            hidden: 8,
            activation: Activation::Relu,
        };
        let mut rng = SeedStream::new(8).stream("init");
        let model = StModel::init(cfg, &graph, &mut rng).unwrap();
        (graph, split, model)
    }

    #[test]
    fn every_setting_produces_valid_results() {
        let (graph, split, model) = world();
        let cfg = AttackConfig {
            selector: Selector::Tdns,
            method: Method::Stpgd,
            ..AttackConfig::new(1)
        };
        for setting in Setting::ALL {
            let eval = evaluate_attack(
                &model,
                Some(&model),
                &split,
                &graph,
                setting,
                &cfg,
                16,
                Some(12),
            )
            .unwrap();
            assert_eq!(eval.evaluated, 12);
            assert_eq!(eval.results.len(), 12);
            for (res, window) in eval.results.iter().zip(split.test()) {
                check_result_invariants(res, window, &cfg).unwrap();
            }
            assert!(eval.report.g_mae >= 0.0);
            assert!(eval.report.degradation_pct.is_some());
        }
    }

    #[test]
    fn zero_eps_means_zero_degradation_and_local_error() {
        let (graph, split, model) = world();
        for method in Method::ALL {
            for selector in Selector::ALL {
                let cfg = AttackConfig {
                    eps: 0.0,
                    selector,
                    method,
                    ..AttackConfig::new(1)
                };
                let eval = evaluate_attack(
                    &model,
                    Some(&model),
                    &split,
                    &graph,
                    Setting::White,
                    &cfg,
                    16,
                    Some(8),
                )
                .unwrap();
                assert_eq!(eval.report.l_mae, 0.0);
                assert_eq!(eval.report.degradation_pct, Some(0.0));
            }
        }
    }

    #[test]
    fn black_box_requires_surrogate() {
        let (graph, split, model) = world();
        let cfg = AttackConfig::new(1);
        assert!(evaluate_attack(
            &model,
            None,
            &split,
            &graph,
            Setting::Black,
            &cfg,
            16,
            Some(4)
        )
        .is_err());
    }
}
