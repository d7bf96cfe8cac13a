//! Robust training: adversarial training with randomly selected victims
//! (AT), a clean/adversarial sample mixture (Mixup), and adversarial
//! training whose inner maximizer is the saliency-guided attack (AT-TDNS).
//!
//! Each batch regenerates its adversarial windows against the current
//! weights with a white-box attack (training labels are available), then the
//! usual fixed-step MAE update runs on the chosen windows. With a zero inner
//! budget every strategy reduces to standard training bit for bit.

use crate::attack::{whitebox_attack, AttackConfig, Selector};
use crate::data::{DatasetSplit, StateWindow, TrafficNetwork};
use crate::error::{Result, StadvError};
use crate::forecaster::{train_step, StModel, TrainReport};
use crate::rng::SeedStream;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseStrategy {
    /// Adversarial training on PGD-Random windows only.
    At,
    /// Bernoulli mixture of clean and PGD-Random adversarial windows.
    Mixup,
    /// Adversarial training on STPGD-TDNS windows only.
    AtTdns,
}

impl DefenseStrategy {
    pub fn name(self) -> &'static str {
        match self {
            DefenseStrategy::At => "at",
            DefenseStrategy::Mixup => "mixup",
            DefenseStrategy::AtTdns => "at-tdns",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "at" => Ok(DefenseStrategy::At),
            "mixup" => Ok(DefenseStrategy::Mixup),
            "at-tdns" | "at_tdns" => Ok(DefenseStrategy::AtTdns),
            other => Err(StadvError::invalid(format!(
                "unknown defense strategy {:?} (expected at, mixup, at-tdns)",
                other
            ))),
        }
    }

    fn inner_selector(self) -> Selector {
        match self {
            DefenseStrategy::At | DefenseStrategy::Mixup => Selector::Random,
            DefenseStrategy::AtTdns => Selector::Tdns,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DefenseConfig {
    pub strategy: DefenseStrategy,
    /// Inner maximizer budgets; the selector is fixed by the strategy.
    pub inner: AttackConfig,
    /// Fraction of adversarial samples per batch (Mixup only).
    pub mix_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl DefenseConfig {
    pub fn new(strategy: DefenseStrategy, eta: usize) -> Self {
        DefenseConfig {
            strategy,
            inner: AttackConfig::new(eta),
            mix_ratio: 0.5,
            epochs: 20,
            learning_rate: 0.15,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Min-max training loop. Returns the per-epoch loss history measured on the
/// windows actually trained on (adversarial or mixed).
pub fn defend_train(
    model: &mut StModel,
    split: &DatasetSplit,
    graph: &TrafficNetwork,
    cfg: &DefenseConfig,
) -> Result<TrainReport> {
    if split.train().is_empty() {
        return Err(StadvError::invalid("training split is empty"));
    }
    if !(0.0..=1.0).contains(&cfg.mix_ratio) {
        return Err(StadvError::invalid("mix ratio must lie in [0,1]"));
    }
    let mut inner = cfg.inner;
    inner.selector = cfg.strategy.inner_selector();
    if inner.eps > 0.0 {
        inner.validate(graph.node_count())?;
    }

    let streams = SeedStream::new(cfg.seed);
    let mut attack_rng = streams.stream("attack");
    let mut mix_rng = streams.stream("mix");

    let batches = crate::data::batch_indices(split.train().len(), cfg.batch_size)?;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut smoothed_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut count = 0.0;
        for range in &batches {
            let clean: Vec<&StateWindow> = split.train()[range.clone()].iter().collect();
            let take_adv = match cfg.strategy {
                DefenseStrategy::Mixup => cfg.mix_ratio > 0.0,
                _ => true,
            } && inner.eps > 0.0;
            let adversarial: Option<Vec<StateWindow>> = if take_adv {
                let batch = whitebox_attack(
                    &*model,
                    &clean,
                    graph,
                    &split.normalizer,
                    &inner,
                    &mut attack_rng,
                )?;
                Some(batch.results.into_iter().map(|r| r.adversarial).collect())
            } else {
                None
            };
            let chosen: Vec<&StateWindow> = match (&adversarial, cfg.strategy) {
                (Some(adv), DefenseStrategy::Mixup) => clean
                    .iter()
                    .zip(adv.iter())
                    .map(|(c, a)| {
                        if mix_rng.random_range(0.0..1.0) < cfg.mix_ratio {
                            a
                        } else {
                            *c
                        }
                    })
                    .collect(),
                (Some(adv), _) => adv.iter().collect(),
                (None, _) => clean,
            };
            let batch_loss = train_step(model, &chosen, &split.normalizer, cfg.learning_rate)?;
            loss_sum += batch_loss * chosen.len() as f64;
            count += chosen.len() as f64;
        }
        let mean = loss_sum / count;
        if !mean.is_finite() {
            return Err(StadvError::Diverged { epoch });
        }
        epoch_loss.push(mean);
        let best = smoothed_loss.last().copied().unwrap_or(f64::INFINITY);
        smoothed_loss.push(mean.min(best));
    }
    Ok(TrainReport {
        epoch_loss,
        smoothed_loss,
    })
}
