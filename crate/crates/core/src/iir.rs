//! Iterative initialization and retraining over a descending timestep schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{spike_rates_from_tally, PruneMask, SpikeRateReport};
use crate::ann::AnnParams;
use crate::bptt::{train_snn, SnnEpochMetrics, SnnTrainConfig};
use crate::checkpoint::{RngState, StageCheckpoint};
use crate::conversion::{convert, ConversionConfig, SnnParams};
use crate::data::{Dataset, DatasetHandle};
use crate::error::{Error, Result};
use crate::snn::evaluate_snn;

/// Strictly decreasing timestep stages ending at a value >= 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IirSchedule {
    pub stages: Vec<usize>,
    pub epochs_per_stage: usize,
}

impl IirSchedule {
    /// `start, start - step, ...` while the value stays >= 1.
    pub fn stepped(start: usize, step: usize, epochs_per_stage: usize) -> Result<Self> {
        if start < 1 || step < 1 {
            return Err(Error::Config(format!(
                "schedule start {start} and step {step} must be >= 1"
            )));
        }
        let stages = (0..)
            .map(|i| start as i64 - (i * step) as i64)
            .take_while(|&t| t >= 1)
            .map(|t| t as usize)
            .collect();
        IirSchedule::explicit(stages, epochs_per_stage)
    }

    pub fn explicit(stages: Vec<usize>, epochs_per_stage: usize) -> Result<Self> {
        let s = IirSchedule {
            stages,
            epochs_per_stage,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parses a comma-separated stage list such as `"5,3,1"`.
    pub fn parse(list: &str, epochs_per_stage: usize) -> Result<Self> {
        let stages = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad stage {s:?} in {list:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        IirSchedule::explicit(stages, epochs_per_stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        if self.stages.iter().any(|&t| t < 1) || self.stages.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config(format!(
                "stages {:?} must be strictly decreasing and >= 1",
                self.stages
            )));
        }
        if self.epochs_per_stage == 0 {
            return Err(Error::Config("epochs per stage must be positive".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> usize {
        self.stages[0]
    }
}

/// Spike statistics of parameters evaluated at some timestep count, without training.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub timesteps: usize,
    pub rates: SpikeRateReport,
    /// Spikes reaching the classifier over the whole batch.
    pub classifier_input_spikes: u64,
    /// False when the classifier receives no spikes at all.
    pub trainable: bool,
    pub accuracy: f64,
}

pub fn direct_transition_probe(params: &SnnParams, timesteps: usize, batch: &Dataset) -> Result<ProbeReport> {
    let eval = evaluate_snn(params, batch, timesteps)?;
    let last = eval.tally.spikes.last().copied().unwrap_or(0);
    // A network without hidden layers feeds the analog input straight to the classifier.
    let trainable = eval.tally.spikes.is_empty() || last > 0;
    let rates = if eval.tally.neurons.is_empty() {
        SpikeRateReport {
            per_layer: Vec::new(),
            mean: 0.0,
        }
    } else {
        spike_rates_from_tally(&eval.tally)?
    };
    Ok(ProbeReport {
        timesteps,
        rates,
        classifier_input_spikes: last,
        trainable,
        accuracy: eval.accuracy,
    })
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: StageCheckpoint,
    pub metrics: Vec<SnnEpochMetrics>,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IirConfig {
    pub conversion: ConversionConfig,
    pub train: SnnTrainConfig,
    /// Samples of the training split used by the trainability probe.
    pub probe_samples: usize,
}

impl Default for IirConfig {
    fn default() -> Self {
        IirConfig {
            conversion: ConversionConfig::default(),
            train: SnnTrainConfig::default(),
            probe_samples: 256,
        }
    }
}

/// Converts `ann` with calibration data drawn from the head of the training split.
pub fn convert_for_run(ann: &AnnParams, cfg: &ConversionConfig, data: &DatasetHandle) -> Result<SnnParams> {
    let n = cfg.calibration_samples.min(data.train.len());
    convert(ann, &data.train.head(n).images, cfg)
}

/// Converts, then trains every stage of `schedule` in order, each stage
/// starting from the previous stage's trained parameters. `on_stage` sees
/// every finished stage before the next starts, so a later failure keeps
/// the earlier stages.
pub fn run_iir(
    ann: &AnnParams,
    schedule: &IirSchedule,
    cfg: &IirConfig,
    data: &DatasetHandle,
    prune: Option<&PruneMask>,
    on_stage: &mut dyn FnMut(&StageOutcome) -> Result<()>,
) -> Result<Vec<StageOutcome>> {
    schedule.validate()?;
    let mut conv = cfg.conversion.clone();
    conv.timesteps = schedule.start();
    let params = convert_for_run(ann, &conv, data)?;
    let rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    run_stages(params, 0, rng, schedule, cfg, data, prune, on_stage)
}

/// Continues a run from a saved stage: trains the stages after it.
pub fn resume_iir(
    from: &StageCheckpoint,
    schedule: &IirSchedule,
    cfg: &IirConfig,
    data: &DatasetHandle,
    prune: Option<&PruneMask>,
    on_stage: &mut dyn FnMut(&StageOutcome) -> Result<()>,
) -> Result<Vec<StageOutcome>> {
    schedule.validate()?;
    if from.stages != schedule.stages {
        return Err(Error::Config(format!(
            "checkpoint belongs to schedule {:?}, not {:?}",
            from.stages, schedule.stages
        )));
    }
    let rng = from.rng.restore()?;
    run_stages(
        from.params.clone(),
        from.stage_index + 1,
        rng,
        schedule,
        cfg,
        data,
        prune,
        on_stage,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_stages(
    mut params: SnnParams,
    first_stage: usize,
    mut rng: ChaCha8Rng,
    schedule: &IirSchedule,
    cfg: &IirConfig,
    data: &DatasetHandle,
    prune: Option<&PruneMask>,
    on_stage: &mut dyn FnMut(&StageOutcome) -> Result<()>,
) -> Result<Vec<StageOutcome>> {
    let mut train_cfg = cfg.train.clone();
    train_cfg.epochs = schedule.epochs_per_stage;
    let probe_set = data.train.head(cfg.probe_samples.min(data.train.len()));
    let mut outcomes = Vec::new();
    for (index, &t) in schedule.stages.iter().enumerate().skip(first_stage) {
        let probe = direct_transition_probe(&params, t, &probe_set)?;
        if !probe.trainable {
            return Err(Error::Untrainable {
                timesteps: t,
                reason: format!(
                    "no spikes reach the classifier on {} probe samples (layer rates {:?})",
                    probe_set.len(),
                    probe.rates.per_layer
                ),
            });
        }
        log::info!("iir stage T={t}: probe rates {:?}", probe.rates.per_layer);
        let trained = train_snn(params, &train_cfg, data, t, prune, &mut rng)?;
        params = trained.params;
        let best = &trained.metrics[trained.best_epoch];
        let test = evaluate_snn(&params, &data.test, t)?;
        let outcome = StageOutcome {
            checkpoint: StageCheckpoint {
                params: params.clone(),
                timesteps: t,
                stages: schedule.stages.clone(),
                stage_index: index,
                epochs: train_cfg.epochs,
                best_val_acc: (!best.val_acc.is_nan()).then_some(best.val_acc),
                spike_rates: test.tally.rates(),
                rng: RngState::capture(&rng),
            },
            metrics: trained.metrics,
            test_acc: test.accuracy,
        };
        log::info!("iir stage T={t}: test accuracy {:.4}", outcome.test_acc);
        on_stage(&outcome)?;
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stepped_schedules() {
        assert_eq!(IirSchedule::stepped(5, 1, 1).unwrap().stages, vec![5, 4, 3, 2, 1]);
        assert_eq!(IirSchedule::stepped(5, 2, 1).unwrap().stages, vec![5, 3, 1]);
        assert_eq!(IirSchedule::stepped(1, 3, 1).unwrap().stages, vec![1]);
        assert_eq!(IirSchedule::stepped(6, 4, 1).unwrap().stages, vec![6, 2]);
    }

    #[test]
    fn parse_and_reject() {
        assert_eq!(IirSchedule::parse("5, 3,1", 2).unwrap().stages, vec![5, 3, 1]);
        assert!(IirSchedule::parse("3,3", 1).is_err());
        assert!(IirSchedule::parse("3,0", 1).is_err());
        assert!(IirSchedule::parse("1,3", 1).is_err());
        assert!(IirSchedule::parse("a", 1).is_err());
    }
}
