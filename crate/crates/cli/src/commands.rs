//! One function per subcommand. Artifacts live under `checkpoints/`,
//! `metrics/` and `reports/` of the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use iirsnn::analysis::magnitude_prune;
use iirsnn::checkpoint::{load_ann_checkpoint, save_ann_checkpoint, AnnCheckpoint, RngState};
use iirsnn::iir::convert_for_run;
use iirsnn::metrics::{
    ann_metrics_csv, memory_csv, ops_csv, snn_metrics_csv, spike_rate_table_csv, stage_summary_csv, write_csv,
};
use iirsnn::{
    direct_transition_probe, energy_ratio_alpha, evaluate_ann, evaluate_snn, infer, load_checkpoint,
    memory_access_count, run_iir, save_checkpoint, train_ann, train_snn, DatasetHandle, EnergyModel, IirConfig,
    OpsCount, StageCheckpoint,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Paths inside one run directory.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "metrics", "reports"] {
            std::fs::create_dir_all(root.join(sub)).with_context(|| format!("creating {}", root.display()))?;
        }
        Ok(Layout {
            root: root.to_path_buf(),
        })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn metrics(&self, name: &str) -> PathBuf {
        self.root.join("metrics").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn ann(&self) -> PathBuf {
        self.checkpoint("ann.ckpt")
    }

    pub fn converted(&self) -> PathBuf {
        self.checkpoint("converted.ckpt")
    }

    pub fn stage(&self, stages: &[usize], t: usize) -> PathBuf {
        self.checkpoint(&format!("iir_{}_T{t}.ckpt", schedule_tag(stages)))
    }
}

pub fn schedule_tag(stages: &[usize]) -> String {
    stages.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
}

fn require(path: &Path, producer: &str) -> Result<()> {
    if !path.is_file() {
        bail!("missing dependency {}: run `iirsnn {producer}` first", path.display());
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn load_snn(path: &Path, producer: &str) -> Result<StageCheckpoint> {
    require(path, producer)?;
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn iir_config(cfg: &RunConfig) -> IirConfig {
    IirConfig {
        conversion: cfg.conversion.clone(),
        train: cfg.snn.clone(),
        probe_samples: cfg.iir.probe_samples,
    }
}

/// The resolved configuration is stored next to the artifacts it produced.
fn record_config(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    std::fs::write(layout.root.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

struct Run {
    cfg: RunConfig,
    layout: Layout,
    data: DatasetHandle,
}

fn open(cfg: &RunConfig) -> Result<Run> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out)?;
    record_config(cfg, &layout)?;
    let data = cfg.load_dataset()?;
    Ok(Run {
        cfg: cfg.clone(),
        layout,
        data,
    })
}

pub fn train_ann_cmd(cfg: &RunConfig) -> Result<()> {
    let cx = open(cfg)?;
    let spec = cx.cfg.network_spec(&cx.data)?;
    let trained = train_ann(&spec, &cx.cfg.ann, &cx.data)?;
    let test = evaluate_ann(&trained.params, &cx.data.test)?;
    let val = trained.metrics[trained.best_epoch].val_acc;
    save_ann_checkpoint(
        &cx.layout.ann(),
        &AnnCheckpoint {
            params: trained.params,
            best_epoch: trained.best_epoch,
            best_val_acc: (!val.is_nan()).then_some(val),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(cx.cfg.ann.seed)),
        },
    )?;
    write_csv(&cx.layout.metrics("ann_train.csv"), &ann_metrics_csv(&trained.metrics))?;
    println!(
        "ann {}: best epoch {}, test accuracy {}",
        spec.name,
        trained.best_epoch,
        pct(test)
    );
    Ok(())
}

pub fn convert_cmd(cfg: &RunConfig, timesteps: Option<usize>) -> Result<()> {
    let cx = open(cfg)?;
    let ann_path = cx.layout.ann();
    require(&ann_path, "train-ann")?;
    let ann = load_ann_checkpoint(&ann_path)?.params;
    let mut conv = cx.cfg.conversion.clone();
    conv.timesteps = timesteps.unwrap_or(cx.cfg.schedule()?.start());
    let params = convert_for_run(&ann, &conv, &cx.data)?;
    let eval = evaluate_snn(&params, &cx.data.test, conv.timesteps)?;
    let mut report = String::from("layer,threshold,leak\n");
    for (l, (v, lam)) in params.thresholds.iter().zip(&params.leaks).enumerate() {
        let _ = writeln!(report, "{l},{v},{lam}");
    }
    save_checkpoint(
        &cx.layout.converted(),
        &StageCheckpoint {
            params,
            timesteps: conv.timesteps,
            stages: vec![conv.timesteps],
            stage_index: 0,
            epochs: 0,
            best_val_acc: None,
            spike_rates: eval.tally.rates(),
            rng: RngState::capture(&ChaCha8Rng::seed_from_u64(cx.cfg.snn.seed)),
        },
    )?;
    write_csv(&cx.layout.report("conversion.csv"), &report)?;
    println!(
        "converted at T={}: test accuracy {}",
        conv.timesteps,
        pct(eval.accuracy)
    );
    Ok(())
}

pub fn train_snn_cmd(cfg: &RunConfig, timesteps: Option<usize>) -> Result<()> {
    let cx = open(cfg)?;
    let from = load_snn(&cx.layout.converted(), "convert")?;
    let t = timesteps.unwrap_or(from.timesteps);
    let mut rng = from.rng.restore()?;
    let trained = train_snn(from.params, &cx.cfg.snn, &cx.data, t, None, &mut rng)?;
    let test = evaluate_snn(&trained.params, &cx.data.test, t)?;
    let val = trained.metrics[trained.best_epoch].val_acc;
    save_checkpoint(
        &cx.layout.checkpoint(&format!("snn_T{t}.ckpt")),
        &StageCheckpoint {
            params: trained.params,
            timesteps: t,
            stages: vec![t],
            stage_index: 0,
            epochs: cx.cfg.snn.epochs,
            best_val_acc: (!val.is_nan()).then_some(val),
            spike_rates: test.tally.rates(),
            rng: RngState::capture(&rng),
        },
    )?;
    write_csv(
        &cx.layout.metrics(&format!("snn_T{t}.csv")),
        &snn_metrics_csv(&trained.metrics),
    )?;
    println!(
        "snn T={t}: best epoch {}, test accuracy {}",
        trained.best_epoch,
        pct(test.accuracy)
    );
    Ok(())
}

pub fn iir_cmd(cfg: &RunConfig) -> Result<()> {
    let cx = open(cfg)?;
    let ann_path = cx.layout.ann();
    require(&ann_path, "train-ann")?;
    let ann = load_ann_checkpoint(&ann_path)?.params;
    let schedule = cx.cfg.schedule()?;
    let tag = schedule_tag(&schedule.stages);
    let layout = &cx.layout;
    let stages = run_iir(&ann, &schedule, &iir_config(&cx.cfg), &cx.data, None, &mut |s| {
        let t = s.checkpoint.timesteps;
        save_checkpoint(&layout.stage(&schedule.stages, t), &s.checkpoint)?;
        write_csv(
            &layout.metrics(&format!("iir_{tag}_T{t}.csv")),
            &snn_metrics_csv(&s.metrics),
        )?;
        println!("iir stage T={t}: test accuracy {}", pct(s.test_acc));
        Ok(())
    })?;
    write_csv(
        &layout.metrics(&format!("iir_{tag}_stages.csv")),
        &stage_summary_csv(&stages),
    )?;
    Ok(())
}

/// Evaluates a checkpoint at `timesteps` without training, reporting spike propagation.
pub fn probe_cmd(cfg: &RunConfig, timesteps: Option<usize>, checkpoint: Option<PathBuf>) -> Result<()> {
    let cx = open(cfg)?;
    let stages = cx.cfg.iir.stages.clone();
    let path = checkpoint.unwrap_or_else(|| cx.layout.stage(&stages, stages[0]));
    let ck = load_snn(&path, "iir")?;
    let t = timesteps.unwrap_or(1);
    let set = cx.data.test.head(cx.cfg.iir.probe_samples.min(cx.data.test.len()));
    let report = direct_transition_probe(&ck.params, t, &set)?;
    let rates = report
        .rates
        .per_layer
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let csv = format!(
        "timesteps,source_timesteps,accuracy,classifier_input_spikes,trainable,mean_spike_rate,spike_rates\n\
         {t},{},{},{},{},{},{rates}\n",
        ck.timesteps, report.accuracy, report.classifier_input_spikes, report.trainable, report.rates.mean
    );
    write_csv(&cx.layout.report(&format!("probe_{}_at_T{t}.csv", stem(&path))), &csv)?;
    println!(
        "probe T{t}_{}: accuracy {}, classifier input spikes {}, trainable {}",
        ck.timesteps,
        pct(report.accuracy),
        report.classifier_input_spikes,
        report.trainable
    );
    Ok(())
}

/// Spike rates, operation counts, energy ratio and memory traffic per checkpoint.
pub fn analyze_cmd(cfg: &RunConfig, checkpoints: Vec<PathBuf>) -> Result<()> {
    let cx = open(cfg)?;
    let paths = if checkpoints.is_empty() {
        let stages = &cx.cfg.iir.stages;
        let found: Vec<PathBuf> = stages
            .iter()
            .map(|&t| cx.layout.stage(stages, t))
            .filter(|p| p.is_file())
            .collect();
        ensure!(
            !found.is_empty(),
            "no stage checkpoints for schedule {stages:?}: run `iirsnn iir` first"
        );
        found
    } else {
        checkpoints
    };
    let model = EnergyModel::default();
    let mut table = Vec::new();
    let mut memory = Vec::new();
    let mut energy = String::from("run,timesteps,accuracy,mean_spike_rate,alpha\n");
    for path in &paths {
        let ck = load_snn(path, "iir")?;
        let name = stem(path);
        let eval = evaluate_snn(&ck.params, &cx.data.test, ck.timesteps)?;
        let ops = OpsCount::from_tally(&ck.params.spec, &eval.tally)?;
        let alpha = energy_ratio_alpha(&ops, &model)?;
        let rates = eval.tally.rates();
        let mean = rates.iter().sum::<f64>() / rates.len().max(1) as f64;
        write_csv(&cx.layout.report(&format!("ops_{name}.csv")), &ops_csv(&ops))?;
        let _ = writeln!(energy, "{name},{},{},{mean},{alpha}", ck.timesteps, eval.accuracy);
        memory.push(memory_access_count(&ck.params.spec, ck.timesteps)?);
        table.push((name.clone(), rates));
        println!(
            "{name}: T={} accuracy {} mean spike rate {mean:.4} alpha {alpha:.3}",
            ck.timesteps,
            pct(eval.accuracy)
        );
    }
    write_csv(&cx.layout.report("spike_rates.csv"), &spike_rate_table_csv(&table))?;
    write_csv(&cx.layout.report("energy.csv"), &energy)?;
    write_csv(&cx.layout.report("memory.csv"), &memory_csv(&memory))?;
    Ok(())
}

fn last_stage(cx: &Run) -> PathBuf {
    let stages = &cx.cfg.iir.stages;
    cx.layout.stage(stages, *stages.last().expect("validated schedule"))
}

pub fn prune_cmd(cfg: &RunConfig, keep: Option<f64>, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(k) = keep {
        cfg.prune.keep_fraction = k;
    }
    let cx = open(&cfg)?;
    let path = checkpoint.unwrap_or_else(|| last_stage(&cx));
    let ck = load_snn(&path, "iir")?;
    let t = ck.timesteps;
    let before = evaluate_snn(&ck.params, &cx.data.test, t)?.accuracy;
    let keep = cx.cfg.prune.keep_fraction;
    let (mask, mut params) = magnitude_prune(&ck.params, keep)?;
    let mut rng = ck.rng.restore()?;
    let name = format!("pruned_{}_k{keep}", stem(&path));
    let mut best_val_acc = None;
    if cx.cfg.prune.finetune_epochs > 0 {
        let mut train = cx.cfg.snn.clone();
        train.epochs = cx.cfg.prune.finetune_epochs;
        let tuned = train_snn(params, &train, &cx.data, t, Some(&mask), &mut rng)?;
        let val = tuned.metrics[tuned.best_epoch].val_acc;
        best_val_acc = (!val.is_nan()).then_some(val);
        write_csv(
            &cx.layout.metrics(&format!("{name}.csv")),
            &snn_metrics_csv(&tuned.metrics),
        )?;
        params = tuned.params;
    }
    let after = evaluate_snn(&params, &cx.data.test, t)?;
    save_checkpoint(
        &cx.layout.checkpoint(&format!("{name}.ckpt")),
        &StageCheckpoint {
            params,
            timesteps: t,
            stages: vec![t],
            stage_index: 0,
            epochs: cx.cfg.prune.finetune_epochs,
            best_val_acc,
            spike_rates: after.tally.rates(),
            rng: RngState::capture(&rng),
        },
    )?;
    let csv = format!(
        "keep_fraction,retained,total,timesteps,acc_before,acc_after\n{keep},{},{},{t},{before},{}\n",
        mask.retained(),
        mask.total(),
        after.accuracy
    );
    write_csv(&cx.layout.report(&format!("{name}.csv")), &csv)?;
    println!(
        "pruned to {} of {} weights: T={t} accuracy {} -> {}",
        mask.retained(),
        mask.total(),
        pct(before),
        pct(after.accuracy)
    );
    Ok(())
}

/// Predicts the test split with the timestep count stored in the checkpoint.
pub fn infer_cmd(cfg: &RunConfig, checkpoint: Option<PathBuf>) -> Result<()> {
    let cx = open(cfg)?;
    let path = checkpoint.unwrap_or_else(|| last_stage(&cx));
    let ck = load_snn(&path, "iir")?;
    let mut csv = String::from("index,label,prediction\n");
    let mut hits = 0;
    let mut index = 0;
    for (x, labels) in cx.data.test.batches(256) {
        for (label, pred) in labels.iter().zip(infer(&ck.params, &x, ck.timesteps)?) {
            let _ = writeln!(csv, "{index},{label},{pred}");
            hits += (*label == pred) as usize;
            index += 1;
        }
    }
    ensure!(index > 0, "test split is empty");
    write_csv(&cx.layout.report(&format!("predictions_{}.csv", stem(&path))), &csv)?;
    println!(
        "infer T={}: {hits}/{index} correct ({})",
        ck.timesteps,
        pct(hits as f64 / index as f64)
    );
    Ok(())
}
