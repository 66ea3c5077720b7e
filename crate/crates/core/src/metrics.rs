//! CSV reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{MemoryAccess, OpsCount};
use crate::ann::EpochMetrics;
use crate::bptt::SnnEpochMetrics;
use crate::error::Result;
use crate::iir::StageOutcome;

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn ann_metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc);
    }
    s
}

/// Per-layer values are `;`-separated within their column.
pub fn snn_metrics_csv(rows: &[SnnEpochMetrics]) -> String {
    let mut s = String::from("epoch,timesteps,lr,train_loss,train_acc,val_acc,thresholds,leaks,spike_rates\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.timesteps,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            join(&r.thresholds),
            join(&r.leaks),
            join(&r.spike_rates)
        );
    }
    s
}

pub fn stage_summary_csv(stages: &[StageOutcome]) -> String {
    let mut s = String::from("stage_T,epochs,best_val_acc,mean_spike_rate,test_acc\n");
    for o in stages {
        let c = &o.checkpoint;
        let mean = if c.spike_rates.is_empty() {
            0.0
        } else {
            c.spike_rates.iter().sum::<f64>() / c.spike_rates.len() as f64
        };
        let val = c.best_val_acc.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", c.timesteps, c.epochs, val, mean, o.test_acc);
    }
    s
}

pub fn ops_csv(ops: &OpsCount) -> String {
    let mut s = String::from("layer,ann_ops,spike_rate,snn_ops\n");
    for l in &ops.layers {
        let _ = writeln!(s, "{},{},{},{}", l.layer, l.ann_ops, l.spike_rate, l.snn_ops);
    }
    s
}

/// Layer index against spike rate, for each labelled run.
pub fn spike_rate_table_csv(runs: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("run,hidden_layer,spike_rate\n");
    for (name, rates) in runs {
        for (l, r) in rates.iter().enumerate() {
            let _ = writeln!(s, "{name},{l},{r}");
        }
    }
    s
}

pub fn memory_csv(rows: &[MemoryAccess]) -> String {
    let mut s = String::from("timesteps,weight_reads,membrane_reads,membrane_writes,snn_total,ann_total,ratio\n");
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.timesteps,
            m.weight_reads,
            m.membrane_reads,
            m.membrane_writes,
            m.snn_total(),
            m.ann_accesses,
            m.ratio_to_ann()
        );
    }
    s
}

pub fn write_csv(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}
