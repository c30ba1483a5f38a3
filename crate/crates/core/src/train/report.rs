//! Line-oriented training report.
//!
//! ```text
//! # epoch lr train_loss train_acc val_loss val_acc
//! 0 0.1 2.301 0.112 2.287 0.131
//! # condense epoch=3 stage=1
//! ```
//!
//! Each data line holds six whitespace-separated fields. Lines starting with
//! `#` are comments, except `# condense` lines, which record pruning events.

use serde::Serialize;

use crate::error::{Error, Result};

pub const HEADER: &str = "# epoch lr train_loss train_acc val_loss val_acc";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CondenseEvent {
    pub epoch: usize,
    pub stage: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub condense_events: Vec<CondenseEvent>,
}

/// Machine-readable digest of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub epochs: usize,
    pub final_lr: f64,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub condense_events: Vec<CondenseEvent>,
    pub records: Vec<EpochRecord>,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_loss, self.val_acc
        )
    }
}

impl CondenseEvent {
    pub fn to_line(&self) -> String {
        format!("# condense epoch={} stage={}", self.epoch, self.stage)
    }
}

impl TrainingReport {
    /// Full text with events placed before the epoch they precede.
    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.epochs {
            for e in self.condense_events.iter().filter(|e| e.epoch == r.epoch) {
                out.push_str(&e.to_line());
                out.push('\n');
            }
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = TrainingReport::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |msg: &str| Error::data(format!("report line {}: {msg}", n + 1));
            if let Some(rest) = line.strip_prefix("# condense") {
                let mut epoch = None;
                let mut stage = None;
                for field in rest.split_whitespace() {
                    match field.split_once('=') {
                        Some(("epoch", v)) => epoch = v.parse().ok(),
                        Some(("stage", v)) => stage = v.parse().ok(),
                        _ => return Err(bad("malformed condense event")),
                    }
                }
                match (epoch, stage) {
                    (Some(epoch), Some(stage)) => report.condense_events.push(CondenseEvent { epoch, stage }),
                    _ => return Err(bad("condense event needs epoch and stage")),
                }
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(&format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(&format!("`{s}` is not a number")));
            report.epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad("epoch is not an integer"))?,
                lr: num(f[1])?,
                train_loss: num(f[2])?,
                train_acc: num(f[3])?,
                val_loss: num(f[4])?,
                val_acc: num(f[5])?,
            });
        }
        Ok(report)
    }

    pub fn summary(&self) -> Result<ReportSummary> {
        let last = self
            .epochs
            .last()
            .ok_or_else(|| Error::data("training report has no epochs"))?;
        let best = self
            .epochs
            .iter()
            .max_by(|a, b| a.val_acc.total_cmp(&b.val_acc).then(b.epoch.cmp(&a.epoch)))
            .expect("non-empty");
        Ok(ReportSummary {
            epochs: self.epochs.len(),
            final_lr: last.lr,
            final_train_loss: last.train_loss,
            final_train_acc: last.train_acc,
            final_val_loss: last.val_loss,
            final_val_acc: last.val_acc,
            best_val_acc: best.val_acc,
            best_epoch: best.epoch,
            condense_events: self.condense_events.clone(),
            records: self.epochs.clone(),
        })
    }
}

impl ReportSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}
