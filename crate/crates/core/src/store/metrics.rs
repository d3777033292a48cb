use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::checkpoint::write_atomic;
use crate::distill::{MetricSplit, MetricsRecord};
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy";

pub fn format_metrics(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{:.6},{:.6}", r.epoch, r.split.name(), r.loss, r.accuracy);
    }
    out
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_atomic(path, format_metrics(records).as_bytes())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(METRICS_HEADER) => {}
        other => {
            return Err(Error::Format(format!(
                "metrics header is {other:?}, expected {METRICS_HEADER:?}"
            )))
        }
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Format(format!("metrics line {}: {line:?}", i + 2));
            let fields: Vec<&str> = line.split(',').collect();
            let [epoch, split, loss, accuracy] = fields[..] else {
                return Err(bad());
            };
            Ok(MetricsRecord {
                epoch: epoch.parse().map_err(|_| bad())?,
                split: MetricSplit::parse(split)?,
                loss: loss.parse().map_err(|_| bad())?,
                accuracy: accuracy.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics(&text)
}
