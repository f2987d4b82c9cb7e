use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scheduler::{Phase, TransitionEvent};

/// One training step.
///
/// `ppl`, `sparsity` and `similarity` are only measured on some steps; they
/// are `None` / empty otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub ppl: Option<f64>,
    /// Per-layer fraction of zero FFN activations.
    #[serde(default)]
    pub sparsity: Vec<f64>,
    pub similarity: Option<f64>,
    /// Cumulative training FLOPs after this step.
    pub flops: u64,
    pub lr: f64,
    /// Phase change that took effect at this step, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<TransitionEvent>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "jsonl" => Ok(Self::Jsonl),
            other => Err(Error::InvalidArgument(format!(
                "unknown format {other:?} (expected csv or jsonl)"
            ))),
        }
    }
}

/// `step, phase, loss, ppl, sparsity_layer_0 .. sparsity_layer_{L-1},
/// similarity, flops, lr`: `7 + n_layers` columns.
pub fn csv_header(n_layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "phase", "loss", "ppl"].map(String::from).into();
    h.extend((0..n_layers).map(|i| format!("sparsity_layer_{i}")));
    h.extend(["similarity", "flops", "lr"].map(String::from));
    h
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], n_layers: usize, mut out: W) -> Result<()> {
    writeln!(out, "{}", csv_header(n_layers).join(","))?;
    for r in records {
        let mut row = vec![
            r.step.to_string(),
            r.phase.as_str().to_string(),
            r.loss.to_string(),
            opt(r.ppl),
        ];
        row.extend((0..n_layers).map(|i| opt(r.sparsity.get(i).copied())));
        row.extend([opt(r.similarity), r.flops.to_string(), r.lr.to_string()]);
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn read_jsonl_file(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_jsonl(BufReader::new(File::open(path)?))
}

pub fn export_metrics(records: &[MetricsRecord], n_layers: usize, format: ExportFormat, path: &Path) -> Result<()> {
    let file =
        File::create(path).map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    match format {
        ExportFormat::Csv => write_csv(records, n_layers, &mut w)?,
        ExportFormat::Jsonl => write_jsonl(records, &mut w)?,
    }
    w.flush()?;
    Ok(())
}
