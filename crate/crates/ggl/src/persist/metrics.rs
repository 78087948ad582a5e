//! Append-only per-run metrics stream.
//!
//! One CSV per run. Column order is fixed: step, kind, grad_norm, rho,
//! lambda_min, defect_total, then one defect column per task, then the
//! train/test loss and accuracy block per task. A row carries only the
//! fields its measurement produced; everything else stays empty, never
//! zero-filled. Steps never decrease within a file.

use crate::data::TaskKind;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Eval,
    Defect,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Eval => "eval",
            RowKind::Defect => "defect",
        }
    }
    fn parse(s: &str) -> Result<Self> {
        match s {
            "eval" => Ok(RowKind::Eval),
            "defect" => Ok(RowKind::Defect),
            other => Err(Error::data(format!("unknown metrics row kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub kind: RowKind,
    pub grad_norm: Option<f64>,
    pub rho: Option<f64>,
    pub lambda_min: Option<f64>,
    pub defect_total: Option<f64>,
    /// Per-task blocks, indexed in the run's task order.
    pub defect: Vec<Option<f64>>,
    pub train_loss: Vec<Option<f64>>,
    pub train_acc: Vec<Option<f64>>,
    pub test_loss: Vec<Option<f64>>,
    pub test_acc: Vec<Option<f64>>,
}

impl MetricsRow {
    pub fn empty(step: u64, kind: RowKind, n_tasks: usize) -> Self {
        MetricsRow {
            step,
            kind,
            grad_norm: None,
            rho: None,
            lambda_min: None,
            defect_total: None,
            defect: vec![None; n_tasks],
            train_loss: vec![None; n_tasks],
            train_acc: vec![None; n_tasks],
            test_loss: vec![None; n_tasks],
            test_acc: vec![None; n_tasks],
        }
    }
}

pub fn header_for(tasks: &[TaskKind]) -> String {
    let mut h = String::from("step,kind,grad_norm,rho,lambda_min,defect_total");
    for t in tasks {
        write!(h, ",defect_{t}").unwrap();
    }
    for t in tasks {
        write!(h, ",train_loss_{t},train_acc_{t},test_loss_{t},test_acc_{t}").unwrap();
    }
    h
}

fn opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

fn format_row(row: &MetricsRow) -> String {
    let mut line = format!(
        "{},{},{},{},{},{}",
        row.step,
        row.kind.as_str(),
        opt(row.grad_norm),
        opt(row.rho),
        opt(row.lambda_min),
        opt(row.defect_total)
    );
    for &d in &row.defect {
        write!(line, ",{}", opt(d)).unwrap();
    }
    for i in 0..row.train_loss.len() {
        write!(
            line,
            ",{},{},{},{}",
            opt(row.train_loss[i]),
            opt(row.train_acc[i]),
            opt(row.test_loss[i]),
            opt(row.test_acc[i])
        )
        .unwrap();
    }
    line
}

/// Single-writer append handle. Creating it writes the header when the file
/// is new; appending enforces the non-decreasing step invariant.
pub struct MetricsWriter {
    out: BufWriter<std::fs::File>,
    path: PathBuf,
    n_tasks: usize,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn open(path: &Path, tasks: &[TaskKind]) -> Result<Self> {
        let existing = path.exists();
        let mut last_step = None;
        if existing {
            let rows = read_metrics(path, tasks)?;
            last_step = rows.last().map(|r| r.step);
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut out = BufWriter::new(file);
        if !existing {
            writeln!(out, "{}", header_for(tasks))?;
            out.flush()?;
        }
        Ok(MetricsWriter {
            out,
            path: path.to_path_buf(),
            n_tasks: tasks.len(),
            last_step,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        if row.defect.len() != self.n_tasks || row.train_loss.len() != self.n_tasks {
            return Err(Error::data("metrics row task arity mismatch"));
        }
        if let Some(last) = self.last_step {
            if row.step < last {
                return Err(Error::data(format!(
                    "metrics step went backwards: {} after {last} in {}",
                    row.step,
                    self.path.display()
                )));
            }
        }
        writeln!(self.out, "{}", format_row(row))?;
        self.out.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|_| Error::data(format!("bad {what} value '{field}'")))
}

pub fn read_metrics(path: &Path, tasks: &[TaskKind]) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::data(format!("{} is empty", path.display())))?;
    let expected = header_for(tasks);
    if header != expected {
        return Err(Error::data(format!(
            "metrics header mismatch in {}: got '{header}', expected '{expected}'",
            path.display()
        )));
    }
    let n = tasks.len();
    let n_cols = 6 + n + 4 * n;
    let mut rows = Vec::new();
    let mut prev_step = 0u64;
    for (li, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(Error::data(format!(
                "{} line {}: {} fields, expected {n_cols}",
                path.display(),
                li + 2,
                fields.len()
            )));
        }
        let step: u64 = fields[0]
            .parse()
            .map_err(|_| Error::data(format!("bad step '{}'", fields[0])))?;
        if step < prev_step {
            return Err(Error::data(format!(
                "metrics steps decrease at line {}",
                li + 2
            )));
        }
        prev_step = step;
        let mut row = MetricsRow::empty(step, RowKind::parse(fields[1])?, n);
        row.grad_norm = parse_opt(fields[2], "grad_norm")?;
        row.rho = parse_opt(fields[3], "rho")?;
        row.lambda_min = parse_opt(fields[4], "lambda_min")?;
        row.defect_total = parse_opt(fields[5], "defect_total")?;
        for i in 0..n {
            row.defect[i] = parse_opt(fields[6 + i], "defect")?;
        }
        for i in 0..n {
            let base = 6 + n + 4 * i;
            row.train_loss[i] = parse_opt(fields[base], "train_loss")?;
            row.train_acc[i] = parse_opt(fields[base + 1], "train_acc")?;
            row.test_loss[i] = parse_opt(fields[base + 2], "test_loss")?;
            row.test_acc[i] = parse_opt(fields[base + 3], "test_acc")?;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Drops rows recorded after `step`, for restarting from a resume point that
/// predates the last rows flushed before a crash.
pub fn truncate_metrics_after(path: &Path, tasks: &[TaskKind], step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows = read_metrics(path, tasks)?;
    let mut text = header_for(tasks);
    text.push('\n');
    for row in rows.iter().filter(|r| r.step <= step) {
        text.push_str(&format_row(row));
        text.push('\n');
    }
    super::checkpoint::atomic_write(path, |w| {
        w.write_all(text.as_bytes())?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tasks() -> Vec<TaskKind> {
        vec![TaskKind::Add, TaskKind::Mul]
    }

    #[test]
    fn round_trip_preserves_rows_and_empties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        let mut eval = MetricsRow::empty(0, RowKind::Eval, 2);
        eval.train_loss = vec![Some(4.57), Some(4.61)];
        eval.train_acc = vec![Some(0.0104), Some(0.0095)];
        eval.test_loss = vec![Some(4.58), Some(4.60)];
        eval.test_acc = vec![Some(0.0103), Some(0.0101)];
        w.append(&eval).unwrap();
        let mut defect = MetricsRow::empty(100, RowKind::Defect, 2);
        defect.defect_total = Some(3.25e-4);
        defect.defect = vec![Some(1.5e-4), Some(2.5e-4)];
        w.append(&defect).unwrap();
        drop(w);

        let rows = read_metrics(&path, &tasks()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], eval);
        assert_eq!(rows[1], defect);
        assert!(rows[0].defect_total.is_none());
        assert!(rows[1].train_acc[0].is_none());
    }

    #[test]
    fn reopen_appends_after_existing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        w.append(&MetricsRow::empty(0, RowKind::Eval, 2)).unwrap();
        drop(w);
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        assert!(w.append(&MetricsRow::empty(100, RowKind::Eval, 2)).is_ok());
        drop(w);
        assert_eq!(read_metrics(&path, &tasks()).unwrap().len(), 2);
    }

    #[test]
    fn backwards_step_is_rejected_on_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        w.append(&MetricsRow::empty(200, RowKind::Eval, 2)).unwrap();
        assert!(w.append(&MetricsRow::empty(100, RowKind::Eval, 2)).is_err());
        drop(w);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str(&format_row(&MetricsRow::empty(100, RowKind::Eval, 2)));
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(read_metrics(&path, &tasks()).unwrap_err()
            .to_string()
            .contains("decrease"));
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        w.append(&MetricsRow::empty(0, RowKind::Eval, 2)).unwrap();
        drop(w);
        assert!(read_metrics(&path, &[TaskKind::Add]).is_err());
    }

    #[test]
    fn truncate_drops_later_rows_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        for step in [0u64, 100, 200, 300, 400] {
            w.append(&MetricsRow::empty(step, RowKind::Eval, 2)).unwrap();
        }
        drop(w);
        truncate_metrics_after(&path, &tasks(), 200).unwrap();
        let rows = read_metrics(&path, &tasks()).unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 100, 200]);
    }

    #[test]
    fn float_text_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let mut w = MetricsWriter::open(&path, &tasks()).unwrap();
        let mut row = MetricsRow::empty(0, RowKind::Eval, 2);
        let tricky = 0.1 + 0.2;
        row.train_loss = vec![Some(tricky), Some(f64::MIN_POSITIVE)];
        row.train_acc = vec![Some(1.0 / 3.0), Some(4704.0 / 4705.0)];
        row.test_loss = vec![Some(1e-300), Some(1e300)];
        row.test_acc = vec![Some(0.0), Some(1.0)];
        w.append(&row).unwrap();
        drop(w);
        let rows = read_metrics(&path, &tasks()).unwrap();
        assert_eq!(rows[0], row);
    }
}
