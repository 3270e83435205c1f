//! Convergence summaries of a per-step loss log.

use serde_json::{json, Value as Json};

use crate::error::{Error, Result};

pub const MIN_ROWS: usize = 100;
pub const WINDOW: usize = 20;
/// Columns summarised, in log order.
pub const LOSS_COLUMNS: [&str; 5] = ["rec_v", "rec_a", "contra", "dis", "total"];

#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub steps: Vec<u64>,
    pub columns: Vec<(String, Vec<f64>)>,
}

impl LossLog {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty loss log".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        if header.first() != Some(&"step") {
            return Err(Error::Format("loss log must start with a `step` column".into()));
        }
        let mut steps = Vec::new();
        let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len() - 1];
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != header.len() {
                return Err(Error::Format(format!(
                    "row {} has {} fields, header has {}",
                    n + 2,
                    cells.len(),
                    header.len()
                )));
            }
            let bad = |c: &str| Error::Format(format!("row {}: cannot parse `{c}`", n + 2));
            steps.push(cells[0].parse().map_err(|_| bad(cells[0]))?);
            for (col, c) in cols.iter_mut().zip(&cells[1..]) {
                col.push(c.parse().map_err(|_| bad(c))?);
            }
        }
        Ok(Self {
            steps,
            columns: header[1..].iter().map(|h| h.to_string()).zip(cols).collect(),
        })
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.0 == name).map(|c| c.1.as_slice())
    }
}

/// Trailing moving average; entry `i` covers rows `i+1-window ..= i` and
/// exists only once a full window is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push((i + 1 >= window).then(|| sum / window as f64));
    }
    out
}

/// Mean of the last 10% of rows (at least one).
pub fn final_value(values: &[f64]) -> f64 {
    let k = (values.len() / 10).max(1);
    values[values.len() - k..].iter().sum::<f64>() / k as f64
}

/// First step whose trailing average lies within `p` (relative) of `final`.
pub fn step_to_within(steps: &[u64], values: &[f64], final_v: f64, p: f64) -> Option<u64> {
    let (lo, hi) = {
        let a = final_v * (1.0 - p);
        let b = final_v * (1.0 + p);
        (a.min(b), a.max(b))
    };
    moving_average(values, WINDOW)
        .into_iter()
        .zip(steps)
        .find(|(m, _)| m.is_some_and(|m| m >= lo && m <= hi))
        .map(|(_, s)| *s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub name: String,
    pub final_value: f64,
    pub step_to_within: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStats {
    pub rows: usize,
    pub within: f64,
    pub columns: Vec<ColumnStats>,
}

impl ConvergenceStats {
    pub fn get(&self, name: &str) -> Option<&ColumnStats> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> Json {
        let cols: serde_json::Map<String, Json> = self
            .columns
            .iter()
            .map(|c| {
                (
                    c.name.clone(),
                    json!({"final": c.final_value, "step_to_within": c.step_to_within}),
                )
            })
            .collect();
        json!({"rows": self.rows, "within": self.within, "window": WINDOW, "losses": cols})
    }
}

/// Per-loss final value and settling step at relative tolerance `p`.
pub fn convergence_stats(csv: &str, p: f64) -> Result<ConvergenceStats> {
    let log = LossLog::parse(csv)?;
    if log.steps.len() < MIN_ROWS {
        return Err(Error::Data(format!(
            "loss log has {} rows, need at least {MIN_ROWS}",
            log.steps.len()
        )));
    }
    let columns = log
        .columns
        .iter()
        .filter(|(name, _)| LOSS_COLUMNS.contains(&name.as_str()))
        .map(|(name, values)| {
            let f = final_value(values);
            ColumnStats {
                name: name.clone(),
                final_value: f,
                step_to_within: step_to_within(&log.steps, values, f, p),
            }
        })
        .collect();
    Ok(ConvergenceStats {
        rows: log.steps.len(),
        within: p,
        columns,
    })
}
