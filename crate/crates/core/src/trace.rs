//! Per-iteration run records and their CSV form.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::hypergrad::Method;
use crate::problem::CostCounters;

/// Column names of the CSV trace, in order.
pub const CSV_HEADER: &str = "k,grad_norm_sq_est,grad_norm_sq_oracle,tracking_err,inner_diag,gc_f,gc_g,jv_g,hv_g,wall_ms";

/// One trace row. Row `k < K` describes outer iteration `k` at `x_k`; the
/// last row holds the final iterate with no estimate. Counters are
/// cumulative after the row's iteration. Empty fields mean "not evaluated".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub k: usize,
    pub grad_norm_sq_est: Option<f64>,
    pub grad_norm_sq_oracle: Option<f64>,
    /// `‖y_k^D − y*(x_k)‖`.
    pub tracking_err: Option<f64>,
    pub inner_diag: Option<f64>,
    pub gc_f: u64,
    pub gc_g: u64,
    pub jv_g: u64,
    pub hv_g: u64,
    pub wall_ms: Option<f64>,
}

impl TraceRow {
    pub fn counters(&self) -> CostCounters {
        CostCounters::new(self.gc_f, self.gc_g, self.jv_g, self.hv_g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// All `K` iterations ran.
    Completed,
    /// The oracle gradient norm reached the configured threshold.
    Threshold,
}

/// Algorithm state between outer iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub k: usize,
    pub x: DVector<f64>,
    /// `y_{k−1}^D`, the next inner warm start.
    pub y_warm: DVector<f64>,
    /// `v_{k−1}^N` (AID only).
    pub v_warm: Option<DVector<f64>>,
    pub counters: CostCounters,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub method: Method,
    pub rows: Vec<TraceRow>,
    /// `x_k` for each row.
    pub iterates: Vec<DVector<f64>>,
    /// `f(x_k, y_k⁰)` on the full population for each row: the upper objective
    /// at the state entering iteration `k`.
    pub upper_values: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub theory_alpha: f64,
    pub theory_beta: f64,
    pub stop: StopReason,
    pub final_state: IterateState,
}

impl RunTrace {
    pub fn final_x(&self) -> &DVector<f64> {
        &self.final_state.x
    }

    pub fn totals(&self) -> CostCounters {
        self.final_state.counters
    }

    /// Row index with the smallest estimated `‖∇̂Φ‖²`.
    pub fn best_k(&self) -> Option<usize> {
        self.rows
            .iter()
            .filter_map(|r| r.grad_norm_sq_est.map(|g| (r.k, g)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
    }

    pub fn best_x(&self) -> Option<&DVector<f64>> {
        self.best_k().map(|k| &self.iterates[k])
    }

    /// Oracle `‖∇Φ(x_k)‖²` for the rows where it was evaluated.
    pub fn oracle_series(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.grad_norm_sq_oracle.map(|g| (r.k, g)))
            .collect()
    }

    /// Mean oracle `‖∇Φ(x_k)‖²` over `k < K` (the iterations that took a step).
    pub fn average_oracle(&self) -> Option<f64> {
        let vals: Vec<f64> = self.rows[..self.rows.len().saturating_sub(1)]
            .iter()
            .filter_map(|r| r.grad_norm_sq_oracle)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        write_rows(&self.rows, out)
    }
}

pub fn write_rows<W: Write>(rows: &[TraceRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(input: R) -> csv::Result<Vec<TraceRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
