use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Column header of the CSV trace export.
pub const TRACE_HEADER: &str = "iter,objective,grad_norm,step,beta,rel_residual,rel_error,seconds";

/// Safeguards and fallbacks that were active during one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterEvents {
    /// The step-size clamp or the curvature-underflow guard changed the step.
    pub rbb_clamped: bool,
    /// A Tikhonov shift was needed in a linear solve.
    pub regularized: bool,
    /// The conjugate-gradient direction was reset to steepest descent.
    pub restarted: bool,
    /// The closed-form step was unavailable and a unit step was used.
    pub unit_step_fallback: bool,
    /// Number of Armijo halvings.
    pub backtracks: u32,
    /// The Gauss–Newton guard halved the step.
    pub guard_active: bool,
    /// The damped least-squares fallback was used.
    pub damped: bool,
}

/// One iterate of a solver run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: Option<f64>,
    pub beta: Option<f64>,
    pub rel_residual: f64,
    pub rel_error: Option<f64>,
    pub seconds: f64,
    #[serde(skip)]
    pub events: IterEvents,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    iter: usize,
    objective: f64,
    grad_norm: f64,
    step: Option<f64>,
    beta: Option<f64>,
    rel_residual: f64,
    rel_error: Option<f64>,
    seconds: f64,
}

/// Per-iteration history of a solver run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolverTrace {
    pub method: String,
    pub records: Vec<IterRecord>,
}

impl SolverTrace {
    pub fn new(method: impl Into<String>) -> Self {
        SolverTrace { method: method.into(), records: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    /// Number of steps taken (iterations after the initial point).
    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }

    /// First iteration at which the relative residual is below `tol`.
    pub fn iterations_to(&self, tol: f64) -> Option<usize> {
        self.records.iter().find(|r| r.rel_residual < tol).map(|r| r.iter)
    }

    /// Write the trace as CSV with the [`TRACE_HEADER`] columns. Missing values
    /// are written as empty fields.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wr.write_record(TRACE_HEADER.split(',')).map_err(csv_err)?;
        for r in &self.records {
            wr.serialize(CsvRow {
                iter: r.iter,
                objective: r.objective,
                grad_norm: r.grad_norm,
                step: r.step,
                beta: r.beta,
                rel_residual: r.rel_residual,
                rel_error: r.rel_error,
                seconds: r.seconds,
            })
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Read a trace written by [`Self::write_csv`]. Event flags are not stored
    /// in the CSV and come back cleared.
    pub fn read_csv<R: Read>(method: impl Into<String>, r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
        if header.join(",") != TRACE_HEADER {
            return Err(Error::Format(format!("unexpected trace header '{}'", header.join(","))));
        }
        let mut records = Vec::new();
        for row in rd.deserialize::<CsvRow>() {
            let row = row.map_err(csv_err)?;
            records.push(IterRecord {
                iter: row.iter,
                objective: row.objective,
                grad_norm: row.grad_norm,
                step: row.step,
                beta: row.beta,
                rel_residual: row.rel_residual,
                rel_error: row.rel_error,
                seconds: row.seconds,
                events: IterEvents::default(),
            });
        }
        Ok(SolverTrace { method: method.into(), records })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}
