//! CSV outputs. Every table is written with its header even when empty.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::experiments::{ConvergenceRun, InterpolationOutcome, RecoveryResult};
use crate::Result;

pub const RECOVERY_HEADER: &str = "method,os,kappa,dims,ranks,trials,successes,rate";
pub const TRIALS_HEADER: &str = "trial,method,success,rel_error,rel_residual,iterations,seconds,status";
pub const INTERPOLATION_HEADER: &str = "function,ratio,method,test_error,train_rel_residual,iterations,stages,seconds,ranks";

/// One row of the recovery-rate table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub method: String,
    pub os: f64,
    pub kappa: Option<f64>,
    pub dims: String,
    pub ranks: String,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Serialize)]
struct TrialRow<'a> {
    trial: usize,
    method: &'a str,
    success: bool,
    rel_error: f64,
    rel_residual: f64,
    iterations: usize,
    seconds: f64,
    status: &'a str,
}

#[derive(Serialize)]
struct InterpolationRow<'a> {
    function: String,
    ratio: f64,
    method: &'a str,
    test_error: f64,
    train_rel_residual: f64,
    iterations: usize,
    stages: usize,
    seconds: f64,
    ranks: String,
}

pub fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("x")
}

fn writer<W: Write>(w: W, header: &str) -> Result<csv::Writer<W>> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(header.split(','))?;
    Ok(wr)
}

/// Rows of the recovery table, one per (setting, method).
pub fn recovery_rows(results: &[RecoveryResult]) -> Vec<RecoveryRow> {
    results
        .iter()
        .flat_map(|res| {
            res.spec.methods.iter().map(move |&m| RecoveryRow {
                method: m.name().to_string(),
                os: res.spec.os,
                kappa: res.spec.generator.kappa(),
                dims: join(&res.spec.dims),
                ranks: join(&res.spec.ranks),
                trials: res.spec.trials,
                successes: res.successes(m),
                rate: res.rate(m),
            })
        })
        .collect()
}

pub fn write_recovery_table<W: Write>(results: &[RecoveryResult], w: W) -> Result<()> {
    let mut wr = writer(w, RECOVERY_HEADER)?;
    for row in recovery_rows(results) {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_recovery_table<R: Read>(r: R) -> Result<Vec<RecoveryRow>> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<std::result::Result<Vec<RecoveryRow>, _>>()?)
}

pub fn write_trials<W: Write>(result: &RecoveryResult, w: W) -> Result<()> {
    let mut wr = writer(w, TRIALS_HEADER)?;
    for o in &result.outcomes {
        wr.serialize(TrialRow {
            trial: o.trial,
            method: o.method.name(),
            success: o.success,
            rel_error: o.rel_error,
            rel_residual: o.rel_residual,
            iterations: o.iterations,
            seconds: o.seconds,
            status: &o.status,
        })?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_interpolation<W: Write>(spec_ratio: f64, outcomes: &[(String, &InterpolationOutcome)], w: W) -> Result<()> {
    let mut wr = writer(w, INTERPOLATION_HEADER)?;
    for (function, o) in outcomes {
        wr.serialize(InterpolationRow {
            function: function.clone(),
            ratio: spec_ratio,
            method: o.method.name(),
            test_error: o.test_error,
            train_rel_residual: o.train_rel_residual,
            iterations: o.iterations,
            stages: o.stages,
            seconds: o.seconds,
            ranks: join(&o.ranks),
        })?;
    }
    wr.flush()?;
    Ok(())
}

/// File-name friendly method tag, e.g. `rgd_q`.
pub fn method_tag(name: &str) -> String {
    name.to_ascii_lowercase().replace('(', "_").replace(')', "")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Write a trace as `trace_<tag>.csv` in `dir`. The `iter`, `seconds` and
/// `rel_residual` columns are the plot axes of convergence figures.
pub fn write_trace_file(dir: &Path, prefix: &str, trace: &ttq::solvers::SolverTrace) -> Result<()> {
    let path = dir.join(format!("{prefix}{}.csv", method_tag(&trace.method)));
    trace.write_csv(create(&path)?)?;
    Ok(())
}

/// Emit the recovery table, per-trial outcomes and any kept traces.
pub fn emit_recovery(results: &[RecoveryResult], dir: &Path) -> Result<()> {
    write_recovery_table(results, create(&dir.join("recovery.csv"))?)?;
    for (k, res) in results.iter().enumerate() {
        write_trials(res, create(&dir.join(format!("trials_{k}.csv")))?)?;
        for o in &res.outcomes {
            if let Some(t) = &o.trace {
                write_trace_file(&dir.join(format!("traces_{k}")), &format!("trial{}_", o.trial), t)?;
            }
        }
    }
    Ok(())
}

pub fn emit_convergence(runs: &[ConvergenceRun], dir: &Path) -> Result<()> {
    for r in runs {
        write_trace_file(dir, "trace_", &r.trace)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{Generator, RecoverySpec};
    use ttq::solvers::Method;

    fn fake_result() -> RecoveryResult {
        let mut spec = RecoverySpec::new(vec![10, 10, 10], vec![1, 2, 2, 1]);
        spec.generator = Generator::FixedKappa(100.0);
        spec.trials = 2;
        spec.methods = vec![Method::RgdQ];
        let outcome = |trial, success| crate::experiments::TrialOutcome {
            trial,
            method: Method::RgdQ,
            success,
            rel_error: 1e-5,
            rel_residual: 1e-5,
            iterations: 3,
            seconds: 0.1,
            status: "relative-residual".into(),
            panicked: false,
            trace: None,
        };
        RecoveryResult { spec, outcomes: vec![outcome(0, true), outcome(1, false)] }
    }

    #[test]
    fn recovery_table_round_trips() {
        let mut buf = Vec::new();
        write_recovery_table(&[fake_result()], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), RECOVERY_HEADER);
        let rows = read_recovery_table(buf.as_slice()).unwrap();
        assert_eq!(rows, recovery_rows(&[fake_result()]));
        assert_eq!(rows[0].rate, 0.5);
        assert_eq!(rows[0].kappa, Some(100.0));
    }

    #[test]
    fn empty_results_give_header_only_files() {
        let mut buf = Vec::new();
        write_recovery_table(&[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), RECOVERY_HEADER);
        let mut buf = Vec::new();
        write_interpolation(0.1, &[], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), INTERPOLATION_HEADER);
        let mut res = fake_result();
        res.outcomes.clear();
        let mut buf = Vec::new();
        write_trials(&res, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().trim_end(), TRIALS_HEADER);
    }

    #[test]
    fn trace_files_use_solver_header() {
        let dir = tempfile::tempdir().unwrap();
        let t = ttq::solvers::SolverTrace::new("RGN(E)");
        write_trace_file(dir.path(), "trace_", &t).unwrap();
        let text = std::fs::read_to_string(dir.path().join("trace_rgn_e.csv")).unwrap();
        assert_eq!(text.trim_end(), ttq::solvers::TRACE_HEADER);
    }
}
