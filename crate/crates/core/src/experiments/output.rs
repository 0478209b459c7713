use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellSummary, MonteCarloTable};
use crate::error::{Error, Result};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::InvalidConfig(format!("{}: {e}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| io_err(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// One row per (scenario, method) cell. Vector fields are `;`-joined.
pub fn write_table_csv(tables: &[MonteCarloTable], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let header = [
        "scenario", "design", "error_family", "error_variance", "m", "n", "reps", "seed",
        "replicate_policy", "method", "successes", "failures", "mean_tau", "bias", "sd", "mse",
        "mean_abs_bias", "mean_theta", "mean_asmd", "mean_md", "asmd_limit", "md_limit",
    ];
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for t in tables {
        let m = &t.metadata;
        for c in &t.cells {
            let row = [
                m.scenario.clone(),
                m.design.clone(),
                m.error_family.clone(),
                m.error_variance.to_string(),
                m.m.to_string(),
                m.n.to_string(),
                m.reps.to_string(),
                m.seed.to_string(),
                format!("{:?}", m.replicate_policy).to_lowercase(),
                c.method.to_string(),
                c.successes.to_string(),
                c.failures.to_string(),
                c.mean_tau.to_string(),
                c.bias.to_string(),
                c.sd.to_string(),
                c.mse.to_string(),
                c.mean_abs_bias.to_string(),
                fmt_list(&c.mean_theta),
                fmt_list(&c.mean_asmd),
                fmt_opt(c.mean_md),
                c.asmd_limit.as_deref().map(fmt_list).unwrap_or_default(),
                fmt_opt(c.md_limit),
            ];
            w.write_record(&row).map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_table_json(tables: &[MonteCarloTable], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, tables).map_err(|e| io_err(path, e))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))
}

/// Tidy plot data: one value per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub scenario: String,
    pub method: String,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

fn cell_metrics(c: &CellSummary) -> Vec<(String, f64)> {
    let mut out = vec![
        ("bias".to_string(), c.bias),
        ("abs_bias".to_string(), c.bias.abs()),
        ("sd".to_string(), c.sd),
        ("mse".to_string(), c.mse),
    ];
    for (j, v) in c.mean_theta.iter().enumerate() {
        out.push((format!("theta_{}", j + 1), *v));
    }
    for (j, v) in c.mean_asmd.iter().enumerate() {
        out.push((format!("asmd_{}", j + 1), *v));
    }
    if let Some(md) = c.mean_md {
        out.push(("md".into(), md));
    }
    if let Some(lim) = &c.asmd_limit {
        for (j, v) in lim.iter().enumerate() {
            out.push((format!("asmd_limit_{}", j + 1), *v));
        }
    }
    if let Some(md) = c.md_limit {
        out.push(("md_limit".into(), md));
    }
    out
}

/// Which scenario parameter varies along the x-axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlotAxis {
    ErrorVariance,
    SampleSize,
}

/// Flatten a sweep of tables into tidy rows. The scenario column drops the
/// swept parameter so a sweep forms one series per method.
pub fn plot_rows(tables: &[MonteCarloTable], axis: PlotAxis) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for t in tables {
        let m = &t.metadata;
        let (x, scenario) = match axis {
            PlotAxis::ErrorVariance => (m.error_variance, format!("{}/{}", m.design, m.error_family)),
            PlotAxis::SampleSize => (m.n as f64, m.scenario.clone()),
        };
        for c in &t.cells {
            for (metric, value) in cell_metrics(c) {
                rows.push(PlotRow {
                    scenario: scenario.clone(),
                    method: c.method.to_string(),
                    x,
                    metric,
                    value,
                });
            }
        }
    }
    rows
}

pub fn write_plot_csv(rows: &[PlotRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Method;
    use crate::experiments::{run_table, Design, ErrorKind, ScenarioSpec};

    #[test]
    fn plot_csv_round_trips() {
        let mut spec = ScenarioSpec::new(Design::FourCovariate, 400, ErrorKind::Normal, 0.1);
        spec.reps = 3;
        spec.methods = vec![Method::Eb, Method::Ceb];
        let t = run_table(&spec).unwrap();
        let rows = plot_rows(std::slice::from_ref(&t), PlotAxis::ErrorVariance);
        assert!(rows.iter().any(|r| r.metric == "asmd_limit_1" && r.method == "eb"));
        assert!(rows.iter().all(|r| r.x == 0.1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        write_plot_csv(&rows, &path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["scenario", "method", "x", "metric", "value"]);
        let back: Vec<PlotRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(back, rows);

        let tpath = dir.path().join("table.csv");
        write_table_csv(std::slice::from_ref(&t), &tpath).unwrap();
        let n = csv::Reader::from_path(&tpath).unwrap().records().count();
        assert_eq!(n, 2);
        let jpath = dir.path().join("table.json");
        write_table_json(std::slice::from_ref(&t), &jpath).unwrap();
        let back: Vec<MonteCarloTable> =
            serde_json::from_str(&std::fs::read_to_string(jpath).unwrap()).unwrap();
        assert_eq!(back[0], t);
    }
}
