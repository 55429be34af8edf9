use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{evaluate, BinnedObjective, EvalSample, InferenceError, SGrid, Statistic};
use crate::exec::Execution;
use crate::oracle::AnalyticResult;
use crate::statmodel::{BenchmarkSpec, Param, ThetaPoint};

/// Linear-interpolation percentile of sorted values, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthSummary {
    pub median: f64,
    pub p16: f64,
    pub p84: f64,
    /// Monte Carlo standard error, for rows computed from a single estimate.
    pub standard_error: Option<f64>,
    pub values: Vec<f64>,
}

impl WidthSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Self {
            median: percentile(&sorted, 0.5),
            p16: percentile(&sorted, 0.16),
            p84: percentile(&sorted, 0.84),
            standard_error: None,
            values,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    /// One entry per benchmark column.
    pub cells: Vec<WidthSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub benchmarks: Vec<u8>,
    pub rows: Vec<TableRow>,
    pub failed_points: usize,
}

impl BenchmarkTable {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, label: &str, benchmark: u8) -> Option<&WidthSummary> {
        let col = self.benchmarks.iter().position(|&b| b == benchmark)?;
        self.row(label).map(|r| &r.cells[col])
    }

    /// Append the extended-likelihood row; `results` must follow the column order.
    pub fn push_analytic(&mut self, label: &str, results: &[AnalyticResult]) {
        let cells = results
            .iter()
            .map(|r| WidthSummary { standard_error: Some(r.standard_error), ..WidthSummary::from_values(vec![r.width]) })
            .collect();
        self.rows.push(TableRow { label: label.to_string(), cells });
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(out);
        writeln!(w, "statistic,benchmark,median,plus,minus,p16,p84,standard_error,n")?;
        for row in &self.rows {
            for (b, c) in self.benchmarks.iter().zip(&row.cells) {
                let se = c.standard_error.map(|v| v.to_string()).unwrap_or_default();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{}",
                    row.label,
                    b,
                    c.median,
                    c.p84 - c.median,
                    c.median - c.p16,
                    c.p16,
                    c.p84,
                    se,
                    c.values.len()
                )?;
            }
        }
        w.flush()
    }
}

/// Widths of every statistic under every benchmark. Each entry is a row
/// label with one statistic per seed; objectives are built one at a time.
pub fn benchmark_table(
    entries: &[(String, Vec<Statistic>)],
    benchmarks: &[u8],
    eval: &EvalSample,
    grid: SGrid,
    exec: Execution,
) -> Result<BenchmarkTable, InferenceError> {
    let specs: Vec<BenchmarkSpec> = benchmarks.iter().map(|&b| BenchmarkSpec::new(b)).collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(entries.len());
    let mut failed_points = 0;
    for (label, stats) in entries {
        let mut widths = vec![Vec::with_capacity(stats.len()); specs.len()];
        for stat in stats {
            let obj = BinnedObjective::new(stat, eval, ThetaPoint::NOMINAL, exec)?;
            for (spec, col) in specs.iter().zip(widths.iter_mut()) {
                let ev = evaluate(&obj, spec, label, grid)?;
                failed_points += ev.failed_points;
                col.push(ev.interval.width);
            }
        }
        rows.push(TableRow { label: label.clone(), cells: widths.into_iter().map(WidthSummary::from_values).collect() });
    }
    Ok(BenchmarkTable { benchmarks: benchmarks.to_vec(), rows, failed_points })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanPoint {
    pub parameter: String,
    pub value: f64,
    pub width: f64,
    pub s_min: f64,
}

/// Width with the Asimov data generated at the nominal point moved to
/// `param = value`, for each value; the fitted model is unchanged.
pub fn robustness_scan(
    obj: &BinnedObjective,
    spec: &BenchmarkSpec,
    param: Param,
    values: &[f64],
    grid: SGrid,
) -> Result<Vec<ScanPoint>, InferenceError> {
    let base = obj.truth();
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let shifted = obj.clone().with_truth(base.with(param, v))?;
        let ev = evaluate(&shifted, spec, "", grid)?;
        out.push(ScanPoint { parameter: param.name().to_string(), value: v, width: ev.interval.width, s_min: ev.interval.s_min });
    }
    Ok(out)
}

pub fn write_scan_csv<W: Write>(rows: &[(String, Vec<ScanPoint>)], out: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(out);
    writeln!(w, "statistic,parameter,value,width,s_min")?;
    for (label, points) in rows {
        for p in points {
            writeln!(w, "{},{},{},{},{}", label, p.parameter, p.value, p.width, p.s_min)?;
        }
    }
    w.flush()
}
