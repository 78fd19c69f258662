//! Residual norms, error metrics, sweeps over configurations and tables.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{Domain, SamplePoint};
use crate::net::{eval_derivs, MlpParams};
use crate::pinn::DiffusionParam;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("reference coefficient must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("tortuosity must be positive, got {0}")]
    NonPositiveTortuosity(f64),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiagnosticsError>;

/// Default number of evaluation times for the residual curve.
pub const RESIDUAL_TIMES: usize = 200;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn interior_centers(domain: &Domain) -> Vec<[f64; 3]> {
    domain.interior().iter().map(|&o| domain.center(o)).collect()
}

fn mean_abs_residual(params: &MlpParams, d: f64, centers: &[[f64; 3]], t: f64) -> f64 {
    if centers.is_empty() {
        return 0.0;
    }
    let pts: Vec<SamplePoint> = centers.iter().map(|&x| SamplePoint { x, t }).collect();
    let sum: f64 = eval_derivs(params, &pts)
        .iter()
        .map(|b| b.residual(d).abs())
        .sum();
    sum / centers.len() as f64
}

/// Mean `|dt c - D lap c|` over interior voxel centers at each of `n_times`
/// equally spaced times in `[0, T]`.
pub fn residual_over_time(
    params: &MlpParams,
    diffusion: &DiffusionParam,
    domain: &Domain,
    t_final: f64,
    n_times: usize,
) -> Vec<(f64, f64)> {
    let centers = interior_centers(domain);
    let d = diffusion.value();
    linspace(0.0, t_final, n_times)
        .into_iter()
        .map(|t| (t, mean_abs_residual(params, d, &centers, t)))
        .collect()
}

/// Mean `|dt c - D lap c|` over the space-time grid of interior voxel centers
/// and `n_times` equally spaced times.
pub fn residual_final(
    params: &MlpParams,
    diffusion: &DiffusionParam,
    domain: &Domain,
    t_final: f64,
    n_times: usize,
) -> f64 {
    let centers = interior_centers(domain);
    if centers.is_empty() || n_times == 0 {
        return 0.0;
    }
    let d = diffusion.value();
    let pts: Vec<SamplePoint> = linspace(0.0, t_final, n_times)
        .into_iter()
        .flat_map(|t| centers.iter().map(move |&x| SamplePoint { x, t }))
        .collect();
    let sum: f64 = eval_derivs(params, &pts)
        .iter()
        .map(|b| b.residual(d).abs())
        .sum();
    sum / pts.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub final_norm: f64,
    pub curve: Vec<(f64, f64)>,
    /// `r(t_i)` at every snapshot time.
    pub markers: Vec<(f64, f64)>,
}

impl ResidualReport {
    pub fn compute(
        params: &MlpParams,
        diffusion: &DiffusionParam,
        domain: &Domain,
        snapshot_times: &[f64],
        n_times: usize,
    ) -> Self {
        let t_final = snapshot_times.last().copied().unwrap_or(0.0);
        let curve = residual_over_time(params, diffusion, domain, t_final, n_times);
        let final_norm = residual_final(params, diffusion, domain, t_final, n_times);
        let centers = interior_centers(domain);
        let d = diffusion.value();
        let markers = snapshot_times
            .iter()
            .map(|&t| (t, mean_abs_residual(params, d, &centers, t)))
            .collect();
        Self {
            final_norm,
            curve,
            markers,
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "t,residual")?;
        for (t, r) in &self.curve {
            writeln!(w, "{t},{r:e}")?;
        }
        Ok(())
    }
}

/// Peak-to-trough ratio of a residual curve: the largest `r` at the data
/// times over the median of `r` away from them. Curve points within
/// `exclusion` of a data time count as neither.
pub fn data_time_ratio(curve: &[(f64, f64)], data_times: &[f64], exclusion: f64) -> f64 {
    let near = |t: f64| data_times.iter().any(|&d| (t - d).abs() <= exclusion);
    let peaks = data_times.iter().map(|&d| {
        curve
            .iter()
            .filter(|(t, _)| (t - d).abs() <= exclusion)
            .map(|&(_, r)| r)
            .fold(0.0, f64::max)
    });
    let peak = peaks.fold(0.0, f64::max);
    let mut between: Vec<f64> = curve.iter().filter(|(t, _)| !near(*t)).map(|&(_, r)| r).collect();
    if between.is_empty() {
        return f64::NAN;
    }
    between.sort_by(f64::total_cmp);
    let m = between.len();
    let median = if m % 2 == 1 {
        between[m / 2]
    } else {
        0.5 * (between[m / 2 - 1] + between[m / 2])
    };
    peak / median
}

/// Relative error in percent.
pub fn rel_error(d: f64, d_ref: f64) -> Result<f64> {
    if !(d_ref > 0.0) {
        return Err(DiagnosticsError::NonPositiveReference(d_ref));
    }
    Ok(100.0 * (d - d_ref).abs() / d_ref)
}

/// Free diffusion coefficient `lambda^2 D` for tortuosity `lambda`.
pub fn free_diffusion(d_apparent: f64, tortuosity: f64) -> Result<f64> {
    if !(tortuosity > 0.0) {
        return Err(DiagnosticsError::NonPositiveTortuosity(tortuosity));
    }
    Ok(tortuosity * tortuosity * d_apparent)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = 0.5 * (i + j) as f64 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DiagnosticsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(DiagnosticsError::TooFew {
            needed: 2,
            got: x.len(),
        });
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Aggregate {
        mean,
        std,
        count: values.len(),
    })
}

/// Outcome of one successful run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunOutcome {
    pub diffusion: f64,
    pub rel_error: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub config: Vec<(String, String)>,
    pub seed: u64,
    pub outcome: Option<RunOutcome>,
    pub message: Option<String>,
}

impl SweepRow {
    pub fn status(&self) -> &'static str {
        if self.outcome.is_some() {
            "ok"
        } else {
            "x"
        }
    }
}

/// Leaf values of a JSON-serializable config, keyed by dotted path.
pub fn flatten_config<C: Serialize>(config: &C) -> Result<Vec<(String, String)>> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
        match v {
            serde_json::Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, v, out);
                }
            }
            serde_json::Value::String(s) => out.push((prefix.to_string(), s.clone())),
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", &serde_json::to_value(config)?, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Runs every `(config, seed)` pair, at most `jobs` at a time. Failures become
/// "x" rows and the sweep continues; rows keep the input order.
pub fn run_sweep<C, F>(cells: &[(C, u64)], jobs: usize, run: F) -> Result<SweepTable>
where
    C: Serialize + Sync,
    F: Fn(&C, u64) -> std::result::Result<RunOutcome, String> + Sync,
{
    let configs = cells
        .iter()
        .map(|(c, _)| flatten_config(c))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| std::io::Error::other(e.to_string()))?;
    let outcomes: Vec<_> = pool.install(|| {
        cells
            .par_iter()
            .map(|(c, seed)| run(c, *seed))
            .collect()
    });
    let rows = configs
        .into_iter()
        .zip(cells)
        .zip(outcomes)
        .map(|((config, (_, seed)), outcome)| match outcome {
            Ok(o) => SweepRow {
                config,
                seed: *seed,
                outcome: Some(o),
                message: None,
            },
            Err(m) => SweepRow {
                config,
                seed: *seed,
                outcome: None,
                message: Some(m),
            },
        })
        .collect();
    Ok(SweepTable { rows })
}

impl SweepTable {
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        let keys: Vec<&str> = self
            .rows
            .first()
            .map(|r| r.config.iter().map(|(k, _)| k.as_str()).collect())
            .unwrap_or_default();
        let mut header: Vec<&str> = keys.clone();
        header.extend(["seed", "D", "rel_err_pct", "residual_norm", "status"]);
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let mut fields: Vec<String> = row.config.iter().map(|(_, v)| csv_field(v)).collect();
            fields.push(row.seed.to_string());
            match &row.outcome {
                Some(o) => {
                    fields.push(o.diffusion.to_string());
                    fields.push(o.rel_error.to_string());
                    fields.push(format!("{:e}", o.residual));
                }
                None => fields.extend([String::new(), String::new(), String::new()]),
            }
            fields.push(row.status().to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Rows grouped by config in first-appearance order.
    pub fn groups(&self) -> Vec<(Vec<(String, String)>, Vec<&SweepRow>)> {
        let mut out: Vec<(Vec<(String, String)>, Vec<&SweepRow>)> = Vec::new();
        for row in &self.rows {
            match out.iter_mut().find(|(c, _)| *c == row.config) {
                Some((_, rows)) => rows.push(row),
                None => out.push((row.config.clone(), vec![row])),
            }
        }
        out
    }
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// Summary of a group of runs: aggregated rel. error and residual, or
/// failure when any run failed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Failed,
    Ok {
        error: Aggregate,
        residual: Aggregate,
    },
}

impl Cell {
    pub fn from_rows(rows: &[&SweepRow]) -> Self {
        let outcomes: Option<Vec<RunOutcome>> = rows.iter().map(|r| r.outcome).collect();
        match outcomes {
            Some(o) if !o.is_empty() => {
                let errs: Vec<f64> = o.iter().map(|o| o.rel_error).collect();
                let res: Vec<f64> = o.iter().map(|o| o.residual).collect();
                Cell::Ok {
                    error: aggregate(&errs).expect("non-empty"),
                    residual: aggregate(&res).expect("non-empty"),
                }
            }
            _ => Cell::Failed,
        }
    }

    /// "7 (1.1e-02)": mean rel. error with mean residual.
    pub fn with_residual(&self) -> String {
        match self {
            Cell::Failed => "x".into(),
            Cell::Ok { error, residual } => format!("{:.0} ({:.1e})", error.mean, residual.mean),
        }
    }

    /// "2 (1)": mean rel. error with its standard deviation.
    pub fn with_std(&self) -> String {
        match self {
            Cell::Failed => "x".into(),
            Cell::Ok { error, .. } => format!("{:.0} ({:.0})", error.mean, error.std),
        }
    }
}

/// Plain-text matrix with a corner label, column headers and row labels.
pub fn render_matrix(corner: &str, columns: &[String], rows: &[(String, Vec<String>)]) -> String {
    let mut widths = vec![corner.len()];
    widths.extend(columns.iter().map(|c| c.len()));
    for (label, cells) in rows {
        widths[0] = widths[0].max(label.len());
        for (i, c) in cells.iter().enumerate() {
            if i + 1 < widths.len() {
                widths[i + 1] = widths[i + 1].max(c.len());
            }
        }
    }
    let line = |first: &str, rest: &[String]| {
        let mut s = format!("{first:<w$}", w = widths[0]);
        for (i, c) in rest.iter().enumerate() {
            s.push_str(" | ");
            s.push_str(&format!("{c:>w$}", w = widths[i + 1]));
        }
        s.trim_end().to_string()
    };
    let mut out = line(corner, columns);
    out.push('\n');
    out.push_str(&"-".repeat(out.trim_end().len()));
    out.push('\n');
    for (label, cells) in rows {
        out.push_str(&line(label, cells));
        out.push('\n');
    }
    out
}
