use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use rmtcorr::spiked::write_predictions_csv;
use serde::Serialize;
use serde_json::Value;

use crate::config::{Band, ExperimentConfig};
use crate::experiments::{mean, sd, RunOutput};

pub const SCHEMA_VERSION: u32 = 1;

/// Mean and standard error of one statistic over the successful replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatSummary {
    pub mean: f64,
    pub std_error: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub statistic: String,
    pub center: f64,
    pub half_width: f64,
    pub mean: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub experiment: String,
    pub master_seed: u64,
    pub reps: usize,
    pub config: ExperimentConfig,
    pub statistics: BTreeMap<String, StatSummary>,
    pub bands: Vec<BandResult>,
    pub failed_replications: usize,
    pub extras: Value,
    pub passed: bool,
}

/// Summary key of a column; sample-size grids get an `[n=…]` suffix.
pub fn stat_key(column: &str, n: usize, grid_len: usize) -> String {
    if grid_len > 1 {
        format!("{column}[n={n}]")
    } else {
        column.to_string()
    }
}

/// All statistic keys a run will produce.
pub fn stat_keys(columns: &[String], n_grid: &[usize]) -> Vec<String> {
    n_grid
        .iter()
        .flat_map(|&n| columns.iter().map(move |c| stat_key(c, n, n_grid.len())))
        .collect()
}

/// Fails when a band names a statistic the run cannot produce.
pub fn check_bands(bands: &[Band], keys: &[String]) -> Result<()> {
    for (i, band) in bands.iter().enumerate() {
        if !keys.contains(&band.statistic) {
            bail!(
                "invalid config field `bands[{i}].statistic`: unknown statistic {:?}; available: {}",
                band.statistic,
                keys.join(", ")
            );
        }
    }
    Ok(())
}

pub fn summarize(config: &ExperimentConfig, out: &RunOutput) -> Result<Summary> {
    check_bands(&config.bands, &stat_keys(&out.columns, &out.n_grid))?;
    let mut statistics = BTreeMap::new();
    for &n in &out.n_grid {
        for (c, name) in out.columns.iter().enumerate() {
            let vals: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.n == n && r.error.is_none())
                .map(|r| r.values[c])
                .collect();
            let std_error = sd(&vals) / (vals.len() as f64).sqrt();
            statistics.insert(
                stat_key(name, n, out.n_grid.len()),
                StatSummary { mean: mean(&vals), std_error, count: vals.len() },
            );
        }
    }
    let bands: Vec<BandResult> = config
        .bands
        .iter()
        .map(|b| {
            let mean = statistics[&b.statistic].mean;
            BandResult {
                statistic: b.statistic.clone(),
                center: b.center,
                half_width: b.half_width,
                mean,
                passed: (mean - b.center).abs() <= b.half_width,
            }
        })
        .collect();
    let passed = bands.iter().all(|b| b.passed);
    Ok(Summary {
        schema_version: SCHEMA_VERSION,
        experiment: out.experiment.name().to_string(),
        master_seed: config.master_seed,
        reps: config.reps,
        config: config.clone(),
        statistics,
        bands,
        failed_replications: out.rows.iter().filter(|r| r.error.is_some()).count(),
        extras: out.extras.clone(),
        passed,
    })
}

/// `experiment,replication,substream_seed,n,<statistics…>,error`.
pub fn write_rows<W: Write>(out: &RunOutput, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["experiment".to_string(), "replication".into(), "substream_seed".into(), "n".into()];
    header.extend(out.columns.iter().cloned());
    header.push("error".into());
    w.write_record(&header)?;
    for row in &out.rows {
        let mut rec = vec![
            out.experiment.name().to_string(),
            row.replication.to_string(),
            row.substream_seed.to_string(),
            row.n.to_string(),
        ];
        if row.error.is_some() {
            rec.extend(std::iter::repeat_n(String::new(), out.columns.len()));
        } else {
            rec.extend(row.values.iter().map(|v| v.to_string()));
        }
        rec.push(row.error.clone().unwrap_or_default());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `experiment,replication,n,wall_time_seconds`.
pub fn write_timings<W: Write>(out: &RunOutput, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["experiment", "replication", "n", "wall_time_seconds"])?;
    for row in &out.rows {
        w.write_record([
            out.experiment.name().to_string(),
            row.replication.to_string(),
            row.n.to_string(),
            format!("{:.6}", row.wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes `rows.csv`, `timings.csv`, `summary.json` and, for spiked runs,
/// `predictions.csv` into `dir`.
pub fn write_all(dir: &Path, config: &ExperimentConfig, out: &RunOutput) -> Result<Summary> {
    let summary = summarize(config, out)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_rows(out, create(dir, "rows.csv")?)?;
    write_timings(out, create(dir, "timings.csv")?)?;
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    if !out.predictions.is_empty() {
        let mc: Vec<(f64, f64)> = out
            .predictions
            .iter()
            .map(|s| {
                let vals: Vec<f64> = (s.rank_start..=s.rank_end)
                    .flat_map(|r| {
                        let c = out.columns.iter().position(|c| *c == format!("lambda_{r}"));
                        out.rows
                            .iter()
                            .filter(|row| row.error.is_none())
                            .filter_map(move |row| c.map(|c| row.values[c]))
                    })
                    .collect();
                (mean(&vals), sd(&vals))
            })
            .collect();
        write_predictions_csv(&out.predictions, Some(&mc), create(dir, "predictions.csv")?)?;
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_carry_grid_suffix() {
        let cols = vec!["a".to_string()];
        assert_eq!(stat_keys(&cols, &[10]), vec!["a"]);
        assert_eq!(stat_keys(&cols, &[10, 20]), vec!["a[n=10]", "a[n=20]"]);
        let band = Band { statistic: "b".into(), center: 0.0, half_width: 1.0 };
        assert!(check_bands(&[band], &stat_keys(&cols, &[10])).is_err());
    }
}
