use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use rmtcorr::datagen::{generate_with, DataModel, Mixing};
use rmtcorr::estimators::{
    estimate_correlation_moments, reconstruct_spectrum, threshold_estimate, SupportGrid, ThresholdRule,
    DEFAULT_GRID_STEP, DEFAULT_M,
};
use rmtcorr::linalg::{kolmogorov_distance, spectral_norm, EmpiricalSpectralDistribution};
use rmtcorr::lsd::LimitLaw;
use rmtcorr::spiked::{classify_spikes, SpikePrediction};
use rmtcorr::stats::{
    comparison_report_from_cov, extreme_report_from_eigenvalues, max_offdiag_scaled, sample_correlation,
    sample_covariance,
};
use rmtcorr::{RandomStream, SymmetricMatrix};
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig, ReferenceLaw};
use crate::report::{check_bands, stat_keys};

/// Grid size used when tabulating reference laws.
pub const DEFAULT_LAW_POINTS: usize = 4001;

/// Tolerance for the per-replication Weyl check.
pub const WEYL_SLACK: f64 = 1e-9;

/// Statistics of one replication at one sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationRow {
    pub replication: usize,
    pub substream_seed: u64,
    pub n: usize,
    /// One value per column of [`RunOutput::columns`]; empty when `error` is set.
    pub values: Vec<f64>,
    pub error: Option<String>,
    pub wall_time: f64,
}

/// Everything produced by a batch, before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub experiment: Experiment,
    pub columns: Vec<String>,
    pub n_grid: Vec<usize>,
    pub rows: Vec<ReplicationRow>,
    /// Experiment-specific summary entries.
    pub extras: Value,
    pub predictions: Vec<SpikePrediction>,
}

/// Shared, read-only state for all replications.
enum Setup {
    DiagCompare { mixing: Mixing },
    LsdCheck { mixing: Mixing, reference: ReferenceLaw, laws: Vec<LimitLaw> },
    Extremes { mixing: Mixing },
    Threshold { mixing: Mixing, rules: Vec<ThresholdRule> },
    SpectrumEstimate { mixing: Mixing, truth: Vec<f64>, ell: usize, grid: SupportGrid },
    Spiked { mixing: Mixing, ranks: Vec<usize>, predictions: Vec<SpikePrediction> },
}

impl Setup {
    fn mixing(&self) -> &Mixing {
        match self {
            Setup::DiagCompare { mixing }
            | Setup::LsdCheck { mixing, .. }
            | Setup::Extremes { mixing }
            | Setup::Threshold { mixing, .. }
            | Setup::SpectrumEstimate { mixing, .. }
            | Setup::Spiked { mixing, .. } => mixing,
        }
    }
}

fn prepare(config: &ExperimentConfig) -> Result<(Setup, Vec<String>)> {
    let p = config.model.p;
    let grid_points = config.params.grid_points.unwrap_or(DEFAULT_LAW_POINTS);
    let names = |list: &[&str]| list.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    Ok(match config.experiment {
        Experiment::DiagCompare => (
            Setup::DiagCompare { mixing: config.model.build_mixing()? },
            names(&["diag_gap", "inv_sqrt_gap", "r_vs_q_gap", "weyl_max_shift", "weyl_holds"]),
        ),
        Experiment::LsdCheck => {
            let reference = config.params.reference.unwrap_or_default();
            let laws = config
                .n_grid()
                .iter()
                .map(|&n| match reference {
                    ReferenceLaw::Mp => LimitLaw::marchenko_pastur(p as f64 / n as f64, grid_points),
                    ReferenceLaw::Semicircle => LimitLaw::semicircle(grid_points),
                })
                .collect::<rmtcorr::Result<Vec<_>>>()
                .context("tabulating the reference law")?;
            (
                Setup::LsdCheck { mixing: config.model.build_mixing()?, reference, laws },
                names(&["kolmogorov"]),
            )
        }
        Experiment::Extremes => (
            Setup::Extremes { mixing: config.model.build_mixing()? },
            names(&["lambda_top", "lambda_bottom", "top_scaled", "bottom_scaled"]),
        ),
        Experiment::Threshold => {
            let m = config.params.m.unwrap_or(DEFAULT_M);
            let rules = config
                .n_grid()
                .iter()
                .map(|&n| ThresholdRule::new(m, p, n))
                .collect::<rmtcorr::Result<Vec<_>>>()?;
            (
                Setup::Threshold { mixing: config.model.build_mixing()?, rules },
                names(&[
                    "t_p",
                    "norm_r",
                    "norm_rhat",
                    "offdiag_nonzero",
                    "exactly_diagonal",
                    "improved",
                    "max_offdiag_scaled",
                ]),
            )
        }
        Experiment::SpectrumEstimate => {
            let mixing = config.model.build_mixing()?;
            let truth = mixing.gamma.eigenvalues()?;
            let ell = config.ell();
            let grid = SupportGrid {
                upper: None,
                step: config.params.grid_step.unwrap_or(DEFAULT_GRID_STEP),
            };
            let mut cols = names(&["l1_error", "max_residual", "hankel_min_eigenvalue"]);
            cols.extend((1..=ell).map(|k| format!("moment_{k}")));
            (Setup::SpectrumEstimate { mixing, truth, ell, grid }, cols)
        }
        Experiment::Spiked => {
            let model = config.spiked_model()?;
            let spec = model.mixing_spec()?;
            let data_model = DataModel { mixing: spec, ..config.model.clone() };
            let mixing = data_model.build_mixing()?;
            let law = LimitLaw::marchenko_pastur(model.gamma, grid_points)?;
            let predictions = classify_spikes(&model, &law)?;
            let mut ranks: Vec<usize> = predictions.iter().flat_map(|s| s.rank_start..=s.rank_end).collect();
            ranks.sort_unstable();
            ranks.dedup();
            if let Some(&r) = ranks.iter().find(|&&r| r > p) {
                bail!("predicted rank {r} exceeds p = {p}");
            }
            let cols = ranks.iter().map(|r| format!("lambda_{r}")).collect();
            (Setup::Spiked { mixing, ranks, predictions }, cols)
        }
    })
}

/// Seed of replication `rep` at grid position `n_index`. A single sample
/// size uses the replication substream directly.
pub fn task_seed(master: u64, rep: usize, n_index: usize, grid_len: usize) -> u64 {
    let base = RandomStream::substream_seed(master, rep as u64);
    if grid_len > 1 {
        RandomStream::substream_seed(base, n_index as u64)
    } else {
        base
    }
}

fn replicate(setup: &Setup, model: &DataModel, n_index: usize, seed: u64) -> Result<Vec<f64>> {
    let n = model.n;
    let p = model.p;
    let mut stream = RandomStream::new(seed);
    let x = generate_with(model, setup.mixing(), &mut stream)?;
    let s = sample_covariance(&x)?;
    let scale = (n as f64 / p as f64).sqrt();
    Ok(match setup {
        Setup::DiagCompare { mixing } => {
            let report = comparison_report_from_cov(&s, &mixing.sigma, n)?;
            let r = sample_correlation(&s)?;
            let inv: Vec<f64> = mixing.sigma.diagonal().iter().map(|v| 1.0 / v.sqrt()).collect();
            let sq = s.congruence_diag(&inv)?;
            let norm = spectral_norm(&r.sub(&sq)?)?;
            let shift = r
                .eigenvalues()?
                .iter()
                .zip(sq.eigenvalues()?)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            vec![
                report.diag_gap,
                report.inv_sqrt_gap,
                report.r_vs_q_gap,
                scale * shift,
                flag(shift <= norm + WEYL_SLACK),
            ]
        }
        Setup::LsdCheck { reference, laws, .. } => {
            let r = sample_correlation(&s)?;
            let m = match reference {
                ReferenceLaw::Mp => r,
                ReferenceLaw::Semicircle => r.sub(&SymmetricMatrix::identity(p))?.scaled(scale),
            };
            let esd = EmpiricalSpectralDistribution::of_matrix(&m)?;
            vec![kolmogorov_distance(&esd, &laws[n_index])?]
        }
        Setup::Extremes { .. } => {
            let r = sample_correlation(&s)?;
            let e = extreme_report_from_eigenvalues(&r.eigenvalues()?, n)?;
            vec![e.lambda_top, e.lambda_bottom, e.top_scaled, e.bottom_scaled]
        }
        Setup::Threshold { mixing, rules } => {
            let rule = &rules[n_index];
            let r = sample_correlation(&s)?;
            let rhat = threshold_estimate(&r, rule);
            let norm_r = spectral_norm(&r.sub(&mixing.gamma)?)?;
            let norm_rhat = spectral_norm(&rhat.sub(&mixing.gamma)?)?;
            let mut nonzero = 0usize;
            for i in 0..p {
                for j in i + 1..p {
                    if rhat.get(i, j) != 0.0 {
                        nonzero += 1;
                    }
                }
            }
            vec![
                rule.t_p,
                norm_r,
                norm_rhat,
                nonzero as f64,
                flag(nonzero == 0),
                flag(norm_rhat < norm_r),
                max_offdiag_scaled(&r, n)?,
            ]
        }
        Setup::SpectrumEstimate { truth, ell, grid, .. } => {
            let moments = estimate_correlation_moments(&x, *ell)?;
            let estimate = reconstruct_spectrum(&moments, grid)?;
            let l1 = estimate
                .eigenvalues
                .iter()
                .zip(truth)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / p as f64;
            let mut out = vec![l1, estimate.max_residual(), estimate.metadata.hankel_min_eigenvalue];
            out.extend(moments.normalized());
            out
        }
        Setup::Spiked { ranks, .. } => {
            let eig = sample_correlation(&s)?.eigenvalues()?;
            ranks.iter().map(|&r| eig[r - 1]).collect()
        }
    })
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Builds the shared state of a run without running it and returns the
/// statistic keys the summary will contain. Fails on anything `run` would
/// reject up front, including bands on unknown statistics.
pub fn plan(config: &ExperimentConfig) -> Result<Vec<String>> {
    config.validate()?;
    let (_, columns) = prepare(config)?;
    let keys = stat_keys(&columns, &config.n_grid());
    check_bands(&config.bands, &keys)?;
    Ok(keys)
}

/// Number of worker threads: explicit value, else all logical cores.
pub fn resolve_jobs(jobs: Option<usize>) -> usize {
    jobs.filter(|&j| j > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every replication of a validated config on a pool of `jobs` workers.
/// Rows come back ordered by replication, then by grid position.
pub fn run(config: &ExperimentConfig, jobs: usize) -> Result<RunOutput> {
    config.validate()?;
    let (setup, columns) = prepare(config)?;
    let n_grid = config.n_grid();
    check_bands(&config.bands, &stat_keys(&columns, &n_grid))?;
    let tasks: Vec<(usize, usize)> = (0..config.reps)
        .flat_map(|rep| (0..n_grid.len()).map(move |k| (rep, k)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building the worker pool")?;
    log::info!(
        "running {} ({} replications x {} sample sizes) on {} workers",
        config.experiment.name(),
        config.reps,
        n_grid.len(),
        jobs
    );
    let rows: Vec<ReplicationRow> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(rep, k)| {
                let n = n_grid[k];
                let model = DataModel { n, ..config.model.clone() };
                let seed = task_seed(config.master_seed, rep, k, n_grid.len());
                let start = Instant::now();
                let result = replicate(&setup, &model, k, seed);
                let wall_time = start.elapsed().as_secs_f64();
                let (values, error) = match result {
                    Ok(v) => (v, None),
                    Err(e) => {
                        log::warn!("replication {rep} (n = {n}) failed: {e:#}");
                        (Vec::new(), Some(format!("{e:#}")))
                    }
                };
                ReplicationRow { replication: rep, substream_seed: seed, n, values, error, wall_time }
            })
            .collect()
    });
    let predictions = match &setup {
        Setup::Spiked { predictions, .. } => predictions.clone(),
        _ => Vec::new(),
    };
    let extras = extras(config.experiment, &columns, &n_grid, &rows, &predictions)?;
    Ok(RunOutput { experiment: config.experiment, columns, n_grid, rows, extras, predictions })
}

fn column(columns: &[String], name: &str) -> Result<usize> {
    columns
        .iter()
        .position(|c| c == name)
        .ok_or_else(|| anyhow!("no column {name}"))
}

fn extras(
    experiment: Experiment,
    columns: &[String],
    n_grid: &[usize],
    rows: &[ReplicationRow],
    predictions: &[SpikePrediction],
) -> Result<Value> {
    Ok(match experiment {
        Experiment::DiagCompare if n_grid.len() > 1 => {
            let c = column(columns, "diag_gap")?;
            let k = n_grid.len();
            let mut means = Vec::with_capacity(k);
            for (idx, &n) in n_grid.iter().enumerate() {
                let vals: Vec<f64> = rows
                    .chunks(k)
                    .map(|chunk| &chunk[idx])
                    .filter(|r| r.error.is_none())
                    .map(|r| r.values[c])
                    .collect();
                means.push(json!({"n": n, "mean": mean(&vals)}));
            }
            let mean_values: Vec<f64> = means.iter().map(|m| m["mean"].as_f64().unwrap_or(f64::NAN)).collect();
            let decreasing = mean_values.windows(2).all(|w| w[1] < w[0]);
            let (mut compared, mut increased) = (0usize, 0usize);
            for chunk in rows.chunks(k) {
                let (first, last) = (&chunk[0], &chunk[k - 1]);
                if first.error.is_none() && last.error.is_none() {
                    compared += 1;
                    if last.values[c] > first.values[c] {
                        increased += 1;
                    }
                }
            }
            json!({
                "diag_gap_mean_by_n": means,
                "diag_gap_mean_decreasing": decreasing,
                "diag_gap_increase_count": increased,
                "diag_gap_pairs_compared": compared,
            })
        }
        Experiment::Threshold => {
            let ok = |name: &str| -> Result<usize> {
                let c = column(columns, name)?;
                Ok(rows.iter().filter(|r| r.error.is_none() && r.values[c] == 1.0).count())
            };
            json!({
                "improved_count": ok("improved")?,
                "exactly_diagonal_count": ok("exactly_diagonal")?,
                "replications": rows.len(),
            })
        }
        Experiment::Spiked => {
            let mut list = Vec::new();
            for s in predictions {
                let mut per_rank = Vec::new();
                for r in s.rank_start..=s.rank_end {
                    let c = column(columns, &format!("lambda_{r}"))?;
                    let vals: Vec<f64> = rows.iter().filter(|x| x.error.is_none()).map(|x| x.values[c]).collect();
                    per_rank.push(json!({"rank": r, "mean": mean(&vals), "sd": sd(&vals)}));
                }
                list.push(json!({
                    "alpha": s.alpha,
                    "multiplicity": s.multiplicity,
                    "rank_start": s.rank_start,
                    "rank_end": s.rank_end,
                    "detectable": s.detectable,
                    "predicted_limit": s.predicted_limit,
                    "monte_carlo": per_rank,
                }));
            }
            json!({ "predictions": list })
        }
        _ => json!({}),
    })
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Sample standard deviation; NaN below two values.
pub fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text, &[]).unwrap()
    }

    #[test]
    fn seeds_ignore_schedule() {
        let c = config(
            r#"{"experiment": "extremes", "model": {"law": "gaussian", "mixing": "identity", "p": 10, "n": 40},
                "reps": 4, "master_seed": 11}"#,
        );
        let a = run(&c, 1).unwrap();
        let b = run(&c, 3).unwrap();
        assert_eq!(a.rows.len(), 4);
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!(x.values, y.values);
            assert_eq!(x.substream_seed, y.substream_seed);
        }
        assert_eq!(a.rows[2].substream_seed, RandomStream::substream_seed(11, 2));
    }

    #[test]
    fn grid_rows_are_ordered() {
        let c = config(
            r#"{"experiment": "diag-compare", "model": {"law": "gaussian", "mixing": "identity", "p": 5, "n": 20},
                "reps": 3, "master_seed": 1, "params": {"n_grid": [20, 200]}}"#,
        );
        let out = run(&c, 2).unwrap();
        let ns: Vec<usize> = out.rows.iter().map(|r| r.n).collect();
        assert_eq!(ns, vec![20, 200, 20, 200, 20, 200]);
        assert!(out.rows.iter().all(|r| r.values[4] == 1.0));
        assert_eq!(out.extras["diag_gap_pairs_compared"], 3);
    }

    #[test]
    fn rademacher_diag_gap_is_zero() {
        let c = config(
            r#"{"experiment": "diag-compare", "model": {"law": "rademacher", "mixing": "identity", "p": 6, "n": 30},
                "reps": 2, "master_seed": 5}"#,
        );
        let out = run(&c, 1).unwrap();
        assert!(out.rows.iter().all(|r| r.values[0] == 0.0));
    }

    #[test]
    fn spiked_columns_follow_ranks() {
        let c = config(
            r#"{"experiment": "spiked", "model": {"law": "gaussian", "mixing": "identity", "p": 20, "n": 40},
                "reps": 2, "master_seed": 5, "params": {"spikes": [[3.0, 1], [0.0, 2]]}}"#,
        );
        let out = run(&c, 1).unwrap();
        assert_eq!(out.columns[0], "lambda_1");
        assert_eq!(out.predictions.len(), 2);
        assert!(out.rows.iter().all(|r| r.error.is_none()));
    }

    #[test]
    fn sd_of_constant_is_zero() {
        assert_eq!(sd(&[2.0, 2.0, 2.0]), 0.0);
        assert!(sd(&[1.0]).is_nan());
        assert_eq!(mean(&[1.0, 3.0]), 2.0);
    }
}
