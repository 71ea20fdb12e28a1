use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rmtcorr::lsd::{AtomicMeasure, Grid, LawHeader, LawKind, LimitLaw, SolverOptions, DEFAULT_ETA};

/// Family selected on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LawFamily {
    Mp,
    Semicircle,
    General,
    GeneralZeroGamma,
}

impl std::str::FromStr for LawFamily {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mp" => LawFamily::Mp,
            "semicircle" => LawFamily::Semicircle,
            "general" => LawFamily::General,
            "general-zero-gamma" => LawFamily::GeneralZeroGamma,
            other => bail!("unknown law {other:?}; expected mp, semicircle, general or general-zero-gamma"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LawRequest {
    pub family: LawFamily,
    pub gamma: Option<f64>,
    /// `H` as inline JSON `[[t, w], …]` or a path to a file holding it.
    pub h: Option<String>,
    pub points: usize,
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub eta: Option<f64>,
}

impl Default for LawRequest {
    fn default() -> Self {
        Self { family: LawFamily::Mp, gamma: None, h: None, points: 1001, lo: None, hi: None, eta: None }
    }
}

fn parse_h(raw: &str) -> Result<AtomicMeasure> {
    let text = if raw.trim_start().starts_with('[') {
        raw.to_string()
    } else {
        std::fs::read_to_string(raw).with_context(|| format!("reading H from {raw}"))?
    };
    serde_json::from_str(&text).map_err(|e| anyhow!("invalid H: {e}"))
}

impl LawRequest {
    pub fn kind(&self) -> Result<LawKind> {
        let gamma = || self.gamma.ok_or_else(|| anyhow!("--gamma is required for this law"));
        let h = || parse_h(self.h.as_deref().ok_or_else(|| anyhow!("--h is required for this law"))?);
        Ok(match self.family {
            LawFamily::Mp => LawKind::Mp { gamma: gamma()? },
            LawFamily::Semicircle => LawKind::Semicircle,
            LawFamily::General => LawKind::General { gamma: gamma()?, h: h()? },
            LawFamily::GeneralZeroGamma => LawKind::GeneralZeroGamma { h: h()? },
        })
    }

    /// Tabulates the law. Marchenko–Pastur and semicircle use their closed
    /// densities unless an explicit range or `η` is requested.
    pub fn build(&self) -> Result<LimitLaw> {
        if self.points < 2 {
            bail!("--points must be at least 2");
        }
        let kind = self.kind()?;
        let custom = self.lo.is_some() || self.hi.is_some() || self.eta.is_some();
        let law = match (&kind, custom) {
            (LawKind::Mp { gamma }, false) => LimitLaw::marchenko_pastur(*gamma, self.points)?,
            (LawKind::Semicircle, false) => LimitLaw::semicircle(self.points)?,
            _ => {
                let default = kind.default_grid(self.points);
                let grid = Grid {
                    lo: self.lo.unwrap_or(default.lo),
                    hi: self.hi.unwrap_or(default.hi),
                    count: self.points,
                };
                if !(grid.hi > grid.lo) {
                    bail!("empty range [{}, {}]", grid.lo, grid.hi);
                }
                let eta = self.eta.unwrap_or(DEFAULT_ETA);
                LimitLaw::from_stieltjes(kind, grid, eta, &SolverOptions::default()).context("solver failed")?
            }
        };
        Ok(law)
    }
}

/// Writes `density.csv` and `law.json` into `dir`.
pub fn emit_limit_law(request: &LawRequest, dir: &Path) -> Result<LawHeader> {
    let law = request.build()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv_path: PathBuf = dir.join("density.csv");
    let file = File::create(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    law.write_density_csv(BufWriter::new(file))?;
    let header = law.header();
    let json_path = dir.join("law.json");
    let mut f = BufWriter::new(File::create(&json_path).with_context(|| format!("creating {}", json_path.display()))?);
    serde_json::to_writer_pretty(&mut f, &header)?;
    writeln!(f)?;
    f.flush()?;
    Ok(header)
}
