use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use rmtcorr::datagen::{DataModel, MixingSpec};
use rmtcorr::spiked::SpikedModel;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Which batch experiment a config describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    DiagCompare,
    LsdCheck,
    Extremes,
    Threshold,
    SpectrumEstimate,
    Spiked,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::DiagCompare => "diag-compare",
            Experiment::LsdCheck => "lsd-check",
            Experiment::Extremes => "extremes",
            Experiment::Threshold => "threshold",
            Experiment::SpectrumEstimate => "spectrum-estimate",
            Experiment::Spiked => "spiked",
        }
    }
}

/// Reference law for `lsd-check`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceLaw {
    /// Marchenko–Pastur with `γ = p/n`, compared with the ESD of `R`.
    #[default]
    Mp,
    /// Semicircle, compared with the ESD of `√(n/p)(R − I)`.
    Semicircle,
}

/// Experiment-specific knobs. Unused fields are ignored by other experiments.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    /// Sample sizes for `diag-compare`; defaults to `model.n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_grid: Option<Vec<usize>>,
    /// Number of moments for `spectrum-estimate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ell: Option<usize>,
    /// Threshold constant `M` for `threshold`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Grid spacing for `spectrum-estimate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_step: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceLaw>,
    /// Spikes `(α, multiplicity)` for `spiked`, on an identity bulk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spikes: Option<Vec<(f64, usize)>>,
    /// Limit-law grid size used for quantile predictions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
}

/// Declared acceptance band on the mean of one summary statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub statistic: String,
    pub center: f64,
    pub half_width: f64,
}

/// One experiment per file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub model: DataModel,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub bands: Vec<Band>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Applies `key=value` overrides. Keys are dot-separated paths into the
/// JSON document; values are parsed as JSON and fall back to strings.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("override {item:?} is not of the form key=value"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut node = &mut *doc;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let map = node
                .as_object_mut()
                .ok_or_else(|| anyhow!("override {key:?}: {:?} is not an object", parts[..i].join(".")))?;
            if i + 1 == parts.len() {
                map.insert(part.to_string(), value.clone());
                break;
            }
            node = map
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config, applies overrides and validates it.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        apply_overrides(&mut doc, overrides)?;
        let config: Self = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            anyhow!("invalid config field `{path}`: {}", e.into_inner())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, overrides).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every parameter the experiment will use before anything runs.
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            bail!("invalid config field `reps`: must be at least 1");
        }
        self.model
            .validate()
            .map_err(|e| anyhow!("invalid config field `model`: {e}"))?;
        self.model
            .law
            .validate()
            .map_err(|e| anyhow!("invalid config field `model.law_params`: {e}"))?;
        if self.experiment != Experiment::Spiked {
            self.model
                .build_mixing()
                .map_err(|e| anyhow!("invalid config field `model.mixing_params`: {e}"))?;
        }
        for (i, band) in self.bands.iter().enumerate() {
            if !(band.half_width >= 0.0) || !band.center.is_finite() {
                bail!("invalid config field `bands[{i}]`: needs a finite center and nonnegative half_width");
            }
        }
        let p = self.model.p;
        match self.experiment {
            Experiment::DiagCompare => {
                if let Some(grid) = &self.params.n_grid {
                    if grid.is_empty() || grid.iter().any(|&n| n < 2) {
                        bail!("invalid config field `params.n_grid`: needs sample sizes of at least 2");
                    }
                }
            }
            Experiment::LsdCheck | Experiment::Extremes => {}
            Experiment::Threshold => {
                if p < 2 {
                    bail!("invalid config field `model.p`: thresholding needs p >= 2");
                }
                if let Some(m) = self.params.m {
                    if !(m > 0.0) {
                        bail!("invalid config field `params.m`: must be positive");
                    }
                }
            }
            Experiment::SpectrumEstimate => {
                let ell = self.ell();
                if ell < 2 || ell > self.model.n {
                    bail!("invalid config field `params.ell`: must be in 2..=n");
                }
                if let Some(step) = self.params.grid_step {
                    if !(step > 0.0) {
                        bail!("invalid config field `params.grid_step`: must be positive");
                    }
                }
            }
            Experiment::Spiked => {
                if self.model.mixing != MixingSpec::Identity {
                    bail!("invalid config field `model.mixing`: the spiked experiment builds its own mixing; use identity");
                }
                let model = self
                    .spiked_model()
                    .map_err(|e| anyhow!("invalid config field `params.spikes`: {e}"))?;
                model
                    .mixing_spec()
                    .map_err(|e| anyhow!("invalid config field `params.spikes`: {e}"))?;
            }
        }
        Ok(())
    }

    pub fn ell(&self) -> usize {
        self.params.ell.unwrap_or(rmtcorr::estimators::DEFAULT_MOMENTS)
    }

    pub fn n_grid(&self) -> Vec<usize> {
        self.params.n_grid.clone().unwrap_or_else(|| vec![self.model.n])
    }

    pub fn spiked_model(&self) -> rmtcorr::Result<SpikedModel> {
        let spikes = self.params.spikes.clone().unwrap_or_default();
        SpikedModel::identity_bulk(spikes, self.model.aspect_ratio(), self.model.p)
    }
}
