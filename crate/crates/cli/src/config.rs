use std::path::Path;

use ndfield::diffengine::Precision;
use ndfield::metrics::DEAD_BAND;
use ndfield::phantom::PhantomSpec;
use ndfield::trainer::FitConfig;
use ndfield::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything a run can be configured with. Command-line flags override the
/// values loaded from the config file; the effective result is echoed into
/// the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Worker threads for dense evaluation; 0 uses every core.
    pub threads: usize,
    pub fit: FitConfig,
    pub sampling: Sampling,
    pub predict: Predict,
    pub metrics: Metrics,
    pub phantom: PhantomSpec,
    pub gradcheck: Gradcheck,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            fit: FitConfig::default(),
            sampling: Sampling::default(),
            predict: Predict::default(),
            metrics: Metrics::default(),
            phantom: PhantomSpec::default(),
            gradcheck: Gradcheck::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sampling {
    /// Draw training points near the baseline labels instead of everywhere.
    pub use_labels: bool,
    /// Voxels by which the label mask is grown.
    pub dilation: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            use_labels: false,
            dilation: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Predict {
    pub time: Option<f64>,
    pub dims: Option<[usize; 3]>,
    pub chunk: usize,
    pub jacdet_dt: bool,
    pub slice_axis: usize,
    /// Middle slice when unset.
    pub slice_index: Option<usize>,
    /// Window of `|J|` slice images.
    pub jacdet_range: [f64; 2],
}

impl Default for Predict {
    fn default() -> Self {
        Self {
            time: None,
            dims: None,
            chunk: 4096,
            jacdet_dt: false,
            slice_axis: 2,
            slice_index: None,
            jacdet_range: [0.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Metrics {
    /// Months; the manifest times when unset.
    pub times: Option<Vec<f64>>,
    /// Every non-zero baseline label when unset.
    pub labels: Option<Vec<i32>>,
    pub dead_band: f64,
    pub holdout: Option<f64>,
    /// Window of residual `|J|` slice images.
    pub residual_range: [f64; 2],
}

impl Default for Metrics {
    fn default() -> Self {
        Self {
            times: None,
            labels: None,
            dead_band: DEAD_BAND,
            holdout: None,
            residual_range: [-0.5, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Gradcheck {
    pub seed: u64,
    pub width: usize,
    pub points: usize,
    pub precision: Precision,
}

impl Default for Gradcheck {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 16,
            points: 200,
            precision: Precision::F64,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Sets the seed of every random source.
    pub fn set_seed(&mut self, seed: u64) {
        self.fit.seed = seed;
        self.phantom.seed = seed;
        self.gradcheck.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("config echo: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = CliConfig::default();
        c.fit.time_horizon = Some(18.0);
        c.metrics.times = Some(vec![0.0, 6.0]);
        let text = c.to_toml().unwrap();
        assert_eq!(toml::from_str::<CliConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_files_keep_defaults() {
        let c: CliConfig = toml::from_str("[fit]\niterations = 5\n[fit.weights]\ngamma = 0.0\n").unwrap();
        assert_eq!(c.fit.iterations, 5);
        assert_eq!(c.fit.weights.gamma, 0.0);
        assert_eq!(c.fit.weights.lambda, 10.0);
        assert_eq!(c.fit.batch_points, FitConfig::default().batch_points);
        assert!(toml::from_str::<CliConfig>("[fit]\nbogus = 1\n").is_err());
        assert!(toml::from_str::<CliConfig>("nonsense = 1\n").is_err());
    }
}
