use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::SkfConfig;
use crate::error::{FilterError, Result};
use crate::filter::Proposal;
use crate::models::JacobianMode;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Radar,
    Sensor,
    Options,
    #[serde(rename = "custom-1d")]
    Custom1d,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Radar => "radar",
            Scenario::Sensor => "sensor",
            Scenario::Options => "options",
            Scenario::Custom1d => "custom-1d",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Scenario::Radar | Scenario::Sensor => 4,
            Scenario::Options => 2,
            Scenario::Custom1d => 1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ukf,
    Pf,
    Skf,
    Mkf,
    Akf,
}

/// Sample budgets for the sampled filters (fixed-size runs).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub pf: usize,
    pub mkf: usize,
    pub akf: usize,
}

/// Adaptive sampling parameters shared by every `r_max` sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveSettings {
    pub s_base: usize,
    pub s_floor: usize,
    pub s_cap: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSettings {
    pub count: usize,
    pub active: usize,
    #[serde(default)]
    pub selection: SensorSelection,
}

/// Which sensors report at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensorSelection {
    /// The sensors closest to the target.
    #[default]
    Nearest,
    /// A fresh uniform draw every step.
    Random,
}

/// Synthetic market used by the options scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionSettings {
    /// Initial time to maturity of each contract, in years.
    pub maturities: Vec<f64>,
    pub spot0: f64,
    pub sigma_step: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Standard deviation of the daily interest-rate increment.
    pub rate_step: f64,
    /// A contract stops being filtered once its maturity falls below this.
    pub min_maturity: f64,
    pub jacobian: JacobianMode,
}

/// Everything needed to run one scenario sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub trials: usize,
    pub horizon: usize,
    pub seed: u64,
    pub filters: Vec<FilterKind>,
    /// True process-noise scale; empty when the scenario has none to sweep.
    pub sigma_cv: Vec<f64>,
    /// Isotropic filter process noise `sigma_q^2 I`; empty hands filters the
    /// true `Q`.
    pub filter_sigma_q: Vec<f64>,
    /// Measurement noise standard deviation (sensor, options, custom-1d).
    pub sigma_r: Vec<f64>,
    /// Range and bearing variances for the radar.
    pub radar_noise: [f64; 2],
    pub alphas: Vec<f64>,
    /// Confidence-radius targets; non-empty switches MKF/AKF to adaptive
    /// sampling and sizes the PF budget from the adaptive runs.
    pub r_max: Vec<f64>,
    pub adaptive: AdaptiveSettings,
    pub budgets: Budgets,
    pub skf: SkfConfig,
    pub ukf_lambda: Option<f64>,
    pub proposal: Proposal,
    pub initial_state: Vec<f64>,
    pub initial_cov: Vec<f64>,
    /// Draw each trial's filter starting mean from `N(initial_state, initial_cov)`.
    pub jitter_initial_mean: bool,
    pub sensors: SensorSettings,
    pub options: OptionSettings,
    pub save_trajectories: bool,
}

/// On-disk form: every field except the schema version and scenario is an
/// optional override of the scenario defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    schema_version: u32,
    scenario: Scenario,
    trials: Option<usize>,
    horizon: Option<usize>,
    seed: Option<u64>,
    filters: Option<Vec<FilterKind>>,
    sigma_cv: Option<Vec<f64>>,
    filter_sigma_q: Option<Vec<f64>>,
    sigma_r: Option<Vec<f64>>,
    radar_noise: Option<[f64; 2]>,
    alphas: Option<Vec<f64>>,
    r_max: Option<Vec<f64>>,
    adaptive: Option<AdaptiveSettings>,
    budgets: Option<Budgets>,
    skf: Option<SkfConfig>,
    ukf_lambda: Option<f64>,
    proposal: Option<Proposal>,
    initial_state: Option<Vec<f64>>,
    initial_cov: Option<Vec<f64>>,
    jitter_initial_mean: Option<bool>,
    sensors: Option<SensorSettings>,
    options: Option<OptionSettings>,
    save_trajectories: Option<bool>,
}

const TABLE_SIGMA_Q: [f64; 5] = [1e-2, 5e-2, 1e-1, 5e-1, 1.0];

impl ExperimentConfig {
    /// Full-scale defaults for a scenario.
    pub fn for_scenario(scenario: Scenario) -> Self {
        use FilterKind::*;
        let mut cfg = ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            scenario,
            trials: 20,
            horizon: 100,
            seed: 20_160_301,
            filters: vec![Ekf, Ukf, Pf, Skf, Mkf, Akf],
            sigma_cv: vec![1e-2],
            filter_sigma_q: TABLE_SIGMA_Q.to_vec(),
            sigma_r: vec![],
            radar_noise: [0.1, 0.01],
            alphas: vec![0.5],
            r_max: vec![],
            adaptive: AdaptiveSettings {
                s_base: 500,
                s_floor: 50,
                s_cap: 100_000,
                confidence: 0.95,
            },
            budgets: Budgets {
                pf: 10_000,
                mkf: 10_000,
                akf: 10_000,
            },
            skf: SkfConfig::default(),
            ukf_lambda: None,
            proposal: Proposal::Prior,
            initial_state: vec![],
            initial_cov: vec![100.0, 1.0, 100.0, 1.0],
            jitter_initial_mean: true,
            sensors: SensorSettings {
                count: 200,
                active: 3,
                selection: SensorSelection::default(),
            },
            options: OptionSettings {
                maturities: vec![1.0 / 6.0, 0.5, 1.0],
                spot0: 100.0,
                sigma_step: 0.01,
                sigma_min: 0.05,
                sigma_max: 0.8,
                rate_step: 0.01,
                min_maturity: 10.0 / 252.0,
                jacobian: JacobianMode::ClosedForm,
            },
            save_trajectories: false,
        };
        match scenario {
            Scenario::Radar => {
                cfg.initial_state = vec![1000.0, 10.0, 1000.0, 10.0];
                cfg.sigma_cv = (1..=10).map(|k| k as f64 * 1e-3).collect();
            }
            Scenario::Sensor => {
                cfg.initial_state = vec![1000.0, 1.0, 1000.0, 1.0];
                cfg.sigma_r = vec![20.0];
            }
            Scenario::Options => {
                cfg.initial_state = vec![0.2, 0.03];
                cfg.initial_cov = vec![0.1, 0.1];
                cfg.jitter_initial_mean = false;
                cfg.sigma_cv = vec![];
                cfg.filter_sigma_q = vec![1e-2];
                cfg.sigma_r = vec![1e-2];
                cfg.filters = vec![Ekf, Ukf, Skf, Mkf];
                cfg.budgets = Budgets {
                    pf: 1000,
                    mkf: 1000,
                    akf: 1000,
                };
                cfg.skf.samples_per_iter = 1000;
                cfg.skf.iterations = 100;
                cfg.alphas = vec![1.0];
                cfg.proposal = Proposal::Ekf { inflation: 4.0 };
            }
            Scenario::Custom1d => {
                cfg.initial_state = vec![0.0];
                cfg.initial_cov = vec![1.0];
                cfg.sigma_cv = vec![0.1];
                cfg.filter_sigma_q = vec![];
                cfg.sigma_r = vec![0.5];
                // a fractional power tempers the likelihood, so only the
                // untempered update can match the exact filter here
                cfg.alphas = vec![1.0];
            }
        }
        cfg
    }

    /// Adaptive-sampling study on the sensor network with known parameters.
    pub fn adaptive_study() -> Self {
        let mut cfg = Self::for_scenario(Scenario::Sensor);
        cfg.sigma_cv = vec![0.1];
        cfg.filter_sigma_q = vec![];
        cfg.filters = vec![FilterKind::Pf, FilterKind::Akf];
        cfg.r_max = vec![0.5, 1.0, 1.5, 2.0];
        cfg
    }

    /// Desk scale: five trials and, for the radar, three of the ten
    /// process-noise values.
    pub fn desk_scale(mut self) -> Self {
        self.trials = 5;
        if self.scenario == Scenario::Radar && self.sigma_cv.len() > 3 {
            self.sigma_cv = vec![1e-3, 5e-3, 1e-2];
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ConfigFile =
            serde_json::from_str(text).map_err(|e| FilterError::ConfigError(e.to_string()))?;
        if file.schema_version != SCHEMA_VERSION {
            return Err(FilterError::ConfigError(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                file.schema_version
            )));
        }
        let mut cfg = Self::for_scenario(file.scenario);
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = file.$field { cfg.$field = v; })*
            };
        }
        take!(
            trials, horizon, seed, filters, sigma_cv, filter_sigma_q, sigma_r, radar_noise, alphas,
            r_max, adaptive, budgets, skf, proposal, initial_state, initial_cov,
            jitter_initial_mean, sensors, options, save_trajectories
        );
        if file.ukf_lambda.is_some() {
            cfg.ukf_lambda = file.ukf_lambda;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FilterError::ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(FilterError::ConfigError(msg));
        if self.schema_version != SCHEMA_VERSION {
            return err(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.trials == 0 {
            return err("trials must be >= 1".into());
        }
        if self.horizon == 0 {
            return err("horizon must be >= 1".into());
        }
        if self.filters.is_empty() {
            return err("no filters selected".into());
        }
        let d = self.scenario.state_dim();
        if self.initial_state.len() != d || self.initial_cov.len() != d {
            return err(format!(
                "{} needs a {d}-dimensional initial state and covariance diagonal",
                self.scenario
            ));
        }
        if self.initial_cov.iter().any(|v| !(*v > 0.0)) {
            return err("initial covariance diagonal must be positive".into());
        }
        let positive = |name: &str, xs: &[f64]| -> Result<()> {
            if xs.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(FilterError::ConfigError(format!("{name} entries must be positive")));
            }
            Ok(())
        };
        positive("sigma_cv", &self.sigma_cv)?;
        positive("filter_sigma_q", &self.filter_sigma_q)?;
        positive("sigma_r", &self.sigma_r)?;
        positive("radar_noise", &self.radar_noise)?;
        positive("r_max", &self.r_max)?;
        match self.scenario {
            Scenario::Radar | Scenario::Sensor | Scenario::Custom1d if self.sigma_cv.is_empty() => {
                return err(format!("{} needs at least one sigma_cv", self.scenario));
            }
            Scenario::Sensor | Scenario::Options | Scenario::Custom1d if self.sigma_r.is_empty() => {
                return err(format!("{} needs at least one sigma_r", self.scenario));
            }
            _ => {}
        }
        if self.filters.contains(&FilterKind::Akf) && self.alphas.is_empty() {
            return err("akf selected without alphas".into());
        }
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return err("alphas must lie in (0, 1]".into());
        }
        let min_samples = d + 1;
        if self.budgets.pf == 0 || self.budgets.mkf < min_samples || self.budgets.akf < min_samples {
            return err("particle budgets too small".into());
        }
        self.skf.validate()?;
        let a = &self.adaptive;
        if !(a.s_floor >= 1 && a.s_floor <= a.s_base && a.s_base <= a.s_cap) {
            return err("adaptive settings need 1 <= s_floor <= s_base <= s_cap".into());
        }
        if !(a.confidence > 0.0 && a.confidence < 1.0) {
            return err("adaptive confidence must lie in (0, 1)".into());
        }
        if self.scenario == Scenario::Sensor
            && (self.sensors.active == 0 || self.sensors.active > self.sensors.count)
        {
            return err("sensor settings need 1 <= active <= count".into());
        }
        if self.scenario == Scenario::Options {
            let o = &self.options;
            if o.maturities.is_empty() || o.maturities.iter().any(|m| !(*m > o.min_maturity)) {
                return err("option maturities must exceed min_maturity".into());
            }
            if !(o.spot0 > 0.0 && o.sigma_min > 0.0 && o.sigma_min < o.sigma_max) {
                return err("option market settings out of range".into());
            }
            if !(o.min_maturity > 0.0) {
                return err("min_maturity must be positive".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
