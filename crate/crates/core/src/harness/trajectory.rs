use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Scenario, SensorSelection};
use crate::error::{FilterError, Result};
use crate::gaussian::{mvn_sample, GaussianBelief, SpdMatrix};
use crate::models::{
    black_scholes_price, cv_dynamics, LinearDynamics, OptionContract, RadarMeasurement,
    SensorLayout,
};

/// Derives an independent 64-bit seed from a parent seed, a tag and an index.
pub fn split_seed(master: u64, tag: &str, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = mix(master);
    for b in tag.bytes() {
        h = mix(h ^ u64::from(b));
    }
    mix(h ^ mix(index))
}

/// Sweep coordinates that shape a generated trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DataParams {
    pub sigma_cv: Option<f64>,
    pub sigma_r: Option<f64>,
}

/// One contract's quotes over its filtered horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractPath {
    pub strike: f64,
    /// Time to maturity at each filtered step.
    pub maturities: Vec<f64>,
    /// Observed `[call, put]` at each filtered step.
    pub quotes: Vec<[f64; 2]>,
}

/// A simulated run: true states, measurements and exogenous inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scenario: Scenario,
    pub seed: u64,
    /// `x_0 .. x_T`.
    pub states: Vec<Vec<f64>>,
    /// `y_1 .. y_T` (empty for the options scenario, see `contracts`).
    pub measurements: Vec<Vec<f64>>,
    pub layout: Option<SensorLayout>,
    pub active_sensors: Vec<Vec<usize>>,
    /// Spot price at steps `0 .. T`.
    pub spots: Vec<f64>,
    pub contracts: Vec<ContractPath>,
    /// Starting mean handed to every filter in this trial.
    pub filter_init: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[t])
    }
}

/// True dynamics for a scenario at a given process-noise scale.
pub fn true_dynamics(cfg: &ExperimentConfig, sigma_cv: Option<f64>) -> Result<LinearDynamics> {
    match cfg.scenario {
        Scenario::Radar | Scenario::Sensor => cv_dynamics(1.0, sigma_cv.unwrap_or(1e-2)),
        Scenario::Custom1d => LinearDynamics::random_walk(1, sigma_cv.unwrap_or(0.1)),
        Scenario::Options => {
            // volatility follows its own clamped walk; this is the rate part
            let q = DMatrix::from_diagonal(&DVector::from_column_slice(&[
                cfg.options.sigma_step.powi(2),
                cfg.options.rate_step.powi(2),
            ]));
            LinearDynamics::new(DMatrix::identity(2, 2), q)
        }
    }
}

/// Simulates trial `trial` of a scenario at the given sweep coordinates.
///
/// The random stream depends only on the master seed, scenario and trial, so
/// every sweep point of a trial shares its noise draws.
pub fn generate_trajectory(
    cfg: &ExperimentConfig,
    trial: usize,
    params: DataParams,
) -> Result<TrajectoryRecord> {
    let d = cfg.scenario.state_dim();
    if cfg.initial_state.len() != d || cfg.initial_cov.len() != d {
        return Err(FilterError::ConfigError(format!(
            "initial state must have dimension {d} for {}",
            cfg.scenario
        )));
    }
    let seed = split_seed(cfg.seed, cfg.scenario.as_str(), trial as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, "trajectory", 0));
    let x0 = DVector::from_column_slice(&cfg.initial_state);
    let filter_init = if cfg.jitter_initial_mean {
        let p0 = GaussianBelief::new(x0.clone(), SpdMatrix::from_diagonal(&cfg.initial_cov)?)?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, "init", 0));
        mvn_sample(&p0, 1, &mut init_rng).remove(0)
    } else {
        x0.clone()
    };
    let mut record = TrajectoryRecord {
        scenario: cfg.scenario,
        seed,
        states: vec![cfg.initial_state.clone()],
        measurements: Vec::with_capacity(cfg.horizon),
        layout: None,
        active_sensors: Vec::new(),
        spots: Vec::new(),
        contracts: Vec::new(),
        filter_init: filter_init.iter().copied().collect(),
    };
    match cfg.scenario {
        Scenario::Radar | Scenario::Sensor | Scenario::Custom1d => {
            simulate_linear(cfg, params, &x0, &mut record, &mut rng)?
        }
        Scenario::Options => simulate_market(cfg, params, &x0, &mut record, &mut rng)?,
    }
    Ok(record)
}

fn noise(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn simulate_linear(
    cfg: &ExperimentConfig,
    params: DataParams,
    x0: &DVector<f64>,
    record: &mut TrajectoryRecord,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let dynamics = true_dynamics(cfg, params.sigma_cv)?;
    let mut x = x0.clone();
    for _ in 0..cfg.horizon {
        x = dynamics.sample_next(&x, rng);
        record.states.push(x.iter().copied().collect());
    }
    match cfg.scenario {
        Scenario::Radar => {
            let [sr2, st2] = cfg.radar_noise;
            for s in &record.states[1..] {
                let r = s[0].hypot(s[2]) + sr2.sqrt() * noise(rng);
                let theta = s[2].atan2(s[0]) + st2.sqrt() * noise(rng);
                record.measurements.push(vec![r, theta]);
            }
        }
        Scenario::Sensor => {
            let (lo, side) = bounding_square(&record.states);
            let layout = SensorLayout::uniform_square(
                cfg.sensors.count,
                cfg.sensors.active,
                lo,
                side,
                rng,
            )?;
            let sigma_r = params.sigma_r.unwrap_or(20.0);
            for s in &record.states[1..] {
                let ids = match cfg.sensors.selection {
                    SensorSelection::Nearest => layout.nearest([s[0], s[2]]),
                    SensorSelection::Random => layout.random_subset(rng),
                };
                let y = ids
                    .iter()
                    .map(|&i| {
                        let p = layout.positions[i];
                        (s[0] - p[0]).hypot(s[2] - p[1]) + sigma_r * noise(rng)
                    })
                    .collect();
                record.measurements.push(y);
                record.active_sensors.push(ids);
            }
            record.layout = Some(layout);
        }
        Scenario::Custom1d => {
            let sigma_r = params.sigma_r.unwrap_or(0.5);
            for s in &record.states[1..] {
                record.measurements.push(vec![s[0] + sigma_r * noise(rng)]);
            }
        }
        Scenario::Options => unreachable!(),
    }
    Ok(())
}

/// Smallest axis-aligned square holding every position, padded by 10%.
fn bounding_square(states: &[Vec<f64>]) -> ([f64; 2], f64) {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for s in states {
        for (k, &i) in [0usize, 2].iter().enumerate() {
            lo[k] = lo[k].min(s[i]);
            hi[k] = hi[k].max(s[i]);
        }
    }
    let side = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
    let pad = 0.1 * side;
    let centre = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let half = side / 2.0 + pad;
    ([centre[0] - half, centre[1] - half], 2.0 * half)
}

fn simulate_market(
    cfg: &ExperimentConfig,
    params: DataParams,
    x0: &DVector<f64>,
    record: &mut TrajectoryRecord,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let o = &cfg.options;
    let dt = 1.0 / 252.0;
    let (mut sigma, mut rate) = (x0[0], x0[1]);
    let mut spot = o.spot0;
    record.spots.push(spot);
    for _ in 0..cfg.horizon {
        let z = noise(rng);
        spot *= (-0.5 * sigma * sigma * dt + sigma * dt.sqrt() * z).exp();
        sigma = (sigma + o.sigma_step * noise(rng)).clamp(o.sigma_min, o.sigma_max);
        rate += o.rate_step * noise(rng);
        record.spots.push(spot);
        record.states.push(vec![sigma, rate]);
    }
    let sigma_r = params.sigma_r.unwrap_or(1e-2);
    for &m0 in &o.maturities {
        let mut path = ContractPath {
            strike: o.spot0,
            maturities: Vec::new(),
            quotes: Vec::new(),
        };
        for t in 1..=cfg.horizon {
            let maturity = m0 - t as f64 * dt;
            if maturity < o.min_maturity {
                break;
            }
            let contract = OptionContract::new(path.strike, maturity, record.spots[t])?;
            let [c, p] = black_scholes_price(&record.state(t), &contract)?;
            path.maturities.push(maturity);
            path.quotes.push([c + sigma_r * noise(rng), p + sigma_r * noise(rng)]);
        }
        record.contracts.push(path);
    }
    Ok(())
}

/// Polar-to-Cartesian inversion of one radar measurement.
pub fn radar_base(y: &[f64]) -> [f64; 2] {
    RadarMeasurement::to_cartesian(&DVector::from_column_slice(y))
}
