//! Seeded Monte Carlo market-state simulation.
//!
//! Two dynamics are supported, both sampled with their exact transition
//! densities so that simulated moments match closed forms without
//! discretisation bias:
//!
//! * geometric Brownian motion for a single traded level, and
//! * a one-factor Gaussian (Ornstein-Uhlenbeck) short rate that mean-reverts
//!   to its initial level.
//!
//! Every path owns its own random stream, derived from `(seed, path index)`,
//! so results do not depend on how paths are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Business days per year; every "n business days" quantity is n / 252 years.
pub const BUSINESS_DAYS_PER_YEAR: f64 = 252.0;

/// Tolerance used when matching year fractions against grid points.
pub const TIME_EPS: f64 = 1e-9;

/// Converts a count of business days to a year fraction.
pub fn business_days(days: u32) -> f64 {
    f64::from(days) / BUSINESS_DAYS_PER_YEAR
}

/// Strictly increasing list of simulation dates, in years from today.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("time grid is empty"));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::config("time grid contains a non-finite point"));
        }
        if points[0] < 0.0 {
            return Err(Error::config(format!(
                "time grid starts before today ({})",
                points[0]
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::config(format!(
                "time grid is not strictly increasing ({} followed by {})",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    /// Grid from integer business-day offsets (sorted and de-duplicated).
    pub fn from_business_days(days: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut days: Vec<u32> = days.into_iter().collect();
        days.sort_unstable();
        days.dedup();
        Self::new(days.into_iter().map(business_days).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Index of the grid point equal to `t` (within [`TIME_EPS`]).
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let i = self.points.partition_point(|&p| p < t - TIME_EPS);
        (i < self.points.len() && (self.points[i] - t).abs() <= TIME_EPS).then_some(i)
    }

    /// Index of the last grid point at or before `t`.
    pub fn index_at_or_before(&self, t: f64) -> Option<usize> {
        let i = self.points.partition_point(|&p| p <= t + TIME_EPS);
        i.checked_sub(1)
    }

    /// True when every point of `other` is also a point of this grid.
    pub fn contains_grid(&self, other: &TimeGrid) -> bool {
        other.points.iter().all(|&t| self.index_of(t).is_some())
    }
}

/// Market dynamics driving the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `dS = drift S dt + vol S dW`.
    Gbm {
        spot: f64,
        drift_per_year: f64,
        vol_per_sqrt_year: f64,
    },
    /// `dr = mean_reversion (r0 - r) dt + vol dW`, started at `r0`.
    ShortRate1f {
        mean_reversion_per_year: f64,
        vol_per_sqrt_year: f64,
        initial_zero_rate_per_year: f64,
    },
}

impl ModelSpec {
    pub fn gbm(spot: f64, drift: f64, vol: f64) -> Self {
        ModelSpec::Gbm {
            spot,
            drift_per_year: drift,
            vol_per_sqrt_year: vol,
        }
    }

    pub fn short_rate(mean_reversion: f64, vol: f64, initial_rate: f64) -> Self {
        ModelSpec::ShortRate1f {
            mean_reversion_per_year: mean_reversion,
            vol_per_sqrt_year: vol,
            initial_zero_rate_per_year: initial_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelSpec::Gbm {
                spot,
                drift_per_year,
                vol_per_sqrt_year,
            } => {
                if !(spot > 0.0 && spot.is_finite()) {
                    return Err(Error::config(format!("GBM spot must be > 0, got {spot}")));
                }
                if !drift_per_year.is_finite() {
                    return Err(Error::config("GBM drift must be finite"));
                }
                if !(vol_per_sqrt_year >= 0.0 && vol_per_sqrt_year.is_finite()) {
                    return Err(Error::config(format!(
                        "GBM vol must be >= 0, got {vol_per_sqrt_year}"
                    )));
                }
            }
            ModelSpec::ShortRate1f {
                mean_reversion_per_year,
                vol_per_sqrt_year,
                initial_zero_rate_per_year,
            } => {
                if !(mean_reversion_per_year > 0.0 && mean_reversion_per_year.is_finite()) {
                    return Err(Error::config(format!(
                        "mean reversion must be > 0, got {mean_reversion_per_year}"
                    )));
                }
                if !(vol_per_sqrt_year >= 0.0 && vol_per_sqrt_year.is_finite()) {
                    return Err(Error::config(format!(
                        "short-rate vol must be >= 0, got {vol_per_sqrt_year}"
                    )));
                }
                if !initial_zero_rate_per_year.is_finite() {
                    return Err(Error::config("initial zero rate must be finite"));
                }
            }
        }
        Ok(())
    }

    /// State at time zero (spot level or short rate).
    pub fn initial_state(&self) -> f64 {
        match *self {
            ModelSpec::Gbm { spot, .. } => spot,
            ModelSpec::ShortRate1f {
                initial_zero_rate_per_year,
                ..
            } => initial_zero_rate_per_year,
        }
    }

    pub fn vol(&self) -> f64 {
        match *self {
            ModelSpec::Gbm {
                vol_per_sqrt_year, ..
            }
            | ModelSpec::ShortRate1f {
                vol_per_sqrt_year, ..
            } => vol_per_sqrt_year,
        }
    }

    /// Mean and standard deviation of the transition from `state` over `dt`
    /// with volatility multiplied by `stress`. For GBM these are the moments
    /// of the log-level increment; for the short rate, of the level itself.
    fn transition_moments(&self, state: f64, dt: f64, stress: f64) -> (f64, f64) {
        match *self {
            ModelSpec::Gbm {
                drift_per_year,
                vol_per_sqrt_year,
                ..
            } => {
                let vol = vol_per_sqrt_year * stress;
                ((drift_per_year - 0.5 * vol * vol) * dt, vol * dt.sqrt())
            }
            ModelSpec::ShortRate1f {
                mean_reversion_per_year: a,
                vol_per_sqrt_year,
                initial_zero_rate_per_year: level,
            } => {
                let vol = vol_per_sqrt_year * stress;
                let decay = (-a * dt).exp();
                let var = vol * vol * (-(-2.0 * a * dt).exp_m1()) / (2.0 * a);
                (level + (state - level) * decay, var.sqrt())
            }
        }
    }

    /// Exact one-step transition with standard normal draw `z`.
    pub fn step(&self, state: f64, dt: f64, z: f64) -> f64 {
        self.stressed_step(state, dt, z, 1.0)
    }

    /// Exact transition with the vol scaled by `stress`.
    pub fn stressed_step(&self, state: f64, dt: f64, z: f64, stress: f64) -> f64 {
        let (m, s) = self.transition_moments(state, dt, stress);
        match self {
            ModelSpec::Gbm { .. } => state * (m + s * z).exp(),
            ModelSpec::ShortRate1f { .. } => m + s * z,
        }
    }

    /// Unconditional (time-zero) mean of the state at `t`.
    pub fn mean_at(&self, t: f64) -> f64 {
        match *self {
            ModelSpec::Gbm {
                spot,
                drift_per_year,
                ..
            } => spot * (drift_per_year * t).exp(),
            ModelSpec::ShortRate1f { .. } => {
                self.transition_moments(self.initial_state(), t, 1.0).0
            }
        }
    }

    /// The path's cumulative shock at `t`, standardised to N(0, 1).
    ///
    /// Zero when the state is deterministic (t = 0 or zero vol).
    pub fn standardized_shock(&self, state: f64, t: f64) -> f64 {
        let (m, s) = self.transition_moments(self.initial_state(), t, 1.0);
        if s <= 0.0 {
            return 0.0;
        }
        match *self {
            ModelSpec::Gbm { spot, .. } => ((state / spot).ln() - m) / s,
            ModelSpec::ShortRate1f { .. } => (state - m) / s,
        }
    }
}

/// Standard normal quantile.
pub fn normal_quantile(q: f64) -> f64 {
    Normal::standard().inverse_cdf(q)
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// The `q`-quantile of the state at `horizon` years ahead, conditional on the
/// current `state`, with the model vol scaled by `stress_multiplier`.
pub fn conditional_value_quantile(
    model: &ModelSpec,
    state: f64,
    horizon: f64,
    q: f64,
    stress_multiplier: f64,
) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::input(format!("horizon must be > 0, got {horizon}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::input(format!(
            "quantile must lie in (0, 1), got {q}"
        )));
    }
    if !(stress_multiplier >= 1.0) {
        return Err(Error::input(format!(
            "stress multiplier must be >= 1, got {stress_multiplier}"
        )));
    }
    let (m, s) = model.transition_moments(state, horizon, stress_multiplier);
    let z = normal_quantile(q);
    Ok(match model {
        ModelSpec::Gbm { .. } => state * (m + s * z).exp(),
        ModelSpec::ShortRate1f { .. } => m + s * z,
    })
}

/// Discounting convention applied to simulated values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discounting {
    /// Values are reported in time-t currency as simulated.
    #[default]
    None,
    /// Values are deflated along the path and divided by the initial
    /// discount factor to the same date.
    InverseDiscount,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    #[serde(default)]
    pub discounting: Discounting,
}

/// Simulated states, one row per path.
#[derive(Debug, Clone)]
pub struct PathSet {
    model: ModelSpec,
    grid: TimeGrid,
    seed: u64,
    n_paths: usize,
    states: Vec<f64>,
}

/// Read-only view of one simulated path.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub index: usize,
    pub grid: &'a TimeGrid,
    pub states: &'a [f64],
}

impl PathView<'_> {
    pub fn state_at(&self, t: f64) -> Option<f64> {
        self.grid.index_of(t).map(|i| self.states[i])
    }
}

impl PathSet {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_dates(&self) -> usize {
        self.grid.len()
    }

    pub fn path(&self, p: usize) -> PathView<'_> {
        let n = self.grid.len();
        PathView {
            index: p,
            grid: &self.grid,
            states: &self.states[p * n..(p + 1) * n],
        }
    }

    pub fn state(&self, path: usize, date: usize) -> f64 {
        self.states[path * self.grid.len() + date]
    }

    /// All states on one date, across paths.
    pub fn date_slice(&self, date: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, date)).collect()
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }
}

/// Options that change how paths are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SamplingOptions {
    /// Pair paths (2k, 2k+1) on the same stream with negated shocks.
    pub antithetic: bool,
}

/// Random stream for one path; independent of thread scheduling.
pub(crate) fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate_paths(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathSet> {
    generate_paths_with(model, grid, n_paths, seed, SamplingOptions::default())
}

pub fn generate_paths_with(
    model: &ModelSpec,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    options: SamplingOptions,
) -> Result<PathSet> {
    model.validate()?;
    if n_paths == 0 {
        return Err(Error::config("n_paths must be at least 1"));
    }
    // Re-check invariants in case the grid was deserialized directly.
    let grid = TimeGrid::new(grid.points().to_vec())?;
    let n_dates = grid.len();
    let mut states = vec![0.0; n_paths * n_dates];
    let points = grid.points();

    states
        .par_chunks_mut(n_dates)
        .enumerate()
        .for_each(|(p, row)| {
            let (stream, sign) = if options.antithetic {
                ((p / 2) as u64, if p % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                (p as u64, 1.0)
            };
            let mut rng = path_rng(seed, stream);
            let mut state = model.initial_state();
            let mut prev = 0.0;
            for (slot, &t) in row.iter_mut().zip(points) {
                let dt = t - prev;
                if dt > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    state = model.step(state, dt, sign * z);
                }
                *slot = state;
                prev = t;
            }
        });

    Ok(PathSet {
        model: *model,
        grid,
        seed,
        n_paths,
        states,
    })
}
