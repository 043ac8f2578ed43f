//! Tail statistics and the four limit metrics.
//!
//! All profiles are computed date by date from an [`ExposureCube`]. PFE is a
//! quantile of floored exposure; PFL, aPFL and paPFL are expected shortfalls of
//! floored, LGD-weighted losses, optionally shifted down by incurred CVA `x`
//! and credit protection `y(t)`:
//!
//! ```text
//! PFE(t)   = Q_q( max(V, 0) )
//! PFL(t)   = ES_q( max(lgd * V, 0) )
//! aPFL(t)  = ES_q( max(lgd * V - x, 0) )
//! paPFL(t) = ES_q( max(lgd * V - x - y(t), 0) )
//! ```
//!
//! The three loss metrics share one code path, so `paPFL(x = 0, y = 0)`,
//! `aPFL(x = 0)` and `PFL` agree bit for bit, and a constant LGD factors out
//! of the expected shortfall exactly.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exposure::ExposureCube;
use crate::market_models::{TimeGrid, TIME_EPS};

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!(
            "quantile level must lie in (0, 1), got {q}"
        )))
    }
}

/// `ceil(x)` that treats values within rounding noise of an integer as that
/// integer, so that e.g. `0.95 * 20` selects the 19th order statistic.
fn robust_ceil(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// 1-based rank of the q-quantile order statistic among `n` samples.
pub fn quantile_rank(n: usize, q: f64) -> usize {
    robust_ceil(q * n as f64).clamp(1, n)
}

/// Number of samples in the expected-shortfall tail block.
pub fn tail_size(n: usize, q: f64) -> usize {
    robust_ceil((1.0 - q) * n as f64).clamp(1, n)
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

fn check_samples(samples: &[f64], q: f64) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::input("empty sample"));
    }
    check_q(q)
}

/// The `ceil(q n)`-th smallest sample, without interpolation.
pub fn empirical_quantile(samples: &[f64], q: f64) -> Result<f64> {
    check_samples(samples, q)?;
    let mut v = samples.to_vec();
    let k = quantile_rank(v.len(), q);
    let (_, kth, _) = v.select_nth_unstable_by(k - 1, f64::total_cmp);
    Ok(*kth)
}

/// Mean of the largest `ceil((1 - q) n)` samples.
pub fn expected_shortfall(samples: &[f64], q: f64) -> Result<f64> {
    check_samples(samples, q)?;
    Ok(tail_mean_sorted(&sorted(samples), q))
}

fn tail_mean_sorted(sorted: &[f64], q: f64) -> f64 {
    let k = tail_size(sorted.len(), q);
    sorted[sorted.len() - k..].iter().sum::<f64>() / k as f64
}

/// Loss given default, possibly varying by date and path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LgdModel {
    Constant {
        lgd: f64,
    },
    /// Step function: `lgd` of the last pillar at or before `t` (the first
    /// pillar's value before it).
    TermStructure {
        pillars: Vec<LgdPillar>,
    },
    /// `clamp(base + beta * z, 0, 1)` with `z` the path's standardised market
    /// shock at `t`; `beta > 0` puts higher losses on high-exposure paths of a
    /// long position.
    Correlated {
        base_lgd: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LgdPillar {
    pub t_years: f64,
    pub lgd: f64,
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

impl LgdModel {
    pub fn constant(lgd: f64) -> Self {
        LgdModel::Constant { lgd }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LgdModel::Constant { lgd } => check_fraction("lgd", *lgd),
            LgdModel::TermStructure { pillars } => {
                if pillars.is_empty() {
                    return Err(Error::config(
                        "lgd term structure needs at least one pillar",
                    ));
                }
                for w in pillars.windows(2) {
                    if w[1].t_years <= w[0].t_years {
                        return Err(Error::config(
                            "lgd pillars must be strictly increasing in time",
                        ));
                    }
                }
                pillars
                    .iter()
                    .try_for_each(|p| check_fraction("lgd", p.lgd))
            }
            LgdModel::Correlated { base_lgd, beta } => {
                check_fraction("base_lgd", *base_lgd)?;
                if beta.is_finite() {
                    Ok(())
                } else {
                    Err(Error::config("lgd beta must be finite"))
                }
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            LgdModel::Constant { lgd } => format!("constant {lgd}"),
            LgdModel::TermStructure { pillars } => {
                format!("term structure ({} pillars)", pillars.len())
            }
            LgdModel::Correlated { base_lgd, beta } => {
                format!("correlated base {base_lgd} beta {beta}")
            }
        }
    }

    /// Path-independent LGD at `t`, or `None` for the correlated model.
    pub fn deterministic_at(&self, t: f64) -> Option<f64> {
        match self {
            LgdModel::Constant { lgd } => Some(*lgd),
            LgdModel::TermStructure { pillars } => {
                let i = pillars.partition_point(|p| p.t_years <= t + TIME_EPS);
                Some(pillars[i.saturating_sub(1)].lgd)
            }
            LgdModel::Correlated { .. } => None,
        }
    }

    /// LGD on a path whose standardised shock at `t` is `z`.
    pub fn at(&self, t: f64, z: f64) -> f64 {
        match self {
            LgdModel::Correlated { base_lgd, beta } => (base_lgd + beta * z).clamp(0.0, 1.0),
            _ => self.deterministic_at(t).unwrap_or_default(),
        }
    }

    /// LGD per path on cube date `d`.
    fn per_path(&self, cube: &ExposureCube, d: usize) -> Result<Vec<f64>> {
        let drivers = cube.driver_slice(d).ok_or_else(|| {
            Error::config("correlated lgd needs an exposure cube built with path drivers")
        })?;
        let t = cube.grid().points()[d];
        Ok(drivers.iter().map(|&z| self.at(t, z)).collect())
    }

    /// Average LGD across paths on cube date `d`.
    pub fn mean_at(&self, cube: &ExposureCube, d: usize) -> Result<f64> {
        match self.deterministic_at(cube.grid().points()[d]) {
            Some(l) => Ok(l),
            None => {
                let v = self.per_path(cube, d)?;
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        }
    }
}

/// Single-quote credit curve with flat hazard `spread / lgd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditCurve {
    pub cds_spread_bps: f64,
    pub lgd: f64,
}

impl CreditCurve {
    pub fn validate(&self) -> Result<()> {
        if !(self.cds_spread_bps >= 0.0 && self.cds_spread_bps.is_finite()) {
            return Err(Error::config(format!(
                "cds_spread_bps must be >= 0, got {}",
                self.cds_spread_bps
            )));
        }
        if !(self.lgd > 0.0 && self.lgd <= 1.0) {
            return Err(Error::config(format!(
                "credit curve lgd must lie in (0, 1], got {}",
                self.lgd
            )));
        }
        Ok(())
    }

    pub fn hazard_rate(&self) -> f64 {
        self.cds_spread_bps / 1e4 / self.lgd
    }

    pub fn survival(&self, t: f64) -> f64 {
        (-self.hazard_rate() * t).exp()
    }
}

/// CVA already taken through PnL; a single constant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IncurredCva {
    pub x: f64,
}

/// How incurred CVA enters the aPFL and paPFL profiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvaAdjustment {
    /// The same `x` on every date.
    #[default]
    Constant,
    /// On each date, the part of today's CVA that is still to come.
    Forward,
}

/// Per-date CVA contributions `mean lgd * EPE(t_i) * (S(t_{i-1}) - S(t_i))`.
fn cva_terms(cube: &ExposureCube, curve: &CreditCurve, lgd: &LgdModel) -> Result<Vec<f64>> {
    curve.validate()?;
    lgd.validate()?;
    let grid = cube.grid().points();
    (0..grid.len())
        .map(|d| {
            let prev = if d == 0 { 0.0 } else { grid[d - 1] };
            let default_prob = curve.survival(prev) - curve.survival(grid[d]);
            let floored = cube.floored_slice(d);
            let epe = floored.iter().sum::<f64>() / floored.len() as f64;
            Ok(lgd.mean_at(cube, d)? * epe * default_prob)
        })
        .collect()
}

/// Incurred CVA measured at time zero. Undiscounted unless the cube itself
/// was built under a discounting measure.
pub fn incurred_cva(
    cube: &ExposureCube,
    curve: &CreditCurve,
    lgd: &LgdModel,
) -> Result<IncurredCva> {
    Ok(IncurredCva {
        x: cva_terms(cube, curve, lgd)?.iter().sum(),
    })
}

/// Per-date CVA shift under the chosen adjustment: `x` everywhere, or the sum
/// of the CVA contributions strictly after each date.
pub fn cva_shift(
    cube: &ExposureCube,
    curve: &CreditCurve,
    lgd: &LgdModel,
    adjustment: CvaAdjustment,
) -> Result<Vec<f64>> {
    let terms = cva_terms(cube, curve, lgd)?;
    Ok(match adjustment {
        CvaAdjustment::Constant => vec![terms.iter().sum(); terms.len()],
        CvaAdjustment::Forward => {
            let mut out = vec![0.0; terms.len()];
            let mut acc = 0.0;
            for j in (0..terms.len()).rev() {
                out[j] = acc;
                acc += terms[j];
            }
            out
        }
    })
}

/// One bought CDS on the counterparty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdsPosition {
    pub notional: f64,
    pub maturity_years: f64,
    pub lgd: f64,
}

/// Credit protection `y(t)`: `lgd * notional` of every CDS still alive at `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtectionProfile {
    pub positions: Vec<CdsPosition>,
}

impl ProtectionProfile {
    pub fn new(positions: Vec<CdsPosition>) -> Result<Self> {
        for p in &positions {
            if !(p.notional >= 0.0 && p.notional.is_finite()) {
                return Err(Error::config(format!(
                    "cds notional must be >= 0, got {}",
                    p.notional
                )));
            }
            if !(p.maturity_years >= 0.0) {
                return Err(Error::config("cds maturity must be >= 0"));
            }
            check_fraction("cds lgd", p.lgd)?;
        }
        Ok(Self { positions })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(&self, t: f64) -> f64 {
        self.positions
            .iter()
            .filter(|p| t <= p.maturity_years + TIME_EPS)
            .map(|p| p.lgd * p.notional)
            .sum()
    }

    pub fn on_grid(&self, grid: &TimeGrid) -> Vec<f64> {
        grid.points().iter().map(|&t| self.at(t)).collect()
    }
}

/// Protection from a single CDS.
pub fn protection_profile(notional: f64, maturity: f64, lgd: f64) -> Result<ProtectionProfile> {
    ProtectionProfile::new(vec![CdsPosition {
        notional,
        maturity_years: maturity,
        lgd,
    }])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "PFE")]
    Pfe,
    #[serde(rename = "PFL")]
    Pfl,
    #[serde(rename = "aPFL")]
    Apfl,
    #[serde(rename = "paPFL")]
    Papfl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Pfe,
        MetricKind::Pfl,
        MetricKind::Apfl,
        MetricKind::Papfl,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Pfe => "PFE",
            MetricKind::Pfl => "PFL",
            MetricKind::Apfl => "aPFL",
            MetricKind::Papfl => "paPFL",
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown metric {s:?} (expected PFE, PFL, aPFL or paPFL)"
                ))
            })
    }
}

/// A metric time series on the cube's reporting grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub metric: MetricKind,
    pub q: f64,
    pub lgd: Option<String>,
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl Profile {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `t_years,value` rows with round-trip float formatting.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fail = |e: csv::Error| Error::Numerical(format!("csv write failed: {e}"));
        w.write_record(["t_years", "value"]).map_err(fail)?;
        for (t, v) in self.grid.points().iter().zip(&self.values) {
            w.write_record([t.to_string(), v.to_string()])
                .map_err(fail)?;
        }
        w.flush()
            .map_err(|e| Error::Numerical(format!("csv write failed: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R, metric: MetricKind, q: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let (mut ts, mut vs) = (Vec::new(), Vec::new());
        for (i, rec) in r.deserialize::<(f64, f64)>().enumerate() {
            let (t, v) = rec.map_err(|e| Error::config(format!("profile row {}: {e}", i + 1)))?;
            ts.push(t);
            vs.push(v);
        }
        Ok(Self {
            metric,
            q,
            lgd: None,
            grid: TimeGrid::new(ts)?,
            values: vs,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "metric": self.metric,
            "q": self.q,
            "lgd": self.lgd,
            "t_years": self.grid.points(),
            "values": self.values,
        })
    }
}

/// Quantile of floored exposure on every date.
pub fn pfe_profile(cube: &ExposureCube, q: f64) -> Result<Profile> {
    check_q(q)?;
    let values = (0..cube.n_dates())
        .into_par_iter()
        .map(|d| empirical_quantile(cube.floored_slice(d), q))
        .collect::<Result<Vec<_>>>()?;
    Ok(Profile {
        metric: MetricKind::Pfe,
        q,
        lgd: None,
        grid: cube.grid().clone(),
        values,
    })
}

/// Expected shortfall of `max(lgd * raw - shift, 0)` on one date.
///
/// For path-independent LGD `l > 0` this is evaluated as
/// `l * ES(max(raw - shift / l, 0))`, which is the same number in exact
/// arithmetic and makes the LGD factor out of the floating-point result.
fn loss_es(cube: &ExposureCube, lgd: &LgdModel, d: usize, shift: f64, q: f64) -> Result<f64> {
    let raw = cube.raw_slice(d);
    let t = cube.grid().points()[d];
    let mut losses: Vec<f64> = match lgd.deterministic_at(t) {
        Some(0.0) => return Ok(0.0),
        Some(l) => {
            let s = shift / l;
            let mut v: Vec<f64> = raw.iter().map(|&r| (r - s).max(0.0)).collect();
            v.sort_unstable_by(f64::total_cmp);
            return Ok(l * tail_mean_sorted(&v, q));
        }
        None => {
            let l = lgd.per_path(cube, d)?;
            raw.iter()
                .zip(&l)
                .map(|(&r, &l)| (l * r - shift).max(0.0))
                .collect()
        }
    };
    losses.sort_unstable_by(f64::total_cmp);
    Ok(tail_mean_sorted(&losses, q))
}

fn loss_profile(
    cube: &ExposureCube,
    lgd: &LgdModel,
    shifts: &[f64],
    q: f64,
    metric: MetricKind,
) -> Result<Profile> {
    check_q(q)?;
    lgd.validate()?;
    if shifts.len() != cube.n_dates() {
        return Err(Error::input(format!(
            "{} shifts for {} cube dates",
            shifts.len(),
            cube.n_dates()
        )));
    }
    let values = (0..cube.n_dates())
        .into_par_iter()
        .map(|d| loss_es(cube, lgd, d, shifts[d], q))
        .collect::<Result<Vec<_>>>()?;
    Ok(Profile {
        metric,
        q,
        lgd: Some(lgd.describe()),
        grid: cube.grid().clone(),
        values,
    })
}

fn check_shift(name: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::input(format!("{name} must be >= 0, got {v}")))
    }
}

pub fn pfl_profile(cube: &ExposureCube, lgd: &LgdModel, q: f64) -> Result<Profile> {
    loss_profile(cube, lgd, &vec![0.0; cube.n_dates()], q, MetricKind::Pfl)
}

pub fn apfl_profile(
    cube: &ExposureCube,
    lgd: &LgdModel,
    x: &IncurredCva,
    q: f64,
) -> Result<Profile> {
    apfl_profile_shifted(cube, lgd, &vec![x.x; cube.n_dates()], q)
}

/// aPFL with a date-dependent CVA shift (see [`cva_shift`]).
pub fn apfl_profile_shifted(
    cube: &ExposureCube,
    lgd: &LgdModel,
    x: &[f64],
    q: f64,
) -> Result<Profile> {
    x.iter().try_for_each(|&v| check_shift("incurred cva", v))?;
    loss_profile(cube, lgd, x, q, MetricKind::Apfl)
}

pub fn papfl_profile(
    cube: &ExposureCube,
    lgd: &LgdModel,
    x: &IncurredCva,
    y: &ProtectionProfile,
    q: f64,
) -> Result<Profile> {
    papfl_profile_shifted(cube, lgd, &vec![x.x; cube.n_dates()], y, q)
}

pub fn papfl_profile_shifted(
    cube: &ExposureCube,
    lgd: &LgdModel,
    x: &[f64],
    y: &ProtectionProfile,
    q: f64,
) -> Result<Profile> {
    x.iter().try_for_each(|&v| check_shift("incurred cva", v))?;
    let shifts: Vec<f64> = x
        .iter()
        .zip(y.on_grid(cube.grid()))
        .map(|(&x, y)| x + y)
        .collect();
    loss_profile(cube, lgd, &shifts, q, MetricKind::Papfl)
}
