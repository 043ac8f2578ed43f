//! Limit checks, incurred-CVA limit adjustment and loss-appetite allocation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{IncurredCva, MetricKind, Profile};

/// Exit code signalling that at least one limit is breached.
pub const BREACH_EXIT_CODE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSpec {
    pub counterparty: String,
    pub netting_set: String,
    pub metric: MetricKind,
    pub q: f64,
    pub limit: f64,
}

impl LimitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.limit >= 0.0 && self.limit.is_finite()) {
            return Err(Error::config(format!(
                "limit for {}/{} must be >= 0, got {}",
                self.counterparty, self.netting_set, self.limit
            )));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config(format!(
                "limit q must lie in (0, 1), got {}",
                self.q
            )));
        }
        Ok(())
    }
}

/// Reads `counterparty,netting_set,metric,q,limit` rows.
pub fn read_limits_csv<R: std::io::Read>(input: R) -> Result<Vec<LimitSpec>> {
    #[derive(Deserialize)]
    struct Row {
        counterparty: String,
        netting_set: String,
        metric: String,
        q: f64,
        limit: f64,
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let r = rec.map_err(|e| Error::config(format!("limits row {}: {e}", i + 1)))?;
        let spec = LimitSpec {
            counterparty: r.counterparty,
            netting_set: r.netting_set,
            metric: r.metric.parse()?,
            q: r.q,
            limit: r.limit,
        };
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

pub fn read_limits_file(path: &std::path::Path) -> Result<Vec<LimitSpec>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_limits_csv(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreachReport {
    pub counterparty: String,
    pub netting_set: String,
    pub metric: MetricKind,
    pub q: f64,
    pub limit: f64,
    pub t_years: Vec<f64>,
    /// `limit - profile` per date.
    pub headroom: Vec<f64>,
    pub first_breach_t_years: Option<f64>,
    /// `max profile / limit`; infinite for a positive profile against a zero limit.
    #[serde(serialize_with = "finite_or_null")]
    pub max_utilization: f64,
    pub breached: bool,
    /// The incurred CVA already exceeds the limit.
    pub capacity_exhausted: bool,
}

fn finite_or_null<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

pub fn check_limit(profile: &Profile, spec: &LimitSpec) -> Result<BreachReport> {
    spec.validate()?;
    if profile.metric != spec.metric {
        return Err(Error::config(format!(
            "limit on {} checked against a {} profile",
            spec.metric, profile.metric
        )));
    }
    let t = profile.grid.points();
    let headroom: Vec<f64> = profile.values.iter().map(|v| spec.limit - v).collect();
    let first = profile
        .values
        .iter()
        .position(|&v| v > spec.limit)
        .map(|i| t[i]);
    let max = profile.max();
    let max_utilization = if spec.limit > 0.0 {
        max / spec.limit
    } else if max > 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    Ok(BreachReport {
        counterparty: spec.counterparty.clone(),
        netting_set: spec.netting_set.clone(),
        metric: spec.metric,
        q: spec.q,
        limit: spec.limit,
        t_years: t.to_vec(),
        headroom,
        first_breach_t_years: first,
        max_utilization,
        breached: first.is_some(),
        capacity_exhausted: false,
    })
}

/// A limit after subtracting incurred CVA.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedLimit {
    pub spec: LimitSpec,
    /// Incurred losses used up the whole limit.
    pub capacity_exhausted: bool,
}

/// Shifts an aPFL or paPFL limit down by incurred CVA, floored at zero.
pub fn adjust_limit(spec: &LimitSpec, x: &IncurredCva) -> Result<AdjustedLimit> {
    if !matches!(spec.metric, MetricKind::Apfl | MetricKind::Papfl) {
        return Err(Error::config(format!(
            "only aPFL and paPFL limits are adjusted for incurred CVA, not {}",
            spec.metric
        )));
    }
    if !(x.x >= 0.0) {
        return Err(Error::input(format!(
            "incurred cva must be >= 0, got {}",
            x.x
        )));
    }
    let raw = spec.limit - x.x;
    Ok(AdjustedLimit {
        spec: LimitSpec {
            limit: raw.max(0.0),
            ..spec.clone()
        },
        capacity_exhausted: raw <= 0.0 && x.x > 0.0,
    })
}

/// Checks a profile against its limit, adjusting aPFL and paPFL limits by the
/// same incurred CVA that was taken out of the profile.
pub fn check_paired(profile: &Profile, spec: &LimitSpec, x: &IncurredCva) -> Result<BreachReport> {
    match spec.metric {
        MetricKind::Apfl | MetricKind::Papfl => {
            let adj = adjust_limit(spec, x)?;
            let mut report = check_limit(profile, &adj.spec)?;
            report.capacity_exhausted = adj.capacity_exhausted;
            Ok(report)
        }
        _ => check_limit(profile, spec),
    }
}

/// Splits `total` across counterparties in proportion to their weights.
///
/// The last allocation absorbs rounding so the limits sum to `total`.
pub fn allocate_appetite(
    total: f64,
    weights: &[(String, f64)],
    metric: MetricKind,
    q: f64,
) -> Result<Vec<LimitSpec>> {
    if !(total >= 0.0 && total.is_finite()) {
        return Err(Error::config(format!(
            "loss appetite must be >= 0, got {total}"
        )));
    }
    if weights.iter().any(|(_, w)| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::config("allocation weights must be >= 0"));
    }
    let sum: f64 = weights.iter().map(|(_, w)| w).sum();
    if sum <= 0.0 {
        return Err(Error::config("allocation weights must not all be zero"));
    }
    let mut out: Vec<LimitSpec> = weights
        .iter()
        .map(|(name, w)| LimitSpec {
            counterparty: name.clone(),
            netting_set: "*".into(),
            metric,
            q,
            limit: total * w / sum,
        })
        .collect();
    let allocated: f64 = out.iter().map(|s| s.limit).sum();
    if let Some(last) = out.iter_mut().rev().find(|s| s.limit > 0.0) {
        last.limit = (last.limit + total - allocated).max(0.0);
    }
    Ok(out)
}
