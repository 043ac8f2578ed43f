//! Variation margin, initial margin and the exposure bridge over the margin
//! period of risk.
//!
//! The exposure at a default date `t` is the bank's claim after everything the
//! two parties actually exchanged before default:
//!
//! ```text
//! E(t) = V(t) - collateral held - IM held
//!        + flows the counterparty owed but stopped paying
//!        - flows the bank owed but stopped paying
//! ```
//!
//! `V(t)` excludes every flow dated at or before `t`. Which flows were paid is
//! decided per party and flow kind by the [`Deltas`] timing vectors: a party's
//! last flow of a kind happens that many business days before default.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instruments::{in_window, BoundPortfolio, FlowEvent, FlowKind, Portfolio};
use crate::market_models::{business_days, path_rng, TimeGrid, BUSINESS_DAYS_PER_YEAR, TIME_EPS};
use crate::metrics::empirical_quantile;

/// Collateral support annex terms. Amounts are in portfolio currency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsaTerms {
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub minimum_transfer_amount: f64,
    #[serde(default)]
    pub independent_amount: f64,
    #[serde(default = "one")]
    pub call_frequency_business_days: u32,
    #[serde(default = "ten")]
    pub mpor_business_days: u32,
    #[serde(default)]
    pub flow_netting: bool,
}

fn one() -> u32 {
    1
}

fn ten() -> u32 {
    10
}

impl Default for CsaTerms {
    fn default() -> Self {
        Self {
            threshold: 0.0,
            minimum_transfer_amount: 0.0,
            independent_amount: 0.0,
            call_frequency_business_days: 1,
            mpor_business_days: 10,
            flow_netting: false,
        }
    }
}

impl CsaTerms {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("threshold", self.threshold),
            ("minimum_transfer_amount", self.minimum_transfer_amount),
            ("independent_amount", self.independent_amount),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("csa.{name} must be >= 0, got {v}")));
            }
        }
        if self.call_frequency_business_days < 1 {
            return Err(Error::config(
                "csa.call_frequency_business_days must be >= 1",
            ));
        }
        if self.mpor_business_days < self.call_frequency_business_days {
            return Err(Error::config(format!(
                "csa.mpor_business_days ({}) must be >= call frequency ({})",
                self.mpor_business_days, self.call_frequency_business_days
            )));
        }
        Ok(())
    }

    pub fn mpor(&self) -> f64 {
        business_days(self.mpor_business_days)
    }
}

/// New variation-margin balance (positive: collateral held by the bank)
/// after a call against portfolio value `value`.
pub fn vm_balance(value: f64, csa: &CsaTerms, prior_balance: f64) -> f64 {
    let uncovered = (value.abs() - csa.threshold).max(0.0);
    let target = if value < 0.0 { -uncovered } else { uncovered } + csa.independent_amount;
    if (target - prior_balance).abs() >= csa.minimum_transfer_amount {
        target
    } else {
        prior_balance
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImMode {
    #[default]
    None,
    Schedule,
    Quantile,
}

/// One row of the margin lookup table; applies to remaining maturities in
/// `(bucket_low_years, bucket_high_years]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleRow {
    pub asset_class: String,
    pub bucket_low_years: f64,
    pub bucket_high_years: f64,
    /// Percent of notional (4.0 means 4%).
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScheduleTable {
    pub rows: Vec<ScheduleRow>,
}

impl Default for ScheduleTable {
    /// Interest-rate grid: 1% up to 2y, 2% for 2-5y, 4% beyond 5y.
    fn default() -> Self {
        let row = |lo: f64, hi: f64, pct: f64| ScheduleRow {
            asset_class: "interest_rate".into(),
            bucket_low_years: lo,
            bucket_high_years: hi,
            percent: pct,
        };
        Self {
            rows: vec![
                row(0.0, 2.0, 1.0),
                row(2.0, 5.0, 2.0),
                row(5.0, f64::INFINITY, 4.0),
            ],
        }
    }
}

impl ScheduleTable {
    /// Reads a CSV table with columns
    /// `asset_class,bucket_low_years,bucket_high_years,percent`.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut rows = Vec::new();
        for (i, rec) in rdr.deserialize::<ScheduleRow>().enumerate() {
            rows.push(
                rec.map_err(|e| Error::config(format!("schedule table row {}: {e}", i + 1)))?,
            );
        }
        let table = Self { rows };
        table.validate()?;
        Ok(table)
    }

    pub fn from_csv_path(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rows {
            if !(r.percent >= 0.0 && r.percent.is_finite()) {
                return Err(Error::config(format!(
                    "schedule percent must be >= 0 ({} {}..{})",
                    r.asset_class, r.bucket_low_years, r.bucket_high_years
                )));
            }
            if !(r.bucket_low_years >= 0.0 && r.bucket_high_years > r.bucket_low_years) {
                return Err(Error::config(format!(
                    "schedule bucket for {} needs 0 <= low < high",
                    r.asset_class
                )));
            }
        }
        Ok(())
    }

    /// Percent for an asset class and remaining maturity.
    pub fn lookup(&self, asset_class: &str, remaining: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.asset_class == asset_class
                    && remaining > r.bucket_low_years
                    && remaining <= r.bucket_high_years
            })
            .map(|r| r.percent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileParams {
    #[serde(default = "default_im_quantile")]
    pub quantile: f64,
    #[serde(default = "ten")]
    pub horizon_business_days: u32,
    #[serde(default = "unit")]
    pub stress_multiplier: f64,
}

fn default_im_quantile() -> f64 {
    0.99
}

fn unit() -> f64 {
    1.0
}

impl Default for QuantileParams {
    fn default() -> Self {
        Self {
            quantile: 0.99,
            horizon_business_days: 10,
            stress_multiplier: 1.0,
        }
    }
}

/// Number of conditional draws used when the portfolio is not monotone in
/// the market state.
pub const NESTED_IM_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImTerms {
    pub mode: ImMode,
    pub schedule: ScheduleTable,
    pub quantile: QuantileParams,
}

impl ImTerms {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn schedule(table: ScheduleTable) -> Self {
        Self {
            mode: ImMode::Schedule,
            schedule: table,
            ..Self::default()
        }
    }

    pub fn quantile(params: QuantileParams) -> Self {
        Self {
            mode: ImMode::Quantile,
            quantile: params,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let q = &self.quantile;
        if !(q.quantile > 0.0 && q.quantile < 1.0) {
            return Err(Error::config(format!(
                "initial_margin.quantile must lie in (0, 1), got {}",
                q.quantile
            )));
        }
        if q.horizon_business_days == 0 {
            return Err(Error::config(
                "initial_margin.horizon_business_days must be >= 1",
            ));
        }
        if !(q.stress_multiplier >= 1.0 && q.stress_multiplier.is_finite()) {
            return Err(Error::config(format!(
                "initial_margin.stress_multiplier must be >= 1, got {}",
                q.stress_multiplier
            )));
        }
        Ok(())
    }
}

/// Lookup-table initial margin at time `t`: gross notional times the table
/// percentage for each live trade, with no offsets between trades.
pub fn im_schedule(portfolio: &Portfolio, terms: &ImTerms, t: f64) -> Result<f64> {
    if terms.mode != ImMode::Schedule {
        return Err(Error::config(
            "im_schedule called with a non-schedule IM mode",
        ));
    }
    let mut total = 0.0;
    for trade in &portfolio.trades {
        let remaining = trade.maturity() - t;
        if remaining <= TIME_EPS {
            continue;
        }
        let pct = terms
            .schedule
            .lookup(trade.asset_class(), remaining)
            .ok_or_else(|| {
                Error::config(format!(
                    "no schedule bucket for {} with {remaining:.4}y remaining",
                    trade.asset_class()
                ))
            })?;
        total += trade.notional() * pct / 100.0;
    }
    Ok(total)
}

/// Quantile initial margin at grid date `idx` on a path: the positive part of
/// the `q`-quantile of the portfolio value change over the horizon, with the
/// model vol stressed. Trades are revalued at the shocked state with time
/// held fixed.
///
/// Monotone portfolios use the closed-form state quantile; others fall back
/// to [`NESTED_IM_SAMPLES`] conditional draws seeded by `nested_seed`.
pub fn im_quantile(
    portfolio: &BoundPortfolio,
    states: &[f64],
    idx: usize,
    params: &QuantileParams,
    nested_seed: u64,
) -> Result<f64> {
    let model = portfolio.model();
    let state = states[idx];
    let horizon = business_days(params.horizon_business_days);
    let base = portfolio.value(states, idx);
    let change = match portfolio.state_direction() {
        Some(dir) => {
            let q = if dir > 0.0 {
                params.quantile
            } else {
                1.0 - params.quantile
            };
            let shocked = crate::market_models::conditional_value_quantile(
                model,
                state,
                horizon,
                q,
                params.stress_multiplier,
            )?;
            portfolio.value_with_state(states, idx, shocked) - base
        }
        None => {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = path_rng(nested_seed, idx as u64);
            let changes: Vec<f64> = (0..NESTED_IM_SAMPLES)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let s = model.stressed_step(state, horizon, z, params.stress_multiplier);
                    portfolio.value_with_state(states, idx, s) - base
                })
                .collect();
            empirical_quantile(&changes, params.quantile)?
        }
    };
    Ok(change.max(0.0))
}

/// Business days before default of each party's last flow, per flow kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeltaVector {
    pub tf_business_days: u32,
    pub csa_business_days: u32,
    pub sf_business_days: u32,
    pub im_business_days: u32,
}

impl DeltaVector {
    pub fn uniform(days: u32) -> Self {
        Self {
            tf_business_days: days,
            csa_business_days: days,
            sf_business_days: days,
            im_business_days: days,
        }
    }

    pub fn offset(&self, kind: FlowKind) -> u32 {
        match kind {
            FlowKind::Tf => self.tf_business_days,
            FlowKind::Csa => self.csa_business_days,
            FlowKind::Sf => self.sf_business_days,
            FlowKind::Im => self.im_business_days,
        }
    }

    fn max_offset(&self) -> u32 {
        self.tf_business_days
            .max(self.csa_business_days)
            .max(self.sf_business_days)
            .max(self.im_business_days)
    }
}

/// Timing vectors for the bank (B) and the counterparty (C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Deltas {
    pub bank: DeltaVector,
    pub counterparty: DeltaVector,
}

impl Deltas {
    /// Counterparty stops everything `mpor` days before default; the bank keeps
    /// paying trade and settlement flows up to default but stops its CSA and
    /// IM transfers at the same time as the counterparty.
    pub fn classical_plus(mpor_business_days: u32) -> Self {
        Self {
            bank: DeltaVector {
                tf_business_days: 0,
                csa_business_days: mpor_business_days,
                sf_business_days: 0,
                im_business_days: mpor_business_days,
            },
            counterparty: DeltaVector::uniform(mpor_business_days),
        }
    }

    pub fn validate(&self, mpor_business_days: u32) -> Result<()> {
        for (party, v) in [("bank", &self.bank), ("counterparty", &self.counterparty)] {
            if v.max_offset() > mpor_business_days {
                return Err(Error::config(format!(
                    "deltas.{party} offsets must lie in [0, mpor = {mpor_business_days}]"
                )));
            }
        }
        Ok(())
    }

    /// Distinct non-zero offsets, in business days.
    pub fn offsets(&self) -> Vec<u32> {
        let mut v: Vec<u32> = [FlowKind::Tf, FlowKind::Csa, FlowKind::Sf, FlowKind::Im]
            .iter()
            .flat_map(|&k| [self.bank.offset(k), self.counterparty.offset(k)])
            .filter(|&d| d > 0)
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Grid index of a companion date, or `None` when it falls before inception.
#[derive(Debug, Clone, Copy)]
struct Companion(Option<usize>);

#[derive(Debug, Clone)]
struct ReportingDate {
    idx: usize,
    t: f64,
    vm_counterparty: Companion,
    vm_bank: Companion,
    im_held: Companion,
}

/// Precomputed plan for evaluating conditional exposures on many paths that
/// share one grid, portfolio and set of terms.
#[derive(Debug, Clone)]
pub struct ExposureEngine {
    portfolio: BoundPortfolio,
    schedule_source: Portfolio,
    csa: Option<CsaTerms>,
    im: ImTerms,
    deltas: Deltas,
    dates: Vec<ReportingDate>,
    im_dates: Vec<usize>,
    window: f64,
}

impl ExposureEngine {
    /// Plans exposures on `reporting` dates, which must all lie on the
    /// simulation grid together with their margin-period companions.
    pub fn new(
        portfolio: &Portfolio,
        model: &crate::market_models::ModelSpec,
        sim_grid: &TimeGrid,
        reporting: &TimeGrid,
        csa: Option<&CsaTerms>,
        im: &ImTerms,
        deltas: &Deltas,
    ) -> Result<Self> {
        if let Some(c) = csa {
            c.validate()?;
        }
        im.validate()?;
        let mpor = csa.map_or(0, |c| c.mpor_business_days);
        deltas.validate(mpor)?;
        let bound = portfolio.bind(model, sim_grid)?;

        let companion = |t: f64, days: u32| -> Result<Companion> {
            let s = t - business_days(days);
            if s < -TIME_EPS {
                return Ok(Companion(None));
            }
            sim_grid.index_of(s).map(|i| Companion(Some(i))).ok_or_else(|| {
                Error::config(format!(
                    "date {s:.6} ({days} business days before {t:.6}) is missing from the simulation grid"
                ))
            })
        };

        let mut dates = Vec::with_capacity(reporting.len());
        let mut im_dates = Vec::new();
        for &t in reporting.points() {
            let idx = sim_grid.index_of(t).ok_or_else(|| {
                Error::config(format!("reporting date {t} is not on the simulation grid"))
            })?;
            let (vm_counterparty, vm_bank) = if csa.is_some() {
                (
                    companion(t, deltas.counterparty.csa_business_days)?,
                    companion(t, deltas.bank.csa_business_days)?,
                )
            } else {
                (Companion(None), Companion(None))
            };
            let im_held = if im.mode == ImMode::None {
                Companion(None)
            } else {
                companion(t, deltas.counterparty.im_business_days)?
            };
            if let Companion(Some(i)) = im_held {
                im_dates.push(i);
            }
            dates.push(ReportingDate {
                idx,
                t,
                vm_counterparty,
                vm_bank,
                im_held,
            });
        }
        im_dates.sort_unstable();
        im_dates.dedup();

        if im.mode == ImMode::Schedule {
            // surface missing buckets before any path is simulated
            for &i in &im_dates {
                im_schedule(portfolio, im, sim_grid.points()[i])?;
            }
        }

        let window = business_days(
            deltas
                .bank
                .max_offset()
                .max(deltas.counterparty.max_offset()),
        );
        Ok(Self {
            portfolio: bound,
            schedule_source: portfolio.clone(),
            csa: csa.cloned(),
            im: im.clone(),
            deltas: *deltas,
            dates,
            im_dates,
            window,
        })
    }

    pub fn portfolio(&self) -> &BoundPortfolio {
        &self.portfolio
    }

    pub fn n_reporting_dates(&self) -> usize {
        self.dates.len()
    }

    /// Portfolio value on every simulation date of one path.
    pub fn values(&self, states: &[f64]) -> Vec<f64> {
        (0..states.len())
            .map(|i| self.portfolio.value(states, i))
            .collect()
    }

    /// VM balance on every simulation date, by recursion along the path.
    pub fn vm_path(&self, values: &[f64]) -> Vec<f64> {
        let Some(csa) = &self.csa else {
            return vec![0.0; values.len()];
        };
        let grid = self.portfolio.grid().points();
        let mut out = Vec::with_capacity(values.len());
        let mut balance = 0.0;
        let mut last_call: Option<f64> = None;
        for (i, &v) in values.iter().enumerate() {
            let day = grid[i] * BUSINESS_DAYS_PER_YEAR;
            let due = last_call.is_none_or(|last| {
                day - last >= f64::from(csa.call_frequency_business_days) - 1e-6
            });
            if due {
                balance = vm_balance(v, csa, balance);
                last_call = Some(day);
            }
            out.push(balance);
        }
        out
    }

    /// IM amounts on the simulation dates where some reporting date needs them.
    fn im_path(&self, states: &[f64], nested_seed: u64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; states.len()];
        let grid = self.portfolio.grid().points();
        for &i in &self.im_dates {
            out[i] = match self.im.mode {
                ImMode::None => 0.0,
                ImMode::Schedule => im_schedule(&self.schedule_source, &self.im, grid[i])?,
                ImMode::Quantile => {
                    im_quantile(&self.portfolio, states, i, &self.im.quantile, nested_seed)?
                }
            };
        }
        Ok(out)
    }

    /// Conditional-on-default exposure, before flooring, on every reporting
    /// date of one path. `nested_seed` only matters for nested-simulation IM.
    pub fn path_exposures(&self, states: &[f64], nested_seed: u64) -> Result<Vec<f64>> {
        let values = self.values(states);
        let vm = self.vm_path(&values);
        let im = self.im_path(states, nested_seed)?;
        let flows = self.portfolio.flow_schedule(states)?;
        Ok(self
            .dates
            .iter()
            .map(|d| self.exposure_at(d, &values, &vm, &im, &flows))
            .collect())
    }

    fn exposure_at(
        &self,
        d: &ReportingDate,
        values: &[f64],
        vm: &[f64],
        im: &[f64],
        flows: &[FlowEvent],
    ) -> f64 {
        let collateral = self.collateral_held(d, vm);
        let im_held = d.im_held.0.map_or(0.0, |i| im[i]);
        values[d.idx] - collateral - im_held + self.unpaid_flows(d.t, flows)
    }

    fn collateral_held(&self, d: &ReportingDate, vm: &[f64]) -> f64 {
        let at = |c: Companion| c.0.map_or(0.0, |i| vm[i]);
        let dc = self.deltas.counterparty.csa_business_days;
        let db = self.deltas.bank.csa_business_days;
        let (vc, vb) = (at(d.vm_counterparty), at(d.vm_bank));
        // Between the two cut-offs only the party still honouring the CSA
        // moves collateral: the counterparty only posts, the bank only returns.
        match dc.cmp(&db) {
            std::cmp::Ordering::Equal => vc,
            // counterparty stopped earlier; bank may still have returned collateral
            std::cmp::Ordering::Greater => vc + (vb - vc).min(0.0),
            // bank stopped earlier; counterparty may still have posted more
            std::cmp::Ordering::Less => vb + (vc - vb).max(0.0),
        }
    }

    /// Signed sum of termsheet and settlement flows in the margin period that
    /// the owing party had stopped paying by default.
    fn unpaid_flows(&self, t: f64, flows: &[FlowEvent]) -> f64 {
        let lo = t - self.window;
        let netting = self.csa.as_ref().is_some_and(|c| c.flow_netting);
        // Same-date flows of one kind settle as a single payment.
        let mut settled: Vec<(f64, FlowKind, f64)> = Vec::new();
        for f in flows.iter().filter(|f| in_window(f.time, lo, t)) {
            match settled
                .iter_mut()
                .find(|(time, kind, _)| *kind == f.kind && (*time - f.time).abs() <= TIME_EPS)
            {
                Some(entry) => entry.2 += f.amount,
                None => settled.push((f.time, f.kind, f.amount)),
            }
        }
        let mut total = 0.0;
        for (time, kind, net) in settled {
            if net == 0.0 {
                continue;
            }
            let payer = if net > 0.0 {
                &self.deltas.counterparty
            } else {
                &self.deltas.bank
            };
            // With netting, termsheet flows move together with collateral.
            let timing = if netting && kind == FlowKind::Tf {
                FlowKind::Csa
            } else {
                kind
            };
            if time > t - business_days(payer.offset(timing)) + TIME_EPS {
                total += net;
            }
        }
        total
    }
}

/// Exposure before flooring at grid date `t` on one path.
#[allow(clippy::too_many_arguments)]
pub fn conditional_exposure(
    model: &crate::market_models::ModelSpec,
    grid: &TimeGrid,
    states: &[f64],
    t: f64,
    portfolio: &Portfolio,
    csa: Option<&CsaTerms>,
    im: &ImTerms,
    deltas: &Deltas,
) -> Result<f64> {
    let reporting = TimeGrid::new(vec![t])?;
    let engine = ExposureEngine::new(portfolio, model, grid, &reporting, csa, im, deltas)?;
    Ok(engine.path_exposures(states, 0)?[0])
}
