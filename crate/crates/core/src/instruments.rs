//! Trade valuation and termsheet cashflows.
//!
//! Swaps are valued with closed-form zero-coupon bonds of the one-factor
//! short-rate model. Floating coupons fix at the start of their accrual period
//! from the simulated curve, so the next coupon is known once its period has
//! begun. Forwards on the GBM level are valued as `quantity * (S - strike)`
//! and pay `quantity * (S_T - strike)` at maturity. That payment is a
//! termsheet flow, so it takes part in flow netting like a swap coupon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_models::{business_days, ModelSpec, TimeGrid, BUSINESS_DAYS_PER_YEAR, TIME_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapDirection {
    PayFixed,
    ReceiveFixed,
}

impl SwapDirection {
    fn sign(self) -> f64 {
        match self {
            SwapDirection::PayFixed => 1.0,
            SwapDirection::ReceiveFixed => -1.0,
        }
    }
}

/// Vanilla fixed-for-floating swap; both legs share the payment frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapSpec {
    pub notional: f64,
    pub fixed_rate: f64,
    pub direction: SwapDirection,
    pub start: f64,
    pub maturity: f64,
    pub payments_per_year: u32,
}

impl SwapSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.notional > 0.0 && self.notional.is_finite()) {
            return Err(Error::config(format!(
                "swap notional must be > 0, got {}",
                self.notional
            )));
        }
        if !self.fixed_rate.is_finite() {
            return Err(Error::config("swap fixed rate must be finite"));
        }
        if !(self.start >= 0.0 && self.maturity > self.start) {
            return Err(Error::config(format!(
                "swap needs maturity > start >= 0 (start {}, maturity {})",
                self.start, self.maturity
            )));
        }
        if self.payments_per_year == 0 {
            return Err(Error::config(
                "swap payment frequency must be at least 1 per year",
            ));
        }
        let periods = (self.maturity - self.start) * f64::from(self.payments_per_year);
        if (periods - periods.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "swap tenor {} is not a whole number of {}-per-year periods",
                self.maturity - self.start,
                self.payments_per_year
            )));
        }
        Ok(())
    }

    pub fn accrual(&self) -> f64 {
        1.0 / f64::from(self.payments_per_year)
    }

    fn n_periods(&self) -> usize {
        ((self.maturity - self.start) * f64::from(self.payments_per_year)).round() as usize
    }

    /// Payment times `T_1 < ... < T_n`; period k accrues over `(T_{k-1}, T_k]`
    /// with `T_0 = start`.
    pub fn payment_times(&self) -> Vec<f64> {
        let tau = self.accrual();
        (1..=self.n_periods())
            .map(|k| snap_to_business_day(self.start + k as f64 * tau))
            .collect()
    }
}

/// Rounds a year fraction to the nearest whole business day when it is
/// within rounding noise of one, so schedule dates compare equal to grid points.
fn snap_to_business_day(t: f64) -> f64 {
    let days = t * BUSINESS_DAYS_PER_YEAR;
    if (days - days.round()).abs() < 1e-7
        && days.round() >= 0.0
        && days.round() <= f64::from(u32::MAX)
    {
        business_days(days.round() as u32)
    } else {
        t
    }
}

/// Whole-business-day representation of a year fraction, if it has one.
pub fn as_business_days(t: f64) -> Option<u32> {
    let days = t * BUSINESS_DAYS_PER_YEAR;
    ((days - days.round()).abs() < 1e-7 && days.round() >= 0.0).then(|| days.round() as u32)
}

/// Long (`quantity > 0`) or short position in the GBM level, cash-settled at maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSpec {
    pub quantity: f64,
    pub strike: f64,
    pub maturity: f64,
}

impl ForwardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.quantity.is_finite() && self.quantity != 0.0) {
            return Err(Error::config(
                "forward quantity must be finite and non-zero",
            ));
        }
        if !(self.strike.is_finite() && self.strike >= 0.0) {
            return Err(Error::config("forward strike must be >= 0"));
        }
        if !(self.maturity > 0.0) {
            return Err(Error::config("forward maturity must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Trade {
    Swap(SwapSpec),
    Forward(ForwardSpec),
}

impl Trade {
    pub fn maturity(&self) -> f64 {
        match self {
            Trade::Swap(s) => s.maturity,
            Trade::Forward(f) => f.maturity,
        }
    }

    /// Notional used by lookup-table margin: swap notional, or
    /// `|quantity| * strike` for forwards.
    pub fn notional(&self) -> f64 {
        match self {
            Trade::Swap(s) => s.notional,
            Trade::Forward(f) => f.quantity.abs() * f.strike,
        }
    }

    pub fn asset_class(&self) -> &'static str {
        match self {
            Trade::Swap(_) => "interest_rate",
            Trade::Forward(_) => "equity",
        }
    }

    fn check_model(&self, model: &ModelSpec) -> Result<()> {
        match (self, model) {
            (Trade::Swap(s), ModelSpec::ShortRate1f { .. }) => s.validate(),
            (Trade::Forward(f), ModelSpec::Gbm { .. }) => f.validate(),
            (Trade::Swap(_), ModelSpec::Gbm { .. }) => Err(Error::UnsupportedInstrument(
                "swaps need a short-rate model".into(),
            )),
            (Trade::Forward(_), ModelSpec::ShortRate1f { .. }) => Err(
                Error::UnsupportedInstrument("forwards need a GBM model".into()),
            ),
        }
    }

    /// Sign of dV/dstate when it is the same everywhere.
    fn state_direction(&self) -> f64 {
        match self {
            // Pay-fixed gains when rates rise. The last period alone is only
            // weakly rate-sensitive, which is ignored here.
            Trade::Swap(s) => s.direction.sign(),
            Trade::Forward(f) => f.quantity.signum(),
        }
    }
}

/// Trades in one netting set.
#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub netting_set: String,
    pub trades: Vec<Trade>,
}

impl Portfolio {
    pub fn new(netting_set: impl Into<String>, trades: Vec<Trade>) -> Self {
        Self {
            netting_set: netting_set.into(),
            trades,
        }
    }

    pub fn last_maturity(&self) -> f64 {
        self.trades.iter().map(Trade::maturity).fold(0.0, f64::max)
    }

    /// Every date on which some trade pays or settles.
    pub fn flow_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .trades
            .iter()
            .flat_map(|t| match t {
                Trade::Swap(s) => s.payment_times(),
                Trade::Forward(f) => vec![f.maturity],
            })
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
        out
    }

    /// Dates on which some floating coupon fixes.
    pub fn fixing_times(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .trades
            .iter()
            .flat_map(|t| match t {
                Trade::Swap(s) => {
                    let mut v = vec![s.start];
                    let pays = s.payment_times();
                    v.extend_from_slice(&pays[..pays.len() - 1]);
                    v
                }
                Trade::Forward(_) => Vec::new(),
            })
            .collect();
        out.sort_by(f64::total_cmp);
        out.dedup_by(|a, b| (*a - *b).abs() < TIME_EPS);
        out
    }

    /// Resolves the portfolio against a model and simulation grid.
    pub fn bind(&self, model: &ModelSpec, grid: &TimeGrid) -> Result<BoundPortfolio> {
        if self.trades.is_empty() {
            return Err(Error::config(format!(
                "netting set {} has no trades",
                self.netting_set
            )));
        }
        model.validate()?;
        let mut trades = Vec::with_capacity(self.trades.len());
        for trade in &self.trades {
            trade.check_model(model)?;
            trades.push(match trade {
                Trade::Swap(s) => {
                    let pays = s.payment_times();
                    let mut fixing_index = Vec::with_capacity(pays.len());
                    for k in 0..pays.len() {
                        let fix = if k == 0 { s.start } else { pays[k - 1] };
                        fixing_index.push(if fix.abs() <= TIME_EPS {
                            Fixing::Initial
                        } else if fix > grid.last() + TIME_EPS {
                            // never needed for valuation on this grid
                            Fixing::AfterGrid
                        } else {
                            Fixing::OnGrid(grid.index_of(fix).ok_or_else(|| {
                                Error::config(format!(
                                    "swap fixing date {fix} is not on the simulation grid"
                                ))
                            })?)
                        });
                    }
                    BoundTrade::Swap {
                        spec: s.clone(),
                        payments: pays,
                        fixings: fixing_index,
                    }
                }
                Trade::Forward(f) => BoundTrade::Forward {
                    spec: f.clone(),
                    maturity_index: grid.index_of(f.maturity),
                },
            });
        }
        Ok(BoundPortfolio {
            model: *model,
            grid: grid.clone(),
            trades,
        })
    }

    /// Value of the portfolio on a simulated path at grid date `t`.
    pub fn value(&self, model: &ModelSpec, grid: &TimeGrid, states: &[f64], t: f64) -> Result<f64> {
        let bound = self.bind(model, grid)?;
        let idx = grid
            .index_of(t)
            .ok_or_else(|| Error::config(format!("valuation date {t} is not on the grid")))?;
        Ok(bound.value(states, idx))
    }

    /// Termsheet flows with time in `(t1, t2]` on a simulated path.
    pub fn flows_in_window(
        &self,
        model: &ModelSpec,
        grid: &TimeGrid,
        states: &[f64],
        window: (f64, f64),
    ) -> Result<Vec<FlowEvent>> {
        if !(window.0 < window.1) {
            return Err(Error::input(format!(
                "flow window needs t1 < t2, got ({}, {}]",
                window.0, window.1
            )));
        }
        let bound = self.bind(model, grid)?;
        let mut out = bound.flow_schedule(states)?;
        out.retain(|f| in_window(f.time, window.0, window.1));
        Ok(out)
    }
}

pub(crate) fn in_window(t: f64, lo: f64, hi: f64) -> bool {
    t > lo + TIME_EPS && t <= hi + TIME_EPS
}

/// Cashflow categories of the default-timing vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FlowKind {
    /// Termsheet (coupon, principal) flow.
    Tf,
    /// Variation-margin transfer under the CSA.
    Csa,
    /// Settlement flow.
    Sf,
    /// Initial-margin transfer.
    Im,
}

/// A single cashflow; positive amounts are received by the bank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowEvent {
    pub time: f64,
    pub amount: f64,
    pub kind: FlowKind,
}

#[derive(Debug, Clone, Copy)]
enum Fixing {
    Initial,
    OnGrid(usize),
    AfterGrid,
}

#[derive(Debug, Clone)]
enum BoundTrade {
    Swap {
        spec: SwapSpec,
        payments: Vec<f64>,
        fixings: Vec<Fixing>,
    },
    Forward {
        spec: ForwardSpec,
        maturity_index: Option<usize>,
    },
}

/// A portfolio resolved against one model and grid; valuation is infallible.
#[derive(Debug, Clone)]
pub struct BoundPortfolio {
    model: ModelSpec,
    grid: TimeGrid,
    trades: Vec<BoundTrade>,
}

impl BoundPortfolio {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Portfolio value at grid date `idx` on a path with the given states.
    pub fn value(&self, states: &[f64], idx: usize) -> f64 {
        self.value_with_state(states, idx, states[idx])
    }

    /// As [`value`](Self::value), but with the market state on date `idx`
    /// replaced by `state`. Past fixings still come from the path.
    pub fn value_with_state(&self, states: &[f64], idx: usize, state: f64) -> f64 {
        let t = self.grid.points()[idx];
        let mut total = 0.0;
        for trade in &self.trades {
            total += match trade {
                BoundTrade::Swap {
                    spec,
                    payments,
                    fixings,
                } => self.swap_value(spec, payments, fixings, states, t, state),
                BoundTrade::Forward { spec, .. } => {
                    if t < spec.maturity - TIME_EPS {
                        spec.quantity * (state - spec.strike)
                    } else {
                        0.0
                    }
                }
            };
        }
        total
    }

    fn fixing_state(&self, fixing: Fixing, states: &[f64]) -> f64 {
        match fixing {
            Fixing::Initial => self.model.initial_state(),
            Fixing::OnGrid(i) => states[i],
            Fixing::AfterGrid => f64::NAN,
        }
    }

    fn swap_value(
        &self,
        spec: &SwapSpec,
        payments: &[f64],
        fixings: &[Fixing],
        states: &[f64],
        t: f64,
        rate: f64,
    ) -> f64 {
        let Some(next) = payments.iter().position(|&p| p > t + TIME_EPS) else {
            return 0.0;
        };
        let tau = spec.accrual();
        let end = payments[payments.len() - 1];
        let bond = |maturity: f64| zero_bond(&self.model, rate, maturity - t);

        let mut annuity = 0.0;
        for &p in &payments[next..] {
            annuity += tau * bond(p);
        }
        let float = if t < spec.start - TIME_EPS {
            bond(spec.start) - bond(end)
        } else {
            let fix_start = if next == 0 {
                spec.start
            } else {
                payments[next - 1]
            };
            let r_fix = self.fixing_state(fixings[next], states);
            let fixed_growth = 1.0 / zero_bond(&self.model, r_fix, payments[next] - fix_start);
            bond(payments[next]) * fixed_growth - bond(end)
        };
        spec.direction.sign() * (spec.notional * (float - spec.fixed_rate * annuity))
    }

    /// All termsheet and settlement flows of the portfolio on one path,
    /// sorted by time. Flows whose amount depends on a state that is not on
    /// the grid are reported as an error.
    pub fn flow_schedule(&self, states: &[f64]) -> Result<Vec<FlowEvent>> {
        let mut out = Vec::new();
        for trade in &self.trades {
            match trade {
                BoundTrade::Swap {
                    spec,
                    payments,
                    fixings,
                } => {
                    let tau = spec.accrual();
                    let sign = spec.direction.sign();
                    for (k, &pay) in payments.iter().enumerate() {
                        let fix_start = if k == 0 { spec.start } else { payments[k - 1] };
                        if matches!(fixings[k], Fixing::AfterGrid) {
                            return Err(Error::config(format!(
                                "swap fixing date {fix_start} lies beyond the simulation grid"
                            )));
                        }
                        let r_fix = self.fixing_state(fixings[k], states);
                        let growth = 1.0 / zero_bond(&self.model, r_fix, pay - fix_start);
                        out.push(FlowEvent {
                            time: pay,
                            amount: -sign * spec.notional * spec.fixed_rate * tau,
                            kind: FlowKind::Tf,
                        });
                        out.push(FlowEvent {
                            time: pay,
                            amount: sign * spec.notional * (growth - 1.0),
                            kind: FlowKind::Tf,
                        });
                    }
                }
                BoundTrade::Forward {
                    spec,
                    maturity_index,
                } => {
                    let idx = maturity_index.ok_or_else(|| {
                        Error::config(format!(
                            "forward maturity {} is not on the simulation grid",
                            spec.maturity
                        ))
                    })?;
                    out.push(FlowEvent {
                        time: spec.maturity,
                        amount: spec.quantity * (states[idx] - spec.strike),
                        kind: FlowKind::Tf,
                    });
                }
            }
        }
        out.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(out)
    }

    /// +1 if the portfolio value rises with the state, -1 if it falls, `None`
    /// when trades disagree.
    pub fn state_direction(&self) -> Option<f64> {
        let mut dir = None;
        for trade in &self.trades {
            let d = match trade {
                BoundTrade::Swap { spec, .. } => Trade::Swap(spec.clone()).state_direction(),
                BoundTrade::Forward { spec, .. } => Trade::Forward(spec.clone()).state_direction(),
            };
            match dir {
                None => dir = Some(d),
                Some(prev) if prev != d => return None,
                _ => {}
            }
        }
        dir
    }
}

/// Zero-coupon bond price over `tau` years given short rate `rate`, for the
/// short-rate model mean-reverting to its initial level.
pub fn zero_bond(model: &ModelSpec, rate: f64, tau: f64) -> f64 {
    let ModelSpec::ShortRate1f {
        mean_reversion_per_year: a,
        vol_per_sqrt_year: vol,
        initial_zero_rate_per_year: level,
    } = *model
    else {
        return 1.0;
    };
    if tau <= 0.0 {
        return 1.0;
    }
    let b = -(-a * tau).exp_m1() / a;
    let ln_a = (level - vol * vol / (2.0 * a * a)) * (b - tau) - vol * vol * b * b / (4.0 * a);
    (ln_a - b * rate).exp()
}

/// Fixed rate that gives the swap zero value at time zero.
pub fn par_rate(
    model: &ModelSpec,
    start: f64,
    maturity: f64,
    payments_per_year: u32,
) -> Result<f64> {
    if let ModelSpec::Gbm { .. } = model {
        return Err(Error::UnsupportedInstrument(
            "par rates need a short-rate model".into(),
        ));
    }
    model.validate()?;
    let probe = SwapSpec {
        notional: 1.0,
        fixed_rate: 0.0,
        direction: SwapDirection::PayFixed,
        start,
        maturity,
        payments_per_year,
    };
    probe.validate()?;
    let r0 = model.initial_state();
    let tau = probe.accrual();
    let annuity: f64 = probe
        .payment_times()
        .iter()
        .map(|&p| tau * zero_bond(model, r0, p))
        .sum();
    Ok((zero_bond(model, r0, start) - zero_bond(model, r0, maturity)) / annuity)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates() -> ModelSpec {
        ModelSpec::short_rate(0.1, 0.01, 0.03)
    }

    fn swap(direction: SwapDirection, fixed_rate: f64) -> SwapSpec {
        SwapSpec {
            notional: 100e6,
            fixed_rate,
            direction,
            start: 0.0,
            maturity: 10.0,
            payments_per_year: 1,
        }
    }

    fn annual_grid(end: u32) -> TimeGrid {
        TimeGrid::from_business_days((0..=end * 4).map(|k| k * 63)).unwrap()
    }

    #[test]
    fn flat_curve_par_rate_is_annual_equivalent() {
        let flat = ModelSpec::short_rate(0.1, 0.0, 0.02);
        for tenor in [1.0, 5.0, 10.0, 30.0] {
            let k = par_rate(&flat, 0.0, tenor, 1).unwrap();
            assert!(((1.0 + k).ln() - 0.02).abs() < 1e-14, "tenor {tenor}: {k}");
        }
    }

    #[test]
    fn par_rate_increases_with_initial_rate() {
        let mut prev = f64::NEG_INFINITY;
        for r0 in [0.0, 0.01, 0.02, 0.03, 0.05] {
            let k = par_rate(&ModelSpec::short_rate(0.1, 0.01, r0), 0.0, 10.0, 1).unwrap();
            assert!(k > prev);
            prev = k;
        }
    }

    #[test]
    fn par_rate_rejects_gbm() {
        let err = par_rate(&ModelSpec::gbm(100.0, 0.0, 0.2), 0.0, 10.0, 1).unwrap_err();
        assert!(matches!(err, Error::UnsupportedInstrument(_)));
    }

    #[test]
    fn atm_swap_is_worth_zero_today() {
        let model = rates();
        let k = par_rate(&model, 0.0, 10.0, 1).unwrap();
        let p = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, k))]);
        let grid = annual_grid(10);
        let states = vec![model.initial_state(); grid.len()];
        let v = p.value(&model, &grid, &states, 0.0).unwrap();
        assert!(v.abs() < 1e-9 * 100e6, "{v}");
    }

    #[test]
    fn expired_swap_is_worth_zero() {
        let model = rates();
        let p = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.03))]);
        let grid = annual_grid(10);
        let states: Vec<f64> = (0..grid.len()).map(|i| 0.01 + 0.001 * i as f64).collect();
        assert_eq!(p.value(&model, &grid, &states, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn receive_fixed_is_negated_pay_fixed() {
        let model = rates();
        let grid = annual_grid(10);
        let states: Vec<f64> = (0..grid.len())
            .map(|i| 0.03 + 0.004 * ((i as f64) * 0.7).sin())
            .collect();
        let pay = Portfolio::new("a", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.031))])
            .bind(&model, &grid)
            .unwrap();
        let rec = Portfolio::new(
            "b",
            vec![Trade::Swap(swap(SwapDirection::ReceiveFixed, 0.031))],
        )
        .bind(&model, &grid)
        .unwrap();
        for i in 0..grid.len() {
            assert_eq!(rec.value(&states, i), -pay.value(&states, i));
        }
    }

    #[test]
    fn fixed_leg_flow_in_window() {
        let model = rates();
        let grid = annual_grid(10);
        let states = vec![0.03; grid.len()];
        let p = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.03))]);
        let flows = p
            .flows_in_window(&model, &grid, &states, (2.5, 3.5))
            .unwrap();
        assert_eq!(flows.len(), 2);
        assert!(flows
            .iter()
            .all(|f| f.kind == FlowKind::Tf && (f.time - 3.0).abs() < 1e-12));
        let fixed = flows.iter().find(|f| f.amount < 0.0).unwrap();
        assert!((fixed.amount + 3e6).abs() < 1e-6);
        // window without a payment date
        assert!(p
            .flows_in_window(&model, &grid, &states, (3.25, 3.75))
            .unwrap()
            .is_empty());
        assert!(p
            .flows_in_window(&model, &grid, &states, (3.0, 3.0))
            .is_err());
    }

    #[test]
    fn floating_flow_uses_fixing_state() {
        let model = rates();
        let grid = annual_grid(3);
        let mut states = vec![0.03; grid.len()];
        let one = grid.index_of(1.0).unwrap();
        states[one] = 0.05;
        let p = Portfolio::new(
            "ns",
            vec![Trade::Swap(SwapSpec {
                maturity: 3.0,
                ..swap(SwapDirection::ReceiveFixed, 0.03)
            })],
        );
        let flows = p
            .flows_in_window(&model, &grid, &states, (1.5, 2.0))
            .unwrap();
        let float = flows.iter().find(|f| f.amount < 0.0).unwrap();
        let expected = -100e6 * (1.0 / zero_bond(&model, 0.05, 1.0) - 1.0);
        assert!((float.amount - expected).abs() < 1e-6);
    }

    #[test]
    fn windows_partition_the_schedule() {
        let model = rates();
        let grid = annual_grid(10);
        let states: Vec<f64> = (0..grid.len()).map(|i| 0.02 + 0.0005 * i as f64).collect();
        let p = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.03))]);
        let all = p
            .bind(&model, &grid)
            .unwrap()
            .flow_schedule(&states)
            .unwrap();
        let mut pieces = Vec::new();
        for (a, b) in [(-1.0, 2.2), (2.2, 2.9), (2.9, 7.0), (7.0, 10.0)] {
            pieces.extend(p.flows_in_window(&model, &grid, &states, (a, b)).unwrap());
        }
        assert_eq!(all, pieces);
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn value_drops_by_paid_coupon() {
        // Deterministic rates: the value just after a payment differs from the
        // value just before by the net coupon (ignoring one day of carry).
        let model = ModelSpec::short_rate(0.1, 0.0, 0.03);
        let grid = TimeGrid::from_business_days((0..=10).map(|y| 252 * y).chain([251])).unwrap();
        let states = vec![0.03; grid.len()];
        let bound = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.04))])
            .bind(&model, &grid)
            .unwrap();
        let before = bound.value(&states, 1);
        let after = bound.value(&states, 2);
        let coupon: f64 = bound
            .flow_schedule(&states)
            .unwrap()
            .iter()
            .filter(|f| (f.time - 1.0).abs() < 1e-12)
            .map(|f| f.amount)
            .sum();
        let carry = (0.03f64 / 252.0).exp();
        assert!(
            (before * carry - (after + coupon)).abs() < 1e-3,
            "{before} {after} {coupon}"
        );
    }

    #[test]
    fn forward_value_and_settlement() {
        let model = ModelSpec::gbm(100.0, 0.0, 0.2);
        let grid = TimeGrid::new(vec![0.5, 1.0]).unwrap();
        let p = Portfolio::new(
            "fx",
            vec![Trade::Forward(ForwardSpec {
                quantity: 2.0,
                strike: 90.0,
                maturity: 1.0,
            })],
        );
        let states = [110.0, 120.0];
        assert_eq!(p.value(&model, &grid, &states, 0.5).unwrap(), 40.0);
        assert_eq!(p.value(&model, &grid, &states, 1.0).unwrap(), 0.0);
        let flows = p
            .flows_in_window(&model, &grid, &states, (0.5, 1.0))
            .unwrap();
        assert_eq!(
            flows,
            vec![FlowEvent {
                time: 1.0,
                amount: 60.0,
                kind: FlowKind::Tf
            }]
        );
    }

    #[test]
    fn model_mismatch_is_unsupported() {
        let grid = annual_grid(10);
        let p = Portfolio::new("ns", vec![Trade::Swap(swap(SwapDirection::PayFixed, 0.03))]);
        let err = p.bind(&ModelSpec::gbm(100.0, 0.0, 0.2), &grid).unwrap_err();
        assert!(matches!(err, Error::UnsupportedInstrument(_)));
        assert!(Portfolio::new("empty", vec![])
            .bind(&rates(), &grid)
            .is_err());
    }

    #[test]
    fn missing_fixing_date_is_config_error() {
        let grid = TimeGrid::new(vec![0.0, 0.5, 2.0]).unwrap();
        let p = Portfolio::new(
            "ns",
            vec![Trade::Swap(SwapSpec {
                maturity: 2.0,
                ..swap(SwapDirection::PayFixed, 0.03)
            })],
        );
        assert!(matches!(p.bind(&rates(), &grid), Err(Error::Config(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn value_is_additive(
                n1 in 1e6f64..1e8, n2 in 1e6f64..1e8,
                k1 in 0.0f64..0.06, k2 in 0.0f64..0.06,
                shift in -0.02f64..0.02,
                dir in any::<bool>(),
            ) {
                let model = rates();
                let grid = annual_grid(10);
                let states: Vec<f64> = (0..grid.len()).map(|i| 0.03 + shift * (i as f64 / 40.0)).collect();
                let d = if dir { SwapDirection::PayFixed } else { SwapDirection::ReceiveFixed };
                let a = Trade::Swap(SwapSpec { notional: n1, ..swap(d, k1) });
                let b = Trade::Swap(SwapSpec { notional: n2, maturity: 7.0, ..swap(SwapDirection::PayFixed, k2) });
                let pa = Portfolio::new("a", vec![a.clone()]).bind(&model, &grid).unwrap();
                let pb = Portfolio::new("b", vec![b.clone()]).bind(&model, &grid).unwrap();
                let pab = Portfolio::new("ab", vec![a, b]).bind(&model, &grid).unwrap();
                for i in 0..grid.len() {
                    prop_assert_eq!(pab.value(&states, i), pa.value(&states, i) + pb.value(&states, i));
                }
            }
        }
    }
}
