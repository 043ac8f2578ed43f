//! Scenario files: one TOML document describing a complete, reproducible run.
//!
//! Keys carry their units (`maturity_years`, `mpor_business_days`,
//! `vol_per_sqrt_year`, ...). Unknown keys are rejected. Relative file paths
//! are resolved against the scenario file's directory.
//!
//! ```toml
//! name = "usd_irs_collat"
//! n_paths = 50000
//! seed = 7
//!
//! [model]
//! kind = "short_rate1f"
//! mean_reversion_per_year = 0.1
//! vol_per_sqrt_year = 0.01
//! initial_zero_rate_per_year = 0.03
//!
//! [grid]
//! step_business_days = 21
//!
//! [portfolio]
//! counterparty = "ACME"
//! netting_set = "ACME-IRS"
//!
//! [[portfolio.trades]]
//! type = "swap"
//! notional = 100e6
//! direction = "pay_fixed"
//! maturity_years = 10.0
//!
//! [csa]
//! mpor_business_days = 10
//!
//! [lgd]
//! kind = "constant"
//! lgd = 0.6
//!
//! [[metrics]]
//! kind = "PFL"
//! q = [0.99]
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collateral::{CsaTerms, Deltas, ImMode, ImTerms, QuantileParams, ScheduleTable};
use crate::error::{Error, Result};
use crate::instruments::{
    as_business_days, par_rate, ForwardSpec, Portfolio, SwapDirection, SwapSpec, Trade,
};
use crate::market_models::{MeasureConfig, ModelSpec, TimeGrid, BUSINESS_DAYS_PER_YEAR};
use crate::metrics::{
    CdsPosition, CreditCurve, CvaAdjustment, LgdModel, MetricKind, ProtectionProfile,
};

/// Environment variable that overrides the scenario's output directory.
pub const OUTPUT_DIR_ENV: &str = "PFL_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    pub model: ModelSpec,
    #[serde(default)]
    pub measure: MeasureConfig,
    pub grid: GridSpec,
    pub portfolio: PortfolioSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csa: Option<CsaTerms>,
    #[serde(default)]
    pub initial_margin: ImSpec,
    /// Defaults to the classical-plus convention for the CSA's margin period.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deltas: Option<Deltas>,
    pub lgd: LgdModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credit_curve: Option<CreditCurve>,
    #[serde(default)]
    pub cva_adjustment: CvaAdjustment,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub protection: Vec<CdsPosition>,
    #[serde(default)]
    pub metrics: Vec<MetricRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limits_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PlotSpec>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Last reporting date; defaults to the last trade maturity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_years: Option<f64>,
    pub step_business_days: u32,
    /// Report at t = 0 as well.
    #[serde(default)]
    pub include_zero: bool,
    /// Report on every payment date and halfway through the margin period
    /// after it, where collateral-return spikes peak.
    #[serde(default = "yes")]
    pub flow_dates: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortfolioSpec {
    #[serde(default = "default_counterparty")]
    pub counterparty: String,
    pub netting_set: String,
    pub trades: Vec<TradeSpec>,
}

fn default_counterparty() -> String {
    "counterparty".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TradeSpec {
    Swap {
        notional: f64,
        /// Omitted for an at-the-money (par) swap.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fixed_rate_per_year: Option<f64>,
        direction: SwapDirection,
        #[serde(default)]
        start_years: f64,
        maturity_years: f64,
        #[serde(default = "annual")]
        payments_per_year: u32,
    },
    Forward {
        quantity: f64,
        strike: f64,
        maturity_years: f64,
    },
}

fn annual() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImSpec {
    #[serde(default)]
    pub mode: ImMode,
    /// CSV lookup table; the built-in interest-rate table when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_table_file: Option<PathBuf>,
    #[serde(default = "default_im_q")]
    pub quantile: f64,
    #[serde(default = "default_im_horizon")]
    pub horizon_business_days: u32,
    #[serde(default = "default_stress")]
    pub stress_multiplier: f64,
}

fn default_im_q() -> f64 {
    QuantileParams::default().quantile
}

fn default_im_horizon() -> u32 {
    QuantileParams::default().horizon_business_days
}

fn default_stress() -> f64 {
    1.0
}

impl Default for ImSpec {
    fn default() -> Self {
        Self {
            mode: ImMode::None,
            schedule_table_file: None,
            quantile: default_im_q(),
            horizon_business_days: default_im_horizon(),
            stress_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRequest {
    pub kind: MetricKind,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    /// Date of the exposure histograms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub histogram_t_years: Option<f64>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn default_bins() -> usize {
    60
}

/// Reads, overrides and validates a scenario file.
pub fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_scenario(&text, &base, overrides)
}

/// Parses scenario text; `base_dir` anchors relative file references.
pub fn parse_scenario(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Scenario> {
    let mut doc: toml::Table =
        toml::from_str(text).map_err(|e| Error::config(format!("scenario: {e}")))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut scenario: Scenario = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("scenario: {}", e.message())))?;
    scenario.base_dir = base_dir.to_path_buf();
    scenario.validate()?;
    Ok(scenario)
}

/// Sets `dotted.key=value`; the value is read as TOML, or as a string when
/// it is not valid TOML.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn check_open_unit(name: &str, q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in (0, 1), got {q}")))
    }
}

fn whole_days(name: &str, t: f64) -> Result<u32> {
    as_business_days(t).ok_or_else(|| {
        Error::config(format!(
            "{name} = {t} years is not a whole number of business days"
        ))
    })
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::config("n_paths must be at least 1"));
        }
        if self.antithetic && self.n_paths % 2 == 1 {
            return Err(Error::config("antithetic sampling needs an even n_paths"));
        }
        self.model.validate()?;
        if self.grid.step_business_days == 0 {
            return Err(Error::config("grid.step_business_days must be at least 1"));
        }
        if let Some(end) = self.grid.end_years {
            if !(end > 0.0) {
                return Err(Error::config("grid.end_years must be > 0"));
            }
            whole_days("grid.end_years", end)?;
        }
        if self.portfolio.trades.is_empty() {
            return Err(Error::config("portfolio.trades must not be empty"));
        }
        if let Some(csa) = &self.csa {
            csa.validate()?;
        }
        self.deltas().validate(self.mpor_business_days())?;
        self.im_terms_without_table().validate()?;
        if self.initial_margin.mode != ImMode::None && self.csa.is_none() {
            return Err(Error::config(
                "initial_margin needs a [csa] block for its margin period",
            ));
        }
        self.lgd.validate()?;
        if let Some(c) = &self.credit_curve {
            c.validate()?;
        }
        ProtectionProfile::new(self.protection.clone())?;
        for m in &self.metrics {
            for &q in &m.q {
                check_open_unit(&format!("metrics.{}.q", m.kind), q)?;
            }
        }
        if let Some(p) = &self.plot {
            if p.histogram_bins == 0 {
                return Err(Error::config("plot.histogram_bins must be at least 1"));
            }
            if let Some(t) = p.histogram_t_years {
                whole_days("plot.histogram_t_years", t)?;
            }
        }
        for f in self.referenced_files() {
            if !f.is_file() {
                return Err(Error::config(format!(
                    "referenced file {} does not exist",
                    f.display()
                )));
            }
        }
        // catches model/trade mismatches and off-grid dates before any simulation
        self.resolve_portfolio()?;
        self.grids()?;
        Ok(())
    }

    fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn limits_path(&self) -> Option<PathBuf> {
        self.limits_file.as_deref().map(|p| self.resolve_path(p))
    }

    fn referenced_files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self.limits_path().into_iter().collect();
        if let Some(p) = &self.initial_margin.schedule_table_file {
            v.push(self.resolve_path(p));
        }
        v
    }

    pub fn mpor_business_days(&self) -> u32 {
        self.csa.as_ref().map_or(0, |c| c.mpor_business_days)
    }

    pub fn deltas(&self) -> Deltas {
        self.deltas
            .unwrap_or_else(|| Deltas::classical_plus(self.mpor_business_days()))
    }

    fn im_terms_without_table(&self) -> ImTerms {
        let im = &self.initial_margin;
        ImTerms {
            mode: im.mode,
            schedule: ScheduleTable::default(),
            quantile: QuantileParams {
                quantile: im.quantile,
                horizon_business_days: im.horizon_business_days,
                stress_multiplier: im.stress_multiplier,
            },
        }
    }

    pub fn im_terms(&self) -> Result<ImTerms> {
        let mut terms = self.im_terms_without_table();
        if let Some(p) = &self.initial_margin.schedule_table_file {
            terms.schedule = ScheduleTable::from_csv_path(&self.resolve_path(p))?;
        }
        Ok(terms)
    }

    pub fn protection_profile(&self) -> Result<ProtectionProfile> {
        ProtectionProfile::new(self.protection.clone())
    }

    /// Trades with at-the-money rates filled in from the model curve.
    pub fn resolve_portfolio(&self) -> Result<Portfolio> {
        let mut trades = Vec::with_capacity(self.portfolio.trades.len());
        for (i, t) in self.portfolio.trades.iter().enumerate() {
            let trade = match *t {
                TradeSpec::Swap {
                    notional,
                    fixed_rate_per_year,
                    direction,
                    start_years,
                    maturity_years,
                    payments_per_year,
                } => {
                    let fixed_rate = match fixed_rate_per_year {
                        Some(k) => k,
                        None => {
                            par_rate(&self.model, start_years, maturity_years, payments_per_year)?
                        }
                    };
                    let spec = SwapSpec {
                        notional,
                        fixed_rate,
                        direction,
                        start: start_years,
                        maturity: maturity_years,
                        payments_per_year,
                    };
                    spec.validate()?;
                    whole_days(&format!("portfolio.trades[{i}].start_years"), start_years)?;
                    for p in spec.payment_times() {
                        whole_days(&format!("portfolio.trades[{i}] payment date"), p)?;
                    }
                    Trade::Swap(spec)
                }
                TradeSpec::Forward {
                    quantity,
                    strike,
                    maturity_years,
                } => {
                    let spec = ForwardSpec {
                        quantity,
                        strike,
                        maturity: maturity_years,
                    };
                    spec.validate()?;
                    whole_days(
                        &format!("portfolio.trades[{i}].maturity_years"),
                        maturity_years,
                    )?;
                    Trade::Forward(spec)
                }
            };
            trades.push(trade);
        }
        let portfolio = Portfolio::new(self.portfolio.netting_set.clone(), trades);
        // surfaces model mismatches
        portfolio.bind(&self.model, &TimeGrid::new(vec![0.0])?)?;
        Ok(portfolio)
    }

    fn end_business_days(&self, portfolio: &Portfolio) -> Result<u32> {
        let end = self
            .grid
            .end_years
            .unwrap_or_else(|| portfolio.last_maturity());
        whole_days("grid end", end)
    }

    /// Reporting grid and simulation grid.
    ///
    /// The simulation grid adds t = 0, every fixing and flow date, and every
    /// date a timing offset before a reporting date.
    pub fn grids(&self) -> Result<(TimeGrid, TimeGrid)> {
        let portfolio = self.resolve_portfolio()?;
        let end = self.end_business_days(&portfolio)?;
        let step = self.grid.step_business_days;
        let mut report: BTreeSet<u32> = (1..=end / step).map(|k| k * step).collect();
        report.insert(end);
        if self.grid.include_zero {
            report.insert(0);
        }
        let to_days = |t: f64| (t * BUSINESS_DAYS_PER_YEAR).round() as u32;
        let flow_days: Vec<u32> = portfolio.flow_times().into_iter().map(to_days).collect();
        let mpor = self.mpor_business_days();
        if self.grid.flow_dates {
            for &c in &flow_days {
                for d in [c, c + mpor / 2] {
                    if d > 0 && d <= end {
                        report.insert(d);
                    }
                }
            }
        }
        if let Some(t) = self.plot.as_ref().and_then(|p| p.histogram_t_years) {
            let d = to_days(t);
            if d == 0 || d > end {
                return Err(Error::config(
                    "plot.histogram_t_years must lie within the reporting horizon",
                ));
            }
            report.insert(d);
        }

        let mut sim: BTreeSet<u32> = report.clone();
        sim.insert(0);
        sim.extend(flow_days.iter().copied().filter(|&d| d <= end));
        sim.extend(
            portfolio
                .fixing_times()
                .into_iter()
                .map(to_days)
                .filter(|&d| d <= end),
        );
        let offsets = self.deltas().offsets();
        for &t in &report {
            for &o in &offsets {
                if let Some(d) = t.checked_sub(o) {
                    sim.insert(d);
                }
            }
        }
        Ok((
            TimeGrid::from_business_days(report)?,
            TimeGrid::from_business_days(sim)?,
        ))
    }

    /// Output directory: explicit argument, then the environment, then the
    /// scenario, then `output/<name>`.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(p);
        }
        match &self.output_dir {
            Some(p) => self.resolve_path(p),
            None => PathBuf::from("output").join(&self.name),
        }
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring where output goes.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let value = serde_json::to_value(&canonical).expect("scenario serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("scenario serialization: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IRS: &str = r#"
name = "irs"
n_paths = 100
seed = 1

[model]
kind = "short_rate1f"
mean_reversion_per_year = 0.1
vol_per_sqrt_year = 0.01
initial_zero_rate_per_year = 0.03

[grid]
step_business_days = 63

[portfolio]
netting_set = "ns"

[[portfolio.trades]]
type = "swap"
notional = 100e6
direction = "pay_fixed"
maturity_years = 10.0

[csa]
mpor_business_days = 10

[lgd]
kind = "constant"
lgd = 0.6

[[metrics]]
kind = "PFE"
q = [0.95, 0.99]
"#;

    fn parse(text: &str, overrides: &[&str]) -> Result<Scenario> {
        let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        parse_scenario(text, Path::new("."), &o)
    }

    #[test]
    fn loads_with_defaults() {
        let s = parse(IRS, &[]).unwrap();
        assert_eq!(s.deltas(), Deltas::classical_plus(10));
        assert_eq!(s.csa.as_ref().unwrap().call_frequency_business_days, 1);
        let p = s.resolve_portfolio().unwrap();
        let Trade::Swap(swap) = &p.trades[0] else {
            panic!()
        };
        // at-the-money rate filled in from the curve
        let bound = p
            .bind(&s.model, &TimeGrid::new(vec![0.0]).unwrap())
            .unwrap();
        assert!(bound.value(&[0.03], 0).abs() < 1e-9 * swap.notional);
    }

    #[test]
    fn grids_contain_companions_and_flow_dates() {
        let s = parse(IRS, &[]).unwrap();
        let (report, sim) = s.grids().unwrap();
        assert!(sim.contains_grid(&report));
        for &t in report.points() {
            assert!(sim.index_of(t - 10.0 / 252.0).is_some() || t < 10.0 / 252.0);
        }
        // coupon date and the middle of the period after it
        assert!(report.index_of(1.0).is_some());
        assert!(report.index_of(257.0 / 252.0).is_some());
        assert_eq!(report.last(), 10.0);
        assert_eq!(sim.points()[0], 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let q1 = IRS.replace("q = [0.95, 0.99]", "q = [1.0]");
        assert!(matches!(parse(&q1, &[]), Err(Error::Config(_))));
        let unknown = IRS.replace("seed = 1", "seed = 1\nsede = 2");
        let err = parse(&unknown, &[]).unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
        assert!(parse(IRS, &["n_paths=0"]).is_err());
        assert!(parse(IRS, &["limits_file=\"missing.csv\""]).is_err());
        let gbm = IRS.replace("kind = \"short_rate1f\"\nmean_reversion_per_year = 0.1\nvol_per_sqrt_year = 0.01\ninitial_zero_rate_per_year = 0.03",
            "kind = \"gbm\"\nspot = 100.0\ndrift_per_year = 0.0\nvol_per_sqrt_year = 0.2");
        assert!(matches!(
            parse(&gbm, &[]),
            Err(Error::UnsupportedInstrument(_))
        ));
        let off_grid = IRS.replace("maturity_years = 10.0", "maturity_years = 10.001");
        assert!(parse(&off_grid, &[]).is_err());
    }

    #[test]
    fn overrides() {
        let s = parse(
            IRS,
            &[
                "n_paths=1000",
                "seed=7",
                "csa.flow_netting=true",
                "name=other",
            ],
        )
        .unwrap();
        assert_eq!((s.n_paths, s.seed), (1000, 7));
        assert!(s.csa.unwrap().flow_netting);
        assert_eq!(s.name, "other");
        assert!(parse(IRS, &["n_paths"]).is_err());
    }

    #[test]
    fn hash_is_stable() {
        let a = parse(IRS, &[]).unwrap();
        let b = parse(IRS, &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        // reordered keys and different whitespace
        let reordered = IRS.replace("n_paths = 100\nseed = 1", "seed   =  1\n\nn_paths=100");
        assert_eq!(parse(&reordered, &[]).unwrap().hash(), a.hash());
        assert_ne!(parse(IRS, &["seed=2"]).unwrap().hash(), a.hash());
        assert_eq!(
            parse(IRS, &["output_dir=\"elsewhere\""]).unwrap().hash(),
            a.hash()
        );
    }

    #[test]
    fn round_trip() {
        let a = parse(IRS, &[]).unwrap();
        let text = a.to_toml().unwrap();
        let b = parse(&text, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn output_dir_precedence() {
        let s = parse(IRS, &["output_dir=\"from_file\""]).unwrap();
        assert_eq!(s.output_dir(Some(Path::new("cli"))), PathBuf::from("cli"));
        // the environment is process-global, so only the explicit and file cases are checked here
        if std::env::var_os(OUTPUT_DIR_ENV).is_none() {
            assert_eq!(s.output_dir(None), PathBuf::from("./from_file"));
        }
    }
}
