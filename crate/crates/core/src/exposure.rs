//! The exposure cube: conditional-on-default exposure per reporting date and
//! path, before and after flooring at zero.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::collateral::{CsaTerms, Deltas, ExposureEngine, ImTerms};
use crate::error::{Error, Result};
use crate::instruments::{zero_bond, Portfolio};
use crate::market_models::{Discounting, MeasureConfig, ModelSpec, PathSet, TimeGrid};

/// Identifies where a cube came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub scenario_hash: Option<String>,
}

/// Exposures stored date-major: `raw[d * n_paths + p]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureCube {
    grid: TimeGrid,
    n_paths: usize,
    raw: Vec<f64>,
    floored: Vec<f64>,
    drivers: Option<Vec<f64>>,
    provenance: Provenance,
}

impl ExposureCube {
    /// Builds a cube from one row of path values per date, with optional
    /// standardised market drivers of the same shape.
    pub fn from_raw(
        grid: TimeGrid,
        rows: Vec<Vec<f64>>,
        drivers: Option<Vec<Vec<f64>>>,
        seed: u64,
    ) -> Result<Self> {
        if rows.len() != grid.len() {
            return Err(Error::config(format!(
                "{} exposure rows for {} grid dates",
                rows.len(),
                grid.len()
            )));
        }
        let n_paths = rows.first().map_or(0, Vec::len);
        if n_paths == 0 || rows.iter().any(|r| r.len() != n_paths) {
            return Err(Error::config(
                "exposure rows must be non-empty and of equal length",
            ));
        }
        let flatten = |rows: Vec<Vec<f64>>| -> Vec<f64> { rows.into_iter().flatten().collect() };
        let drivers = match drivers {
            Some(d) if d.len() != grid.len() || d.iter().any(|r| r.len() != n_paths) => {
                return Err(Error::config("driver rows must match the exposure rows"))
            }
            d => d.map(flatten),
        };
        Self::from_flat(
            grid,
            n_paths,
            flatten(rows),
            drivers,
            Provenance {
                seed,
                scenario_hash: None,
            },
        )
    }

    fn from_flat(
        grid: TimeGrid,
        n_paths: usize,
        raw: Vec<f64>,
        drivers: Option<Vec<f64>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if let Some(bad) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite exposure at date {} path {}",
                bad / n_paths,
                bad % n_paths
            )));
        }
        let floored = raw.iter().map(|&v| v.max(0.0)).collect();
        Ok(Self {
            grid,
            n_paths,
            raw,
            floored,
            drivers,
            provenance,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_dates(&self) -> usize {
        self.grid.len()
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn with_scenario_hash(mut self, hash: impl Into<String>) -> Self {
        self.provenance.scenario_hash = Some(hash.into());
        self
    }

    pub fn raw_slice(&self, d: usize) -> &[f64] {
        &self.raw[d * self.n_paths..(d + 1) * self.n_paths]
    }

    pub fn floored_slice(&self, d: usize) -> &[f64] {
        &self.floored[d * self.n_paths..(d + 1) * self.n_paths]
    }

    pub fn driver_slice(&self, d: usize) -> Option<&[f64]> {
        self.drivers
            .as_ref()
            .map(|v| &v[d * self.n_paths..(d + 1) * self.n_paths])
    }

    /// Writes the raw cube: magic `PFLC`, version, date and path counts and
    /// seed, then the grid and the date-major raw values, all little-endian.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DUMP_MAGIC)?;
        out.write_all(&DUMP_VERSION.to_le_bytes())?;
        out.write_all(&(self.n_dates() as u64).to_le_bytes())?;
        out.write_all(&(self.n_paths as u64).to_le_bytes())?;
        out.write_all(&self.provenance.seed.to_le_bytes())?;
        for v in self.grid.points().iter().chain(&self.raw) {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn read_dump<R: Read>(mut input: R) -> Result<Self> {
        let bad = |what: &str| Error::input(format!("malformed cube dump: {what}"));
        let mut buf = Vec::new();
        input
            .read_to_end(&mut buf)
            .map_err(|e| Error::input(format!("cube dump unreadable: {e}")))?;
        if buf.len() < 32 || &buf[..4] != DUMP_MAGIC {
            return Err(bad("missing header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(buf[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_le_bytes(buf[i..i + 8].try_into().unwrap());
        if u32_at(4) != DUMP_VERSION {
            return Err(bad("unsupported version"));
        }
        let (n_dates, n_paths, seed) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24));
        let body = &buf[32..];
        if n_paths == 0 || body.len() != 8 * n_dates * (1 + n_paths) {
            return Err(bad("size does not match header"));
        }
        let floats: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grid = TimeGrid::new(floats[..n_dates].to_vec())?;
        Self::from_flat(
            grid,
            n_paths,
            floats[n_dates..].to_vec(),
            None,
            Provenance {
                seed,
                scenario_hash: None,
            },
        )
    }
}

const DUMP_MAGIC: &[u8; 4] = b"PFLC";
const DUMP_VERSION: u32 = 1;

/// Inputs that shape a cube beyond the paths themselves.
#[derive(Debug, Clone)]
pub struct CubeSpec<'a> {
    pub portfolio: &'a Portfolio,
    pub reporting: &'a TimeGrid,
    pub csa: Option<&'a CsaTerms>,
    pub im: &'a ImTerms,
    pub deltas: &'a Deltas,
    pub measure: MeasureConfig,
    /// Also store each path's standardised market shock per date (needed by
    /// correlated LGD).
    pub with_drivers: bool,
}

/// Seed for the nested IM simulation on one path.
fn nested_seed(seed: u64, path: usize) -> u64 {
    seed ^ (path as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Pathwise deflator `exp(-int r) / P(0, t)` on the simulation grid
/// (trapezoid rule); identically 1 for equity models.
fn deflators(model: &ModelSpec, grid: &TimeGrid, states: &[f64]) -> Vec<f64> {
    let ModelSpec::ShortRate1f {
        initial_zero_rate_per_year: r0,
        ..
    } = *model
    else {
        return vec![1.0; states.len()];
    };
    let pts = grid.points();
    let mut integral = 0.0;
    let mut prev = (0.0, r0);
    pts.iter()
        .zip(states)
        .map(|(&t, &r)| {
            integral += 0.5 * (prev.1 + r) * (t - prev.0);
            prev = (t, r);
            (-integral).exp() / zero_bond(model, r0, t)
        })
        .collect()
}

/// Evaluates conditional exposure on every path and reporting date.
pub fn build_exposure_cube(paths: &PathSet, spec: &CubeSpec<'_>) -> Result<ExposureCube> {
    let sim = paths.grid();
    let engine = ExposureEngine::new(
        spec.portfolio,
        paths.model(),
        sim,
        spec.reporting,
        spec.csa,
        spec.im,
        spec.deltas,
    )?;
    let report_idx: Vec<usize> = spec
        .reporting
        .points()
        .iter()
        .map(|&t| sim.index_of(t).expect("checked by the engine"))
        .collect();
    let n_dates = report_idx.len();
    let n_paths = paths.n_paths();
    let model = paths.model();
    let seed = paths.seed();

    // path-major while computing, transposed afterwards
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let states = paths.path(p).states;
            let mut e = engine.path_exposures(states, nested_seed(seed, p))?;
            if spec.measure.discounting == Discounting::InverseDiscount {
                let defl = deflators(model, sim, states);
                for (v, &i) in e.iter_mut().zip(&report_idx) {
                    *v *= defl[i];
                }
            }
            let z = if spec.with_drivers {
                report_idx
                    .iter()
                    .zip(spec.reporting.points())
                    .map(|(&i, &t)| model.standardized_shock(states[i], t))
                    .collect()
            } else {
                Vec::new()
            };
            Ok((e, z))
        })
        .collect::<Result<_>>()?;

    let mut raw = vec![0.0; n_dates * n_paths];
    let mut drivers = spec.with_drivers.then(|| vec![0.0; n_dates * n_paths]);
    for (p, (e, z)) in per_path.into_iter().enumerate() {
        for d in 0..n_dates {
            raw[d * n_paths + p] = e[d];
        }
        if let Some(dr) = drivers.as_mut() {
            for d in 0..n_dates {
                dr[d * n_paths + p] = z[d];
            }
        }
    }
    ExposureCube::from_flat(
        spec.reporting.clone(),
        n_paths,
        raw,
        drivers,
        Provenance {
            seed,
            scenario_hash: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instruments::{ForwardSpec, SwapDirection, SwapSpec, Trade};
    use crate::market_models::generate_paths;

    fn forward() -> Portfolio {
        Portfolio::new(
            "fwd",
            vec![Trade::Forward(ForwardSpec {
                quantity: 1.0,
                strike: 90.0,
                maturity: 2.0,
            })],
        )
    }

    fn spec<'a>(
        p: &'a Portfolio,
        reporting: &'a TimeGrid,
        csa: Option<&'a CsaTerms>,
        im: &'a ImTerms,
        deltas: &'a Deltas,
    ) -> CubeSpec<'a> {
        CubeSpec {
            portfolio: p,
            reporting,
            csa,
            im,
            deltas,
            measure: MeasureConfig::default(),
            with_drivers: true,
        }
    }

    #[test]
    fn zero_vol_forward_cube_is_constant() {
        let model = ModelSpec::gbm(100.0, 0.0, 0.0);
        let grid = TimeGrid::from_business_days((0..=504).step_by(21)).unwrap();
        let paths = generate_paths(&model, &grid, 16, 1).unwrap();
        let p = forward();
        let reporting = TimeGrid::from_business_days((21..504).step_by(21)).unwrap();
        let deltas = Deltas::classical_plus(0);
        let im = ImTerms::none();
        let cube = build_exposure_cube(&paths, &spec(&p, &reporting, None, &im, &deltas)).unwrap();
        for d in 0..cube.n_dates() {
            assert!(cube.raw_slice(d).iter().all(|&v| v == 10.0));
            assert!(cube.driver_slice(d).unwrap().iter().all(|&z| z == 0.0));
        }
    }

    #[test]
    fn collateralized_rows_match_two_point_revaluation() {
        let model = ModelSpec::short_rate(0.1, 0.01, 0.03);
        let grid = TimeGrid::from_business_days((0..=2520).step_by(2)).unwrap();
        let paths = generate_paths(&model, &grid, 64, 3).unwrap();
        let p = Portfolio::new(
            "ns",
            vec![Trade::Swap(SwapSpec {
                notional: 100e6,
                fixed_rate: 0.03,
                direction: SwapDirection::PayFixed,
                start: 0.0,
                maturity: 10.0,
                payments_per_year: 1,
            })],
        );
        // dates with no coupon in the preceding ten business days
        let reporting = TimeGrid::from_business_days([130, 380, 1140, 2000]).unwrap();
        let csa = CsaTerms::default();
        let deltas = Deltas::classical_plus(10);
        let im = ImTerms::none();
        let cube =
            build_exposure_cube(&paths, &spec(&p, &reporting, Some(&csa), &im, &deltas)).unwrap();
        let uncollat = build_exposure_cube(
            &paths,
            &spec(&p, &reporting, None, &im, &Deltas::classical_plus(0)),
        )
        .unwrap();
        for (d, &t) in reporting.points().iter().enumerate() {
            for path in 0..64 {
                let s = paths.path(path).states;
                let v = |u: f64| p.value(&model, &grid, s, u).unwrap();
                assert_eq!(cube.raw_slice(d)[path], v(t) - v(t - 10.0 / 252.0));
                assert_eq!(uncollat.raw_slice(d)[path], v(t));
            }
            for (r, f) in cube.raw_slice(d).iter().zip(cube.floored_slice(d)) {
                assert_eq!(*f, r.max(0.0));
            }
        }
    }

    #[test]
    fn cube_is_deterministic_under_threads() {
        let model = ModelSpec::gbm(100.0, 0.01, 0.2);
        let grid = TimeGrid::from_business_days((0..=504).step_by(21)).unwrap();
        let p = forward();
        let reporting = TimeGrid::from_business_days((21..=504).step_by(21)).unwrap();
        let deltas = Deltas::classical_plus(0);
        let im = ImTerms::none();
        let build = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let paths = generate_paths(&model, &grid, 500, 9).unwrap();
                build_exposure_cube(&paths, &spec(&p, &reporting, None, &im, &deltas)).unwrap()
            })
        };
        assert_eq!(build(1), build(3));
    }

    #[test]
    fn grid_mismatch_is_config_error() {
        let model = ModelSpec::gbm(100.0, 0.0, 0.2);
        let grid = TimeGrid::from_business_days((0..=504).step_by(21)).unwrap();
        let paths = generate_paths(&model, &grid, 4, 1).unwrap();
        let p = forward();
        let reporting = TimeGrid::new(vec![0.3]).unwrap();
        let deltas = Deltas::classical_plus(0);
        let im = ImTerms::none();
        let err =
            build_exposure_cube(&paths, &spec(&p, &reporting, None, &im, &deltas)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn inverse_discount_deflates_rates_values() {
        let model = ModelSpec::short_rate(0.1, 0.0, 0.03);
        let grid = TimeGrid::from_business_days((0..=504).step_by(21)).unwrap();
        let states = vec![0.03; grid.len()];
        let d = deflators(&model, &grid, &states);
        // on the deterministic path the deflator cancels the initial curve
        assert!(d.iter().all(|v| (v - 1.0).abs() < 1e-12), "{d:?}");
        let gbm = ModelSpec::gbm(100.0, 0.0, 0.2);
        assert!(deflators(&gbm, &grid, &states).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dump_round_trip() {
        let grid = TimeGrid::new(vec![0.5, 1.0]).unwrap();
        let cube = ExposureCube::from_raw(
            grid,
            vec![vec![1.0, -2.0, 3.5], vec![0.0, 4.0, -1e9]],
            None,
            42,
        )
        .unwrap();
        let mut buf = Vec::new();
        cube.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"PFLC");
        assert_eq!(buf.len(), 32 + 8 * 2 * 4);
        let back = ExposureCube::read_dump(buf.as_slice()).unwrap();
        assert_eq!(back, cube);
        assert!(ExposureCube::read_dump(&buf[..40]).is_err());
    }

    #[test]
    fn from_raw_validates_shape() {
        let grid = TimeGrid::new(vec![1.0]).unwrap();
        assert!(ExposureCube::from_raw(grid.clone(), vec![], None, 0).is_err());
        assert!(ExposureCube::from_raw(grid.clone(), vec![vec![]], None, 0).is_err());
        assert!(ExposureCube::from_raw(grid.clone(), vec![vec![f64::NAN]], None, 0).is_err());
        assert!(
            ExposureCube::from_raw(grid, vec![vec![1.0]], Some(vec![vec![1.0, 2.0]]), 0).is_err()
        );
    }
}
