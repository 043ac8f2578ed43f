//! End-to-end runs: simulate, build the cube, compute profiles, check limits
//! and write every output file.
//!
//! Output layout under the run directory:
//!
//! * `profiles/<metric>_q<q>.csv` and `.json`
//! * `profiles/ratio_pfl_pfe_q<q>.csv` when PFE and PFL share a quantile
//! * `incurred_cva.json`, `breaches.json`
//! * `run_manifest.json` (the only file with a timestamp)
//! * `plot/` after [`emit_plot_data`]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::collateral::{Deltas, ImTerms};
use crate::error::{Error, Result};
use crate::exposure::{build_exposure_cube, CubeSpec, ExposureCube};
use crate::limits::{check_paired, read_limits_file, BreachReport, LimitSpec, BREACH_EXIT_CODE};
use crate::market_models::{generate_paths_with, PathSet, SamplingOptions, TimeGrid};
use crate::metrics::{
    apfl_profile_shifted, cva_shift, papfl_profile_shifted, pfe_profile, pfl_profile, IncurredCva,
    LgdModel, MetricKind, Profile,
};
use crate::scenario::Scenario;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub cube_dump: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileFiles {
    pub metric: MetricKind,
    pub q: f64,
    pub csv: String,
    pub json: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timings {
    pub paths_seconds: f64,
    pub cube_seconds: f64,
    pub metrics_seconds: f64,
}

/// Summary of a completed run; serialized as the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub n_paths: usize,
    pub n_reporting_dates: usize,
    pub n_simulation_dates: usize,
    pub output_dir: PathBuf,
    pub profiles: Vec<ProfileFiles>,
    pub ratio_files: Vec<String>,
    pub incurred_cva: f64,
    pub breaches: Vec<BreachReport>,
    pub timings: Timings,
}

impl RunReport {
    pub fn breached(&self) -> bool {
        self.breaches.iter().any(|b| b.breached)
    }

    /// 0 when clean, 3 when some limit is breached.
    pub fn exit_code(&self) -> i32 {
        if self.breached() {
            BREACH_EXIT_CODE
        } else {
            0
        }
    }
}

/// Exposure samples at one date, for distribution plots.
#[derive(Debug, Clone)]
pub struct Histogram {
    pub name: String,
    pub t_years: f64,
    pub samples: Vec<f64>,
}

/// Everything a run produced, kept in memory for plot emission.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub report: RunReport,
    pub profiles: Vec<Profile>,
    pub histograms: Vec<Histogram>,
    pub histogram_bins: usize,
}

fn q_label(q: f64) -> String {
    format!("q{q}")
}

fn profile_stem(metric: MetricKind, q: f64) -> String {
    format!("{}_{}", metric.as_str().to_lowercase(), q_label(q))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Numerical(format!("json serialization: {e}")))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Loss-side inputs shared by every loss profile of a run.
struct LossInputs {
    lgd: LgdModel,
    x: Vec<f64>,
    y: crate::metrics::ProtectionProfile,
}

fn compute_profile(
    cube: &ExposureCube,
    loss: &LossInputs,
    metric: MetricKind,
    q: f64,
) -> Result<Profile> {
    match metric {
        MetricKind::Pfe => pfe_profile(cube, q),
        MetricKind::Pfl => pfl_profile(cube, &loss.lgd, q),
        MetricKind::Apfl => apfl_profile_shifted(cube, &loss.lgd, &loss.x, q),
        MetricKind::Papfl => papfl_profile_shifted(cube, &loss.lgd, &loss.x, &loss.y, q),
    }
}

/// Simulated paths of a scenario together with what they were drawn for.
pub struct Simulation {
    pub portfolio: crate::instruments::Portfolio,
    pub reporting: TimeGrid,
    pub paths: PathSet,
}

pub fn simulate_paths(scenario: &Scenario) -> Result<Simulation> {
    let portfolio = scenario.resolve_portfolio()?;
    let (reporting, sim) = scenario.grids()?;
    let paths = generate_paths_with(
        &scenario.model,
        &sim,
        scenario.n_paths,
        scenario.seed,
        SamplingOptions {
            antithetic: scenario.antithetic,
        },
    )?;
    Ok(Simulation {
        portfolio,
        reporting,
        paths,
    })
}

/// The exposure cube a scenario describes, on already simulated paths.
pub fn scenario_cube(scenario: &Scenario, sim: &Simulation) -> Result<ExposureCube> {
    let im = scenario.im_terms()?;
    let deltas = scenario.deltas();
    let cube = build_exposure_cube(
        &sim.paths,
        &CubeSpec {
            portfolio: &sim.portfolio,
            reporting: &sim.reporting,
            csa: scenario.csa.as_ref(),
            im: &im,
            deltas: &deltas,
            measure: scenario.measure,
            with_drivers: matches!(scenario.lgd, LgdModel::Correlated { .. }),
        },
    )?;
    Ok(cube.with_scenario_hash(scenario.hash()))
}

/// Simulates a scenario and builds its exposure cube.
pub fn simulate(scenario: &Scenario) -> Result<ExposureCube> {
    scenario_cube(scenario, &simulate_paths(scenario)?)
}

/// Runs a scenario and writes its outputs.
pub fn run(scenario: &Scenario, options: &RunOptions) -> Result<RunOutputs> {
    let out_dir = scenario.output_dir(options.output_dir.as_deref());
    let profile_dir = out_dir.join("profiles");
    create_dir(&profile_dir)?;
    let hash = scenario.hash();

    let started = Instant::now();
    let simulation = simulate_paths(scenario)?;
    let paths_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let cube = scenario_cube(scenario, &simulation)?;
    let Simulation {
        portfolio,
        reporting,
        paths,
    } = simulation;
    if let Some(p) = &options.cube_dump {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        cube.write_dump(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(p, e))?;
    }

    let mut histograms = Vec::new();
    let mut histogram_bins = 0;
    if let Some(plot) = &scenario.plot {
        histogram_bins = plot.histogram_bins;
        if let Some(t) = plot.histogram_t_years {
            let d = reporting
                .index_of(t)
                .expect("histogram date is on the reporting grid");
            let at = TimeGrid::new(vec![reporting.points()[d]])?;
            let uncollat = build_exposure_cube(
                &paths,
                &CubeSpec {
                    portfolio: &portfolio,
                    reporting: &at,
                    csa: None,
                    im: &ImTerms::none(),
                    deltas: &Deltas::classical_plus(0),
                    measure: scenario.measure,
                    with_drivers: false,
                },
            )?;
            histograms.push(Histogram {
                name: "uncollateralized".into(),
                t_years: at.points()[0],
                samples: uncollat.raw_slice(0).to_vec(),
            });
            if scenario.csa.is_some() {
                histograms.push(Histogram {
                    name: "collateralized".into(),
                    t_years: at.points()[0],
                    samples: cube.raw_slice(d).to_vec(),
                });
            }
        }
    }
    let n_sim_dates = paths.n_dates();
    drop(paths);
    let cube_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    let x = match &scenario.credit_curve {
        Some(curve) => cva_shift(&cube, curve, &scenario.lgd, scenario.cva_adjustment)?,
        None => vec![0.0; cube.n_dates()],
    };
    let incurred = IncurredCva {
        x: x.first().copied().unwrap_or(0.0),
    };
    let loss = LossInputs {
        lgd: scenario.lgd.clone(),
        x,
        y: scenario.protection_profile()?,
    };
    write_json(
        &out_dir.join("incurred_cva.json"),
        &serde_json::json!({
            "x": incurred.x,
            "adjustment": scenario.cva_adjustment,
            "credit_curve": scenario.credit_curve,
            "shift_t_years": cube.grid().points(),
            "shift": loss.x,
        }),
    )?;

    let mut profiles: Vec<Profile> = Vec::new();
    let mut files = Vec::new();
    for request in &scenario.metrics {
        for &q in &request.q {
            if profiles
                .iter()
                .any(|p| p.metric == request.kind && p.q == q)
            {
                continue;
            }
            let profile = compute_profile(&cube, &loss, request.kind, q)?;
            let stem = profile_stem(request.kind, q);
            let mut csv = Vec::new();
            profile.write_csv(&mut csv)?;
            write_file(&profile_dir.join(format!("{stem}.csv")), &csv)?;
            write_json(
                &profile_dir.join(format!("{stem}.json")),
                &profile.to_json(),
            )?;
            files.push(ProfileFiles {
                metric: request.kind,
                q,
                csv: format!("profiles/{stem}.csv"),
                json: format!("profiles/{stem}.json"),
            });
            profiles.push(profile);
        }
    }

    let mut ratio_files = Vec::new();
    for pfe in profiles.iter().filter(|p| p.metric == MetricKind::Pfe) {
        let Some(pfl) = profiles
            .iter()
            .find(|p| p.metric == MetricKind::Pfl && p.q == pfe.q)
        else {
            continue;
        };
        let name = format!("profiles/ratio_pfl_pfe_{}.csv", q_label(pfe.q));
        let mut text = String::from("t_years,ratio\n");
        for ((t, e), l) in pfe.grid.points().iter().zip(&pfe.values).zip(&pfl.values) {
            // undefined where PFE is zero
            let r = if *e > 0.0 {
                ((l - e) / e).to_string()
            } else {
                String::new()
            };
            text.push_str(&format!("{t},{r}\n"));
        }
        write_file(&out_dir.join(&name), text.as_bytes())?;
        ratio_files.push(name);
    }

    let mut breaches = Vec::new();
    if let Some(path) = scenario.limits_path() {
        let specs: Vec<LimitSpec> = read_limits_file(&path)?
            .into_iter()
            .filter(|s| s.netting_set == scenario.portfolio.netting_set || s.netting_set == "*")
            .collect();
        for spec in specs {
            let profile = match profiles
                .iter()
                .find(|p| p.metric == spec.metric && p.q == spec.q)
            {
                Some(p) => p.clone(),
                None => compute_profile(&cube, &loss, spec.metric, spec.q)?,
            };
            breaches.push(check_paired(&profile, &spec, &incurred)?);
        }
    }
    write_json(&out_dir.join("breaches.json"), &breaches)?;
    let metrics_seconds = started.elapsed().as_secs_f64();

    let report = RunReport {
        scenario: scenario.name.clone(),
        scenario_hash: hash,
        seed: scenario.seed,
        n_paths: scenario.n_paths,
        n_reporting_dates: reporting.len(),
        n_simulation_dates: n_sim_dates,
        output_dir: out_dir.clone(),
        profiles: files,
        ratio_files,
        incurred_cva: incurred.x,
        breaches,
        timings: Timings {
            paths_seconds,
            cube_seconds,
            metrics_seconds,
        },
    };
    let mut manifest = serde_json::to_value(&report)
        .map_err(|e| Error::Numerical(format!("json serialization: {e}")))?;
    manifest["finished_unix_seconds"] = serde_json::json!(std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0));
    write_json(&out_dir.join("run_manifest.json"), &manifest)?;

    Ok(RunOutputs {
        report,
        profiles,
        histograms,
        histogram_bins,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SeriesEntry {
    file: String,
    kind: &'static str,
    description: String,
    columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stats: Option<MomentStats>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MomentStats {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub excess_kurtosis: f64,
}

/// Sample mean, standard deviation and excess kurtosis (population moments).
pub fn moment_stats(xs: &[f64]) -> MomentStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    MomentStats {
        n: xs.len(),
        mean,
        std_dev: m2.sqrt(),
        excess_kurtosis: if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 },
    }
}

/// Writes plot-ready CSVs and a manifest naming each series under `plot/`.
pub fn emit_plot_data(outputs: &RunOutputs) -> Result<PathBuf> {
    let dir = outputs.report.output_dir.join("plot");
    create_dir(&dir)?;
    let mut series = Vec::new();

    // one overlay per quantile, columns in metric order
    let mut by_q: BTreeMap<String, Vec<&Profile>> = BTreeMap::new();
    for p in &outputs.profiles {
        by_q.entry(q_label(p.q)).or_default().push(p);
    }
    for (label, mut group) in by_q {
        group.sort_by_key(|p| MetricKind::ALL.iter().position(|k| *k == p.metric));
        let grid = &group[0].grid;
        if group.iter().any(|p| p.grid != *grid) {
            return Err(Error::config("profiles of one quantile must share a grid"));
        }
        let mut columns = vec!["t_years".to_string()];
        columns.extend(group.iter().map(|p| p.metric.as_str().to_string()));
        let mut text = columns.join(",") + "\n";
        for (i, t) in grid.points().iter().enumerate() {
            let row: Vec<String> = std::iter::once(t.to_string())
                .chain(group.iter().map(|p| p.values[i].to_string()))
                .collect();
            text.push_str(&(row.join(",") + "\n"));
        }
        let file = format!("overlay_{label}.csv");
        write_file(&dir.join(&file), text.as_bytes())?;
        series.push(SeriesEntry {
            file,
            kind: "profile_overlay",
            description: format!("metric profiles at {label}"),
            columns,
            stats: None,
        });
    }

    for h in &outputs.histograms {
        let file = format!("histogram_{}.csv", h.name);
        write_file(
            &dir.join(&file),
            histogram_csv(&h.samples, outputs.histogram_bins.max(1)).as_bytes(),
        )?;
        series.push(SeriesEntry {
            file,
            kind: "histogram",
            description: format!(
                "{} exposure before flooring at t = {} years",
                h.name, h.t_years
            ),
            columns: ["bin_low", "bin_high", "count", "density"]
                .map(String::from)
                .to_vec(),
            stats: Some(moment_stats(&h.samples)),
        });
    }

    write_json(
        &dir.join("plot_manifest.json"),
        &serde_json::json!({
            "scenario": outputs.report.scenario,
            "scenario_hash": outputs.report.scenario_hash,
            "series": series,
        }),
    )?;
    Ok(dir)
}

fn histogram_csv(samples: &[f64], bins: usize) -> String {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo {
        (hi - lo) / bins as f64
    } else {
        1.0
    };
    let mut counts = vec![0usize; bins];
    for &s in samples {
        let i = (((s - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let n = samples.len() as f64;
    let mut text = String::from("bin_low,bin_high,count,density\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        text.push_str(&format!(
            "{a},{},{c},{}\n",
            a + width,
            *c as f64 / (n * width)
        ));
    }
    text
}

/// Checks stored profiles against a limits file.
///
/// Profiles are looked up as `<metric>_q<q>.csv` in `profile_dir`. aPFL and
/// paPFL limits are reduced by `incurred_cva`, or by the value recorded in
/// `incurred_cva.json` next to the profile directory when not given.
pub fn check_limits(
    profile_dir: &Path,
    limits: &Path,
    incurred_cva: Option<f64>,
) -> Result<Vec<BreachReport>> {
    let x = match incurred_cva {
        Some(x) => x,
        None => {
            let candidates = [
                profile_dir.join("incurred_cva.json"),
                profile_dir.join("../incurred_cva.json"),
            ];
            match candidates.iter().find(|p| p.is_file()) {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let v: serde_json::Value = serde_json::from_str(&text)
                        .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                    v["x"]
                        .as_f64()
                        .ok_or_else(|| Error::config(format!("{}: missing x", p.display())))?
                }
                None => 0.0,
            }
        }
    };
    let x = IncurredCva { x };
    read_limits_file(limits)?
        .iter()
        .map(|spec| {
            let path = profile_dir.join(format!("{}.csv", profile_stem(spec.metric, spec.q)));
            let f = std::fs::File::open(&path).map_err(|_| {
                Error::config(format!(
                    "no {} profile at q = {} ({})",
                    spec.metric,
                    spec.q,
                    path.display()
                ))
            })?;
            let profile = Profile::read_csv(f, spec.metric, spec.q)?;
            check_paired(&profile, spec, &x)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationSummary {
    pub scenario: String,
    pub scenario_hash: String,
    pub n_reporting_dates: usize,
    pub n_simulation_dates: usize,
}

/// Loads and fully validates a scenario without simulating.
pub fn validate(path: &Path, overrides: &[String]) -> Result<ValidationSummary> {
    let s = crate::scenario::load_scenario(path, overrides)?;
    s.im_terms()?;
    let (report, sim) = s.grids()?;
    let portfolio = s.resolve_portfolio()?;
    // bind against the full grid so off-grid fixings surface here
    portfolio.bind(&s.model, &sim)?;
    crate::collateral::ExposureEngine::new(
        &portfolio,
        &s.model,
        &sim,
        &report,
        s.csa.as_ref(),
        &s.im_terms()?,
        &s.deltas(),
    )?;
    Ok(ValidationSummary {
        scenario: s.name.clone(),
        scenario_hash: s.hash(),
        n_reporting_dates: report.len(),
        n_simulation_dates: sim.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_known_samples() {
        let m = moment_stats(&[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(m.mean, 0.0);
        assert_eq!(m.std_dev, 1.0);
        assert_eq!(m.excess_kurtosis, -2.0);
    }

    #[test]
    fn histogram_counts_every_sample() {
        let samples: Vec<f64> = (0..100).map(f64::from).collect();
        let text = histogram_csv(&samples, 7);
        let total: usize = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap())
            .sum();
        assert_eq!(total, 100);
        let constant = histogram_csv(&[3.0; 5], 4);
        assert!(constant.lines().nth(1).unwrap().contains(",5,"));
    }

    #[test]
    fn profile_file_names() {
        assert_eq!(profile_stem(MetricKind::Papfl, 0.99), "papfl_q0.99");
        assert_eq!(profile_stem(MetricKind::Pfe, 0.95), "pfe_q0.95");
    }
}
