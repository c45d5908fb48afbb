//! Named batch experiments with persisted reports.
//!
//! A run writes CSV tables, `summary.json`, optional SVG plots and a
//! `manifest.json` that echoes the config and lists a SHA-256 digest for
//! every file written. All randomness derives from the config seed through
//! named streams, so reruns reproduce every CSV byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::branching::{conditioned_samples, estimate_survival, rescaled_path, simulate_population, SurvivalMode};
use crate::conditioned::{
    eta_series_partial_sums, plus_expectation, tanaka_ladder_check, theta_ratio, theta_series, PlusMode, PlusSampler,
};
use crate::gf::{agresti_lower_bound, jirina_residual, lf_survival_exact, quenched_bound, survival_given_env, Horizon};
use crate::offspring::{sample_environment, EnvironmentModel, Family, IncrementLaw, OffspringLaw};
use crate::plot::Plot;
use crate::rng::{par_batches, StreamSeed};
use crate::stats::{ks_two_sample, ks_unweighted, loglog_slope, wilson_interval, Ecdf, KsOutcome, Moments};
use crate::walk::{
    check_harmonicity, estimate_rho, fluctuation_summary, prospective_minima, series_horizon, simulate_renewal,
    slowly_varying_l, RenewalMethod, RenewalTable, DEFAULT_WALK_BUDGET,
};
use crate::{Error, Result};

pub const EXPERIMENTS: [&str; 7] = [
    "survival-asymptotics",
    "theta-consistency",
    "growth-law",
    "tau-min-limit",
    "walk-limit",
    "renewal",
    "validate",
];

/// Problem sizes; unset fields take per-experiment defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub experiment: String,
    #[serde(default = "EnvironmentModel::default_critical")]
    pub model: EnvironmentModel,
    #[serde(default)]
    pub sizes: Sizes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub svg: bool,
}

impl ExperimentConfig {
    /// Config on the default model with default sizes.
    pub fn new(experiment: &str, seed: u64, out: impl Into<PathBuf>) -> Self {
        Self {
            experiment: experiment.into(),
            model: EnvironmentModel::default_critical(),
            sizes: Sizes::default(),
            seed: Some(seed),
            out: Some(out.into()),
            svg: false,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENTS.contains(&self.experiment.as_str()) {
            return Err(Error::Config(format!(
                "unknown experiment '{}'; expected one of {}",
                self.experiment,
                EXPERIMENTS.join(", ")
            )));
        }
        if self.seed.is_none() {
            return Err(Error::Config("missing seed".into()));
        }
        if self.out.is_none() {
            return Err(Error::Config("missing output directory".into()));
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        if self.experiment != "validate" && !self.model.is_critical() {
            return Err(Error::Config("this experiment needs a model with an increment law".into()));
        }
        let s = &self.sizes;
        if s.n.as_ref().is_some_and(|v| v.is_empty() || v.contains(&0)) {
            return Err(Error::Config("sizes.n must be a nonempty list of positive integers".into()));
        }
        for (name, v) in [
            ("replicates", s.replicates),
            ("k_max", s.k_max),
            ("horizon", s.horizon),
        ] {
            if v == Some(0) {
                return Err(Error::Config(format!("sizes.{name} must be positive")));
            }
        }
        if s.grid_points.is_some_and(|p| p < 2) {
            return Err(Error::Config("sizes.grid_points must be at least 2".into()));
        }
        if s.grid_max.is_some_and(|x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Config("sizes.grid_max must be positive and finite".into()));
        }
        Ok(())
    }
}

/// One pass/fail check with the value it was decided on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    /// Passes when `measured <= threshold`.
    pub fn at_most(name: &str, measured: f64, threshold: f64, detail: String) -> Self {
        Self { name: name.into(), passed: measured <= threshold, measured, threshold, detail }
    }

    fn ks(name: &str, ks: &KsOutcome) -> Self {
        Self::at_most(
            name,
            ks.statistic,
            ks.threshold,
            format!("alpha = {}, n_eff = ({:.0}, {:.0})", ks.alpha, ks.n_eff_a, ks.n_eff_b),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: String,
    pub config: ExperimentConfig,
    pub version: String,
    pub wall_time_s: f64,
    pub passed: bool,
    pub verdicts: Vec<Verdict>,
    pub files: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

struct Report {
    dir: PathBuf,
    svg: bool,
    files: Vec<String>,
    verdicts: Vec<Verdict>,
    summary: Map<String, Value>,
}

impl Report {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        let mut s = String::with_capacity(rows.len() * 24 + header.len() + 1);
        s.push_str(header);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    fn plot(&mut self, name: &str, plot: Plot) -> Result<()> {
        if self.svg {
            self.write(name, plot.render().as_bytes())?;
        }
        Ok(())
    }

    fn put(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn verdict(&mut self, v: Verdict) {
        self.verdicts.push(v);
    }
}

/// Run the configured experiment and write its report into `config.out`.
/// On failure the partial manifest (with the error) is still written.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    let start = Instant::now();
    config.validate()?;
    let dir = config.out.clone().expect("validated");
    fs::create_dir_all(&dir)?;
    let source = StreamSeed::new(config.seed.expect("validated"))
        .named(&config.experiment)
        .child(config.model.seed_policy.stream_offset);
    let mut rep = Report { dir: dir.clone(), svg: config.svg, files: Vec::new(), verdicts: Vec::new(), summary: Map::new() };
    let outcome = match config.experiment.as_str() {
        "survival-asymptotics" => survival_asymptotics(config, source, &mut rep),
        "theta-consistency" => theta_consistency(config, source, &mut rep),
        "growth-law" => growth_law(config, source, &mut rep),
        "tau-min-limit" => tau_min_limit(config, source, &mut rep),
        "walk-limit" => walk_limit(config, source, &mut rep),
        "renewal" => renewal(config, source, &mut rep),
        "validate" => validate_suite(source, &mut rep),
        _ => unreachable!("validated"),
    };
    let summary = json!({
        "experiment": config.experiment,
        "seed": config.seed,
        "measured": Value::Object(std::mem::take(&mut rep.summary)),
        "verdicts": rep.verdicts,
        "error": outcome.as_ref().err().map(|e| e.to_string()),
    });
    let text = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
    rep.write("summary.json", text.as_bytes())?;

    let mut files = Vec::with_capacity(rep.files.len());
    for name in &rep.files {
        let bytes = fs::read(dir.join(name))?;
        files.push(FileDigest { path: name.clone(), sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
    }
    let manifest = RunManifest {
        experiment: config.experiment.clone(),
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
        passed: outcome.is_ok() && rep.verdicts.iter().all(|v| v.passed),
        verdicts: rep.verdicts,
        files,
        error: outcome.as_ref().err().map(|e| e.to_string()),
    };
    fs::write(dir.join("manifest.json"), manifest.to_json() + "\n")?;
    outcome.map(|_| manifest)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        k if k % 2 == 1 => v[k / 2],
        k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
    }
}

fn ecdf_points(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    Ok(Ecdf::unweighted(values)?.points().collect())
}

fn sizes_n(config: &ExperimentConfig, default: &[usize]) -> Vec<usize> {
    config.sizes.n.clone().unwrap_or_else(|| default.to_vec())
}

fn plus_sampler(model: &EnvironmentModel) -> Result<PlusSampler<'_>> {
    let mode = if model.lattice_span().is_some() { PlusMode::ExactKernel } else { PlusMode::Conditional };
    PlusSampler::new(model, mode, None)
}

/// P{Z_n > 0}, P{L_n >= 0} and their ratio across n, with the log-log slope.
fn survival_asymptotics(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let ns = sizes_n(config, &[64, 256, 1024]);
    let replicates = config.sizes.replicates.unwrap_or(100_000);
    let rho = model.rho().ok_or_else(|| Error::Config("model has no Spitzer constant".into()))?;

    let n_max = *ns.iter().max().expect("nonempty");
    let spitzer = estimate_rho(model, series_horizon(n_max), replicates.min(2000), source.named("spitzer"))?;
    let mut rows = Vec::new();
    let (mut surv, mut walk, mut ratios) = (Vec::new(), Vec::new(), Vec::new());
    for &n in &ns {
        let th = theta_ratio(model, n, replicates, source.named(&format!("n={n}")))?;
        let num = th.numerator.clone().expect("ratio has a numerator");
        let den = th.denominator.clone().expect("ratio has a denominator");
        let (l, l_bound) = match slowly_varying_l(&spitzer.nonnegative, rho, n) {
            Ok(l) => (l.value, l.bound),
            Err(Error::InsufficientHorizon { .. }) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        rows.push(format!(
            "{n},{},{},{},{},{},{},{l},{l_bound}",
            num.value, num.stderr, den.value, den.stderr, th.estimate.value, th.estimate.stderr
        ));
        surv.push((n as f64, num.value));
        walk.push((n as f64, den.value));
        ratios.push(th.estimate.value);
    }
    rep.csv(
        "survival.csv",
        "n,p_survive,p_survive_se,p_walk_nonneg,p_walk_nonneg_se,theta,theta_se,l_n,l_n_bound",
        &rows,
    )?;
    rep.plot(
        "survival.svg",
        Plot::new("Survival and walk positivity", "n", "probability")
            .loglog()
            .line("P{Z_n > 0}", surv.clone())
            .line("P{L_n >= 0}", walk),
    )?;

    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &r| (a.min(r), b.max(r)));
    rep.put("theta_by_n", &ratios);
    rep.put("spitzer_rho_hat", &spitzer.rho);
    rep.verdict(Verdict::at_most("ratio-stability", hi / lo, 1.15, format!("max/min of theta over n = {ns:?}")));
    if ns.len() >= 3 {
        let fit = loglog_slope(&surv)?;
        rep.put("loglog_slope", fit);
        let target = -(1.0 - rho);
        rep.verdict(Verdict::at_most(
            "loglog-slope",
            (fit.slope - target).abs(),
            0.08,
            format!("slope {:.4} vs {target}", fit.slope),
        ));
    }
    Ok(())
}

/// θ by the survival ratio at the largest n against the truncated series.
fn theta_consistency(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let n = sizes_n(config, &[1024]).into_iter().max().expect("nonempty");
    let replicates = config.sizes.replicates.unwrap_or(100_000);
    let k_max = config.sizes.k_max.unwrap_or(40);
    let horizon = config.sizes.horizon.unwrap_or(2000);
    let sampler = plus_sampler(model)?;

    let ratio = theta_ratio(model, n, replicates, source.named("ratio"))?;
    let series = theta_series(model, &sampler, k_max, horizon, replicates, source.named("series"))?;
    let mut partial = 0.0;
    let rows: Vec<String> = series
        .terms
        .iter()
        .enumerate()
        .map(|(k, t)| {
            partial += t;
            format!("{k},{t},{partial}")
        })
        .collect();
    rep.csv("theta_terms.csv", "k,term,partial_sum", &rows)?;
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| {
            let mut f = r.split(',');
            let k: f64 = f.next().unwrap().parse().unwrap();
            let p: f64 = f.nth(1).unwrap().parse().unwrap();
            (k, p)
        })
        .collect();
    let flat = vec![(0.0, ratio.estimate.value), (k_max as f64, ratio.estimate.value)];
    rep.plot(
        "theta.svg",
        Plot::new("Truncated series against the survival ratio", "K", "theta").line("series partial sum", pts).line("ratio", flat),
    )?;

    let (a, b) = (&ratio.estimate, &series.estimate);
    let gap = a.ci_low.max(b.ci_low) - a.ci_high.min(b.ci_high);
    rep.put("ratio", &ratio);
    rep.put("series", &series);
    rep.verdict(Verdict::at_most(
        "ratio-series-overlap",
        gap,
        0.0,
        format!(
            "ratio {:.5} [{:.5}, {:.5}] vs series {:.5} [{:.5}, {:.5}]; measured is the gap between the 95% intervals",
            a.value, a.ci_low, a.ci_high, b.value, b.ci_low, b.ci_high
        ),
    ));
    Ok(())
}

/// Rescaled conditioned paths X_t = Z_{r + floor((n-r)t)} / μ with r = n/5.
fn growth_law(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let ns = sizes_n(config, &[128, 512]);
    let replicates = config.sizes.replicates.unwrap_or(1000);
    let (mut rows, mut grid_rows, mut ecdf_rows) = (Vec::new(), Vec::new(), Vec::new());
    let mut medians = Vec::new();
    let mut nonpositive = 0usize;
    let mut approximate = 0usize;
    let mut plot_w = Plot::new("Endpoint W of conditioned paths", "W", "ECDF");
    let mut plot_paths = Plot::new("Rescaled conditioned paths", "t", "X_t");
    for &n in &ns {
        let r = n / 5;
        let span = n - r;
        let samples = conditioned_samples(model, n, replicates, source.named(&format!("n={n}")))?;
        let (mut ratios, mut ws) = (Vec::with_capacity(samples.len()), Vec::with_capacity(samples.len()));
        for (i, s) in samples.iter().enumerate() {
            let rp = rescaled_path(&s.path, r)?;
            let tail = rp.values.iter().enumerate().filter(|(j, _)| 5 * j >= span).map(|(_, &v)| v);
            let (lo, hi) = tail.fold((f64::INFINITY, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
            let w = *rp.values.last().expect("nonempty");
            let ratio = hi / lo;
            if !(w > 0.0) {
                nonpositive += 1;
            }
            approximate += usize::from(s.path.any_approximate());
            rows.push(format!("{n},{i},{ratio},{w}"));
            ratios.push(ratio);
            ws.push(w);
            if i < 20 {
                let mut pts = Vec::with_capacity(21);
                for g in 0..=20usize {
                    let t = g as f64 / 20.0;
                    let x = rp.values[g * span / 20];
                    grid_rows.push(format!("{n},{i},{t},{x}"));
                    pts.push((t, x));
                }
                if i < 5 && n == *ns.last().unwrap() {
                    plot_paths = plot_paths.line(&format!("n={n} path {i}"), pts);
                }
            }
        }
        let pts = ecdf_points(&ws)?;
        ecdf_rows.extend(pts.iter().map(|(x, f)| format!("{n},{x},{f}")));
        plot_w = plot_w.step(&format!("n={n}"), pts);
        medians.push(median(&ratios));
    }
    rep.csv("growth_paths.csv", "n,path,max_min_ratio,w", &rows)?;
    rep.csv("growth_grid.csv", "n,path,t,x", &grid_rows)?;
    rep.csv("growth_w_ecdf.csv", "n,w,ecdf", &ecdf_rows)?;
    rep.plot("growth_w_ecdf.svg", plot_w)?;
    rep.plot("growth_paths.svg", plot_paths)?;
    rep.put("median_ratio_by_n", &medians);
    rep.put("paths_with_aggregate_steps", approximate);

    let last = *medians.last().expect("nonempty");
    rep.verdict(Verdict::at_most(
        "median-max-min-ratio",
        last,
        1.5,
        format!("median over paths of max/min X_t on [0.2, 1] at n = {}", ns.last().unwrap()),
    ));
    if medians.len() >= 2 {
        let worst = medians.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        let mut v = Verdict::at_most("median-decreasing", worst, 0.0, format!("medians {medians:?} over n = {ns:?}"));
        v.passed = worst < 0.0;
        rep.verdict(v);
    }
    rep.verdict(Verdict::at_most("endpoint-positive", nonpositive as f64, 0.0, "paths with W <= 0".into()));
    Ok(())
}

/// Lexicographic embedding of (k, x) into the reals: k + 1/2 + atan(x)/π.
fn lex_key(k: usize, x: f64) -> f64 {
    k as f64 + 0.5 + x.atan() / std::f64::consts::PI
}

/// sup over lower-left quadrants of |F_a - F_b| for two samples of pairs.
fn bivariate_ks(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut xs: Vec<usize> = a.iter().chain(b).map(|p| p.0).collect();
    let mut ys: Vec<f64> = a.iter().chain(b).map(|p| p.1).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_by(f64::total_cmp);
    ys.dedup();
    let cdf = |s: &[(usize, f64)]| {
        let mut grid = vec![0.0f64; xs.len() * ys.len()];
        for &(x, y) in s {
            let i = xs.partition_point(|&v| v < x);
            let j = ys.partition_point(|&v| v < y);
            grid[i * ys.len() + j] += 1.0 / s.len() as f64;
        }
        for i in 0..xs.len() {
            for j in 0..ys.len() {
                let mut v = grid[i * ys.len() + j];
                if i > 0 {
                    v += grid[(i - 1) * ys.len() + j];
                }
                if j > 0 {
                    v += grid[i * ys.len() + j - 1];
                }
                if i > 0 && j > 0 {
                    v -= grid[(i - 1) * ys.len() + j - 1];
                }
                grid[i * ys.len() + j] = v;
            }
        }
        grid
    };
    let (fa, fb) = (cdf(a), cdf(b));
    fa.iter().zip(&fb).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// (τ_n, L_n ∧ 0) given survival at two horizons.
fn tau_min_limit(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let ns = sizes_n(config, &[256, 1024]);
    if ns.len() < 2 {
        return Err(Error::Config("tau-min-limit compares at least two values of n".into()));
    }
    let replicates = config.sizes.replicates.unwrap_or(5000);
    let mut rows = Vec::new();
    let mut by_n: Vec<Vec<(usize, f64)>> = Vec::new();
    for &n in &ns {
        let samples = conditioned_samples(model, n, replicates, source.named(&format!("n={n}")))?;
        let mut pairs = Vec::with_capacity(samples.len());
        for s in samples {
            let f = fluctuation_summary(&s.path.sums)?;
            rows.push(format!("{n},{},{}", f.tau, f.min_with_start));
            pairs.push((f.tau, f.min_with_start));
        }
        by_n.push(pairs);
    }
    rep.csv("tau_min.csv", "n,tau,min", &rows)?;
    let (a, b) = (&by_n[0], by_n.last().unwrap());
    let tau = |s: &[(usize, f64)]| s.iter().map(|p| p.0 as f64).collect::<Vec<_>>();
    let low = |s: &[(usize, f64)]| s.iter().map(|p| p.1).collect::<Vec<_>>();
    let key = |s: &[(usize, f64)]| s.iter().map(|p| lex_key(p.0, p.1)).collect::<Vec<_>>();
    let label = format!("n={} vs n={}", ns[0], ns.last().unwrap());
    let ks_joint = ks_unweighted(&key(a), &key(b), 0.01)?;
    let ks_tau = ks_unweighted(&tau(a), &tau(b), 0.01)?;
    let ks_min = ks_unweighted(&low(a), &low(b), 0.01)?;
    rep.put("bivariate_ks_statistic", bivariate_ks(a, b));
    rep.put("ks_joint", ks_joint);
    rep.put("ks_tau", ks_tau);
    rep.put("ks_min", ks_min);
    let mut plot = Plot::new("tau_n given survival", "tau", "ECDF");
    let mut plot_min = Plot::new("L_n ∧ 0 given survival", "min", "ECDF");
    for (n, s) in ns.iter().zip(&by_n) {
        plot = plot.step(&format!("n={n}"), ecdf_points(&tau(s))?);
        plot_min = plot_min.step(&format!("n={n}"), ecdf_points(&low(s))?);
    }
    rep.plot("tau_ecdf.svg", plot)?;
    rep.plot("min_ecdf.svg", plot_min)?;
    for (name, ks) in [("ks-joint", ks_joint), ("ks-tau", ks_tau), ("ks-min", ks_min)] {
        let mut v = Verdict::ks(name, &ks);
        v.detail = format!("{label}; {}", v.detail);
        rep.verdict(v);
    }
    Ok(())
}

/// Self-normalized S and log Z given survival against S given L_n >= 0.
fn walk_limit(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let n = sizes_n(config, &[1024]).into_iter().max().expect("nonempty");
    if n < 2 {
        return Err(Error::Config("walk-limit needs n >= 2".into()));
    }
    let replicates = config.sizes.replicates.unwrap_or(5000);
    let half = n / 2;
    let samples = conditioned_samples(model, n, replicates, source.named("survival"))?;
    let pick = |k: usize, f: &dyn Fn(&crate::branching::ConditionedSample, usize) -> f64| -> Vec<f64> {
        samples.iter().map(|s| f(s, k)).collect()
    };
    let s_of = |s: &crate::branching::ConditionedSample, k: usize| s.path.sums[k];
    let logz_of = |s: &crate::branching::ConditionedSample, k: usize| s.path.z[k].ln();
    let (zs_half, zs_end) = (pick(half, &s_of), pick(n, &s_of));
    let (lz_half, lz_end) = (pick(half, &logz_of), pick(n, &logz_of));
    drop(samples);

    let sampler = PlusSampler::new(model, PlusMode::Conditional, None)?;
    let parts: Vec<Result<Vec<(f64, f64)>>> = par_batches(source.named("plus"), replicates, |rng, _, len| {
        let mut sums = Vec::with_capacity(n + 1);
        (0..len)
            .map(|_| {
                sampler.draw(n, &mut sums, rng)?;
                Ok((sums[half], sums[n]))
            })
            .collect()
    });
    let mut plus = Vec::with_capacity(replicates);
    for p in parts {
        plus.extend(p?);
    }
    let (mut ps_half, mut ps_end): (Vec<f64>, Vec<f64>) = plus.into_iter().unzip();

    // On a +-c lattice S_k lives on a parity class of spacing 2c. Spread each
    // atom uniformly over its cell so the medians and ECDFs are not steps.
    let (mut zs_half, mut zs_end) = (zs_half, zs_end);
    if let Some(c) = model.lattice_span() {
        use rand::Rng;
        let mut rng = source.named("jitter").rng();
        for v in [&mut zs_half, &mut zs_end, &mut ps_half, &mut ps_end] {
            for x in v.iter_mut() {
                *x += rng.random_range(-c..c);
            }
        }
    }

    let abs_median = |v: &[f64]| median(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
    let (cz, cl, cp) = (abs_median(&zs_end), abs_median(&lz_end), abs_median(&ps_end));
    if !(cz > 0.0 && cl > 0.0 && cp > 0.0) {
        return Err(Error::DegenerateSample("zero median |S_n| or |log Z_n|".into()));
    }
    let scale = |v: &[f64], c: f64| v.iter().map(|x| x / c).collect::<Vec<_>>();
    let sets = [
        ("survival-S", 0.5, scale(&zs_half, cz)),
        ("survival-S", 1.0, scale(&zs_end, cz)),
        ("survival-logZ", 0.5, scale(&lz_half, cl)),
        ("survival-logZ", 1.0, scale(&lz_end, cl)),
        ("plus-S", 0.5, scale(&ps_half, cp)),
        ("plus-S", 1.0, scale(&ps_end, cp)),
    ];
    let mut rows = Vec::new();
    for (name, t, v) in &sets {
        rows.extend(v.iter().map(|x| format!("{name},{t},{x}")));
    }
    rep.csv("walk_limit.csv", "sample,t,value", &rows)?;
    rep.put("median_abs_s_survival", cz);
    rep.put("median_abs_logz_survival", cl);
    rep.put("median_abs_s_plus", cp);
    for (i, t) in [(0usize, 0.5), (1, 1.0)] {
        let mut plot = Plot::new(&format!("Self-normalized marginals at t = {t}"), "value", "ECDF");
        for (name, _, v) in [&sets[i], &sets[2 + i], &sets[4 + i]] {
            plot = plot.step(name, ecdf_points(v)?);
        }
        rep.plot(&format!("walk_limit_t{}.svg", if i == 0 { "05" } else { "1" }), plot)?;
        let ks_s = ks_unweighted(&sets[i].2, &sets[4 + i].2, 0.01)?;
        let ks_z = ks_unweighted(&sets[2 + i].2, &sets[4 + i].2, 0.01)?;
        rep.verdict(Verdict::ks(&format!("ks-S-t{t}"), &ks_s));
        rep.verdict(Verdict::ks(&format!("ks-logZ-t{t}"), &ks_z));
    }
    Ok(())
}

/// v̂ tables by both estimators, and harmonicity.
fn renewal(config: &ExperimentConfig, source: StreamSeed, rep: &mut Report) -> Result<()> {
    let model = &config.model;
    let inc = model.increment.expect("validated");
    let points = config.sizes.grid_points.unwrap_or(20);
    let x_max = config.sizes.grid_max.unwrap_or(5.0);
    let grid: Vec<f64> = (0..points).map(|i| x_max * i as f64 / (points - 1) as f64).collect();
    let replicates = config.sizes.replicates.unwrap_or(100_000);
    let write = |rep: &mut Report, name: &str, t: &RenewalTable| -> Result<()> {
        let mut buf = Vec::new();
        t.write_csv(&mut buf)?;
        rep.write(name, &buf)
    };

    if let Some(c) = model.lattice_span() {
        let table = RenewalTable::lattice(c, &grid);
        write(rep, "renewal_exact.csv", &table)?;
        let mut worst = 0.0f64;
        let mut rows = Vec::new();
        // Harmonicity on lattice points, where the closed form is exact.
        for j in 0..points {
            let x = j as f64 * c;
            let h = check_harmonicity(&table, model, x, 1, source)?;
            worst = worst.max(h.value.abs());
            rows.push(format!("{x},{},{}", h.value, h.stderr));
        }
        rep.csv("harmonicity.csv", "x,residual,stderr", &rows)?;
        rep.verdict(Verdict::at_most("harmonicity-exact", worst, 0.0, format!("max |E v(x+X) - v(x)| on {points} lattice points")));
        return Ok(());
    }

    let ladder = simulate_renewal(&inc, &grid, replicates, RenewalMethod::Ladder, DEFAULT_WALK_BUDGET, source.named("ladder"))?;
    let argmin = simulate_renewal(&inc, &grid, replicates, RenewalMethod::Argmin, DEFAULT_WALK_BUDGET, source.named("argmin"))?;
    write(rep, "renewal_ladder.csv", &ladder)?;
    write(rep, "renewal_argmin.csv", &argmin)?;
    let z = ladder
        .v_hat
        .iter()
        .zip(&argmin.v_hat)
        .zip(ladder.stderr.iter().zip(&argmin.stderr))
        .map(|((a, b), (sa, sb))| if *sa == 0.0 && *sb == 0.0 { (a - b).abs() * f64::INFINITY } else { (a - b).abs() / sa.hypot(*sb) })
        .map(|z| if z.is_nan() { 0.0 } else { z })
        .fold(0.0, f64::max);
    rep.verdict(Verdict::at_most("estimators-agree", z, 4.0, "max |ladder - argmin| / combined stderr over the grid".into()));

    // Harmonicity on the inner half of the grid, so x + X stays mostly
    // inside the table. The table's own error enters the tolerance.
    let table_se = ladder.stderr.iter().copied().fold(0.0, f64::max);
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (i, &x) in grid.iter().enumerate().filter(|(_, &x)| x <= x_max / 2.0) {
        let h = check_harmonicity(&ladder, model, x, replicates, source.named(&format!("harmonic-{i}")))?;
        let tol = h.stderr.hypot(2f64.sqrt() * table_se);
        worst = worst.max(h.value.abs() / tol);
        rows.push(format!("{x},{},{}", h.value, h.stderr));
    }
    rep.csv("harmonicity.csv", "x,residual,stderr", &rows)?;
    rep.verdict(Verdict::at_most(
        "harmonicity-mc",
        worst,
        4.0,
        "max |residual| / sqrt(se_mc^2 + 2 se_table^2) on x <= grid_max/2".into(),
    ));
    rep.plot(
        "renewal.svg",
        Plot::new("Renewal function estimates", "x", "v(x)")
            .line("ladder", ladder.grid.iter().copied().zip(ladder.v_hat.iter().copied()).collect())
            .line("argmin", argmin.grid.iter().copied().zip(argmin.v_hat.iter().copied()).collect()),
    )?;
    Ok(())
}

/// Fast property checks across every module.
fn validate_suite(source: StreamSeed, rep: &mut Report) -> Result<()> {
    use rand::Rng;
    let laws = [
        OffspringLaw::linear_fractional(0.5)?,
        OffspringLaw::linear_fractional(2.0)?,
        OffspringLaw::poisson(0.7)?,
        OffspringLaw::poisson(3.0)?,
        OffspringLaw::binary(0.8)?,
        OffspringLaw::bounded(vec![0.2, 0.3, 0.1, 0.4])?,
    ];
    let lf_gauss = EnvironmentModel::new(Family::LinearFractional, IncrementLaw::Gaussian { sigma: 1.0 })?;
    let poisson_pm = EnvironmentModel::new(Family::Poisson, IncrementLaw::TwoPoint { c: 0.5 })?;
    let binary_pm = EnvironmentModel::new(Family::Binary, IncrementLaw::TwoPoint { c: std::f64::consts::LN_2 })?;
    let srw = EnvironmentModel::new(Family::LinearFractional, IncrementLaw::TwoPoint { c: 1.0 })?;
    let default = EnvironmentModel::default_critical();

    // offspring
    let mut worst = 0.0f64;
    for law in &laws {
        for i in 0..=20 {
            let s = i as f64 / 20.0;
            worst = worst.max(((1.0 - law.pgf(s)?) - law.survival_map(1.0 - s)?).abs());
        }
    }
    rep.verdict(Verdict::at_most("offspring-pgf-complement", worst, 1e-14, "max |1 - f(s) - survival_map(1 - s)|".into()));
    let mut worst = f64::NEG_INFINITY;
    for law in &laws {
        worst = worst.max(law.zeta(2)? / 2.0 - law.eta()?);
    }
    rep.verdict(Verdict::at_most("offspring-zeta-eta", worst, 1e-12, "max zeta(2)/2 - eta".into()));
    let mut rng = source.named("offspring").rng();
    let law = OffspringLaw::poisson(1.5)?;
    let mut m = Moments::default();
    for _ in 0..2000 {
        m.push(law.sample_total(1000, &mut rng)?.count as f64 / 1000.0);
    }
    rep.verdict(Verdict::at_most(
        "offspring-sample-mean",
        (m.mean - 1.5).abs() / m.stderr(),
        5.0,
        "|mean - 1.5| / stderr, Poisson(1.5), 1000 parents".into(),
    ));

    // walk
    let mut rng = source.named("walk").rng();
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let mut sums = vec![0.0];
        for _ in 0..100 {
            let x: f64 = rng.random_range(-1.0..1.0);
            sums.push(sums.last().unwrap() + x.round());
        }
        let w = 20;
        let got: Vec<usize> = prospective_minima(&sums, w)?.iter().map(|p| p.index).collect();
        let want: Vec<usize> = (1..sums.len())
            .filter(|&m| (m + 1..=(m + w).min(sums.len() - 1)).all(|j| sums[j] >= sums[m]))
            .collect();
        mismatches += usize::from(got != want);
    }
    rep.verdict(Verdict::at_most("walk-prospective-minima", mismatches as f64, 0.0, "paths where the deque disagrees with brute force".into()));
    let table = RenewalTable::lattice(1.0, &[0.0, 10.0]);
    let mut worst = 0.0f64;
    for x in 0..30 {
        worst = worst.max(check_harmonicity(&table, &srw, x as f64, 1, source)?.value.abs());
    }
    rep.verdict(Verdict::at_most("walk-lattice-harmonic", worst, 0.0, "exact residual at integer x".into()));
    let Some(inc) = lf_gauss.increment else { unreachable!() };
    let grid = [0.0, 0.5, 1.0, 2.0];
    let a = simulate_renewal(&inc, &grid, 20_000, RenewalMethod::Ladder, DEFAULT_WALK_BUDGET, source.named("ladder"))?;
    let b = simulate_renewal(&inc, &grid, 20_000, RenewalMethod::Argmin, DEFAULT_WALK_BUDGET, source.named("argmin"))?;
    let z = (0..grid.len())
        .map(|i| {
            let se = a.stderr[i].hypot(b.stderr[i]);
            if se > 0.0 {
                (a.v_hat[i] - b.v_hat[i]).abs() / se
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    rep.verdict(Verdict::at_most("walk-renewal-estimators", z, 4.0, "max standardized gap, Gaussian walk".into()));
    let sp = estimate_rho(&lf_gauss, 200, 5000, source.named("spitzer"))?;
    rep.verdict(Verdict::at_most(
        "walk-spitzer-rho",
        (sp.rho.value - 0.5).abs() / sp.rho.stderr,
        4.0,
        format!("rho_hat = {:.4}", sp.rho.value),
    ));

    // gf
    let mut rng = source.named("gf").rng();
    let (mut jirina, mut agresti, mut bound) = (0.0f64, 0usize, 0usize);
    for i in 0..3000 {
        let model = [&lf_gauss, &poisson_pm, &binary_pm][i % 3];
        let n = rng.random_range(1..=40);
        let env = sample_environment(model, n, &mut rng)?;
        let k = rng.random_range(0..n);
        let s: f64 = rng.random_range(0.0..1.0);
        let r = survival_given_env(&env, k, s)?;
        jirina = jirina.max(jirina_residual(&env, k, s)?.residual);
        agresti += usize::from(agresti_lower_bound(&env, k, s)? > r * (1.0 + 1e-12));
        bound += usize::from(survival_given_env(&env, 0, 0.0)? > quenched_bound(&env) * (1.0 + 1e-12));
    }
    rep.verdict(Verdict::at_most("gf-jirina", jirina, 1e-9, "max relative residual over 3000 triples".into()));
    rep.verdict(Verdict::at_most("gf-agresti", agresti as f64, 0.0, "violations".into()));
    rep.verdict(Verdict::at_most("gf-quenched-bound", bound as f64, 0.0, "violations of P(Z_n > 0 | env) <= exp(min S)".into()));
    let mut worst = 0.0f64;
    for _ in 0..300 {
        let n = rng.random_range(1..=200);
        let env = sample_environment(&lf_gauss, n, &mut rng)?;
        let a = survival_given_env(&env, 0, 0.0)?;
        let b = lf_survival_exact(&env, 0, Horizon::Finite(n))?.value;
        if a > 0.0 {
            worst = worst.max((a - b).abs() / a);
        }
    }
    rep.verdict(Verdict::at_most("gf-lf-closed-form", worst, 1e-12, "max relative gap to the linear-fractional closed form".into()));

    // branching
    let mut rng = source.named("branching").rng();
    let mut violations = 0usize;
    for _ in 0..500 {
        let env = sample_environment(&poisson_pm, 60, &mut rng)?;
        let p = simulate_population(&env, 3, crate::branching::DEFAULT_CEILING, &mut rng)?;
        if let Some(d) = p.z.iter().position(|&z| z == 0.0) {
            violations += usize::from(p.z[d..].iter().any(|&z| z != 0.0));
        }
    }
    rep.verdict(Verdict::at_most("branching-absorption", violations as f64, 0.0, "paths leaving 0".into()));
    let env = sample_environment(&default, 30, &mut rng)?;
    let scale = (-env.sums()[30]).exp();
    let mut m = Moments::default();
    for _ in 0..20_000 {
        m.push(simulate_population(&env, 1, crate::branching::DEFAULT_CEILING, &mut rng)?.z[30] * scale);
    }
    rep.verdict(Verdict::at_most(
        "branching-martingale",
        (m.mean - 1.0).abs() / m.stderr(),
        4.0,
        "|E[Z_n e^{-S_n} | env] - 1| / stderr".into(),
    ));
    let naive = estimate_survival(&default, 50, 20_000, source.named("naive"), SurvivalMode::Naive)?;
    let rb = estimate_survival(&default, 50, 20_000, source.named("rb"), SurvivalMode::RaoBlackwell)?;
    rep.verdict(Verdict::at_most("branching-rao-blackwell-variance", rb.stderr, naive.stderr, "RB stderr vs naive stderr".into()));
    rep.verdict(Verdict::at_most(
        "branching-rao-blackwell-agreement",
        (rb.value - naive.value).abs() / rb.stderr.hypot(naive.stderr),
        4.0,
        "standardized gap".into(),
    ));

    // conditioned
    let table = RenewalTable::lattice(1.0, &[0.0, 1.0]);
    let weighted = PlusSampler::new(&srw, PlusMode::Weighted, Some(&table))?;
    let kernel = PlusSampler::new(&srw, PlusMode::ExactKernel, None)?;
    let mass = plus_expectation(&weighted, |_| 1.0, 64, 64, 100_000, source.named("mass"))?;
    rep.verdict(Verdict::at_most(
        "conditioned-weighted-mass",
        (mass.value - 1.0).abs() / mass.stderr,
        4.0,
        "|E v(S_n) 1{L_n >= 0} - 1| / stderr".into(),
    ));
    let last = |s: &[f64]| *s.last().unwrap();
    let a = plus_expectation(&weighted, last, 32, 32, 100_000, source.named("w-end"))?;
    let b = plus_expectation(&kernel, last, 32, 32, 20_000, source.named("k-end"))?;
    rep.verdict(Verdict::at_most(
        "conditioned-kernel-vs-weighted",
        (a.value - b.value).abs() / a.stderr.hypot(b.stderr),
        4.0,
        format!("E+ S_32: weighted {:.4}, kernel {:.4}", a.value, b.value),
    ));
    let tanaka = tanaka_ladder_check(&kernel, 4096, 2048, 5000, source.named("tanaka"))?;
    let ks = ks_two_sample(&tanaka.joint_plus_sample(), &tanaka.joint_plain_sample(), 0.01)?;
    rep.verdict(Verdict::ks("conditioned-tanaka", &ks));
    let mut rng = source.named("series").rng();
    let mut decreasing = 0usize;
    for _ in 0..100 {
        let env = sample_environment(&poisson_pm, 50, &mut rng)?;
        let p = eta_series_partial_sums(&env, 50)?.partial;
        decreasing += usize::from(p.windows(2).any(|w| w[1] < w[0]));
    }
    rep.verdict(Verdict::at_most("conditioned-eta-series-monotone", decreasing as f64, 0.0, "environments with a decreasing partial sum".into()));

    // stats
    let w = wilson_interval(0, 100, 0.95)?;
    rep.verdict(Verdict::at_most("stats-wilson-zero", w.ci_low.abs(), 0.0, format!("upper {:.4}", w.ci_high)));
    let sample: Vec<f64> = (0..500).map(|i| (i as f64 * 0.37).sin()).collect();
    let ks = ks_unweighted(&sample, &sample, 0.01)?;
    rep.verdict(Verdict::at_most("stats-ks-identical", ks.statistic, 0.0, "KS distance of a sample to itself".into()));
    rep.put("checks", rep.verdicts.len());
    Ok(())
}
