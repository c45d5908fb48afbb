//! The change of measure P⁺ (walk conditioned to stay nonnegative),
//! Tanaka's decomposition at the first prospective minimum, W⁺ and
//! ultimate survival, and two estimators of θ.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::branching::{refill_environment, simulate_population, DEFAULT_CEILING};
use crate::error::{Error, Result};
use crate::gf::{lf_survival_exact, survival_given_env, Horizon};
use crate::offspring::{CompensatedSum, EnvironmentModel, EnvironmentPath, Family};
use crate::rng::{par_batches, tree_reduce, SimRng, StreamSeed};
use crate::stats::{effective_size, Estimate, Moments, Provenance, WeightedSample};
use crate::walk::{prospective_minima, RenewalTable};

pub const DEFAULT_PLUS_BUDGET: u64 = 10_000_000;

/// How paths under P⁺ are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlusMode {
    /// Raw P-paths carrying weight v(S_n) 1{L_n >= 0}.
    Weighted,
    /// Rejection on {L_n >= 0}; weight 1. Biased at finite n.
    Conditional,
    /// Exact h-transform chain P⁺(x, y) = P{x + X = y} v(y)/v(x); +-c walks
    /// only. Weight 1.
    ExactKernel,
}

/// Draws walk paths S_0..S_len under one of the P⁺ schemes.
#[derive(Debug, Clone, Copy)]
pub struct PlusSampler<'a> {
    pub model: &'a EnvironmentModel,
    pub mode: PlusMode,
    /// Renewal function for weighted mode and for Tanaka continuation weights.
    pub table: Option<&'a RenewalTable>,
    pub budget: u64,
}

impl<'a> PlusSampler<'a> {
    pub fn new(model: &'a EnvironmentModel, mode: PlusMode, table: Option<&'a RenewalTable>) -> Result<Self> {
        if !model.is_critical() {
            return Err(Error::InvalidParameter("P⁺ needs an oscillating walk".into()));
        }
        match mode {
            PlusMode::Weighted if table.is_none() => {
                return Err(Error::InvalidParameter("weighted mode needs a renewal table".into()))
            }
            PlusMode::ExactKernel if model.lattice_span().is_none() => {
                return Err(Error::InvalidParameter("exact kernel needs a +-c walk".into()))
            }
            _ => {}
        }
        Ok(Self { model, mode, table, budget: DEFAULT_PLUS_BUDGET })
    }

    /// v(x), exact for lattice models.
    pub fn v(&self, x: f64) -> f64 {
        if let (Some(c), None) = (self.model.lattice_span(), self.table) {
            return if x < 0.0 { 0.0 } else { (x / c + 1e-9).floor() + 1.0 };
        }
        match self.table {
            Some(t) => t.eval(x),
            None => f64::NAN,
        }
    }

    /// Fill `sums` with S_0..S_len and return (weight, rejected attempts).
    /// In weighted mode a path that goes negative stops early with weight 0.
    pub fn draw(&self, len: usize, sums: &mut Vec<f64>, rng: &mut SimRng) -> Result<(f64, u64)> {
        match self.mode {
            PlusMode::Weighted => {
                let ok = raw_walk(self.model, len, sums, rng, true);
                let w = if ok { self.v(*sums.last().unwrap()) } else { 0.0 };
                Ok((w, 0))
            }
            PlusMode::Conditional => {
                for attempt in 0..self.budget {
                    if raw_walk(self.model, len, sums, rng, true) {
                        return Ok((1.0, attempt));
                    }
                }
                Err(Error::BudgetExceeded {
                    budget: self.budget,
                    detail: format!("acceptance of L_{len} >= 0 below {:.2e}", 1.0 / self.budget as f64),
                })
            }
            PlusMode::ExactKernel => {
                let c = self.model.lattice_span().unwrap();
                kernel_walk(c, len, sums, rng);
                Ok((1.0, 0))
            }
        }
    }
}

/// S_0..S_len under P; with `stop_below` the walk halts at the first
/// negative value and the return is false.
fn raw_walk(model: &EnvironmentModel, len: usize, sums: &mut Vec<f64>, rng: &mut SimRng, stop_below: bool) -> bool {
    sums.clear();
    sums.push(0.0);
    let mut acc = CompensatedSum::default();
    for _ in 0..len {
        let s = acc.add(model.sample_increment(rng));
        sums.push(s);
        if stop_below && s < 0.0 {
            return false;
        }
    }
    true
}

/// Exact P⁺ chain for the +-c walk: from level k (S = kc) step up with
/// probability (k + 2) / (2(k + 1)).
fn kernel_walk(c: f64, len: usize, sums: &mut Vec<f64>, rng: &mut SimRng) {
    sums.clear();
    sums.push(0.0);
    let mut k: u64 = 0;
    for _ in 0..len {
        let up = rng.random_range(0..2 * (k + 1)) < k + 2;
        k = if up { k + 1 } else { k - 1 };
        sums.push(k as f64 * c);
    }
}

/// Environment conditioned on {L_n >= 0} by rejection, with the number of
/// rejected attempts.
pub fn sample_walk_given_ln(model: &EnvironmentModel, n: usize, budget: u64, rng: &mut SimRng) -> Result<(EnvironmentPath, u64)> {
    if !model.is_critical() {
        return Err(Error::InvalidParameter("conditioning needs an oscillating walk".into()));
    }
    let mut env = EnvironmentPath::with_capacity(n);
    'attempt: for attempt in 0..budget {
        env.clear();
        for _ in 0..n {
            let (x, law) = model.sample_step(rng)?;
            env.push(x, law);
            if *env.sums().last().unwrap() < 0.0 {
                continue 'attempt;
            }
        }
        return Ok((env, attempt));
    }
    Err(Error::BudgetExceeded { budget, detail: format!("no path with L_{n} >= 0") })
}

/// A P⁺ environment of length `len` and its weight.
pub fn sample_plus_environment(sampler: &PlusSampler, len: usize, rng: &mut SimRng) -> Result<(EnvironmentPath, f64)> {
    let mut sums = Vec::with_capacity(len + 1);
    let (w, _) = sampler.draw(len, &mut sums, rng)?;
    let mut env = EnvironmentPath::with_capacity(len);
    if w > 0.0 {
        for win in sums.windows(2) {
            let x = win[1] - win[0];
            env.push(x, sampler.model.law_for(x)?);
        }
    }
    Ok((env, w))
}

/// E⁺Y for Y a function of S_0..S_k; paths are drawn to length n >= k.
/// Weighted mode averages Y v(S_n) 1{L_n >= 0} over raw paths, the other
/// modes average Y over P⁺ paths.
pub fn plus_expectation<Y>(
    sampler: &PlusSampler,
    functional: Y,
    k: usize,
    n: usize,
    replicates: usize,
    source: StreamSeed,
) -> Result<Estimate>
where
    Y: Fn(&[f64]) -> f64 + Sync,
{
    if k > n || replicates == 0 {
        return Err(Error::InvalidParameter("plus_expectation needs k <= n and N >= 1".into()));
    }
    let parts: Vec<Result<(Moments, f64)>> = par_batches(source, replicates, |rng, _, len| {
        let mut sums = Vec::with_capacity(n + 1);
        let mut m = Moments::default();
        let mut total_w = 0.0;
        for _ in 0..len {
            let (w, _) = sampler.draw(n, &mut sums, rng)?;
            total_w += w;
            m.push(if w > 0.0 { w * functional(&sums[..=k]) } else { 0.0 });
        }
        Ok((m, total_w))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let (m, w) = tree_reduce(parts, |a, b| (a.0.merge(b.0), a.1 + b.1)).unwrap();
    if w == 0.0 {
        return Err(Error::DegenerateSample("all P⁺ weights are zero".into()));
    }
    let method = match sampler.mode {
        PlusMode::Weighted => "plus-weighted",
        PlusMode::Conditional => "plus-conditional",
        PlusMode::ExactKernel => "plus-exact-kernel",
    };
    Ok(m.estimate(0.95, method).with_provenance(Provenance::of(source, replicates)))
}

/// One detected first prospective minimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuDetection {
    pub nu: usize,
    pub s_nu: f64,
    /// Path weight times the probability that the unseen future never
    /// undercuts S_ν.
    pub weight: f64,
    /// S_{ν+1} - S_ν, the first post-ν increment.
    pub next_increment: f64,
    /// S_1 of the same path, carrying the path weight.
    pub first_step: f64,
    pub path_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanakaReport {
    /// (ν, S_ν) under P⁺ restricted to ν <= n.
    pub plus: Vec<NuDetection>,
    /// (ι, S_ι) under P restricted to ι <= n.
    pub plain: Vec<(usize, f64)>,
    /// P̂⁺{ν > n}: weight mass with no detection inside the horizon.
    pub censoring_plus: f64,
    /// P̂{ι > n}.
    pub censoring_plain: f64,
    pub ess_plus: f64,
    pub horizon: usize,
    pub lookahead: usize,
}

impl TanakaReport {
    pub fn nu_sample(&self) -> WeightedSample {
        self.plus.iter().map(|d| (d.nu as f64, d.weight)).collect()
    }

    pub fn s_nu_sample(&self) -> WeightedSample {
        self.plus.iter().map(|d| (d.s_nu, d.weight)).collect()
    }

    /// Lexicographic key of (ν, S_ν), order-preserving into one real line.
    pub fn joint_plus_sample(&self) -> WeightedSample {
        self.plus.iter().map(|d| (joint_key(d.nu, d.s_nu), d.weight)).collect()
    }

    pub fn iota_sample(&self) -> WeightedSample {
        self.plain.iter().map(|&(k, _)| (k as f64, 1.0)).collect()
    }

    pub fn s_iota_sample(&self) -> WeightedSample {
        self.plain.iter().map(|&(_, x)| (x, 1.0)).collect()
    }

    pub fn joint_plain_sample(&self) -> WeightedSample {
        self.plain.iter().map(|&(k, x)| (joint_key(k, x), 1.0)).collect()
    }

    /// Post-ν increments against first increments of whole P⁺ paths.
    pub fn renewal_samples(&self) -> (WeightedSample, WeightedSample) {
        let post = self.plus.iter().map(|d| (d.next_increment, d.weight)).collect();
        let first = self.plus.iter().map(|d| (d.first_step, d.path_weight)).collect();
        (post, first)
    }

    /// Weighted correlation of ν with the first post-ν increment.
    pub fn nu_increment_correlation(&self) -> f64 {
        weighted_correlation(self.plus.iter().map(|d| (d.nu as f64, d.next_increment, d.weight)))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "sample,index,value,weight")?;
        for d in &self.plus {
            writeln!(w, "plus,{},{},{}", d.nu, d.s_nu, d.weight)?;
        }
        for &(k, x) in &self.plain {
            writeln!(w, "plain,{k},{x},1")?;
        }
        Ok(())
    }
}

fn joint_key(k: usize, x: f64) -> f64 {
    k as f64 + 0.5 + x.atan() / std::f64::consts::PI
}

fn weighted_correlation(it: impl Iterator<Item = (f64, f64, f64)>) -> f64 {
    let pts: Vec<_> = it.collect();
    let w: f64 = pts.iter().map(|p| p.2).sum();
    if w == 0.0 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.2 * p.0).sum::<f64>() / w;
    let my = pts.iter().map(|p| p.2 * p.1).sum::<f64>() / w;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y, wi) in &pts {
        sxy += wi * (x - mx) * (y - my);
        sxx += wi * (x - mx) * (x - mx);
        syy += wi * (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Find ν on one P⁺ path S_0..S_T with T = n + lookahead. The first m >= 1
/// that no later S_j (j <= T) undercuts is ν exactly when the unseen future
/// stays >= S_m, which has probability v(S_T - S_m)/v(S_T) given S_T.
fn detect_nu(sampler: &PlusSampler, sums: &[f64], n: usize, path_weight: f64) -> Result<Option<NuDetection>> {
    let t = sums.len() - 1;
    let first = prospective_minima(sums, t)?.into_iter().next().map(|p| p.index);
    let Some(m) = first else { return Ok(None) };
    if m > n {
        return Ok(None);
    }
    let st = sums[t];
    let h = sampler.v(st - sums[m]) / sampler.v(st);
    Ok(Some(NuDetection {
        nu: m,
        s_nu: sums[m],
        weight: path_weight * h,
        next_increment: sums[m + 1] - sums[m],
        first_step: sums[1],
        path_weight,
    }))
}

/// Samples of (ν, S_ν) under P⁺ and (ι, S_ι) under P, both restricted to
/// indices <= n. P⁺ paths run n + lookahead steps; errors if either side
/// censors 1% or more of its mass.
pub fn tanaka_ladder_check(
    sampler: &PlusSampler,
    n: usize,
    lookahead: usize,
    replicates: usize,
    source: StreamSeed,
) -> Result<TanakaReport> {
    if n == 0 || lookahead == 0 || replicates == 0 {
        return Err(Error::InvalidParameter("tanaka check needs n, w, N >= 1".into()));
    }
    if sampler.mode == PlusMode::Weighted || sampler.model.lattice_span().is_none() {
        sampler.table.ok_or_else(|| Error::InvalidParameter("continuation weights need a renewal table".into()))?;
    }
    let t = n + lookahead;
    let plus_src = source.named("plus");
    type PlusPart = (Vec<NuDetection>, f64, f64);
    let parts: Vec<Result<PlusPart>> = par_batches(plus_src, replicates, |rng, _, len| {
        let mut sums = Vec::with_capacity(t + 1);
        let mut out = Vec::new();
        let (mut mass, mut detected) = (0.0, 0.0);
        for _ in 0..len {
            let (w, _) = sampler.draw(t, &mut sums, rng)?;
            if w == 0.0 {
                continue;
            }
            mass += w;
            if let Some(d) = detect_nu(sampler, &sums, n, w)? {
                detected += d.weight;
                out.push(d);
            }
        }
        Ok((out, mass, detected))
    });
    let mut plus = Vec::new();
    let (mut mass, mut detected) = (0.0, 0.0);
    for p in parts {
        let (d, m, det) = p?;
        plus.extend(d);
        mass += m;
        detected += det;
    }
    if mass == 0.0 {
        return Err(Error::DegenerateSample("no P⁺ mass".into()));
    }
    let censoring_plus = 1.0 - detected / mass;

    let model = sampler.model;
    let plain_parts: Vec<(Vec<(usize, f64)>, u64)> = par_batches(source.named("plain"), replicates, |rng, _, len| {
        let mut out = Vec::with_capacity(len);
        let mut censored = 0;
        for _ in 0..len {
            let mut acc = CompensatedSum::default();
            let mut hit = None;
            for k in 1..=n {
                let s = acc.add(model.sample_increment(rng));
                if s >= 0.0 {
                    hit = Some((k, s));
                    break;
                }
            }
            match hit {
                Some(h) => out.push(h),
                None => censored += 1,
            }
        }
        (out, censored)
    });
    let mut plain = Vec::with_capacity(replicates);
    let mut censored = 0;
    for (p, c) in plain_parts {
        plain.extend(p);
        censored += c;
    }
    let censoring_plain = censored as f64 / replicates as f64;
    let rate = censoring_plus.max(censoring_plain);
    if rate >= 0.01 {
        return Err(Error::ExcessCensoring { rate });
    }
    let ess_plus = effective_size(&plus.iter().map(|d| (0.0, d.weight)).collect::<Vec<_>>());
    Ok(TanakaReport { plus, plain, censoring_plus, censoring_plain, ess_plus, horizon: n, lookahead })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPartialSums {
    pub partial: Vec<f64>,
    /// (P_K - P_{0.9K}) / P_K.
    pub diagnostic: f64,
}

fn last_decade(partial: &[f64]) -> f64 {
    let k = partial.len();
    if k == 0 {
        return f64::NAN;
    }
    let last = partial[k - 1];
    let j = ((0.9 * k as f64).floor() as usize).clamp(1, k) - 1;
    if last == 0.0 {
        0.0
    } else {
        (last - partial[j]) / last
    }
}

/// Σ_{k<K'} η_{k+1} e^{-S_k} for K' = 1..K.
pub fn eta_series_partial_sums(env: &EnvironmentPath, k_max: usize) -> Result<SeriesPartialSums> {
    if k_max == 0 || k_max > env.len() {
        return Err(Error::OutOfRange(format!("K = {k_max} outside [1, {}]", env.len())));
    }
    let sums = env.sums();
    let mut acc = 0.0;
    let mut partial = Vec::with_capacity(k_max);
    for (k, law) in env.laws().iter().take(k_max).enumerate() {
        acc += law.eta()? * (-sums[k]).exp();
        partial.push(acc);
    }
    let diagnostic = last_decade(&partial);
    Ok(SeriesPartialSums { partial, diagnostic })
}

/// Σ_{j<=k} (1 - Q_j({1})), whose divergence gives Jagers' criterion.
pub fn jagers_partial_sums(env: &EnvironmentPath) -> Vec<f64> {
    let mut acc = 0.0;
    env.laws()
        .iter()
        .map(|l| {
            acc += 1.0 - l.prob(1);
            acc
        })
        .collect()
}

/// Ultimate survival of one individual given a P⁺ environment: a point
/// value for linear-fractional laws, otherwise a bracket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UltimateSurvival {
    /// Agresti minorant (Σ η_{j+1} e^{-S_j})^{-1} over the environment.
    pub lower: f64,
    /// Survival to the end of the environment.
    pub upper: f64,
    /// Closed form, when the laws are linear-fractional.
    pub exact: Option<f64>,
}

pub fn ultimate_survival_given_env(env: &EnvironmentPath) -> Result<UltimateSurvival> {
    let upper = survival_given_env(env, 0, 0.0)?;
    let lower = {
        let sums = env.sums();
        let mut den = 0.0;
        for (j, law) in env.laws().iter().enumerate() {
            den += law.eta()? * (-sums[j]).exp();
        }
        if den == 0.0 {
            // no branching variability at all: only degenerate laws
            upper
        } else {
            (1.0 / den).min(upper)
        }
    };
    let exact = match lf_survival_exact(env, 0, Horizon::Infinite) {
        // survival to the end of the environment caps the unseen tail
        Ok(v) => Some(v.value.min(upper)),
        Err(Error::WrongFamily(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(UltimateSurvival { lower, upper, exact })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WPlusReport {
    /// (e^{-S_m} Z_m, weight) over P⁺ environments.
    pub w_plus: WeightedSample,
    /// P̂⁺{W⁺ > 0}, read as P̂⁺{Z_m > 0}.
    pub positive: Estimate,
    /// Point estimate of P⁺{Z_k > 0 for all k} for linear-fractional laws.
    pub ultimate: Option<Estimate>,
    pub ultimate_lower: Estimate,
    pub ultimate_upper: Estimate,
    pub horizon: usize,
}

impl WPlusReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "value,weight")?;
        for (x, wt) in &self.w_plus {
            writeln!(w, "{x},{wt}")?;
        }
        Ok(())
    }
}

/// Run the branching process from Z_0 = 1 in P⁺ environments of length m.
pub fn wplus_and_ultimate_survival(
    sampler: &PlusSampler,
    horizon: usize,
    replicates: usize,
    source: StreamSeed,
) -> Result<WPlusReport> {
    if horizon == 0 || replicates == 0 {
        return Err(Error::InvalidParameter("W⁺ needs m, N >= 1".into()));
    }
    type Part = (WeightedSample, [Moments; 4], bool);
    let parts: Vec<Result<Part>> = par_batches(source, replicates, |rng, _, len| {
        let mut w_plus = Vec::with_capacity(len);
        let mut mom: [Moments; 4] = Default::default();
        let mut all_exact = true;
        for _ in 0..len {
            let (env, w) = sample_plus_environment(sampler, horizon, rng)?;
            if w == 0.0 {
                for m in mom.iter_mut() {
                    m.push(0.0);
                }
                continue;
            }
            let path = simulate_population(&env, 1, DEFAULT_CEILING, rng)?;
            let wm = path.z[horizon] * (-env.sums()[horizon]).exp();
            w_plus.push((wm, w));
            let u = ultimate_survival_given_env(&env)?;
            mom[0].push(w * (wm > 0.0) as u8 as f64);
            mom[1].push(w * u.exact.unwrap_or(f64::NAN));
            mom[2].push(w * u.lower);
            mom[3].push(w * u.upper);
            all_exact &= u.exact.is_some();
        }
        Ok((w_plus, mom, all_exact))
    });
    let mut w_plus = Vec::new();
    let mut mom: [Moments; 4] = Default::default();
    let mut all_exact = true;
    for p in parts {
        let (wp, m, e) = p?;
        w_plus.extend(wp);
        for (a, b) in mom.iter_mut().zip(m) {
            *a = a.merge(b);
        }
        all_exact &= e;
    }
    let prov = Provenance::of(source, replicates);
    let est = |m: &Moments, name: &str| m.estimate(0.95, name).with_provenance(prov);
    Ok(WPlusReport {
        w_plus,
        positive: est(&mom[0], "plus-alive-at-horizon"),
        ultimate: all_exact.then(|| est(&mom[1], "plus-ultimate-lf")),
        ultimate_lower: est(&mom[2], "plus-ultimate-agresti"),
        ultimate_upper: est(&mom[3], "plus-survival-at-horizon"),
        horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaMethod {
    Ratio,
    Series,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaEstimate {
    pub method: ThetaMethod,
    pub estimate: Estimate,
    /// Bracket for families without closed-form ultimate survival.
    pub bracket: Option<(Estimate, Estimate)>,
    pub n: Option<usize>,
    pub k_max: Option<usize>,
    pub horizon: Option<usize>,
    pub replicates: usize,
    /// Ratio: P̂{Z_n > 0} and P̂{L_n >= 0}. Series: per-k mean terms.
    pub numerator: Option<Estimate>,
    pub denominator: Option<Estimate>,
    pub terms: Vec<f64>,
    /// Series: last term over partial sum.
    pub diagnostic: Option<f64>,
}

impl ThetaEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

/// θ̂ = P̂{Z_n > 0} / P̂{L_n >= 0} with the Rao–Blackwellized numerator and
/// both parts taken from the same environments; delta-method interval.
pub fn theta_ratio(model: &EnvironmentModel, n: usize, replicates: usize, source: StreamSeed) -> Result<ThetaEstimate> {
    if n == 0 || replicates < 2 {
        return Err(Error::InvalidParameter("theta_ratio needs n >= 1, N >= 2".into()));
    }
    if !model.is_critical() {
        return Err(Error::InvalidParameter("theta is defined for oscillating walks".into()));
    }
    // (sum a, sum b, sum a², sum b², sum ab)
    let parts: Vec<Result<[f64; 5]>> = par_batches(source, replicates, |rng, _, len| {
        let mut env = EnvironmentPath::with_capacity(n);
        let mut acc = [0.0; 5];
        for _ in 0..len {
            refill_environment(model, n, &mut env, rng)?;
            let a = survival_given_env(&env, 0, 0.0)?;
            let b = if env.sums()[1..].iter().all(|&s| s >= 0.0) { 1.0 } else { 0.0 };
            acc[0] += a;
            acc[1] += b;
            acc[2] += a * a;
            acc[3] += b * b;
            acc[4] += a * b;
        }
        Ok(acc)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let s = tree_reduce(parts, |x, y| std::array::from_fn(|i| x[i] + y[i])).unwrap();
    let nf = replicates as f64;
    let (ma, mb) = (s[0] / nf, s[1] / nf);
    let var = |sq: f64, m: f64| ((sq / nf - m * m) * nf / (nf - 1.0)).max(0.0);
    let (va, vb) = (var(s[2], ma), var(s[3], mb));
    let cov = (s[4] / nf - ma * mb) * nf / (nf - 1.0);
    let se_b = (vb / nf).sqrt();
    if mb == 0.0 || mb - 1.96 * se_b <= 0.0 {
        return Err(Error::DegenerateSample(format!("P̂{{L_n >= 0}} = {mb} is not separated from 0")));
    }
    let r = ma / mb;
    let var_r = (va - 2.0 * r * cov + r * r * vb).max(0.0) / (nf * mb * mb);
    let se = var_r.sqrt();
    let prov = Provenance::of(source, replicates);
    let mk = |value: f64, se: f64, method: &str| Estimate {
        value,
        ci_low: value - 1.96 * se,
        ci_high: value + 1.96 * se,
        stderr: se,
        n: replicates as u64,
        method: method.into(),
        provenance: Some(prov),
    };
    Ok(ThetaEstimate {
        method: ThetaMethod::Ratio,
        estimate: mk(r, se, "theta-ratio-delta"),
        bracket: None,
        n: Some(n),
        k_max: None,
        horizon: None,
        replicates,
        numerator: Some(mk(ma, (va / nf).sqrt(), "rao-blackwell")),
        denominator: Some(mk(mb, se_b, "indicator")),
        terms: Vec::new(),
        diagnostic: None,
    })
}

/// Truncated series θ ≈ Σ_{k<=K} E[P⁺_{Z_k}{survive forever}; τ_k = k].
/// Each replicate runs (environment, population) to K, and at every strict
/// descending ladder epoch k (and k = 0) adds 1 - (1 - p(Π'))^{Z_k}, where
/// Π' is a fresh P⁺ environment of length m and p its one-individual
/// ultimate survival probability.
pub fn theta_series(
    model: &EnvironmentModel,
    sampler: &PlusSampler,
    k_max: usize,
    horizon: usize,
    replicates: usize,
    source: StreamSeed,
) -> Result<ThetaEstimate> {
    if k_max == 0 || horizon == 0 || replicates < 2 {
        return Err(Error::InvalidParameter("theta_series needs K, m >= 1, N >= 2".into()));
    }
    if sampler.mode == PlusMode::Weighted {
        return Err(Error::InvalidParameter("theta_series draws P⁺ environments by rejection or exact kernel".into()));
    }
    let lf = matches!(model.family, Family::LinearFractional);
    type Part = ([Moments; 3], Vec<f64>);
    let parts: Vec<Result<Part>> = par_batches(source, replicates, |rng, _, len| {
        let mut mom: [Moments; 3] = Default::default();
        let mut terms = vec![0.0; k_max + 1];
        let mut env = EnvironmentPath::with_capacity(k_max);
        for _ in 0..len {
            let (plus_env, _) = sample_plus_environment(sampler, horizon, rng)?;
            let u = ultimate_survival_given_env(&plus_env)?;
            refill_environment(model, k_max, &mut env, rng)?;
            let path = simulate_population(&env, 1, DEFAULT_CEILING, rng)?;
            let sums = env.sums();
            let mut running_min = f64::INFINITY;
            let mut tot = [0.0; 3];
            for k in 0..=k_max {
                let ladder = sums[k] < running_min;
                running_min = running_min.min(sums[k]);
                let z = path.z[k];
                if !ladder || z == 0.0 {
                    continue;
                }
                let clan = |p: f64| -(z * (-p).ln_1p()).exp_m1();
                let point = u.exact.map(clan).unwrap_or(f64::NAN);
                tot[0] += point;
                tot[1] += clan(u.lower);
                tot[2] += clan(u.upper);
                terms[k] += if lf { point } else { clan(u.upper) };
            }
            for i in 0..3 {
                mom[i].push(tot[i]);
            }
        }
        Ok((mom, terms))
    });
    let mut mom: [Moments; 3] = Default::default();
    let mut terms = vec![0.0; k_max + 1];
    for p in parts {
        let (m, t) = p?;
        for (a, b) in mom.iter_mut().zip(m) {
            *a = a.merge(b);
        }
        for (a, b) in terms.iter_mut().zip(t) {
            *a += b;
        }
    }
    for t in terms.iter_mut() {
        *t /= replicates as f64;
    }
    let total: f64 = terms.iter().sum();
    let diagnostic = if total > 0.0 { terms[k_max] / total } else { f64::NAN };
    if diagnostic > 0.1 {
        return Err(Error::InsufficientK { diagnostic });
    }
    let prov = Provenance::of(source, replicates);
    let lower = mom[1].estimate(0.95, "theta-series-lower").with_provenance(prov);
    let upper = mom[2].estimate(0.95, "theta-series-upper").with_provenance(prov);
    let (estimate, bracket) = if lf {
        (mom[0].estimate(0.95, "theta-series").with_provenance(prov), None)
    } else {
        // no point value; the midpoint carries the bracket's width as its interval
        let mid = Estimate {
            value: 0.5 * (lower.value + upper.value),
            ci_low: lower.ci_low,
            ci_high: upper.ci_high,
            stderr: f64::NAN,
            n: replicates as u64,
            method: "theta-series-bracket".into(),
            provenance: Some(prov),
        };
        (mid, Some((lower, upper)))
    };
    Ok(ThetaEstimate {
        method: ThetaMethod::Series,
        estimate,
        bracket,
        n: None,
        k_max: Some(k_max),
        horizon: Some(horizon),
        replicates,
        numerator: None,
        denominator: None,
        terms,
        diagnostic: Some(diagnostic),
    })
}

/// Write a weighted sample as `value,weight` rows.
pub fn write_weighted_csv<W: Write>(sample: &[(f64, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "value,weight")?;
    for (x, wt) in sample {
        writeln!(w, "{x},{wt}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::{IncrementLaw, OffspringLaw};
    use crate::stats::{ks_two_sample, wilson_interval};

    fn srw() -> EnvironmentModel {
        EnvironmentModel::new(Family::LinearFractional, IncrementLaw::TwoPoint { c: 1.0 }).unwrap()
    }

    #[test]
    fn walk_given_ln_acceptance() {
        let model = srw();
        let mut rng = StreamSeed::new(1).rng();
        for n in [1usize, 2] {
            let trials = 20_000u64;
            let mut attempts = 0;
            for _ in 0..trials {
                let (env, rej) = sample_walk_given_ln(&model, n, 1000, &mut rng).unwrap();
                assert!(env.sums()[1..].iter().all(|&s| s >= 0.0));
                attempts += rej + 1;
            }
            let w = wilson_interval(trials, attempts, 0.9999).unwrap();
            assert!(w.contains(0.5), "n={n}: {w:?}");
        }
    }

    #[test]
    fn weighted_total_mass_is_one() {
        let model = srw();
        let table = RenewalTable::lattice(1.0, &[0.0]);
        let s = PlusSampler::new(&model, PlusMode::Weighted, Some(&table)).unwrap();
        for n in [4usize, 16, 64] {
            let e = plus_expectation(&s, |_| 1.0, 0, n, 200_000, StreamSeed::new(n as u64)).unwrap();
            assert!((e.value - 1.0).abs() <= 4.0 * e.stderr, "n={n}: {e:?}");
        }
    }

    #[test]
    fn one_step_kernel() {
        let model = srw();
        let table = RenewalTable::lattice(1.0, &[0.0]);
        let y = |s: &[f64]| (s[1] == 1.0) as u8 as f64;
        let w = PlusSampler::new(&model, PlusMode::Weighted, Some(&table)).unwrap();
        let e = plus_expectation(&w, y, 1, 1, 50_000, StreamSeed::new(2)).unwrap();
        assert!((e.value - 1.0).abs() <= 4.0 * e.stderr);
        let k = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let e = plus_expectation(&k, y, 1, 1, 1000, StreamSeed::new(2)).unwrap();
        assert_eq!(e.value, 1.0);
    }

    #[test]
    fn modes_agree_on_three_step_functional() {
        // P⁺{S_3 = 3} = 1 * 3/4 * 2/3 = 1/2 for the ±1 walk
        let model = srw();
        let table = RenewalTable::lattice(1.0, &[0.0]);
        let y = |s: &[f64]| (s[3] == 3.0) as u8 as f64;
        let kernel = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let ek = plus_expectation(&kernel, y, 3, 3, 100_000, StreamSeed::new(5)).unwrap();
        assert!((ek.value - 0.5).abs() <= 4.0 * ek.stderr);
        let weighted = PlusSampler::new(&model, PlusMode::Weighted, Some(&table)).unwrap();
        let cond = PlusSampler::new(&model, PlusMode::Conditional, None).unwrap();
        for n in [64usize, 256] {
            let a = plus_expectation(&weighted, y, 3, n, 100_000, StreamSeed::new(6)).unwrap();
            let b = plus_expectation(&cond, y, 3, n, 20_000, StreamSeed::new(7)).unwrap();
            assert!(a.agrees_within(&b, 4.0), "n={n}: {a:?} {b:?}");
        }
    }

    #[test]
    fn exact_kernel_rejects_continuous_walks() {
        let g = EnvironmentModel::new(Family::Poisson, IncrementLaw::Gaussian { sigma: 1.0 }).unwrap();
        assert!(PlusSampler::new(&g, PlusMode::ExactKernel, None).is_err());
        assert!(PlusSampler::new(&g, PlusMode::Weighted, None).is_err());
        let f = EnvironmentModel::fixed(OffspringLaw::dirac(2)).unwrap();
        assert!(PlusSampler::new(&f, PlusMode::Conditional, None).is_err());
    }

    #[test]
    fn tanaka_on_simple_walk() {
        let model = srw();
        let kernel = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let r = tanaka_ladder_check(&kernel, 4096, 2048, 3000, StreamSeed::new(9)).unwrap();
        assert!(r.censoring_plus < 0.01 && r.censoring_plain < 0.01);
        assert!(r.plus.iter().all(|d| d.nu >= 1 && (d.s_nu == 0.0 || d.s_nu == 1.0)));
        assert!(r.plain.iter().all(|&(_, x)| x == 0.0 || x == 1.0));
        let iota_one = r.plain.iter().filter(|p| p.0 == 1).count() as u64;
        let w = wilson_interval(iota_one, r.plain.len() as u64, 0.9999).unwrap();
        assert!(w.contains(0.5 / (1.0 - r.censoring_plain)) || w.contains(0.5));
        assert!(ks_two_sample(&r.s_nu_sample(), &r.s_iota_sample(), 0.01).unwrap().passes());
        assert!(ks_two_sample(&r.nu_sample(), &r.iota_sample(), 0.01).unwrap().passes());
        assert!(ks_two_sample(&r.joint_plus_sample(), &r.joint_plain_sample(), 0.01).unwrap().passes());

        let short = tanaka_ladder_check(&kernel, 64, 64, 3000, StreamSeed::new(9));
        assert!(matches!(short, Err(Error::ExcessCensoring { .. })));
    }

    #[test]
    fn eta_series_examples() {
        let lf = EnvironmentModel::default_critical();
        let kernel = PlusSampler::new(&lf, PlusMode::ExactKernel, None).unwrap();
        let mut rng = StreamSeed::new(4).rng();
        let (env, _) = sample_plus_environment(&kernel, 200, &mut rng).unwrap();
        let p = eta_series_partial_sums(&env, 100).unwrap();
        let mut direct = 0.0;
        for k in 0..100 {
            direct += 2.0 * (-env.sums()[k]).exp();
            assert!((p.partial[k] - direct).abs() <= 1e-12 * direct);
        }
        let flat = EnvironmentPath::from_laws(vec![OffspringLaw::linear_fractional(1.0).unwrap(); 50]).unwrap();
        let p = eta_series_partial_sums(&flat, 50).unwrap();
        assert_eq!(p.partial[49], 100.0);
        assert!(p.diagnostic > 0.09);
        assert!(eta_series_partial_sums(&flat, 51).is_err());
    }

    #[test]
    fn eta_series_converges_on_conditioned_walks() {
        let model = srw();
        let kernel = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let mut rng = StreamSeed::new(10).rng();
        let mut ok = 0;
        for _ in 0..200 {
            let (env, _) = sample_plus_environment(&kernel, 4000, &mut rng).unwrap();
            ok += (eta_series_partial_sums(&env, 1000).unwrap().diagnostic < 0.01) as usize;
            let j = jagers_partial_sums(&env);
            assert!(*j.last().unwrap() > 0.3 * 4000.0);
        }
        assert!(ok >= 190, "{ok}");
    }

    #[test]
    fn ultimate_survival_deterministic_doubling() {
        let env = EnvironmentPath::from_laws(vec![OffspringLaw::dirac(2); 30]).unwrap();
        let u = ultimate_survival_given_env(&env).unwrap();
        assert_eq!(u.upper, 1.0);
        assert!(u.lower <= 1.0 && u.exact.is_none());
        let mut rng = StreamSeed::new(0).rng();
        let p = simulate_population(&env, 1, DEFAULT_CEILING, &mut rng).unwrap();
        assert!((p.z[30] * (-env.sums()[30]).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wplus_lf_model() {
        let model = EnvironmentModel::default_critical();
        let kernel = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let short = wplus_and_ultimate_survival(&kernel, 50, 4000, StreamSeed::new(3)).unwrap();
        let long = wplus_and_ultimate_survival(&kernel, 400, 4000, StreamSeed::new(3)).unwrap();
        let ult = long.ultimate.clone().unwrap();
        assert!(ult.value > 0.0 && ult.value < 1.0);
        assert!(
            long.ultimate_lower.value <= ult.value && ult.value <= long.ultimate_upper.value,
            "{:?} {:?} {:?}",
            long.ultimate_lower,
            ult,
            long.ultimate_upper
        );
        let width = |r: &WPlusReport| r.ultimate_upper.value - r.ultimate_lower.value;
        assert!(width(&long) < width(&short));
        assert!(long.positive.agrees_within(&ult, 4.0), "{:?} {:?}", long.positive, ult);
        assert!(long.w_plus.iter().all(|&(w, _)| w >= 0.0));
    }

    #[test]
    fn theta_ratio_two_step_binary_enumeration() {
        // X = ±log 2: p = 1 or 1/4; four equally likely environments
        let model = EnvironmentModel::new(Family::Binary, IncrementLaw::TwoPoint { c: 2f64.ln() }).unwrap();
        let laws = [OffspringLaw::binary(1.0).unwrap(), OffspringLaw::binary(0.25).unwrap()];
        let mut surv = 0.0;
        let mut ln = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                surv += 0.25 * crate::gf::survival_of_laws(&[laws[a].clone(), laws[b].clone()], 0.0).unwrap();
                ln += if a == 0 { 0.25 } else { 0.0 };
            }
        }
        let exact = surv / ln;
        let t = theta_ratio(&model, 2, 200_000, StreamSeed::new(12)).unwrap();
        assert!((t.estimate.value - exact).abs() <= 4.0 * t.estimate.stderr, "{} vs {exact}", t.estimate.value);
        assert!(t.estimate.value > 0.0);
        serde_json::from_str::<ThetaEstimate>(&t.to_json()).unwrap();
    }

    #[test]
    fn theta_series_terms() {
        let model = EnvironmentModel::default_critical();
        let kernel = PlusSampler::new(&model, PlusMode::ExactKernel, None).unwrap();
        let t = theta_series(&model, &kernel, 10, 300, 3000, StreamSeed::new(1)).unwrap();
        assert!(t.terms.iter().all(|&x| x >= 0.0));
        assert!(t.terms[0] > 0.0 && t.estimate.value > t.terms[0]);
        // the k = 0 term is P⁺{survive forever} for one individual
        let w = wplus_and_ultimate_survival(&kernel, 300, 3000, StreamSeed::new(2)).unwrap();
        let u = w.ultimate.unwrap();
        assert!((t.terms[0] - u.value).abs() < 4.0 * u.stderr + 0.02);

        let cond_model = EnvironmentModel::new(Family::Poisson, IncrementLaw::TwoPoint { c: 0.5 }).unwrap();
        let cond = PlusSampler::new(&cond_model, PlusMode::Conditional, None).unwrap();
        let b = theta_series(&cond_model, &cond, 5, 50, 500, StreamSeed::new(4));
        match b {
            Ok(t) => {
                let (lo, hi) = t.bracket.unwrap();
                assert!(lo.value <= hi.value);
            }
            Err(Error::InsufficientK { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
}
