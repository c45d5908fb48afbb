//! Shared statistical utilities: result carrier, proportion intervals,
//! streaming moments, weighted ECDFs, the two-sample KS test, log-log slope
//! fits and a percentile bootstrap for ratios.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{SimRng, StreamSeed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub stream: u64,
    /// Number of child streams consumed (one per batch).
    pub streams: u64,
}

impl Provenance {
    pub fn of(source: StreamSeed, replicates: usize) -> Self {
        Self {
            seed: source.seed,
            stream: source.stream,
            streams: replicates.div_ceil(crate::rng::BATCH) as u64,
        }
    }
}

/// Point value with a confidence interval and its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub stderr: f64,
    pub n: u64,
    pub method: String,
    pub provenance: Option<Provenance>,
}

impl Estimate {
    pub fn exact(value: f64, method: &str) -> Self {
        Self {
            value,
            ci_low: value,
            ci_high: value,
            stderr: 0.0,
            n: 1,
            method: method.to_string(),
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }

    /// `true` if the two intervals intersect.
    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.ci_low <= other.ci_high && other.ci_low <= self.ci_high
    }

    /// |a - b| <= k * sqrt(se_a^2 + se_b^2)
    pub fn agrees_within(&self, other: &Estimate, k: f64) -> bool {
        let se = self.stderr.hypot(other.stderr);
        (self.value - other.value).abs() <= k * se
    }
}

/// Two-sided standard normal quantile for a confidence level in (0,1).
pub fn z_for_level(level: f64) -> f64 {
    Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

pub fn wilson_interval(successes: u64, trials: u64, level: f64) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::Empty("wilson interval needs trials > 0".into()));
    }
    if successes > trials {
        return Err(Error::OutOfRange(format!("{successes} successes > {trials} trials")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::OutOfRange(format!("confidence level {level}")));
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z = z_for_level(level);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let mut lo = (center - half).max(0.0);
    let mut hi = (center + half).min(1.0);
    if successes == 0 {
        lo = 0.0;
    }
    if successes == trials {
        hi = 1.0;
    }
    Ok(Estimate {
        value: p,
        ci_low: lo.min(p),
        ci_high: hi.max(p),
        stderr: (p * (1.0 - p) / n).sqrt(),
        n: trials,
        method: "wilson".into(),
        provenance: None,
    })
}

/// Streaming mean/variance (Welford) with an exact pairwise merge.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(self, o: Moments) -> Moments {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        let mean = self.mean + d * o.n as f64 / n as f64;
        let m2 = self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64) / n as f64;
        Moments { n, mean, m2 }
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    /// Normal-theory interval for the mean.
    pub fn estimate(&self, level: f64, method: &str) -> Estimate {
        let se = self.stderr();
        let z = z_for_level(level);
        Estimate {
            value: self.mean,
            ci_low: self.mean - z * se,
            ci_high: self.mean + z * se,
            stderr: se,
            n: self.n,
            method: method.to_string(),
            provenance: None,
        }
    }
}

impl FromIterator<f64> for Moments {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut m = Moments::default();
        for x in iter {
            m.push(x);
        }
        m
    }
}

/// Weighted sample: `(value, weight)` pairs with nonnegative weights.
pub type WeightedSample = Vec<(f64, f64)>;

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_size(sample: &[(f64, f64)]) -> f64 {
    let (s, s2) = sample
        .iter()
        .fold((0.0, 0.0), |(s, s2), &(_, w)| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Weighted empirical CDF, right-continuous.
#[derive(Debug, Clone)]
pub struct Ecdf {
    xs: Vec<f64>,
    cum: Vec<f64>,
}

impl Ecdf {
    pub fn new(sample: &[(f64, f64)]) -> Result<Self> {
        let mut s: Vec<(f64, f64)> = sample.to_vec();
        if s.iter().any(|&(x, w)| !(w >= 0.0) || x.is_nan()) {
            return Err(Error::InvalidParameter("negative weight or NaN value".into()));
        }
        let total: f64 = s.iter().map(|p| p.1).sum();
        if !(total > 0.0) {
            return Err(Error::DegenerateSample("zero total weight".into()));
        }
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut xs = Vec::with_capacity(s.len());
        let mut cum = Vec::with_capacity(s.len());
        let mut acc = 0.0;
        for (x, w) in s {
            acc += w;
            if xs.last() == Some(&x) {
                *cum.last_mut().unwrap() = acc / total;
            } else {
                xs.push(x);
                cum.push(acc / total);
            }
        }
        Ok(Self { xs, cum })
    }

    pub fn unweighted(values: &[f64]) -> Result<Self> {
        let s: Vec<(f64, f64)> = values.iter().map(|&x| (x, 1.0)).collect();
        Self::new(&s)
    }

    pub fn eval(&self, x: f64) -> f64 {
        match self.xs.partition_point(|&v| v <= x) {
            0 => 0.0,
            i => self.cum[i - 1],
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.xs.iter().copied().zip(self.cum.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    pub statistic: f64,
    pub threshold: f64,
    pub alpha: f64,
    pub n_eff_a: f64,
    pub n_eff_b: f64,
}

impl KsOutcome {
    pub fn passes(&self) -> bool {
        self.statistic <= self.threshold
    }
}

/// Asymptotic Kolmogorov critical value c(alpha).
pub fn ks_critical(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Two-sample KS on weighted samples. The threshold uses Kish effective
/// sample sizes in place of the raw counts.
pub fn ks_two_sample(a: &[(f64, f64)], b: &[(f64, f64)], alpha: f64) -> Result<KsOutcome> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("ks_two_sample needs two nonempty samples".into()));
    }
    let fa = Ecdf::new(a)?;
    let fb = Ecdf::new(b)?;
    let mut d: f64 = 0.0;
    for &x in fa.xs.iter().chain(fb.xs.iter()) {
        d = d.max((fa.eval(x) - fb.eval(x)).abs());
    }
    let na = effective_size(a);
    let nb = effective_size(b);
    Ok(KsOutcome {
        statistic: d,
        threshold: ks_critical(alpha) * ((na + nb) / (na * nb)).sqrt(),
        alpha,
        n_eff_a: na,
        n_eff_b: nb,
    })
}

/// Unit-weight convenience wrapper around [`ks_two_sample`].
pub fn ks_unweighted(a: &[f64], b: &[f64], alpha: f64) -> Result<KsOutcome> {
    let wa: Vec<_> = a.iter().map(|&x| (x, 1.0)).collect();
    let wb: Vec<_> = b.iter().map(|&x| (x, 1.0)).collect();
    ks_two_sample(&wa, &wb, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
}

/// Least-squares slope of `log y` against `log n`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter("loglog_slope needs at least 3 points".into()));
    }
    if let Some(&(_, y)) = points.iter().find(|p| !(p.1 > 0.0)) {
        return Err(Error::OutOfRange(format!("nonpositive y = {y}")));
    }
    if let Some(&(n, _)) = points.iter().find(|p| !(p.0 > 0.0)) {
        return Err(Error::OutOfRange(format!("nonpositive n = {n}")));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("loglog_slope needs distinct n".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (sse / (k - 2.0) / sxx).sqrt();
    Ok(SlopeFit { slope, intercept, stderr })
}

/// Percentile bootstrap interval for `sum(num) / sum(den)` over paired
/// observations.
pub fn bootstrap_ratio(
    num: &[f64],
    den: &[f64],
    resamples: usize,
    level: f64,
    rng: &mut SimRng,
) -> Result<(f64, f64)> {
    if num.len() != den.len() || num.is_empty() {
        return Err(Error::InvalidParameter("bootstrap needs equal nonempty samples".into()));
    }
    let n = num.len();
    let mut ratios = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            a += num[i];
            b += den[i];
        }
        if b > 0.0 {
            ratios.push(a / b);
        }
    }
    if ratios.len() < resamples / 2 {
        return Err(Error::DegenerateSample("bootstrap denominators vanish".into()));
    }
    ratios.sort_by(f64::total_cmp);
    let q = |p: f64| ratios[((p * (ratios.len() - 1) as f64).round() as usize).min(ratios.len() - 1)];
    let tail = (1.0 - level) / 2.0;
    Ok((q(tail), q(1.0 - tail)))
}
