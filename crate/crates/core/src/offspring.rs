//! Offspring laws, their analytic functionals, and i.i.d. environments.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Largest offspring total returned as an exact count (2^53, the largest
/// integer range an `f64` represents without gaps).
pub const COUNT_CEILING: u64 = 1 << 53;

/// Aggregate-law parameters above this switch to normal sampling.
pub const NORMAL_APPROX_THRESHOLD: f64 = 1e7;

const SUM_TOL: f64 = 1e-12;

/// A reproduction law on {0, 1, 2, ...}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringLaw {
    /// Geometric law on N0 with the given mean; its pgf is linear-fractional.
    LinearFractional { mean: f64 },
    Poisson { mean: f64 },
    /// Two children with probability `p`, none otherwise.
    Binary { p: f64 },
    /// Arbitrary probability vector over {0, ..., a*}.
    Bounded { probs: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffspringDraw {
    pub count: u64,
    /// Normal approximation was used for the aggregate law.
    pub approximate: bool,
}

impl OffspringLaw {
    pub fn linear_fractional(mean: f64) -> Result<Self> {
        Self::LinearFractional { mean }.validated()
    }

    pub fn poisson(mean: f64) -> Result<Self> {
        Self::Poisson { mean }.validated()
    }

    pub fn binary(p: f64) -> Result<Self> {
        Self::Binary { p }.validated()
    }

    pub fn bounded(probs: Vec<f64>) -> Result<Self> {
        Self::Bounded { probs }.validated()
    }

    /// Point mass at `k`.
    pub fn dirac(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Self::Bounded { probs }
    }

    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::LinearFractional { mean } | Self::Poisson { mean } => {
                if !(mean.is_finite() && *mean > 0.0) {
                    return Err(Error::InvalidParameter(format!("mean must be finite and > 0, got {mean}")));
                }
            }
            Self::Binary { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::InvalidParameter(format!("binary p must lie in [0,1], got {p}")));
                }
            }
            Self::Bounded { probs } => {
                if probs.is_empty() || probs.iter().any(|q| !(*q >= 0.0 && q.is_finite())) {
                    return Err(Error::InvalidParameter("probabilities must be finite and >= 0".into()));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(Error::InvalidParameter(format!("probabilities sum to {s}, not 1")));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::LinearFractional { mean } | Self::Poisson { mean } => *mean,
            Self::Binary { p } => 2.0 * p,
            Self::Bounded { probs } => probs.iter().enumerate().map(|(y, q)| y as f64 * q).sum(),
        }
    }

    /// Second factorial moment f''(1) = E[Y(Y-1)].
    pub fn factorial_moment2(&self) -> f64 {
        match self {
            Self::LinearFractional { mean } => 2.0 * mean * mean,
            Self::Poisson { mean } => mean * mean,
            Self::Binary { p } => 2.0 * p,
            Self::Bounded { probs } => probs
                .iter()
                .enumerate()
                .map(|(y, q)| (y * y.saturating_sub(1)) as f64 * q)
                .sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        (self.factorial_moment2() + m - m * m).max(0.0)
    }

    pub fn prob(&self, y: u64) -> f64 {
        match self {
            Self::LinearFractional { mean } => {
                let p = 1.0 / (1.0 + mean);
                p * (mean / (1.0 + mean)).powf(y as f64)
            }
            Self::Poisson { mean } => (-mean + y as f64 * mean.ln() - ln_gamma(y as f64 + 1.0)).exp(),
            Self::Binary { p } => match y {
                0 => 1.0 - p,
                2 => *p,
                _ => 0.0,
            },
            Self::Bounded { probs } => probs.get(y as usize).copied().unwrap_or(0.0),
        }
    }

    /// Largest possible offspring count, if finite.
    pub fn support_max(&self) -> Option<u64> {
        match self {
            Self::Binary { .. } => Some(2),
            Self::Bounded { probs } => Some(probs.len() as u64 - 1),
            _ => None,
        }
    }

    pub fn pgf(&self, s: f64) -> Result<f64> {
        check_unit("s", s)?;
        Ok(self.pgf_unchecked(s))
    }

    pub(crate) fn pgf_unchecked(&self, s: f64) -> f64 {
        if s == 1.0 {
            return 1.0;
        }
        match self {
            Self::LinearFractional { mean } => 1.0 / (1.0 + mean * (1.0 - s)),
            Self::Poisson { mean } => (mean * (s - 1.0)).exp(),
            Self::Binary { p } => (1.0 - p) + p * s * s,
            Self::Bounded { probs } => probs.iter().rev().fold(0.0, |acc, q| acc * s + q),
        }
    }

    /// `1 - f(1 - r)`, evaluated without forming `f(1 - r)`.
    pub fn survival_map(&self, r: f64) -> Result<f64> {
        check_unit("r", r)?;
        Ok(self.survival_unchecked(r))
    }

    pub(crate) fn survival_unchecked(&self, r: f64) -> f64 {
        match self {
            Self::LinearFractional { mean } => {
                let mr = mean * r;
                mr / (1.0 + mr)
            }
            Self::Poisson { mean } => -(-mean * r).exp_m1(),
            Self::Binary { p } => p * r * (2.0 - r),
            Self::Bounded { probs } => {
                let l = (-r).ln_1p();
                probs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .filter(|(_, q)| **q > 0.0)
                    .map(|(k, q)| q * -(k as f64 * l).exp_m1())
                    .sum()
            }
        }
    }

    /// Standardized second factorial moment E[Y(Y-1)] / m^2.
    pub fn eta(&self) -> Result<f64> {
        let m = self.nonzero_mean()?;
        Ok(match self {
            Self::LinearFractional { .. } => 2.0,
            Self::Poisson { .. } => 1.0,
            Self::Binary { p } => 1.0 / (2.0 * p),
            Self::Bounded { .. } => self.factorial_moment2() / (m * m),
        })
    }

    /// Standardized truncated second moment sum_{y >= a} y^2 Q({y}) / m^2.
    pub fn zeta(&self, a: u64) -> Result<f64> {
        let m = self.nonzero_mean()?;
        let m2 = m * m;
        match self {
            Self::Binary { p } => Ok(if a <= 2 { 4.0 * p / m2 } else { 0.0 }),
            Self::Bounded { probs } => Ok(probs
                .iter()
                .enumerate()
                .skip(a as usize)
                .map(|(y, q)| (y * y) as f64 * q)
                .sum::<f64>()
                / m2),
            Self::Poisson { mean } => {
                // t_{y+1} / t_y = m (y+1) / y^2
                let mean = *mean;
                Ok(tail_sum(a, |y| (-mean + y * mean.ln() - ln_gamma(y + 1.0)).exp(), |y| {
                    mean * (y + 1.0) / (y * y)
                }) / m2)
            }
            Self::LinearFractional { mean } => {
                let mean = *mean;
                let lq = -(1.0 / mean).ln_1p();
                let lp = -mean.ln_1p();
                // t_{y+1} / t_y = q ((y+1)/y)^2
                Ok(tail_sum(a, |y| (lp + y * lq).exp(), |y| lq.exp() * ((y + 1.0) / y).powi(2)) / m2)
            }
        }
    }

    fn nonzero_mean(&self) -> Result<f64> {
        let m = self.mean();
        if m > 0.0 {
            Ok(m)
        } else {
            Err(Error::ZeroMean)
        }
    }

    /// One draw of the total offspring of `parents` individuals.
    pub fn sample_total(&self, parents: u64, rng: &mut SimRng) -> Result<OffspringDraw> {
        let exact = |count: u64| OffspringDraw { count, approximate: false };
        if parents == 0 {
            return Ok(exact(0));
        }
        let z = parents as f64;
        let draw = match self {
            Self::Poisson { mean } => {
                let lambda = z * mean;
                if lambda > NORMAL_APPROX_THRESHOLD {
                    normal_count(lambda, lambda, rng)
                } else {
                    let d = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    exact(d.sample(rng) as u64)
                }
            }
            Self::LinearFractional { mean } => {
                let mean = *mean;
                if z * mean > NORMAL_APPROX_THRESHOLD {
                    normal_count(z * mean, z * mean * (1.0 + mean), rng)
                } else if parents == 1 {
                    let g = Geometric::new(1.0 / (1.0 + mean)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    exact(g.sample(rng))
                } else {
                    // negative binomial as a gamma-mixed Poisson
                    let g = Gamma::new(z, mean).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    let lambda: f64 = g.sample(rng);
                    if lambda <= 0.0 {
                        exact(0)
                    } else {
                        let d = Poisson::new(lambda).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                        exact(d.sample(rng) as u64)
                    }
                }
            }
            Self::Binary { p } => {
                let p = *p;
                if z * p.min(1.0 - p) > NORMAL_APPROX_THRESHOLD {
                    let k = normal_count(z * p, z * p * (1.0 - p), rng);
                    OffspringDraw { count: 2 * k.count.min(parents), approximate: true }
                } else {
                    let b = Binomial::new(parents, p).map_err(|e| Error::InvalidParameter(e.to_string()))?;
                    exact(2 * b.sample(rng))
                }
            }
            Self::Bounded { probs } => {
                let mut remaining = parents;
                let mut mass = 1.0;
                let mut total: u64 = 0;
                for (k, &q) in probs.iter().enumerate() {
                    if remaining == 0 {
                        break;
                    }
                    let n_k = if mass <= q || k + 1 == probs.len() {
                        remaining
                    } else {
                        let b = Binomial::new(remaining, (q / mass).clamp(0.0, 1.0))
                            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
                        b.sample(rng)
                    };
                    remaining -= n_k;
                    mass -= q;
                    total = match (k as u64).checked_mul(n_k).and_then(|x| total.checked_add(x)) {
                        Some(t) if t <= COUNT_CEILING => t,
                        _ => {
                            return Err(Error::Overflow {
                                parents,
                                partial: parents - remaining,
                                total,
                            })
                        }
                    };
                }
                exact(total)
            }
        };
        if draw.count > COUNT_CEILING {
            return Err(Error::Overflow { parents, partial: parents, total: draw.count });
        }
        Ok(draw)
    }
}

fn normal_count(mean: f64, var: f64, rng: &mut SimRng) -> OffspringDraw {
    let g: f64 = rng.sample(StandardNormal);
    OffspringDraw {
        count: (mean + var.sqrt() * g).round().max(0.0) as u64,
        approximate: true,
    }
}

fn check_unit(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{name} = {x} outside [0,1]")))
    }
}

/// sum_{y >= a} y^2 q(y) for a unimodal pmf, given `q(y)` and the term ratio
/// t_{y+1}/t_y. Stops once the geometric remainder bound drops below 1e-14
/// of the running sum.
fn tail_sum(a: u64, q: impl Fn(f64) -> f64, ratio: impl Fn(f64) -> f64) -> f64 {
    let mut y = a.max(1) as f64;
    let mut term = y * y * q(y);
    let mut sum = 0.0;
    loop {
        sum += term;
        let r = ratio(y);
        if r < 1.0 {
            let bound = term * r / (1.0 - r);
            if bound <= 1e-14 * sum || term == 0.0 {
                return sum;
            }
        }
        term *= r;
        y += 1.0;
        if !term.is_finite() {
            // restart from the log-space value to avoid drift
            term = y * y * q(y);
        }
    }
}

/// Law of the increments X = log m(Q).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IncrementLaw {
    /// +c or -c with probability 1/2 each.
    TwoPoint { c: f64 },
    Gaussian { sigma: f64 },
    /// Symmetric Pareto: |X| >= 1 with P(|X| > x) = x^-alpha.
    TwoSidedPareto { alpha: f64 },
}

impl IncrementLaw {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Self::TwoPoint { c } => c > 0.0 && c.is_finite(),
            Self::Gaussian { sigma } => sigma > 0.0 && sigma.is_finite(),
            Self::TwoSidedPareto { alpha } => alpha > 0.0 && alpha < 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("degenerate or invalid increment law {self:?}")))
        }
    }

    #[inline]
    pub fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            Self::TwoPoint { c } => {
                if rng.random::<bool>() {
                    c
                } else {
                    -c
                }
            }
            Self::Gaussian { sigma } => sigma * rng.sample::<f64, _>(StandardNormal),
            Self::TwoSidedPareto { alpha } => {
                let u: f64 = 1.0 - rng.random::<f64>();
                let mag = u.powf(-1.0 / alpha);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            }
        }
    }

    /// Least upper bound of the support.
    pub fn sup(&self) -> f64 {
        match *self {
            Self::TwoPoint { c } => c,
            _ => f64::INFINITY,
        }
    }

    /// All three laws are symmetric, which pins Spitzer's constant at 1/2.
    pub fn rho(&self) -> f64 {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    LinearFractional,
    Poisson,
    /// p = e^X / 2, so X <= log 2 is required.
    Binary,
    /// Every generation uses the same law (degenerate environment).
    Fixed { law: OffspringLaw },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPolicy {
    /// Offset of the child stream this model draws from inside an experiment.
    #[serde(default)]
    pub stream_offset: u64,
}

/// An i.i.d. environment: a law family parametrized by its log-mean X,
/// with X drawn from an increment law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub increment: Option<IncrementLaw>,
    #[serde(default, rename = "seed-policy")]
    pub seed_policy: SeedPolicy,
}

impl EnvironmentModel {
    pub fn new(family: Family, increment: IncrementLaw) -> Result<Self> {
        let m = Self { family, increment: Some(increment), seed_policy: SeedPolicy::default() };
        m.validate()?;
        Ok(m)
    }

    pub fn fixed(law: OffspringLaw) -> Result<Self> {
        let m = Self { family: Family::Fixed { law }, increment: None, seed_policy: SeedPolicy::default() };
        m.validate()?;
        Ok(m)
    }

    /// Linear-fractional laws with X = +-log 2.
    pub fn default_critical() -> Self {
        Self::new(Family::LinearFractional, IncrementLaw::TwoPoint { c: std::f64::consts::LN_2 }).unwrap()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.family, &self.increment) {
            (Family::Fixed { law }, None) => {
                law.validate()?;
                if law.mean() <= 0.0 {
                    return Err(Error::ZeroMean);
                }
                Ok(())
            }
            (Family::Fixed { .. }, Some(_)) => {
                Err(Error::InvalidParameter("fixed environments take no increment law".into()))
            }
            (_, None) => Err(Error::InvalidParameter("random families need an increment law".into())),
            (fam, Some(inc)) => {
                inc.validate()?;
                if matches!(fam, Family::Binary) && inc.sup() > std::f64::consts::LN_2 {
                    return Err(Error::InvalidParameter(
                        "binary family needs increments bounded by log 2".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    /// Spitzer's constant when known analytically.
    pub fn rho(&self) -> Option<f64> {
        self.increment.map(|i| i.rho())
    }

    /// Lattice span when the walk is +-c, for which v(x) = floor(x/c) + 1.
    pub fn lattice_span(&self) -> Option<f64> {
        match self.increment {
            Some(IncrementLaw::TwoPoint { c }) => Some(c),
            _ => None,
        }
    }

    /// True for the oscillating (random-increment) models.
    pub fn is_critical(&self) -> bool {
        self.increment.is_some()
    }

    #[inline]
    pub fn sample_increment(&self, rng: &mut SimRng) -> f64 {
        match (&self.increment, &self.family) {
            (Some(inc), _) => inc.sample(rng),
            (None, Family::Fixed { law }) => law.mean().ln(),
            (None, _) => unreachable!("validated model"),
        }
    }

    /// Offspring law with log-mean `x`. For the unbounded families the mean is
    /// built from x clamped to [-LAW_LOG_MEAN_CAP, LAW_LOG_MEAN_CAP] so that
    /// e^x stays a normal float; the walk keeps the unclamped x.
    pub fn law_for(&self, x: f64) -> Result<OffspringLaw> {
        let m = if x.is_nan() { x } else { x.clamp(-LAW_LOG_MEAN_CAP, LAW_LOG_MEAN_CAP).exp() };
        let bad = || Error::InvalidParameter(format!("log-mean {x} gives a non-finite or zero mean"));
        match &self.family {
            Family::Fixed { law } => Ok(law.clone()),
            Family::LinearFractional => {
                if m.is_finite() && m > 0.0 {
                    Ok(OffspringLaw::LinearFractional { mean: m })
                } else {
                    Err(bad())
                }
            }
            Family::Poisson => {
                if m.is_finite() && m > 0.0 {
                    Ok(OffspringLaw::Poisson { mean: m })
                } else {
                    Err(bad())
                }
            }
            Family::Binary => {
                let p = m / 2.0;
                if !(p > 0.0) || p > 1.0 + 1e-12 {
                    return Err(Error::InvalidParameter(format!("binary family sampled X = {x} > log 2")));
                }
                Ok(OffspringLaw::Binary { p: p.min(1.0) })
            }
        }
    }

    pub fn sample_step(&self, rng: &mut SimRng) -> Result<(f64, OffspringLaw)> {
        let x = self.sample_increment(rng);
        Ok((x, self.law_for(x)?))
    }
}

/// Bound on |log m| used when building unbounded-family laws from heavy-tailed
/// increments. Beyond it the law is numerically indistinguishable from its limit.
pub const LAW_LOG_MEAN_CAP: f64 = 700.0;

/// Sum accumulated in double-double; `value()` is the rounded total. Sums of
/// lattice increments such as +-c come out as exactly round(j*c), so a walk
/// that returns to 0 reads exactly 0.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    hi: f64,
    lo: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) -> f64 {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
        self.hi + self.lo
    }
}

/// A realized environment Q_1..Q_n with X_k = log m(Q_k) and S_0 = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentPath {
    laws: Vec<OffspringLaw>,
    increments: Vec<f64>,
    sums: Vec<f64>,
    #[serde(skip)]
    acc: (f64, f64),
}

impl Default for EnvironmentPath {
    fn default() -> Self {
        Self::new()
    }
}

impl EnvironmentPath {
    pub fn new() -> Self {
        Self { laws: Vec::new(), increments: Vec::new(), sums: vec![0.0], acc: (0.0, 0.0) }
    }

    pub fn with_capacity(n: usize) -> Self {
        let mut sums = Vec::with_capacity(n + 1);
        sums.push(0.0);
        Self { laws: Vec::with_capacity(n), increments: Vec::with_capacity(n), sums, acc: (0.0, 0.0) }
    }

    /// Environment from explicit laws; increments are their log-means.
    pub fn from_laws(laws: Vec<OffspringLaw>) -> Result<Self> {
        let mut env = Self::with_capacity(laws.len());
        for law in laws {
            law.validate()?;
            let m = law.mean();
            if m <= 0.0 {
                return Err(Error::ZeroMean);
            }
            env.push(m.ln(), law);
        }
        Ok(env)
    }

    /// Append Q_{n+1} whose log-mean is `x`.
    #[inline]
    pub fn push(&mut self, x: f64, law: OffspringLaw) {
        let mut acc = CompensatedSum { hi: self.acc.0, lo: self.acc.1 };
        let s = acc.add(x);
        self.acc = (acc.hi, acc.lo);
        self.increments.push(x);
        self.sums.push(s);
        self.laws.push(law);
    }

    pub fn clear(&mut self) {
        self.laws.clear();
        self.increments.clear();
        self.sums.clear();
        self.sums.push(0.0);
        self.acc = (0.0, 0.0);
    }

    /// Number of generations n.
    pub fn len(&self) -> usize {
        self.laws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.laws.is_empty()
    }

    /// Q_1..Q_n (`laws()[j - 1]` is Q_j).
    pub fn laws(&self) -> &[OffspringLaw] {
        &self.laws
    }

    /// X_1..X_n.
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// S_0..S_n.
    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    /// First `k` generations.
    pub fn prefix(&self, k: usize) -> Self {
        let k = k.min(self.len());
        let mut env = Self::with_capacity(k);
        for j in 0..k {
            env.push(self.increments[j], self.laws[j].clone());
        }
        env
    }
}

pub fn sample_environment(model: &EnvironmentModel, n: usize, rng: &mut SimRng) -> Result<EnvironmentPath> {
    let mut env = EnvironmentPath::with_capacity(n);
    for _ in 0..n {
        let (x, law) = model.sample_step(rng)?;
        env.push(x, law);
    }
    Ok(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeed;
    use crate::stats::{ks_unweighted, Moments};
    use proptest::prelude::*;

    fn all_families() -> Vec<OffspringLaw> {
        vec![
            OffspringLaw::linear_fractional(1.3).unwrap(),
            OffspringLaw::poisson(0.7).unwrap(),
            OffspringLaw::binary(0.4).unwrap(),
            OffspringLaw::bounded(vec![0.2, 0.3, 0.1, 0.4]).unwrap(),
        ]
    }

    #[test]
    fn means() {
        assert_eq!(OffspringLaw::poisson(2.5).unwrap().mean(), 2.5);
        assert_eq!(OffspringLaw::binary(0.5).unwrap().mean(), 1.0);
        assert_eq!(OffspringLaw::bounded(vec![0.25; 4]).unwrap().mean(), 1.5);
    }

    #[test]
    fn pgf_examples() {
        let b = OffspringLaw::binary(0.3).unwrap();
        for s in [0.0, 0.2, 0.9] {
            assert!((b.pgf(s).unwrap() - (0.7 + 0.3 * s * s)).abs() < 1e-15);
        }
        let p = OffspringLaw::poisson(1.0).unwrap();
        assert!((p.pgf(0.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let g = OffspringLaw::linear_fractional(1.0).unwrap();
        assert_eq!(g.pgf(0.0).unwrap(), 0.5);
        assert!(g.pgf(1.1).is_err());
        for law in all_families() {
            assert_eq!(law.pgf(1.0).unwrap(), 1.0);
        }
    }

    #[test]
    fn pgf_matches_pmf_series() {
        for law in all_families() {
            for s in [0.0, 0.35, 0.8] {
                let series: f64 = (0u64..200).map(|y| law.prob(y) * f64::powi(s, y as i32)).sum();
                assert!((series - law.pgf(s).unwrap()).abs() < 1e-13, "{law:?} s={s}");
            }
        }
    }

    #[test]
    fn survival_map_examples() {
        for law in all_families() {
            assert_eq!(law.survival_map(0.0).unwrap(), 0.0);
        }
        assert_eq!(OffspringLaw::binary(0.5).unwrap().survival_map(1.0).unwrap(), 0.5);
        let v = OffspringLaw::poisson(1.0).unwrap().survival_map(1e-12).unwrap();
        let expect = 1e-12 * (1.0 - 5e-13);
        assert!(((v - expect) / expect).abs() < 1e-15);
        assert!(OffspringLaw::poisson(1.0).unwrap().survival_map(-0.1).is_err());
    }

    #[test]
    fn survival_map_tiny_r_is_linear() {
        for law in all_families() {
            let r = 1e-300;
            let v = law.survival_map(r).unwrap();
            let rel = (v / (law.mean() * r) - 1.0).abs();
            assert!(rel < 1e-14, "{law:?}: {rel}");
        }
    }

    #[test]
    fn eta_examples() {
        for m in [0.3, 1.0, 4.0] {
            assert_eq!(OffspringLaw::poisson(m).unwrap().eta().unwrap(), 1.0);
            assert_eq!(OffspringLaw::linear_fractional(m).unwrap().eta().unwrap(), 2.0);
        }
        assert_eq!(OffspringLaw::dirac(1).eta().unwrap(), 0.0);
        assert_eq!(OffspringLaw::dirac(0).eta(), Err(Error::ZeroMean));
    }

    #[test]
    fn eta_matches_moment_definition() {
        for law in all_families() {
            let m = law.mean();
            let fm: f64 = (0u64..400).map(|y| (y * y.saturating_sub(1)) as f64 * law.prob(y)).sum();
            assert!((law.eta().unwrap() - fm / (m * m)).abs() < 1e-12, "{law:?}");
        }
    }

    #[test]
    fn zeta_examples() {
        let b = OffspringLaw::bounded(vec![0.1, 0.5, 0.2, 0.2]).unwrap();
        assert_eq!(b.zeta(4).unwrap(), 0.0);
        for law in all_families() {
            let m = law.mean();
            let z0 = law.zeta(0).unwrap();
            let want = law.eta().unwrap() + 1.0 / m;
            assert!((z0 - want).abs() < 1e-10 * want, "{law:?}: {z0} vs {want}");
        }
        // sum_{y>=2} y^2 e^-1 / y! = E[Y^2] - P(Y=1) = 2 - e^-1
        let p = OffspringLaw::poisson(1.0).unwrap();
        let want = 2.0 - (-1f64).exp();
        assert!((p.zeta(2).unwrap() - want).abs() < 1e-10 * want);
    }

    #[test]
    fn zeta_matches_direct_tail() {
        for law in [OffspringLaw::poisson(3.7).unwrap(), OffspringLaw::linear_fractional(2.2).unwrap()] {
            let m = law.mean();
            for a in [0u64, 1, 3, 10, 25] {
                let direct: f64 = (a..2000).map(|y| (y * y) as f64 * law.prob(y)).sum::<f64>() / (m * m);
                let z = law.zeta(a).unwrap();
                assert!((z - direct).abs() <= 1e-10 * direct.max(1e-300), "{law:?} a={a}: {z} vs {direct}");
            }
        }
    }

    proptest! {
        #[test]
        fn pgf_and_survival_complement(m in 0.05f64..20.0, p in 0.01f64..1.0, r in 1e-6f64..1.0,
                                       w in proptest::collection::vec(0.0f64..1.0, 2..6)) {
            let tot: f64 = w.iter().sum::<f64>().max(1e-9);
            let mut probs: Vec<f64> = w.iter().map(|x| x / tot).collect();
            let s: f64 = probs[1..].iter().sum();
            probs[0] = 1.0 - s;
            prop_assume!(probs[0] >= 0.0);
            let laws = [
                OffspringLaw::LinearFractional { mean: m },
                OffspringLaw::Poisson { mean: m },
                OffspringLaw::Binary { p },
                OffspringLaw::Bounded { probs },
            ];
            for law in laws {
                prop_assert_eq!(law.pgf(1.0).unwrap(), 1.0);
                let sum = law.survival_map(r).unwrap() + law.pgf(1.0 - r).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                if law.mean() > 0.0 {
                    prop_assert!(law.zeta(2).unwrap() / 2.0 <= law.eta().unwrap() + 1e-12);
                }
            }
        }
    }

    #[test]
    fn sample_total_trivial_cases() {
        let mut rng = StreamSeed::new(3).rng();
        for law in all_families() {
            assert_eq!(law.sample_total(0, &mut rng).unwrap().count, 0);
        }
        assert_eq!(OffspringLaw::dirac(1).sample_total(7, &mut rng).unwrap().count, 7);
        assert_eq!(OffspringLaw::binary(1.0).unwrap().sample_total(5, &mut rng).unwrap().count, 10);
    }

    #[test]
    fn sample_total_mean_within_four_sigma() {
        let z = 20u64;
        for law in all_families() {
            let mut rng = StreamSeed::new(11).rng();
            let m: Moments = (0..100_000)
                .map(|_| law.sample_total(z, &mut rng).unwrap().count as f64 / z as f64)
                .collect();
            let sd = (law.variance() / z as f64 / 1e5).sqrt();
            assert!((m.mean - law.mean()).abs() < 4.0 * sd, "{law:?}: {} vs {}", m.mean, law.mean());
        }
    }

    #[test]
    fn aggregate_matches_per_individual() {
        let z = 50;
        for (i, law) in all_families().into_iter().enumerate() {
            let mut rng = StreamSeed::new(100 + i as u64).rng();
            let agg: Vec<f64> = (0..10_000).map(|_| law.sample_total(z, &mut rng).unwrap().count as f64).collect();
            let naive: Vec<f64> = (0..10_000)
                .map(|_| (0..z).map(|_| law.sample_total(1, &mut rng).unwrap().count).sum::<u64>() as f64)
                .collect();
            // p > 0.01 is equivalent to D below the alpha = 0.01 critical value
            let ks = ks_unweighted(&agg, &naive, 0.01).unwrap();
            assert!(ks.passes(), "{law:?}: {ks:?}");
        }
    }

    #[test]
    fn large_aggregates_are_flagged() {
        let mut rng = StreamSeed::new(5).rng();
        let d = OffspringLaw::poisson(2.0).unwrap().sample_total(10_000_000, &mut rng).unwrap();
        assert!(d.approximate);
        assert!((d.count as f64 - 2e7).abs() < 6.0 * 2e7f64.sqrt());
        let d = OffspringLaw::poisson(2.0).unwrap().sample_total(1000, &mut rng).unwrap();
        assert!(!d.approximate);
    }

    #[test]
    fn environment_paths() {
        let model = EnvironmentModel::new(Family::Poisson, IncrementLaw::TwoPoint { c: 1.0 }).unwrap();
        let mut rng = StreamSeed::new(1).rng();
        let env = sample_environment(&model, 0, &mut rng).unwrap();
        assert_eq!(env.sums(), &[0.0]);
        assert!(env.laws().is_empty());

        let inc = IncrementLaw::TwoPoint { c: 1.0 };
        let xs: Moments = (0..1_000_000).map(|_| inc.sample(&mut rng)).collect();
        assert!(xs.mean.abs() < 4.0 / 1e3);

        let model = EnvironmentModel::new(Family::LinearFractional, IncrementLaw::Gaussian { sigma: 0.5 }).unwrap();
        let env = sample_environment(&model, 10_000, &mut rng).unwrap();
        assert_eq!(env.sums()[0], 0.0);
        assert!(env.sums().iter().all(|s| s.is_finite()));
        for (k, law) in env.laws().iter().enumerate() {
            assert!((law.mean().ln() - env.increments()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn lattice_walk_sums_are_exact() {
        let c = std::f64::consts::LN_2;
        let mut env = EnvironmentPath::new();
        let steps = [1, 1, 1, -1, -1, -1, 1, -1, 1, 1, 1, 1, -1, -1, -1, -1];
        let mut j = 0i64;
        for s in steps {
            j += s;
            env.push(s as f64 * c, OffspringLaw::linear_fractional((s as f64 * c).exp()).unwrap());
            assert_eq!(*env.sums().last().unwrap(), j as f64 * c);
        }
    }

    #[test]
    fn binary_family_constraints() {
        assert!(EnvironmentModel::new(Family::Binary, IncrementLaw::Gaussian { sigma: 1.0 }).is_err());
        assert!(EnvironmentModel::new(Family::Binary, IncrementLaw::TwoPoint { c: 1.0 }).is_err());
        let m = EnvironmentModel::new(Family::Binary, IncrementLaw::TwoPoint { c: 0.5 }).unwrap();
        assert!(m.law_for(0.8).is_err());
        assert!(matches!(m.law_for(0.5).unwrap(), OffspringLaw::Binary { .. }));
        assert!(EnvironmentModel::new(Family::Poisson, IncrementLaw::Gaussian { sigma: 0.0 }).is_err());
    }

    #[test]
    fn model_json_roundtrip() {
        let m = EnvironmentModel::default_critical();
        let s = m.to_json();
        assert!(s.contains("\"family\""));
        assert!(s.contains("\"seed-policy\""));
        assert_eq!(EnvironmentModel::from_json(&s).unwrap(), m);
        let j = r#"{"family":{"kind":"poisson"},"increment":{"kind":"gaussian","sigma":1.0}}"#;
        assert_eq!(EnvironmentModel::from_json(j).unwrap().rho(), Some(0.5));
        let bad = r#"{"family":{"kind":"poisson"}}"#;
        assert!(EnvironmentModel::from_json(bad).is_err());
    }
}
