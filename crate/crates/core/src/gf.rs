//! Quenched survival probabilities by generating-function composition.
//!
//! Every recursion runs on survival probabilities r = 1 - s, never on
//! extinction probabilities, so results as small as 1e-300 keep full
//! relative precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offspring::{EnvironmentPath, OffspringLaw};

fn check_s(s: f64) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("s = {s} outside [0, 1]")))
    }
}

fn check_k(env: &EnvironmentPath, k: usize) -> Result<()> {
    if k <= env.len() {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("k = {k} beyond horizon n = {}", env.len())))
    }
}

/// r_{k,n} = 1 - f_{k,n}(s) for every k = 0..n, from one backward sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuenchedSurvival {
    pub r: Vec<f64>,
    pub s: f64,
}

impl QuenchedSurvival {
    pub fn new(env: &EnvironmentPath, s: f64) -> Result<Self> {
        check_s(s)?;
        let laws = env.laws();
        let n = laws.len();
        let mut r = vec![0.0; n + 1];
        r[n] = 1.0 - s;
        for j in (0..n).rev() {
            r[j] = laws[j].survival_unchecked(r[j + 1]);
        }
        Ok(Self { r, s })
    }

    pub fn at(&self, k: usize) -> f64 {
        self.r[k]
    }
}

/// 1 - f_{k,n}(s): the probability that one individual of generation k
/// has descendants in generation n, with a final thinning by s.
pub fn survival_given_env(env: &EnvironmentPath, k: usize, s: f64) -> Result<f64> {
    check_k(env, k)?;
    survival_of_laws(&env.laws()[k..], s)
}

/// 1 - f_1(f_2(...f_n(s))) for any sequence of laws, including laws with
/// zero mean that cannot appear in an environment path.
pub fn survival_of_laws(laws: &[OffspringLaw], s: f64) -> Result<f64> {
    check_s(s)?;
    let mut r = 1.0 - s;
    for law in laws.iter().rev() {
        r = law.survival_unchecked(r);
    }
    Ok(r)
}

/// g(s) = 1/(1 - f(s)) - 1/(f'(1)(1 - s)), with g(1) = η/2.
pub fn g_eval(law: &OffspringLaw, s: f64) -> Result<f64> {
    check_s(s)?;
    g_survival(law, 1.0 - s)
}

/// g at s = 1 - r, taking r directly so that tiny r keeps its precision.
pub fn g_survival(law: &OffspringLaw, r: f64) -> Result<f64> {
    check_s(r)?;
    let m = law.mean();
    if m <= 0.0 {
        return Err(Error::ZeroMean);
    }
    if r == 0.0 {
        return Ok(law.eta()? / 2.0);
    }
    Ok(match law {
        OffspringLaw::LinearFractional { .. } => 1.0,
        OffspringLaw::Binary { p } => 1.0 / (2.0 * p * (2.0 - r)),
        OffspringLaw::Poisson { mean } => {
            let u = mean * r;
            if u < 1e-3 {
                let u2 = u * u;
                0.5 + u / 12.0 - u * u2 / 720.0 + u * u2 * u2 / 30240.0
            } else {
                1.0 / -(-u).exp_m1() - 1.0 / u
            }
        }
        OffspringLaw::Bounded { probs } => {
            // g = (m r - q) / (q m r) with m r - q = sum_k Q({k}) d_k(r),
            // scaled by r^2 so that nothing underflows
            let q_over_r = law.survival_unchecked(r) / r;
            if q_over_r == 0.0 {
                return Err(Error::DegenerateSample("f(s) = 1 with s < 1".into()));
            }
            let excess: f64 = probs
                .iter()
                .enumerate()
                .skip(2)
                .filter(|(_, w)| **w > 0.0)
                .map(|(k, w)| w * binomial_excess_scaled(k as u64, r))
                .sum();
            excess / (q_over_r * m)
        }
    })
}

/// ((1 - r)^k - 1 + k r) / r^2 without cancellation.
fn binomial_excess_scaled(k: u64, r: f64) -> f64 {
    let kf = k as f64;
    if kf * r > 0.5 {
        return ((kf * (-r).ln_1p()).exp() - 1.0 + kf * r) / (r * r);
    }
    // sum_{i >= 2} C(k, i) (-r)^i / r^2; successive ratios are below 1/6
    let mut term = kf * (kf - 1.0) / 2.0;
    let mut sum = 0.0;
    let mut i = 2.0;
    while term != 0.0 && i <= kf {
        sum += term;
        term *= -(kf - i) * r / (i + 1.0);
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
        i += 1.0;
    }
    sum
}

/// Both sides of the Jirina identity
/// 1/(1 - f_{k,n}(s)) = e^{-(S_n - S_k)}/(1 - s) + sum_{j=k}^{n-1} g_{j+1}(f_{j+1,n}(s)) e^{-(S_j - S_k)}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JirinaCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// |lhs - rhs| / lhs
    pub residual: f64,
}

pub fn jirina_residual(env: &EnvironmentPath, k: usize, s: f64) -> Result<JirinaCheck> {
    let n = env.len();
    if k >= n {
        return Err(Error::OutOfRange(format!("need k < n, got k = {k}, n = {n}")));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(Error::OutOfRange(format!("s = {s} outside [0, 1)")));
    }
    let lhs = 1.0 / survival_given_env(env, k, s)?;
    let sweep = QuenchedSurvival::new(env, s)?;
    let sums = env.sums();
    let laws = env.laws();
    let mut rhs = (-(sums[n] - sums[k])).exp() / (1.0 - s);
    for j in k..n {
        rhs += g_survival(&laws[j], sweep.r[j + 1])? * (-(sums[j] - sums[k])).exp();
    }
    Ok(JirinaCheck { lhs, rhs, residual: (lhs - rhs).abs() / lhs })
}

/// Agresti's lower bound on 1 - f_{k,n}(s):
/// (e^{-(S_n - S_k)}/(1 - s) + sum_{j=k}^{n-1} η_{j+1} e^{-(S_j - S_k)})^{-1}.
pub fn agresti_lower_bound(env: &EnvironmentPath, k: usize, s: f64) -> Result<f64> {
    check_k(env, k)?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::OutOfRange(format!("s = {s} outside [0, 1)")));
    }
    let n = env.len();
    let sums = env.sums();
    let mut den = (-(sums[n] - sums[k])).exp() / (1.0 - s);
    for (j, law) in env.laws().iter().enumerate().skip(k) {
        den += law.eta()? * (-(sums[j] - sums[k])).exp();
    }
    Ok(1.0 / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Horizon {
    Finite(usize),
    /// Ultimate survival, summed over the available environment.
    Infinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LfSurvival {
    pub value: f64,
    /// Bound on |value - truth| from truncating the series; 0 for finite
    /// horizons.
    pub tail_bound: f64,
    /// Number of environment steps used.
    pub terms: usize,
}

/// Closed-form survival from generation k for linear-fractional laws,
/// whose g-coefficients are identically η/2 = 1.
pub fn lf_survival_exact(env: &EnvironmentPath, k: usize, horizon: Horizon) -> Result<LfSurvival> {
    check_k(env, k)?;
    if let Some(j) = env.laws().iter().position(|l| !matches!(l, OffspringLaw::LinearFractional { .. })) {
        return Err(Error::WrongFamily(j));
    }
    let sums = env.sums();
    match horizon {
        Horizon::Finite(n) => {
            if n < k || n > env.len() {
                return Err(Error::OutOfRange(format!("horizon {n} outside [{k}, {}]", env.len())));
            }
            let mut den = (-(sums[n] - sums[k])).exp();
            for &sj in &sums[k..n] {
                den += (-(sj - sums[k])).exp();
            }
            Ok(LfSurvival { value: 1.0 / den, tail_bound: 0.0, terms: n - k })
        }
        Horizon::Infinite => {
            let n = env.len();
            if n == k {
                return Err(Error::InsufficientHorizon { value: f64::NAN, bound: f64::INFINITY });
            }
            let base = sums[k];
            let mut den = 0.0;
            let mut running_min = f64::INFINITY;
            let mut stop = None;
            for (j, &sj) in sums.iter().enumerate().take(n).skip(k) {
                let t = (-(sj - base)).exp();
                if t < 1e-16 * den && sj > running_min + 10.0 {
                    stop = Some(j);
                    break;
                }
                den += t;
                running_min = running_min.min(sj);
            }
            let value = 1.0 / den;
            let tail_bound = match stop {
                Some(j) => {
                    let post_min = sums[j..n].iter().copied().fold(f64::INFINITY, f64::min);
                    let tail = (n - j) as f64 * (-(post_min - base)).exp();
                    value * tail / den
                }
                // the truth lies in [0, value]
                None => value,
            };
            Ok(LfSurvival { value, tail_bound, terms: stop.unwrap_or(n) - k })
        }
    }
}

/// Exponential of the running minimum, the quenched upper bound on survival.
pub fn quenched_bound(env: &EnvironmentPath) -> f64 {
    env.sums().iter().copied().fold(0.0, f64::min).exp()
}
