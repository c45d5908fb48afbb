//! Forward simulation of the quenched branching process and annealed
//! survival estimation.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gf::survival_given_env;
use crate::offspring::{EnvironmentModel, EnvironmentPath, OffspringLaw};
use crate::rng::{par_batches, tree_reduce, SimRng, StreamSeed};
use crate::stats::{wilson_interval, Estimate, Moments, Provenance};

pub const DEFAULT_CEILING: f64 = 1e6;
pub const DEFAULT_REJECTION_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepFlag {
    Exact,
    /// Drawn from a Gaussian aggregate, either because the offspring
    /// parameter was huge or because Z passed the ceiling.
    AggregateNormal,
}

/// Z_0..Z_n with the environment's partial sums. Counts below the ceiling
/// are exact integers stored as f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationPath {
    pub z: Vec<f64>,
    /// flags[k] describes the step into generation k; flags[0] is Exact.
    pub flags: Vec<StepFlag>,
    pub sums: Vec<f64>,
}

impl PopulationPath {
    pub fn z0(&self) -> f64 {
        self.z[0]
    }

    pub fn len(&self) -> usize {
        self.z.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn survives(&self) -> bool {
        *self.z.last().unwrap() > 0.0
    }

    pub fn any_approximate(&self) -> bool {
        self.flags.contains(&StepFlag::AggregateNormal)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,Z,mu,flag")?;
        let mu = conditional_means(self);
        for k in 0..self.z.len() {
            let flag = match self.flags[k] {
                StepFlag::Exact => "exact",
                StepFlag::AggregateNormal => "aggregate-normal",
            };
            writeln!(w, "{k},{},{},{flag}", self.z[k], mu[k])?;
        }
        Ok(())
    }
}

/// Simulate Z given the environment. While Z exceeds `ceiling` the
/// population moves in log space,
/// log Z_k = log Z_{k-1} + X_k + N(0, σ²(Q_k) / (Z_{k-1} m_k²)),
/// and drops back to exact integer sampling once it falls below.
pub fn simulate_population(env: &EnvironmentPath, z0: u64, ceiling: f64, rng: &mut SimRng) -> Result<PopulationPath> {
    let n = env.len();
    let mut z = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n + 1);
    z.push(z0 as f64);
    flags.push(StepFlag::Exact);
    let mut cur = z0 as f64;
    for (law, &x) in env.laws().iter().zip(env.increments()) {
        let (next, flag) = step_population(law, x, cur, ceiling, rng)?;
        cur = next;
        z.push(next);
        flags.push(flag);
    }
    Ok(PopulationPath { z, flags, sums: env.sums().to_vec() })
}

/// One generation from `cur` individuals under `law` with log-mean `x`.
pub(crate) fn step_population(law: &OffspringLaw, x: f64, cur: f64, ceiling: f64, rng: &mut SimRng) -> Result<(f64, StepFlag)> {
    if cur == 0.0 {
        return Ok((0.0, StepFlag::Exact));
    }
    if cur > ceiling {
        let m = law.mean();
        let sd = (law.variance() / (cur * m * m)).sqrt();
        let g: f64 = rng.sample(StandardNormal);
        let next = (cur * (x + sd * g).exp()).round();
        return Ok((next, StepFlag::AggregateNormal));
    }
    let d = law.sample_total(cur.round() as u64, rng)?;
    let f = if d.approximate { StepFlag::AggregateNormal } else { StepFlag::Exact };
    Ok((d.count as f64, f))
}

/// μ_k = Z_0 e^{S_k}.
pub fn conditional_means(path: &PopulationPath) -> Vec<f64> {
    path.sums.iter().map(|s| path.z0() * s.exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledPath {
    pub t: Vec<f64>,
    pub values: Vec<f64>,
}

impl RescaledPath {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value")?;
        for (t, v) in self.t.iter().zip(&self.values) {
            writeln!(w, "{t},{v}")?;
        }
        Ok(())
    }
}

/// Z_{r+i} / μ_{r+i} on the grid t = i / (n - r), i = 0..n-r.
pub fn rescaled_path(path: &PopulationPath, r: usize) -> Result<RescaledPath> {
    let n = path.len();
    if r > n {
        return Err(Error::OutOfRange(format!("r = {r} > n = {n}")));
    }
    if path.z0() < 1.0 {
        return Err(Error::InvalidParameter("rescaling needs Z_0 >= 1".into()));
    }
    let span = n - r;
    let (mut t, mut values) = (Vec::with_capacity(span + 1), Vec::with_capacity(span + 1));
    for i in 0..=span {
        let k = r + i;
        t.push(if span == 0 { 0.0 } else { i as f64 / span as f64 });
        values.push(path.z[k] / (path.z0() * path.sums[k].exp()));
    }
    Ok(RescaledPath { t, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurvivalMode {
    Naive,
    RaoBlackwell,
}

/// Draw an environment of length n into `env`, reusing its storage.
pub(crate) fn refill_environment(model: &EnvironmentModel, n: usize, env: &mut EnvironmentPath, rng: &mut SimRng) -> Result<()> {
    env.clear();
    for _ in 0..n {
        let (x, law) = model.sample_step(rng)?;
        env.push(x, law);
    }
    Ok(())
}

/// Annealed P{Z_n > 0} from Z_0 = 1.
pub fn estimate_survival(
    model: &EnvironmentModel,
    n: usize,
    replicates: usize,
    source: StreamSeed,
    mode: SurvivalMode,
) -> Result<Estimate> {
    if n == 0 || replicates == 0 {
        return Err(Error::InvalidParameter("estimate_survival needs n, N >= 1".into()));
    }
    let prov = Provenance::of(source, replicates);
    match mode {
        SurvivalMode::Naive => {
            let parts: Vec<Result<u64>> = par_batches(source, replicates, |rng, _, len| {
                let mut env = EnvironmentPath::with_capacity(n);
                let mut alive = 0;
                for _ in 0..len {
                    refill_environment(model, n, &mut env, rng)?;
                    if simulate_population(&env, 1, DEFAULT_CEILING, rng)?.survives() {
                        alive += 1;
                    }
                }
                Ok(alive)
            });
            let alive: u64 = parts.into_iter().sum::<Result<u64>>()?;
            let mut e = wilson_interval(alive, replicates as u64, 0.95)?;
            e.method = "naive".into();
            Ok(e.with_provenance(prov))
        }
        SurvivalMode::RaoBlackwell => {
            let parts: Vec<Result<Moments>> = par_batches(source, replicates, |rng, _, len| {
                let mut env = EnvironmentPath::with_capacity(n);
                let mut m = Moments::default();
                for _ in 0..len {
                    refill_environment(model, n, &mut env, rng)?;
                    m.push(survival_given_env(&env, 0, 0.0)?);
                }
                Ok(m)
            });
            let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
            let m = tree_reduce(parts, Moments::merge).unwrap();
            Ok(m.estimate(0.95, "rao-blackwell").with_provenance(prov))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedSample {
    pub env: EnvironmentPath,
    pub path: PopulationPath,
    pub rejections: u64,
}

/// One (environment, population) pair conditioned on Z_n > 0, by plain
/// rejection. Extinct runs are abandoned at the generation they die out.
pub fn sample_conditioned_on_survival(
    model: &EnvironmentModel,
    n: usize,
    z0: u64,
    budget: u64,
    rng: &mut SimRng,
) -> Result<ConditionedSample> {
    if z0 == 0 {
        return Err(Error::InvalidParameter("Z_0 = 0 never survives".into()));
    }
    let mut env = EnvironmentPath::with_capacity(n);
    let mut z = Vec::with_capacity(n + 1);
    let mut flags = Vec::with_capacity(n + 1);
    for attempt in 0..budget {
        env.clear();
        z.clear();
        flags.clear();
        z.push(z0 as f64);
        flags.push(StepFlag::Exact);
        let mut cur = z0 as f64;
        for _ in 0..n {
            let (x, law) = model.sample_step(rng)?;
            let (next, flag) = step_population(&law, x, cur, DEFAULT_CEILING, rng)?;
            env.push(x, law);
            z.push(next);
            flags.push(flag);
            cur = next;
            if cur == 0.0 {
                break;
            }
        }
        if cur > 0.0 {
            let path = PopulationPath { z: z.clone(), flags: flags.clone(), sums: env.sums().to_vec() };
            return Ok(ConditionedSample { env, path, rejections: attempt });
        }
    }
    Err(Error::BudgetExceeded { budget, detail: format!("acceptance estimate < {:.3e}", 1.0 / budget as f64) })
}

/// `count` independent conditioned samples, one stream per slot.
pub fn conditioned_samples(
    model: &EnvironmentModel,
    n: usize,
    count: usize,
    source: StreamSeed,
) -> Result<Vec<ConditionedSample>> {
    let parts: Vec<Result<Vec<ConditionedSample>>> = par_batches(source, count, |rng, _, len| {
        (0..len)
            .map(|_| sample_conditioned_on_survival(model, n, 1, DEFAULT_REJECTION_BUDGET, rng))
            .collect()
    });
    let mut out = Vec::with_capacity(count);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
