//! Survival estimation under a finite proxy, lambda sweeps, and bisection
//! for the empirical critical rate.
//!
//! A replica started from a fully-infected origin counts as surviving when
//! it is still active at the horizon or its active set reaches the cap.

use rayon::prelude::*;

use crate::engine::{simulate, Outcome, ProcessKind, ProcessParams, SimOptions, SparseConfig};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};
use crate::meanfield::{lower_bound_lambda, scaled_target};
use crate::rng::StreamSeed;
use crate::stats::{wilson, Z95};

/// Finite stand-in for survival forever.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalProxy {
    pub horizon: f64,
    pub cap: usize,
    pub box_radius: i32,
}

impl SurvivalProxy {
    pub fn defaults_for(d: usize) -> Self {
        SurvivalProxy { horizon: 100.0, cap: if d >= 10 { 2000 } else { 5000 }, box_radius: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || self.cap == 0 || self.box_radius < 1 {
            return Err(Error::Parameter(format!("invalid survival proxy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalEstimate {
    pub lambda: f64,
    pub trials: u64,
    pub survivals: u64,
    pub p_hat: f64,
    pub ci95: (f64, f64),
    pub proxy: SurvivalProxy,
}

impl SurvivalEstimate {
    pub fn std_err(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.trials as f64).sqrt()
    }
}

pub fn estimate_survival(
    kind: ProcessKind,
    d: usize,
    p: &ProcessParams,
    proxy: &SurvivalProxy,
    replicas: u64,
    seed: StreamSeed,
) -> Result<SurvivalEstimate> {
    p.validate()?;
    proxy.validate()?;
    if replicas == 0 {
        return Err(Error::Parameter("need at least one replica".into()));
    }
    let g = LatticeGeometry::boxed(d, proxy.box_radius)?;
    let init = SparseConfig::single(SiteCoord::origin(d));
    let opts = SimOptions::new(proxy.horizon).with_cap(proxy.cap).without_final();
    let survivals = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<u64> {
            let t = simulate(kind, &init, p, &g, &opts, &mut seed.replica(r))?;
            Ok(!matches!(t.outcome, Outcome::Extinct(_)) as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(SurvivalEstimate {
        lambda: p.lambda,
        trials: replicas,
        survivals,
        p_hat: survivals as f64 / replicas as f64,
        ci95: wilson(survivals, replicas, Z95),
        proxy: *proxy,
    })
}

/// The stream used for a probe at `lambda`, so an estimate does not depend
/// on which other probes ran before it.
pub fn probe_seed(seed: StreamSeed, lambda: f64) -> StreamSeed {
    seed.derive(lambda.to_bits())
}

pub fn sweep(
    kind: ProcessKind,
    d: usize,
    p: &ProcessParams,
    lambdas: &[f64],
    proxy: &SurvivalProxy,
    replicas: u64,
    seed: StreamSeed,
) -> Result<Vec<SurvivalEstimate>> {
    lambdas
        .iter()
        .map(|&l| estimate_survival(kind, d, &p.with_lambda(l), proxy, replicas, probe_seed(seed, l)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BisectSettings {
    /// Survival level that defines the crossing.
    pub eps: f64,
    /// Resolution in lambda; `None` means `0.02 / (2d)`.
    pub tol: Option<f64>,
    pub probe_replicas: u64,
    pub bracket_replicas: u64,
    pub lambda_max: f64,
    pub proxy: Option<SurvivalProxy>,
}

impl Default for BisectSettings {
    fn default() -> Self {
        BisectSettings {
            eps: 0.02,
            tol: None,
            probe_replicas: 2000,
            bracket_replicas: 10_000,
            lambda_max: 64.0,
            proxy: None,
        }
    }
}

impl BisectSettings {
    pub fn tol_for(&self, d: usize) -> f64 {
        self.tol.unwrap_or(0.02 / (2.0 * d as f64))
    }

    pub fn proxy_for(&self, d: usize) -> SurvivalProxy {
        self.proxy.unwrap_or_else(|| SurvivalProxy::defaults_for(d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalEstimate {
    pub kind: ProcessKind,
    pub d: usize,
    pub gamma: f64,
    pub delta: f64,
    pub lambda_hat: f64,
    pub threshold_eps: f64,
    pub resolution: f64,
    /// `2d * lambda_hat`.
    pub scaled: f64,
    /// Final bisection bracket.
    pub bracket: (f64, f64),
    /// Largest probe whose Wilson upper bound is below `eps` and smallest
    /// probe whose Wilson lower bound is above it.
    pub ci_bracket: (Option<f64>, Option<f64>),
    /// Every probe, in the order it ran.
    pub probes: Vec<SurvivalEstimate>,
}

impl CriticalEstimate {
    /// `ci_bracket` in scaled units, falling back to the final bracket.
    pub fn scaled_interval(&self) -> (f64, f64) {
        let k = 2.0 * self.d as f64;
        (k * self.ci_bracket.0.unwrap_or(self.bracket.0), k * self.ci_bracket.1.unwrap_or(self.bracket.1))
    }
}

pub fn bisect_critical(
    kind: ProcessKind,
    d: usize,
    base: &ProcessParams,
    settings: &BisectSettings,
    seed: StreamSeed,
) -> Result<CriticalEstimate> {
    let tol = settings.tol_for(d);
    let proxy = settings.proxy_for(d);
    if !(settings.eps > 0.0 && settings.eps < 1.0) || !(tol > 0.0) || settings.lambda_max <= 0.0 {
        return Err(Error::Parameter("eps must lie in (0, 1) and tol, lambda_max be positive".into()));
    }
    base.with_lambda(1.0).validate()?;
    let mut probes = Vec::new();
    let mut probe = |lambda: f64, replicas: u64| -> Result<bool> {
        let p = base.with_lambda(lambda);
        let e = estimate_survival(kind, d, &p, &proxy, replicas, probe_seed(seed, lambda))?;
        probes.push(e);
        Ok(e.p_hat > settings.eps)
    };

    let mut lo = lower_bound_lambda(d, base.gamma, base.delta);
    let mut hi;
    if probe(lo, settings.bracket_replicas)? {
        hi = lo;
        loop {
            lo /= 2.0;
            if lo < tol {
                return Err(Error::Bracket(format!("survival above eps down to lambda = {lo}")));
            }
            if !probe(lo, settings.bracket_replicas)? {
                break;
            }
            hi = lo;
        }
    } else {
        hi = 2.0 * lo;
        loop {
            if hi > settings.lambda_max {
                return Err(Error::Bracket(format!("no survival above eps up to lambda_max = {}", settings.lambda_max)));
            }
            if probe(hi, settings.bracket_replicas)? {
                break;
            }
            lo = hi;
            hi *= 2.0;
        }
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if probe(mid, settings.probe_replicas)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }

    let below = probes.iter().filter(|e| e.ci95.1 < settings.eps).map(|e| e.lambda).fold(None, |m: Option<f64>, l| {
        Some(m.map_or(l, |m| m.max(l)))
    });
    let above = probes.iter().filter(|e| e.ci95.0 > settings.eps).map(|e| e.lambda).fold(None, |m: Option<f64>, l| {
        Some(m.map_or(l, |m| m.min(l)))
    });
    let lambda_hat = 0.5 * (lo + hi);
    Ok(CriticalEstimate {
        kind,
        d,
        gamma: base.gamma,
        delta: base.delta,
        lambda_hat,
        threshold_eps: settings.eps,
        resolution: tol,
        scaled: 2.0 * d as f64 * lambda_hat,
        bracket: (lo, hi),
        ci_bracket: (below, above),
        probes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendTable {
    pub rows: Vec<CriticalEstimate>,
    /// The limit of `2d * lambda_c` as `d` grows.
    pub target: f64,
}

pub fn trend_study(
    kind: ProcessKind,
    d_list: &[usize],
    gamma: f64,
    delta: f64,
    settings: &BisectSettings,
    seed: StreamSeed,
) -> Result<TrendTable> {
    if d_list.is_empty() || d_list.windows(2).any(|w| w[0] >= w[1]) || d_list[0] == 0 {
        return Err(Error::Parameter("d_list must be non-empty, positive and strictly ascending".into()));
    }
    let base = ProcessParams::new(0.0, gamma, delta)?;
    let rows = d_list
        .iter()
        .map(|&d| bisect_critical(kind, d, &base, settings, seed.derive(d as u64)))
        .collect::<Result<_>>()?;
    Ok(TrendTable { rows, target: scaled_target(gamma, delta) })
}
