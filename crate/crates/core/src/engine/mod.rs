//! Event-driven simulation of the two-stage contact process, the two-stage
//! SIR model and the linear `(zeta, theta)` system.
//!
//! All three processes are simulated exactly in law with a next-event
//! scheme: the total rate `R` of every possible transition is maintained
//! incrementally, the clock advances by an `Exp(R)` waiting time, and the
//! transition is picked proportionally to its rate.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};

mod linear;
mod rates;
mod sim;

pub use linear::{project_linear, simulate_linear, LinearTrajectory};
pub use rates::{site_rates, site_rates_contact, site_rates_sir};
pub use sim::{long_run_density, simulate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcessKind {
    Contact,
    Sir,
}

impl ProcessKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessKind::Contact => "contact",
            ProcessKind::Sir => "sir",
        }
    }
}

impl std::str::FromStr for ProcessKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contact" => Ok(ProcessKind::Contact),
            "sir" => Ok(ProcessKind::Sir),
            other => Err(Error::Parameter(format!("unknown process kind `{other}`"))),
        }
    }
}

/// Per-site state. `Recovered` only occurs in the SIR model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SiteState {
    Recovered,
    Healthy,
    Semi,
    Full,
}

impl SiteState {
    pub fn code(self) -> i8 {
        match self {
            SiteState::Recovered => -1,
            SiteState::Healthy => 0,
            SiteState::Semi => 1,
            SiteState::Full => 2,
        }
    }

    pub fn from_code(code: i8) -> Result<Self> {
        match code {
            -1 => Ok(SiteState::Recovered),
            0 => Ok(SiteState::Healthy),
            1 => Ok(SiteState::Semi),
            2 => Ok(SiteState::Full),
            c => Err(Error::Domain(format!("invalid state code {c}"))),
        }
    }

    pub fn is_active(self) -> bool {
        matches!(self, SiteState::Semi | SiteState::Full)
    }
}

/// Infection rate `lambda`, maturation rate `gamma` and extra recovery rate
/// `delta` of a semi-infected site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessParams {
    pub lambda: f64,
    pub gamma: f64,
    pub delta: f64,
}

impl ProcessParams {
    /// `lambda` and `delta` may be zero (degenerate but well-defined limits);
    /// `gamma` must be strictly positive.
    pub fn new(lambda: f64, gamma: f64, delta: f64) -> Result<Self> {
        let p = ProcessParams { lambda, gamma, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda) {
            return Err(Error::Parameter(format!("lambda = {} must be finite and >= 0", self.lambda)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Parameter(format!("gamma = {} must be finite and > 0", self.gamma)));
        }
        if !ok(self.delta) {
            return Err(Error::Parameter(format!("delta = {} must be finite and >= 0", self.delta)));
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        ProcessParams { lambda, ..*self }
    }

    /// Total exit rate of a semi-infected site, `1 + gamma + delta`.
    pub fn semi_exit_rate(&self) -> f64 {
        1.0 + self.gamma + self.delta
    }
}

/// Sparse configuration: absent sites are healthy.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseConfig {
    states: BTreeMap<SiteCoord, SiteState>,
    pub time: f64,
}

impl SparseConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// A single fully-infected site at `x`.
    pub fn single(x: SiteCoord) -> Self {
        let mut c = Self::new();
        c.set(x, SiteState::Full);
        c
    }

    /// Every site of a torus in the same state.
    pub fn uniform(g: &LatticeGeometry, state: SiteState) -> Result<Self> {
        if !g.is_torus() {
            return Err(Error::Domain("uniform initial states need a torus".into()));
        }
        let mut c = Self::new();
        for x in g.sites()? {
            c.set(x, state);
        }
        Ok(c)
    }

    pub fn get(&self, x: &SiteCoord) -> SiteState {
        self.states.get(x).copied().unwrap_or(SiteState::Healthy)
    }

    pub fn set(&mut self, x: SiteCoord, state: SiteState) {
        if state == SiteState::Healthy {
            self.states.remove(&x);
        } else {
            self.states.insert(x, state);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteCoord, SiteState)> {
        self.states.iter().map(|(k, v)| (k, *v))
    }

    /// Number of explicitly stored (non-healthy) sites.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn active_count(&self) -> usize {
        self.states.values().filter(|s| s.is_active()).count()
    }
}

/// The set of fully-infected sites of a configuration.
pub fn fully_infected_set(cfg: &SparseConfig) -> BTreeSet<SiteCoord> {
    cfg.iter()
        .filter(|(_, s)| *s == SiteState::Full)
        .map(|(x, _)| x.clone())
        .collect()
}

/// Sparse linear-system configuration: absent sites are `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearConfig {
    values: BTreeMap<SiteCoord, (u64, u64)>,
    pub time: f64,
}

impl LinearConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every torus site set to `value`. A box has no finite all-sites
    /// configuration of `Z^d`, so it is rejected.
    pub fn uniform(g: &LatticeGeometry, value: (u64, u64)) -> Result<Self> {
        if !g.is_torus() {
            return Err(Error::Domain("infinite-support initial state on a box".into()));
        }
        let mut c = Self::new();
        for x in g.sites()? {
            c.set(x, value);
        }
        Ok(c)
    }

    pub fn get(&self, x: &SiteCoord) -> (u64, u64) {
        self.values.get(x).copied().unwrap_or((0, 0))
    }

    pub fn set(&mut self, x: SiteCoord, value: (u64, u64)) {
        if value == (0, 0) {
            self.values.remove(&x);
        } else {
            self.values.insert(x, value);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SiteCoord, (u64, u64))> {
        self.values.iter().map(|(k, v)| (k, *v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Run controls for [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub horizon: f64,
    /// Stop (and call it survival) once this many sites are active.
    pub cap: Option<usize>,
    pub track_ever_full: bool,
    /// Keep the final configuration in the summary.
    pub keep_final: bool,
    /// Times at which to snapshot the configuration. Snapshots after a cap
    /// stop are not recorded.
    pub sample_times: Vec<f64>,
    /// Restrict snapshots to these sites (all sites when `None`).
    pub sample_sites: Option<Vec<SiteCoord>>,
}

impl SimOptions {
    pub fn new(horizon: f64) -> Self {
        SimOptions {
            horizon,
            cap: None,
            track_ever_full: false,
            keep_final: true,
            sample_times: Vec::new(),
            sample_sites: None,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = Some(cap);
        self
    }

    pub fn tracking_ever_full(mut self) -> Self {
        self.track_ever_full = true;
        self
    }

    pub fn without_final(mut self) -> Self {
        self.keep_final = false;
        self
    }

    pub fn sampled_at(mut self, times: &[f64], sites: Option<Vec<SiteCoord>>) -> Self {
        self.sample_times = times.to_vec();
        self.sample_sites = sites;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Parameter(format!("horizon {} must be finite and > 0", self.horizon)));
        }
        if self.cap == Some(0) {
            return Err(Error::Parameter("cap must be at least 1".into()));
        }
        if self.sample_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::Parameter("sample times must be finite and >= 0".into()));
        }
        if self.sample_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Parameter("sample times must be ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    /// No site in state 1 or 2 remains; carries the extinction time.
    Extinct(f64),
    /// Still active at the horizon.
    Horizon,
    /// Active-set size reached the cap.
    Cap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySummary {
    pub outcome: Outcome,
    pub final_config: Option<SparseConfig>,
    pub peak_active: usize,
    pub event_count: u64,
    pub ever_full: Option<BTreeSet<SiteCoord>>,
    /// One snapshot per entry of `SimOptions::sample_times` that was reached.
    pub samples: Vec<SparseConfig>,
}

impl TrajectorySummary {
    pub fn extinction_time(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Extinct(t) => Some(t),
            _ => None,
        }
    }

    pub fn survived(&self) -> bool {
        !matches!(self.outcome, Outcome::Extinct(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_config_never_stores_healthy() {
        let mut c = SparseConfig::new();
        let o = SiteCoord::origin(2);
        c.set(o.clone(), SiteState::Full);
        assert_eq!(c.len(), 1);
        c.set(o.clone(), SiteState::Healthy);
        assert!(c.is_empty());
        assert_eq!(c.get(&o), SiteState::Healthy);
    }

    #[test]
    fn fully_infected_sets() {
        assert!(fully_infected_set(&SparseConfig::new()).is_empty());
        let mut c = SparseConfig::single(SiteCoord::origin(3));
        c.set(SiteCoord::unit(3, 0), SiteState::Semi);
        let f = fully_infected_set(&c);
        assert_eq!(f.into_iter().collect::<Vec<_>>(), vec![SiteCoord::origin(3)]);
    }

    #[test]
    fn params_validation() {
        assert!(ProcessParams::new(0.5, 1.0, 1.0).is_ok());
        assert!(ProcessParams::new(0.0, 1.0, 0.0).is_ok());
        assert!(ProcessParams::new(-1.0, 1.0, 1.0).is_err());
        assert!(ProcessParams::new(f64::NAN, 1.0, 1.0).is_err());
        assert!(ProcessParams::new(1.0, 0.0, 1.0).is_err());
        assert!(ProcessParams::new(1.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn uniform_configs_need_torus() {
        let b = LatticeGeometry::boxed(2, 2).unwrap();
        assert!(matches!(LinearConfig::uniform(&b, (1, 0)), Err(Error::Domain(_))));
        let t = LatticeGeometry::torus(2, 3).unwrap();
        assert_eq!(LinearConfig::uniform(&t, (1, 0)).unwrap().len(), 9);
        assert_eq!(SparseConfig::uniform(&t, SiteState::Full).unwrap().active_count(), 9);
    }

    #[test]
    fn state_codes_round_trip() {
        for c in -1..=2 {
            assert_eq!(SiteState::from_code(c).unwrap().code(), c);
        }
        assert!(SiteState::from_code(3).is_err());
    }
}
