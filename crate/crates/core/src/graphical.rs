//! Exponential-clock construction of the two-stage SIR model.
//!
//! Every site `x` carries `W(x) ~ Exp(1)`, `Y(x) ~ Exp(1 + delta)` and
//! `Gam(x) ~ Exp(gamma)`; every ordered neighbour pair carries
//! `U(x, y) ~ Exp(lambda)`. A semi-infected site matures after `Gam` unless
//! `Y` rings first; a fully-infected site recovers after `W` and reaches a
//! neighbour after `U` when `U < W`.
//!
//! Sampled bundles derive each clock from a per-bundle key and the clock's
//! identity, so clocks cost nothing until read and the same bundle always
//! returns the same value.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::engine::{ProcessParams, SiteState, SparseConfig};
use crate::error::{Error, Result};
use crate::lattice::{l1_norm, LatticeGeometry, SiteCoord};
use crate::rng::{mix64, SimRng, StreamSeed};
use crate::saw::WalkShape;
use crate::stats::{wilson, Z95};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    W,
    Y,
    Gam,
    U,
}

impl Clock {
    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

/// Explicit clock values, e.g. for hand-built examples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClockTables {
    pub w: BTreeMap<SiteCoord, f64>,
    pub y: BTreeMap<SiteCoord, f64>,
    pub gam: BTreeMap<SiteCoord, f64>,
    pub u: BTreeMap<(SiteCoord, SiteCoord), f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Keyed(u64),
    Table(ClockTables),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClockBundle {
    region: BTreeSet<SiteCoord>,
    params: ProcessParams,
    source: Source,
}

/// Independent clocks for every site and ordered neighbour pair of `region`.
pub fn sample_clocks<R: Rng + ?Sized>(
    region: &BTreeSet<SiteCoord>,
    p: &ProcessParams,
    rng: &mut R,
) -> Result<ClockBundle> {
    ClockBundle::checked(region.clone(), *p, Source::Keyed(rng.random()))
}

impl ClockBundle {
    fn checked(region: BTreeSet<SiteCoord>, params: ProcessParams, source: Source) -> Result<Self> {
        params.validate()?;
        let Some(first) = region.first() else {
            return Err(Error::Domain("clock region is empty".into()));
        };
        if region.iter().any(|x| x.dim() != first.dim()) {
            return Err(Error::Domain("clock region mixes dimensions".into()));
        }
        Ok(ClockBundle { region, params, source })
    }

    pub fn from_tables(region: BTreeSet<SiteCoord>, params: ProcessParams, tables: ClockTables) -> Result<Self> {
        let values = tables.w.values().chain(tables.y.values()).chain(tables.gam.values()).chain(tables.u.values());
        if let Some(bad) = values.copied().find(|v| !(*v > 0.0)) {
            return Err(Error::Domain(format!("clock value {bad} is not positive")));
        }
        Self::checked(region, params, Source::Table(tables))
    }

    /// All sites of a finite geometry; box geometries only, since the
    /// induced adjacency does not wrap.
    pub fn region_of(geometry: &LatticeGeometry) -> Result<BTreeSet<SiteCoord>> {
        if geometry.is_torus() {
            return Err(Error::Domain("clock regions use plain lattice adjacency; use a box".into()));
        }
        Ok(geometry.sites()?.into_iter().collect())
    }

    pub fn region(&self) -> &BTreeSet<SiteCoord> {
        &self.region
    }

    pub fn params(&self) -> &ProcessParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.region.first().map_or(0, |x| x.dim())
    }

    /// Neighbours of `x` inside the region, in `+e1, -e1, +e2, ...` order.
    pub fn neighbors(&self, x: &SiteCoord) -> Vec<SiteCoord> {
        (0..x.dim())
            .flat_map(|a| [1, -1].map(|s| x.shifted(a, s)))
            .filter(|y| self.region.contains(y))
            .collect()
    }

    /// Number of site clocks of each kind and of ordered-pair clocks.
    pub fn clock_counts(&self) -> (usize, usize) {
        let pairs = self.region.iter().map(|x| self.neighbors(x).len()).sum();
        (self.region.len(), pairs)
    }

    fn need(&self, x: &SiteCoord) -> Result<()> {
        if self.region.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain(format!("site {x} outside the clock region")))
        }
    }

    fn keyed(&self, key: u64, clock: Clock, sites: &[&SiteCoord], rate: f64) -> f64 {
        let mut h = mix64(key ^ mix64(clock.tag()));
        for x in sites {
            for &c in x.coords() {
                h = mix64(h ^ (c as u32 as u64));
            }
        }
        let e: f64 = SimRng::seed_from_u64(h).sample(Exp1);
        e / rate
    }

    fn site_clock(&self, clock: Clock, x: &SiteCoord) -> Result<f64> {
        self.need(x)?;
        match &self.source {
            Source::Keyed(key) => {
                let rate = match clock {
                    Clock::W => 1.0,
                    Clock::Y => 1.0 + self.params.delta,
                    _ => self.params.gamma,
                };
                Ok(self.keyed(*key, clock, &[x], rate))
            }
            Source::Table(t) => {
                let table = match clock {
                    Clock::W => &t.w,
                    Clock::Y => &t.y,
                    _ => &t.gam,
                };
                table.get(x).copied().ok_or_else(|| Error::Domain(format!("no {clock:?} clock at {x}")))
            }
        }
    }

    pub fn w(&self, x: &SiteCoord) -> Result<f64> {
        self.site_clock(Clock::W, x)
    }

    pub fn y(&self, x: &SiteCoord) -> Result<f64> {
        self.site_clock(Clock::Y, x)
    }

    pub fn gam(&self, x: &SiteCoord) -> Result<f64> {
        self.site_clock(Clock::Gam, x)
    }

    pub fn u(&self, x: &SiteCoord, y: &SiteCoord) -> Result<f64> {
        self.need(x)?;
        self.need(y)?;
        if l1_norm(&x.sub(y)) != 1 {
            return Err(Error::Domain(format!("{x} and {y} are not neighbours")));
        }
        match &self.source {
            Source::Keyed(key) => Ok(self.keyed(*key, Clock::U, &[x, y], self.params.lambda)),
            Source::Table(t) => t
                .u
                .get(&(x.clone(), y.clone()))
                .copied()
                .ok_or_else(|| Error::Domain(format!("no U clock on ({x}, {y})"))),
        }
    }

    /// Whether the edge `x -> y` passes: `U(x, y) < W(x)` and
    /// `Gam(y) < Y(y)`. Short-circuits on the first comparison.
    pub fn edge_passes(&self, x: &SiteCoord, y: &SiteCoord) -> Result<bool> {
        Ok(self.u(x, y)? < self.w(x)? && self.gam(y)? < self.y(y)?)
    }
}

fn check_path(path: &[SiteCoord], clocks: &ClockBundle) -> Result<()> {
    let first = path.first().ok_or_else(|| Error::Contract("empty path".into()))?;
    if !first.is_origin() {
        return Err(Error::Contract("path must start at the origin".into()));
    }
    let mut seen = BTreeSet::new();
    for (i, x) in path.iter().enumerate() {
        clocks.need(x)?;
        if !seen.insert(x) {
            return Err(Error::Contract(format!("path visits {x} twice")));
        }
        if i > 0 && l1_norm(&x.sub(&path[i - 1])) != 1 {
            return Err(Error::Contract(format!("step {i} is not a lattice step")));
        }
    }
    Ok(())
}

/// The event that every edge of the path passes.
pub fn event_a(path: &[SiteCoord], clocks: &ClockBundle) -> Result<bool> {
    check_path(path, clocks)?;
    for e in path.windows(2) {
        if !clocks.edge_passes(&e[0], &e[1])? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirEvent {
    pub time: f64,
    pub site: SiteCoord,
    pub state: SiteState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SirTrajectory {
    /// State changes in time order; the initial infections come first at time 0.
    pub events: Vec<SirEvent>,
    pub ever_full: BTreeSet<SiteCoord>,
    /// Time at which no site is infected, if the run was not stopped early.
    pub extinction_time: Option<f64>,
    /// Number of clock values consulted.
    pub clock_reads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Pending {
    Infect,
    Mature(bool),
    Recover,
}

#[derive(Debug)]
struct Queued {
    time: f64,
    site: SiteCoord,
    what: Pending,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed so the max-heap pops the earliest event, ties broken by
    // lexicographic site order.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.site.cmp(&self.site))
            .then_with(|| other.what.cmp(&self.what))
    }
}

struct ClockRun<'a> {
    clocks: &'a ClockBundle,
    state: BTreeMap<SiteCoord, SiteState>,
    queue: BinaryHeap<Queued>,
    out: SirTrajectory,
    active: usize,
}

impl ClockRun<'_> {
    fn record(&mut self, time: f64, site: &SiteCoord, state: SiteState) {
        self.state.insert(site.clone(), state);
        self.out.events.push(SirEvent { time, site: site.clone(), state });
    }

    fn become_full(&mut self, time: f64, x: &SiteCoord) -> Result<()> {
        self.record(time, x, SiteState::Full);
        self.out.ever_full.insert(x.clone());
        let w = self.clocks.w(x)?;
        self.out.clock_reads += 1;
        self.queue.push(Queued { time: time + w, site: x.clone(), what: Pending::Recover });
        for y in self.clocks.neighbors(x) {
            let u = self.clocks.u(x, &y)?;
            self.out.clock_reads += 1;
            if u < w {
                self.queue.push(Queued { time: time + u, site: y, what: Pending::Infect });
            }
        }
        Ok(())
    }
}

fn run_clocks(clocks: &ClockBundle, init: &SparseConfig, stop_on_full: Option<&SiteCoord>) -> Result<SirTrajectory> {
    let mut run = ClockRun {
        clocks,
        state: BTreeMap::new(),
        queue: BinaryHeap::new(),
        out: SirTrajectory { events: Vec::new(), ever_full: BTreeSet::new(), extinction_time: None, clock_reads: 0 },
        active: 0,
    };
    for (x, s) in init.iter() {
        if s != SiteState::Full {
            return Err(Error::Domain(format!("initial state {} at {x}; only 0 and 2 are allowed", s.code())));
        }
        clocks.need(x)?;
    }
    for (x, _) in init.iter() {
        run.become_full(0.0, x)?;
        run.active += 1;
    }
    if stop_on_full.is_some_and(|t| run.out.ever_full.contains(t)) {
        return Ok(run.out);
    }
    if run.active == 0 {
        run.out.extinction_time = Some(0.0);
        return Ok(run.out);
    }
    while let Some(Queued { time, site, what }) = run.queue.pop() {
        match what {
            Pending::Infect => {
                if run.state.contains_key(&site) {
                    continue;
                }
                run.record(time, &site, SiteState::Semi);
                run.active += 1;
                let (g, y) = (clocks.gam(&site)?, clocks.y(&site)?);
                run.out.clock_reads += 2;
                run.queue.push(Queued { time: time + g.min(y), site, what: Pending::Mature(g < y) });
            }
            Pending::Mature(true) if stop_on_full == Some(&site) => {
                run.record(time, &site, SiteState::Full);
                run.out.ever_full.insert(site);
                return Ok(run.out);
            }
            Pending::Mature(true) => run.become_full(time, &site)?,
            Pending::Mature(false) | Pending::Recover => {
                run.record(time, &site, SiteState::Recovered);
                run.active -= 1;
                if run.active == 0 {
                    run.out.extinction_time = Some(time);
                }
            }
        }
    }
    Ok(run.out)
}

/// The SIR trajectory determined by the clocks.
pub fn sir_from_clocks(clocks: &ClockBundle, init: &SparseConfig) -> Result<SirTrajectory> {
    run_clocks(clocks, init, None)
}

/// True unless the path event holds and yet the endpoint is never fully
/// infected in the SIR run started from a fully-infected origin.
pub fn verify_lemma41(path: &[SiteCoord], clocks: &ClockBundle) -> Result<bool> {
    if !event_a(path, clocks)? {
        return Ok(true);
    }
    let target = path.last().expect("checked non-empty");
    let origin = SiteCoord::origin(target.dim());
    let run = run_clocks(clocks, &SparseConfig::single(origin), Some(target))?;
    Ok(run.ever_full.contains(target))
}

/// Every site reachable by a path of the walk class with at most `n` steps.
pub fn rn_region(shape: WalkShape, n: usize) -> Result<BTreeSet<SiteCoord>> {
    let mut region = BTreeSet::new();
    let mut path = vec![SiteCoord::origin(shape.d)];
    let mut budget = 5_000_000usize;
    fn walk(
        shape: WalkShape,
        n: usize,
        path: &mut Vec<SiteCoord>,
        region: &mut BTreeSet<SiteCoord>,
        budget: &mut usize,
    ) -> Result<()> {
        region.insert(path.last().unwrap().clone());
        if *budget == 0 {
            return Err(Error::Resource("walk class too large to enumerate".into()));
        }
        *budget -= 1;
        if path.len() > n {
            return Ok(());
        }
        for y in rn_moves(shape, path) {
            path.push(y);
            walk(shape, n, path, region, budget)?;
            path.pop();
        }
        Ok(())
    }
    walk(shape, n, &mut path, &mut region, &mut budget)?;
    Ok(region)
}

fn rn_moves(shape: WalkShape, path: &[SiteCoord]) -> Vec<SiteCoord> {
    let last = path.last().unwrap();
    if shape.is_drift_step(path.len()) {
        (shape.free_axes()..shape.d).map(|a| last.shifted(a, 1)).collect()
    } else {
        (0..shape.free_axes())
            .flat_map(|a| [1, -1].map(|s| last.shifted(a, s)))
            .filter(|y| !path.contains(y))
            .collect()
    }
}

/// Whether some path of the walk class with exactly `n` steps has all of
/// its edges passing. Depth-first along passing edges only.
pub fn rn_union_event(clocks: &ClockBundle, shape: WalkShape, n: usize) -> Result<bool> {
    fn search(clocks: &ClockBundle, shape: WalkShape, n: usize, path: &mut Vec<SiteCoord>) -> Result<bool> {
        if path.len() > n {
            return Ok(true);
        }
        for y in rn_moves(shape, path) {
            if clocks.edge_passes(path.last().unwrap(), &y)? {
                path.push(y);
                let hit = search(clocks, shape, n, path)?;
                path.pop();
                if hit {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
    search(clocks, shape, n, &mut vec![SiteCoord::origin(shape.d)])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnionEstimate {
    pub hits: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub std_err: f64,
    pub wilson95: (f64, f64),
}

/// Direct Monte Carlo estimate of the probability that some `n`-step path
/// of the walk class carries a passing chain.
pub fn estimate_rn_union(d: usize, p: &ProcessParams, n: usize, trials: u64, seed: StreamSeed) -> Result<UnionEstimate> {
    let shape = WalkShape::new(d)?;
    p.validate()?;
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    let region = rn_region(shape, n)?;
    let hits = (0..trials)
        .into_par_iter()
        .map(|r| -> Result<u64> {
            let clocks = sample_clocks(&region, p, &mut seed.replica(r))?;
            Ok(rn_union_event(&clocks, shape, n)? as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let p_hat = hits as f64 / trials as f64;
    Ok(UnionEstimate {
        hits,
        trials,
        p_hat,
        std_err: (p_hat * (1.0 - p_hat) / trials as f64).sqrt(),
        wilson95: wilson(hits, trials, Z95),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{simulate, ProcessKind, SimOptions};
    use crate::saw::{sample_walk, validate_rn};
    use crate::stats::{ks_critical, ks_two_sample, MeanVar};

    fn s(v: &[i32]) -> SiteCoord {
        SiteCoord::new(v.to_vec())
    }

    fn pair_region() -> BTreeSet<SiteCoord> {
        [s(&[0, 0]), s(&[1, 0])].into_iter().collect()
    }

    fn tables(u: f64, w: f64, g: f64, y: f64) -> ClockTables {
        let (o, x) = (s(&[0, 0]), s(&[1, 0]));
        let mut t = ClockTables::default();
        t.u.insert((o.clone(), x.clone()), u);
        t.w.insert(o, w);
        t.gam.insert(x.clone(), g);
        t.y.insert(x, y);
        t
    }

    fn p111() -> ProcessParams {
        ProcessParams::new(1.0, 1.0, 1.0).unwrap()
    }

    #[test]
    fn counts_and_empty_region() {
        let g = LatticeGeometry::boxed(2, 1).unwrap();
        let c = sample_clocks(&ClockBundle::region_of(&g).unwrap(), &p111(), &mut StreamSeed::new(1).replica(0)).unwrap();
        // 3x3 grid: 12 undirected edges.
        assert_eq!(c.clock_counts(), (9, 24));
        assert!(matches!(sample_clocks(&BTreeSet::new(), &p111(), &mut StreamSeed::new(1).replica(0)), Err(Error::Domain(_))));
        assert!(ClockBundle::region_of(&LatticeGeometry::torus(1, 3).unwrap()).is_err());
    }

    #[test]
    fn clocks_are_fixed_and_distinct_per_direction() {
        let c = sample_clocks(&pair_region(), &p111(), &mut StreamSeed::new(2).replica(0)).unwrap();
        let (o, x) = (s(&[0, 0]), s(&[1, 0]));
        assert_eq!(c.u(&o, &x).unwrap(), c.u(&o, &x).unwrap());
        assert_ne!(c.u(&o, &x).unwrap(), c.u(&x, &o).unwrap());
        assert_ne!(c.w(&o).unwrap(), c.w(&x).unwrap());
        assert!(matches!(c.w(&s(&[5, 5])), Err(Error::Domain(_))));
    }

    #[test]
    fn clock_means() {
        let p = ProcessParams::new(0.5, 3.0, 1.0).unwrap();
        let region: BTreeSet<_> = [s(&[0])].into_iter().collect();
        let seed = StreamSeed::new(3);
        let (mut w, mut y, mut g) = (MeanVar::new(), MeanVar::new(), MeanVar::new());
        for r in 0..100_000 {
            let c = sample_clocks(&region, &p, &mut seed.replica(r)).unwrap();
            let o = s(&[0]);
            w.push(c.w(&o).unwrap());
            y.push(c.y(&o).unwrap());
            g.push(c.gam(&o).unwrap());
        }
        for (m, want) in [(&w, 1.0), (&y, 0.5), (&g, 1.0 / 3.0)] {
            assert!((m.mean() - want).abs() < 3.0 * m.std_err(), "{} vs {want}", m.mean());
        }
    }

    #[test]
    fn event_a_examples() {
        let path = [s(&[0, 0]), s(&[1, 0])];
        let c = ClockBundle::from_tables(pair_region(), p111(), tables(0.2, 0.5, 0.1, 0.4)).unwrap();
        assert!(event_a(&path, &c).unwrap());
        assert!(verify_lemma41(&path, &c).unwrap());
        let mut t = ClockTables::default();
        t.u.insert((s(&[0, 0]), s(&[1, 0])), 0.6);
        t.w.insert(s(&[0, 0]), 0.5);
        let c = ClockBundle::from_tables(pair_region(), p111(), t).unwrap();
        assert!(!event_a(&path, &c).unwrap());
        assert!(verify_lemma41(&path, &c).unwrap());
        let far = [s(&[0, 0]), s(&[0, 1])];
        assert!(matches!(event_a(&far, &c), Err(Error::Domain(_))));
        assert!(matches!(event_a(&[s(&[1, 0])], &c), Err(Error::Contract(_))));
    }

    #[test]
    fn two_site_trajectory() {
        let c = ClockBundle::from_tables(pair_region(), p111(), {
            let mut t = tables(0.2, 0.5, 0.1, 0.4);
            t.u.insert((s(&[1, 0]), s(&[0, 0])), 0.05);
            t.w.insert(s(&[1, 0]), 0.7);
            t
        })
        .unwrap();
        let run = sir_from_clocks(&c, &SparseConfig::single(s(&[0, 0]))).unwrap();
        let times: Vec<(f64, i8)> = run.events.iter().map(|e| (e.time, e.state.code())).collect();
        let want = [(0.0, 2), (0.2, 1), (0.2 + 0.1, 2), (0.5, -1), (0.3 + 0.7, -1)];
        assert_eq!(times.len(), want.len());
        for ((t, st), (wt, ws)) in times.iter().zip(want) {
            assert!((t - wt).abs() < 1e-12 && *st == ws, "{times:?}");
        }
        assert_eq!(run.ever_full.len(), 2);
        assert!((run.extinction_time.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_site_recovers_at_w() {
        let region: BTreeSet<_> = [s(&[0, 0])].into_iter().collect();
        let c = sample_clocks(&region, &p111(), &mut StreamSeed::new(4).replica(0)).unwrap();
        let run = sir_from_clocks(&c, &SparseConfig::single(s(&[0, 0]))).unwrap();
        assert_eq!(run.events.len(), 2);
        assert_eq!(run.extinction_time, Some(c.w(&s(&[0, 0])).unwrap()));
    }

    #[test]
    fn bad_initial_states() {
        let c = sample_clocks(&pair_region(), &p111(), &mut StreamSeed::new(5).replica(0)).unwrap();
        for st in [SiteState::Semi, SiteState::Recovered] {
            let mut init = SparseConfig::new();
            init.set(s(&[0, 0]), st);
            assert!(matches!(sir_from_clocks(&c, &init), Err(Error::Domain(_))));
        }
        assert!(sir_from_clocks(&c, &SparseConfig::single(s(&[4, 0]))).is_err());
    }

    #[test]
    fn each_clock_read_once() {
        let g = LatticeGeometry::boxed(2, 3).unwrap();
        let region = ClockBundle::region_of(&g).unwrap();
        let p = ProcessParams::new(2.0, 2.0, 0.5).unwrap();
        let seed = StreamSeed::new(6);
        for r in 0..200 {
            let c = sample_clocks(&region, &p, &mut seed.replica(r)).unwrap();
            let run = sir_from_clocks(&c, &SparseConfig::single(SiteCoord::origin(2))).unwrap();
            let semi = run.events.iter().filter(|e| e.state == SiteState::Semi).count();
            let full: usize = run.ever_full.iter().map(|x| 1 + c.neighbors(x).len()).sum();
            assert_eq!(run.clock_reads, 2 * semi + full);
            // No site changes state twice in the same direction.
            let mut seen = BTreeSet::new();
            for e in &run.events {
                assert!(seen.insert((e.site.clone(), e.state)));
            }
        }
    }

    #[test]
    fn path_event_frequency() {
        let p = ProcessParams::new(0.8, 1.5, 0.5).unwrap();
        let path = [s(&[0, 0]), s(&[1, 0]), s(&[1, 1])];
        let region: BTreeSet<_> = path.iter().cloned().collect();
        let want = (0.8f64 / 1.8).powi(2) * (1.5f64 / 3.0).powi(2);
        let seed = StreamSeed::new(7);
        let n = 100_000u64;
        let hits = (0..n)
            .filter(|&r| event_a(&path, &sample_clocks(&region, &p, &mut seed.replica(r)).unwrap()).unwrap())
            .count() as f64;
        let se = (want * (1.0 - want) / n as f64).sqrt();
        assert!((hits / n as f64 - want).abs() < 3.0 * se);
    }

    #[test]
    fn extinction_law_matches_engine() {
        let g = LatticeGeometry::boxed(2, 1).unwrap();
        let region = ClockBundle::region_of(&g).unwrap();
        let p = ProcessParams::new(1.5, 2.0, 0.5).unwrap();
        let init = SparseConfig::single(SiteCoord::origin(2));
        let n = 4000;
        let a: Vec<f64> = (0..n)
            .map(|r| {
                let c = sample_clocks(&region, &p, &mut StreamSeed::new(8).replica(r)).unwrap();
                sir_from_clocks(&c, &init).unwrap().extinction_time.unwrap()
            })
            .collect();
        let opts = SimOptions::new(1e9).without_final();
        let b: Vec<f64> = (0..n)
            .map(|r| {
                let t = simulate(ProcessKind::Sir, &init, &p, &g, &opts, &mut StreamSeed::new(9).replica(r)).unwrap();
                t.extinction_time().unwrap()
            })
            .collect();
        let ks = ks_two_sample(&a, &b);
        assert!(ks < ks_critical(a.len(), b.len(), 0.001), "ks = {ks}");
    }

    #[test]
    fn containment_on_random_paths() {
        let shape = WalkShape::new(10).unwrap();
        let seed = StreamSeed::new(10);
        for r in 0..500 {
            let mut rng = seed.replica(r);
            let w = sample_walk(shape, 1 + (r as usize % 12), &mut rng).unwrap();
            let mut region: BTreeSet<SiteCoord> = w.sites().iter().cloned().collect();
            for x in w.sites() {
                for a in 0..10 {
                    region.insert(x.shifted(a, 1));
                    region.insert(x.shifted(a, -1));
                }
            }
            let p = ProcessParams::new(rng.random_range(0.5..5.0), rng.random_range(0.5..5.0), rng.random_range(0.0..2.0)).unwrap();
            let c = sample_clocks(&region, &p, &mut rng).unwrap();
            assert!(verify_lemma41(w.sites(), &c).unwrap());
        }
    }

    #[test]
    fn rn_enumeration_at_d6() {
        // d = 6: every step moves +1 along one of the last three axes.
        let shape = WalkShape::new(6).unwrap();
        let region = rn_region(shape, 3).unwrap();
        assert_eq!(region.len(), 1 + 3 + 6 + 10);
        let c = sample_clocks(&region, &p111(), &mut StreamSeed::new(11).replica(0)).unwrap();
        // The union event agrees with brute force over all 27 paths.
        let mut any = false;
        for code in 0..27usize {
            let mut path = vec![SiteCoord::origin(6)];
            let mut k = code;
            for _ in 0..3 {
                path.push(path.last().unwrap().shifted(3 + k % 3, 1));
                k /= 3;
            }
            validate_rn(shape, &path).unwrap();
            any |= event_a(&path, &c).unwrap();
        }
        assert_eq!(rn_union_event(&c, shape, 3).unwrap(), any);
    }

    #[test]
    fn union_estimate_brackets_single_path_probability() {
        let p = ProcessParams::new(2.0, 2.0, 0.0).unwrap();
        let est = estimate_rn_union(6, &p, 2, 20_000, StreamSeed::new(12)).unwrap();
        let single = (2.0f64 / 3.0).powi(2) * (2.0f64 / 3.0).powi(2);
        assert!(est.p_hat > single);
        assert!(est.wilson95.0 <= est.p_hat && est.p_hat <= est.wilson95.1);
    }
}
