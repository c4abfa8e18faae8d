//! Exact transient laws of tiny systems and brute-force validators.
//!
//! The generator is assembled from the transition rules directly, not from
//! the simulator's rate tables, so the two act as independent witnesses.

use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;

use crate::engine::{simulate, site_rates, ProcessKind, ProcessParams, SimOptions, SiteState, SparseConfig};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};
use crate::rng::StreamSeed;
use crate::saw::union_lower_bound;
use crate::stats::binomial_se;

pub const MAX_STATES: u64 = 1_000_000;

/// Continuous-time chain on every configuration of a tiny geometry.
#[derive(Debug, Clone)]
pub struct ExactChain {
    kind: ProcessKind,
    sites: Vec<SiteCoord>,
    base: usize,
    /// Off-diagonal rates per row, sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

fn palette(kind: ProcessKind) -> &'static [SiteState] {
    match kind {
        ProcessKind::Contact => &[SiteState::Healthy, SiteState::Semi, SiteState::Full],
        ProcessKind::Sir => &[SiteState::Healthy, SiteState::Semi, SiteState::Full, SiteState::Recovered],
    }
}

pub fn build_exact(kind: ProcessKind, g: &LatticeGeometry, p: &ProcessParams) -> Result<ExactChain> {
    let count = g.site_count().unwrap_or(u64::MAX);
    let base = palette(kind).len() as u64;
    if base.checked_pow(count.min(64) as u32).is_none_or(|s| s > MAX_STATES) {
        return Err(Error::Resource(format!("{count} sites exceed {MAX_STATES} states")));
    }
    let sites = g.sites()?;
    let nbrs: Vec<Vec<usize>> = sites
        .iter()
        .map(|x| {
            g.neighbors(x)
                .expect("site from the geometry")
                .iter()
                .map(|y| sites.binary_search(y).expect("sites are sorted"))
                .collect()
        })
        .collect();
    assemble(kind, sites, &nbrs, p)
}

/// Chain of one isolated site, which no geometry provides.
pub fn build_single_site(kind: ProcessKind, d: usize, p: &ProcessParams) -> Result<ExactChain> {
    assemble(kind, vec![SiteCoord::origin(d)], &[vec![]], p)
}

fn assemble(kind: ProcessKind, sites: Vec<SiteCoord>, nbrs: &[Vec<usize>], p: &ProcessParams) -> Result<ExactChain> {
    p.validate()?;
    let pal = palette(kind);
    let base = pal.len();
    let states = base.pow(sites.len() as u32);
    let removed = if kind == ProcessKind::Sir { SiteState::Recovered } else { SiteState::Healthy };
    let mut chain = ExactChain { kind, sites, base, rows: Vec::with_capacity(states), diag: Vec::new() };
    let mut digits = vec![0usize; chain.sites.len()];
    for s in 0..states {
        chain.decode_into(s, &mut digits);
        let mut row = Vec::new();
        for (i, &dg) in digits.iter().enumerate() {
            let mut jump = |to: SiteState, rate: f64| {
                if rate > 0.0 {
                    let to = pal.iter().position(|&c| c == to).unwrap();
                    row.push((s - dg * chain_pow(base, i) + to * chain_pow(base, i), rate));
                }
            };
            match pal[dg] {
                SiteState::Full => jump(removed, 1.0),
                SiteState::Semi => {
                    jump(SiteState::Full, p.gamma);
                    jump(removed, 1.0 + p.delta);
                }
                SiteState::Healthy => {
                    let k = nbrs[i].iter().filter(|&&j| pal[digits[j]] == SiteState::Full).count();
                    jump(SiteState::Semi, p.lambda * k as f64);
                }
                SiteState::Recovered => {}
            }
        }
        row.sort_by_key(|e| e.0);
        chain.diag.push(-row.iter().map(|e| e.1).sum::<f64>());
        chain.rows.push(row);
    }
    Ok(chain)
}

fn chain_pow(base: usize, i: usize) -> usize {
    base.pow(i as u32)
}

impl ExactChain {
    fn decode_into(&self, mut s: usize, out: &mut [usize]) {
        for d in out.iter_mut() {
            *d = s % self.base;
            s /= self.base;
        }
    }

    pub fn kind(&self) -> ProcessKind {
        self.kind
    }

    pub fn sites(&self) -> &[SiteCoord] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Generator entry `(i, j)`.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return self.diag[i];
        }
        self.rows[i].binary_search_by_key(&j, |e| e.0).map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.diag[i] + self.rows[i].iter().map(|e| e.1).sum::<f64>()
    }

    pub fn state(&self, index: usize) -> SparseConfig {
        let mut digits = vec![0; self.sites.len()];
        self.decode_into(index, &mut digits);
        let mut c = SparseConfig::new();
        for (x, &dg) in self.sites.iter().zip(&digits) {
            c.set(x.clone(), palette(self.kind)[dg]);
        }
        c
    }

    pub fn index_of(&self, config: &SparseConfig) -> Result<usize> {
        let pal = palette(self.kind);
        let mut idx = 0;
        for (x, s) in config.iter() {
            let i = self.sites.binary_search(x).map_err(|_| Error::Domain(format!("{x} not in the geometry")))?;
            let dg = pal
                .iter()
                .position(|&c| c == s)
                .ok_or_else(|| Error::Domain(format!("state {} not used by {}", s.code(), self.kind.name())))?;
            idx += dg * chain_pow(self.base, i);
        }
        Ok(idx)
    }

    /// `P(state of x = s)` under the distribution `probs`.
    pub fn marginal(&self, probs: &[f64], x: &SiteCoord, s: SiteState) -> Result<f64> {
        let i = self.sites.binary_search(x).map_err(|_| Error::Domain(format!("{x} not in the geometry")))?;
        let Some(dg) = palette(self.kind).iter().position(|&c| c == s) else {
            return Ok(0.0);
        };
        let stride = chain_pow(self.base, i);
        Ok(probs.iter().enumerate().filter(|(k, _)| (k / stride) % self.base == dg).map(|(_, p)| p).sum())
    }
}

/// Row `init` of `exp(tQ)` by uniformization, truncated once the Poisson
/// tail drops below `1e-12`.
pub fn transient(chain: &ExactChain, init: usize, t: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("time {t} must be finite and >= 0")));
    }
    if init >= chain.len() {
        return Err(Error::Domain(format!("state {init} out of range")));
    }
    let mut v = vec![0.0; chain.len()];
    v[init] = 1.0;
    let q = chain.diag.iter().fold(0.0f64, |m, d| m.max(-d));
    if q == 0.0 || t == 0.0 {
        return Ok(v);
    }
    let big = q * t;
    let (ln_big, mut ln_w) = (big.ln(), -big);
    let mut out: Vec<f64> = v.iter().map(|x| x * ln_w.exp()).collect();
    let mut mass = ln_w.exp();
    let mut next = vec![0.0; chain.len()];
    let mut k = 0u64;
    while 1.0 - mass > 1e-12 || (k as f64) < big {
        k += 1;
        if k > 50_000_000 {
            return Err(Error::Resource("uniformization did not converge".into()));
        }
        next.iter_mut().for_each(|x| *x = 0.0);
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            next[i] += vi * (1.0 + chain.diag[i] / q);
            for &(j, r) in &chain.rows[i] {
                next[j] += vi * r / q;
            }
        }
        std::mem::swap(&mut v, &mut next);
        ln_w += ln_big - (k as f64).ln();
        let w = ln_w.exp();
        mass += w;
        if w > 0.0 {
            out.iter_mut().zip(&v).for_each(|(o, x)| *o += w * x);
        }
    }
    Ok(out)
}

/// Cross-checks the simulator's rate table against the generator, one
/// transition at a time. Returns `(transitions checked, mismatches)`.
pub fn rate_table_check(chain: &ExactChain, g: &LatticeGeometry, p: &ProcessParams) -> Result<(usize, usize)> {
    let (mut checked, mut bad) = (0, 0);
    for s in 0..chain.len() {
        let cfg = chain.state(s);
        let mut from_engine = Vec::new();
        for x in chain.sites() {
            for (to, rate) in site_rates(chain.kind, &cfg, x, p, g)? {
                let mut next = cfg.clone();
                next.set(x.clone(), to);
                from_engine.push((chain.index_of(&next)?, rate));
            }
        }
        from_engine.sort_by_key(|e| e.0);
        checked += chain.rows[s].len().max(from_engine.len());
        if from_engine != chain.rows[s] {
            bad += 1;
        }
    }
    Ok((checked, bad))
}

/// One Monte Carlo marginal compared with its exact value.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalCheck {
    pub kind: ProcessKind,
    pub time: f64,
    pub state: SiteState,
    pub exact: f64,
    pub estimate: f64,
    pub std_err: f64,
}

impl MarginalCheck {
    pub fn within(&self, sigmas: f64) -> bool {
        (self.estimate - self.exact).abs() <= sigmas * self.std_err
    }
}

/// State marginals at the origin of the 3-site ring started from a
/// fully-infected origin: simulation against uniformization.
pub fn ring_marginal_checks(
    kind: ProcessKind,
    p: &ProcessParams,
    times: &[f64],
    replicas: u64,
    seed: StreamSeed,
) -> Result<Vec<MarginalCheck>> {
    let g = LatticeGeometry::torus(1, 3)?;
    let chain = build_exact(kind, &g, p)?;
    let o = SiteCoord::origin(1);
    let init = SparseConfig::single(o.clone());
    let start = chain.index_of(&init)?;
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let opts = SimOptions::new(horizon).sampled_at(times, Some(vec![o.clone()])).without_final();
    let states: Vec<Vec<SiteState>> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<Vec<SiteState>> {
            let run = simulate(kind, &init, p, &g, &opts, &mut seed.replica(r))?;
            Ok(run.samples.iter().map(|c| c.get(&o)).collect())
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let probs = transient(&chain, start, t)?;
        for &s in palette(kind) {
            let exact = chain.marginal(&probs, &o, s)?;
            let hits = states.iter().filter(|row| row[k] == s).count();
            out.push(MarginalCheck {
                kind,
                time: t,
                state: s,
                exact,
                estimate: hits as f64 / replicas as f64,
                std_err: binomial_se(exact, replicas),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnionReport {
    pub spaces: usize,
    pub violations: usize,
    /// Smallest `P(union) - bound` seen.
    pub min_slack: f64,
    /// Spaces where the bound is attained within `1e-12`.
    pub tight: usize,
}

/// Random finite probability spaces and event families, checking the
/// second-moment lower bound on the union against exact enumeration.
pub fn brute_union_spaces<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Result<UnionReport> {
    let mut report = UnionReport { spaces: count, violations: 0, min_slack: f64::INFINITY, tight: 0 };
    for _ in 0..count {
        let outcomes = rng.random_range(1..=16usize);
        let raw: Vec<f64> = (0..outcomes).map(|_| rng.sample::<f64, _>(Exp1) + 1e-3).collect();
        let total: f64 = raw.iter().sum();
        let mass: Vec<f64> = raw.iter().map(|m| m / total).collect();
        let n = rng.random_range(1..=8usize);
        let events: Vec<Vec<bool>> = (0..n)
            .map(|_| {
                let mut e: Vec<bool> = (0..outcomes).map(|_| rng.random_bool(0.4)).collect();
                if !e.iter().any(|&b| b) {
                    e[rng.random_range(0..outcomes)] = true;
                }
                e
            })
            .collect();
        let prob = |pred: &dyn Fn(usize) -> bool| (0..outcomes).filter(|&o| pred(o)).map(|o| mass[o]).sum::<f64>().min(1.0);
        let probs: Vec<f64> = events.iter().map(|e| prob(&|o| e[o])).collect();
        let pairs: Vec<Vec<f64>> =
            (0..n).map(|i| (0..n).map(|j| prob(&|o| events[i][o] && events[j][o])).collect()).collect();
        let union = prob(&|o| events.iter().any(|e| e[o]));
        let raw_w: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let wt: f64 = raw_w.iter().sum();
        let mut weights: Vec<f64> = raw_w.iter().map(|w| w / wt).collect();
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        let bound = union_lower_bound(&probs, &pairs, &weights)?;
        let slack = union - bound;
        report.min_slack = report.min_slack.min(slack);
        if slack < -1e-12 {
            report.violations += 1;
        } else if slack.abs() <= 1e-12 {
            report.tight += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(kind: ProcessKind, p: &ProcessParams) -> ExactChain {
        build_single_site(kind, 1, p).unwrap()
    }

    fn idx(c: &ExactChain, s: SiteState) -> usize {
        let mut cfg = SparseConfig::new();
        cfg.set(SiteCoord::origin(1), s);
        c.index_of(&cfg).unwrap()
    }

    #[test]
    fn single_site_rows() {
        let p = ProcessParams::new(2.0, 3.0, 0.5).unwrap();
        let c = single(ProcessKind::Contact, &p);
        assert_eq!(c.len(), 3);
        let (h, m, f) = (idx(&c, SiteState::Healthy), idx(&c, SiteState::Semi), idx(&c, SiteState::Full));
        assert_eq!((c.rate(f, h), c.rate(f, m), c.rate(f, f)), (1.0, 0.0, -1.0));
        assert_eq!((c.rate(m, f), c.rate(m, h), c.rate(m, m)), (3.0, 1.5, -4.5));
        assert!((0..3).all(|j| c.rate(h, j) == 0.0));
        let c = single(ProcessKind::Sir, &p);
        assert_eq!(c.len(), 4);
        let r = idx(&c, SiteState::Recovered);
        assert!((0..4).all(|j| c.rate(r, j) == 0.0));
        assert_eq!(c.rate(idx(&c, SiteState::Full), r), 1.0);
        assert_eq!(c.rate(idx(&c, SiteState::Semi), r), 1.5);
    }

    #[test]
    fn ring_generators_are_valid() {
        let g = LatticeGeometry::torus(1, 3).unwrap();
        let p = ProcessParams::new(1.3, 0.7, 0.2).unwrap();
        for (kind, n) in [(ProcessKind::Contact, 27), (ProcessKind::Sir, 64)] {
            let c = build_exact(kind, &g, &p).unwrap();
            assert_eq!(c.len(), n);
            for i in 0..n {
                assert!(c.row_sum(i).abs() < 1e-12);
                assert!((0..n).filter(|&j| j != i).all(|j| c.rate(i, j) >= 0.0));
                // Only single-site jumps.
                let a = c.state(i);
                for &(j, _) in &c.rows[i] {
                    let b = c.state(j);
                    let changed = c.sites().iter().filter(|x| a.get(x) != b.get(x)).count();
                    assert_eq!(changed, 1);
                }
            }
        }
    }

    #[test]
    fn state_space_limit() {
        let g = LatticeGeometry::boxed(2, 3).unwrap();
        let p = ProcessParams::new(1.0, 1.0, 1.0).unwrap();
        assert!(matches!(build_exact(ProcessKind::Contact, &g, &p), Err(Error::Resource(_))));
    }

    #[test]
    fn transient_closed_forms() {
        let p = ProcessParams::new(1.0, 1.0, 0.0).unwrap();
        let c = single(ProcessKind::Contact, &p);
        let f = idx(&c, SiteState::Full);
        assert_eq!(transient(&c, f, 0.0).unwrap()[f], 1.0);
        for t in [0.1, 1.0, 3.0, 20.0] {
            let v = transient(&c, f, t).unwrap();
            assert!((v[idx(&c, SiteState::Healthy)] - (1.0 - (-t as f64).exp())).abs() < 1e-10);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (g, d) in [(1.0, 0.0), (2.5, 0.7)] {
            let p = ProcessParams::new(1.0, g, d).unwrap();
            let c = single(ProcessKind::Sir, &p);
            let m = idx(&c, SiteState::Semi);
            for t in [0.3, 1.0, 4.0] {
                let want = g / (g + d) * ((-t as f64).exp() - (-(1.0 + g + d) * t as f64).exp());
                let got = transient(&c, m, t).unwrap()[idx(&c, SiteState::Full)];
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn semi_to_full_matches_simulation() {
        let p = ProcessParams::new(1.0, 1.0, 0.0).unwrap();
        let c = single(ProcessKind::Sir, &p);
        let t = 0.8;
        let exact = transient(&c, idx(&c, SiteState::Semi), t).unwrap()[idx(&c, SiteState::Full)];
        // The origin's SIR history never depends on its neighbours here.
        let g = LatticeGeometry::boxed(1, 1).unwrap();
        let mut init = SparseConfig::new();
        init.set(SiteCoord::origin(1), SiteState::Semi);
        let opts = SimOptions::new(t).sampled_at(&[t], None);
        let seed = StreamSeed::new(17);
        let n = 1_000_000u64;
        let hits = (0..n)
            .filter(|&r| {
                let tr = simulate(ProcessKind::Sir, &init, &p, &g, &opts, &mut seed.replica(r)).unwrap();
                tr.samples[0].get(&SiteCoord::origin(1)) == SiteState::Full
            })
            .count() as f64;
        assert!((hits / n as f64 - exact).abs() < 3.0 * binomial_se(exact, n));
    }

    #[test]
    fn absorption_is_monotone() {
        let g = LatticeGeometry::torus(1, 3).unwrap();
        let p = ProcessParams::new(1.0, 1.0, 1.0).unwrap();
        let c = build_exact(ProcessKind::Contact, &g, &p).unwrap();
        let start = c.index_of(&SparseConfig::single(SiteCoord::origin(1))).unwrap();
        let mut last = 0.0;
        for t in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let v = transient(&c, start, t).unwrap();
            assert!(v[0] >= last - 1e-12);
            last = v[0];
        }
    }

    #[test]
    fn ring_marginals_match_engine() {
        let p = ProcessParams::new(1.2, 1.5, 0.5).unwrap();
        for kind in [ProcessKind::Contact, ProcessKind::Sir] {
            let checks = ring_marginal_checks(kind, &p, &[0.5, 1.0, 2.0], 20_000, StreamSeed::new(18)).unwrap();
            assert_eq!(checks.len(), 3 * palette(kind).len());
            for c in &checks {
                assert!(c.within(3.0), "{c:?}");
            }
        }
    }

    #[test]
    fn engine_rates_match_generator() {
        let g = LatticeGeometry::torus(1, 3).unwrap();
        let p = ProcessParams::new(0.7, 2.0, 0.25).unwrap();
        for kind in [ProcessKind::Contact, ProcessKind::Sir] {
            let c = build_exact(kind, &g, &p).unwrap();
            let (checked, bad) = rate_table_check(&c, &g, &p).unwrap();
            assert!(checked > 0);
            assert_eq!(bad, 0);
        }
    }

    #[test]
    fn union_spaces() {
        let r = brute_union_spaces(1000, &mut StreamSeed::new(19).replica(0)).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_slack >= -1e-12);
        assert!(r.tight > 0);
        let b = union_lower_bound(&[0.37], &[vec![0.37]], &[1.0]).unwrap();
        assert!((b - 0.37).abs() < 1e-15);
        assert!(union_lower_bound(&[0.0, 0.5], &[vec![0.0, 0.0], vec![0.0, 0.5]], &[0.5, 0.5]).is_err());
    }
}
