use std::collections::BTreeSet;
use std::hash::BuildHasher;

use hashbrown::HashTable;
use rand::Rng;
use rand_distr::Exp1;
use rustc_hash::FxBuildHasher;

use super::{Outcome, ProcessKind, ProcessParams, SimOptions, SiteState, SparseConfig, TrajectorySummary};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};
use crate::rng::StreamSeed;

const NO_BUCKET: u8 = u8::MAX;
const FULL: u8 = 0;
const SEMI: u8 = 1;

const UNSET: u32 = u32::MAX;
const OUTSIDE: u32 = u32::MAX - 1;

struct Site {
    state: SiteState,
    ever_full: bool,
    bucket: u8,
    slot: u32,
}

/// Active sites in two unordered vectors, fully and semi infected, with O(1)
/// insertion and removal. Infections are thinned: every fully-infected site
/// fires at rate `2d * lambda` at a uniform neighbour, and the attempt is
/// void unless that neighbour is healthy and inside the domain.
struct Lattice<'a> {
    kind: ProcessKind,
    params: ProcessParams,
    geometry: &'a LatticeGeometry,
    index: HashTable<u32>,
    sites: Vec<Site>,
    // `d` entries per site.
    coords: Vec<i32>,
    dim: usize,
    // `degree` slots per site; `UNSET` until first use, `OUTSIDE` past the box.
    links: Vec<u32>,
    degree: usize,
    buckets: [Vec<u32>; 2],
    full_rate: f64,
    track: bool,
    scratch: Vec<i32>,
    found: Vec<u32>,
    found_coord: Vec<i32>,
}

impl<'a> Lattice<'a> {
    fn new(kind: ProcessKind, params: ProcessParams, geometry: &'a LatticeGeometry, track: bool) -> Self {
        let degree = 2 * geometry.dim();
        Lattice {
            kind,
            params,
            geometry,
            index: HashTable::new(),
            sites: Vec::new(),
            coords: Vec::new(),
            dim: geometry.dim(),
            links: Vec::new(),
            degree,
            buckets: [Vec::new(), Vec::new()],
            full_rate: 1.0 + params.lambda * degree as f64,
            track,
            scratch: Vec::new(),
            found: Vec::new(),
            found_coord: Vec::new(),
        }
    }

    fn coord(&self, i: u32) -> &[i32] {
        let at = i as usize * self.dim;
        &self.coords[at..at + self.dim]
    }

    fn find(&self, x: &[i32]) -> Option<u32> {
        self.index.find(FxBuildHasher.hash_one(x), |&i| self.coord(i) == x).copied()
    }

    fn intern(&mut self, x: &[i32]) -> u32 {
        let hash = FxBuildHasher.hash_one(x);
        let (coords, dim) = (&self.coords, self.dim);
        let at = |i: u32| &coords[i as usize * dim..(i as usize + 1) * dim];
        if let Some(&i) = self.index.find(hash, |&i| at(i) == x) {
            return i;
        }
        let i = self.sites.len() as u32;
        self.index.insert_unique(hash, i, |&j| FxBuildHasher.hash_one(at(j)));
        self.coords.extend_from_slice(x);
        self.links.extend(std::iter::repeat_n(UNSET, self.degree));
        self.sites.push(Site { state: SiteState::Healthy, ever_full: false, bucket: NO_BUCKET, slot: 0 });
        i
    }

    /// Neighbour `k` of site `i` in the geometry's order, filling the slots
    /// of `i` on first use.
    fn neighbour(&mut self, i: u32, k: usize) -> u32 {
        let base = i as usize * self.degree;
        if self.links[base] == UNSET {
            let mut here = std::mem::take(&mut self.found_coord);
            here.clear();
            here.extend_from_slice(self.coord(i));
            let mut scratch = std::mem::take(&mut self.scratch);
            let mut found = std::mem::take(&mut self.found);
            found.clear();
            let geometry = self.geometry;
            geometry.for_each_neighbor_slice(&here, &mut scratch, |y| found.push(self.intern(y)));
            found.resize(self.degree, OUTSIDE);
            self.links[base..base + self.degree].copy_from_slice(&found);
            self.scratch = scratch;
            self.found = found;
            self.found_coord = here;
        }
        self.links[base + k]
    }

    fn rebucket(&mut self, i: u32) {
        let want = match self.sites[i as usize].state {
            SiteState::Full => FULL,
            SiteState::Semi => SEMI,
            _ => NO_BUCKET,
        };
        let (have, slot) = {
            let s = &self.sites[i as usize];
            (s.bucket, s.slot)
        };
        if want == have {
            return;
        }
        if have != NO_BUCKET {
            let bucket = &mut self.buckets[have as usize];
            bucket.swap_remove(slot as usize);
            if let Some(&moved) = bucket.get(slot as usize) {
                self.sites[moved as usize].slot = slot;
            }
        }
        if want != NO_BUCKET {
            let bucket = &mut self.buckets[want as usize];
            self.sites[i as usize].slot = bucket.len() as u32;
            bucket.push(i);
        }
        self.sites[i as usize].bucket = want;
    }

    fn set_state(&mut self, i: u32, new: SiteState) {
        let s = &mut self.sites[i as usize];
        if s.state == new {
            return;
        }
        s.state = new;
        if new == SiteState::Full && self.track {
            s.ever_full = true;
        }
        self.rebucket(i);
    }

    fn active(&self) -> usize {
        self.buckets[0].len() + self.buckets[1].len()
    }

    /// Total rate including void infection attempts.
    fn total_rate(&self) -> f64 {
        self.buckets[0].len() as f64 * self.full_rate + self.buckets[1].len() as f64 * self.params.semi_exit_rate()
    }

    fn cleared(&self) -> SiteState {
        match self.kind {
            ProcessKind::Contact => SiteState::Healthy,
            ProcessKind::Sir => SiteState::Recovered,
        }
    }

    /// Applies one clock ring chosen proportionally to rate. Returns whether
    /// the configuration changed.
    fn fire<R: Rng + ?Sized>(&mut self, total: f64, rng: &mut R) -> bool {
        let full_mass = self.buckets[0].len() as f64 * self.full_rate;
        let b = if rng.random::<f64>() * total < full_mass || self.buckets[1].is_empty() { FULL } else { SEMI };
        let bucket = &self.buckets[b as usize];
        let i = bucket[rng.random_range(0..bucket.len())];
        if b == SEMI {
            let next = if rng.random::<f64>() * self.params.semi_exit_rate() < self.params.gamma {
                SiteState::Full
            } else {
                self.cleared()
            };
            self.set_state(i, next);
            return true;
        }
        if rng.random::<f64>() * self.full_rate < 1.0 {
            let next = self.cleared();
            self.set_state(i, next);
            return true;
        }
        let j = self.neighbour(i, rng.random_range(0..self.degree));
        if j == OUTSIDE || self.sites[j as usize].state != SiteState::Healthy {
            return false;
        }
        self.set_state(j, SiteState::Semi);
        true
    }

    /// Rate of the transitions that actually change the configuration.
    #[cfg(test)]
    fn effective_rate(&mut self) -> f64 {
        let mut rate = self.buckets[1].len() as f64 * self.params.semi_exit_rate();
        for f in self.buckets[0].clone() {
            rate += 1.0;
            for k in 0..self.degree {
                let j = self.neighbour(f, k);
                if j != OUTSIDE && self.sites[j as usize].state == SiteState::Healthy {
                    rate += self.params.lambda;
                }
            }
        }
        rate
    }

    fn snapshot(&self, time: f64, only: Option<&[SiteCoord]>) -> SparseConfig {
        let mut cfg = SparseConfig::new();
        cfg.time = time;
        match only {
            Some(sites) => {
                for x in sites {
                    if let Some(i) = self.find(x.coords()) {
                        cfg.set(x.clone(), self.sites[i as usize].state);
                    }
                }
            }
            None => {
                for (s, x) in self.sites.iter().zip(self.coords.chunks_exact(self.dim)) {
                    cfg.set(SiteCoord::new(x.to_vec()), s.state);
                }
            }
        }
        cfg
    }
}

/// Simulates the contact process or the SIR model from `init` until
/// extinction, the horizon, or the active-set cap, whichever comes first.
pub fn simulate<R: Rng + ?Sized>(
    kind: ProcessKind,
    init: &SparseConfig,
    params: &ProcessParams,
    geometry: &LatticeGeometry,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<TrajectorySummary> {
    params.validate()?;
    opts.validate()?;
    let mut lat = Lattice::new(kind, *params, geometry, opts.track_ever_full);
    for (x, state) in init.iter() {
        geometry.check(x)?;
        if kind == ProcessKind::Contact && state == SiteState::Recovered {
            return Err(Error::Domain(format!("contact process cannot start with {x} recovered")));
        }
        let i = lat.intern(x.coords());
        lat.set_state(i, state);
    }

    let sample_sites = opts.sample_sites.as_deref();
    let mut samples = Vec::with_capacity(opts.sample_times.len());
    let mut next_sample = 0usize;
    let mut time = init.time;
    let mut events = 0u64;
    let mut peak = lat.active();

    let outcome = loop {
        if lat.active() == 0 {
            break Outcome::Extinct(time);
        }
        if opts.cap.is_some_and(|cap| lat.active() >= cap) {
            break Outcome::Cap;
        }
        let total = lat.total_rate();
        let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
        let next_time = time + wait;
        while next_sample < opts.sample_times.len()
            && opts.sample_times[next_sample] < next_time.min(opts.horizon)
        {
            samples.push(lat.snapshot(opts.sample_times[next_sample], sample_sites));
            next_sample += 1;
        }
        if next_time > opts.horizon {
            time = opts.horizon;
            break Outcome::Horizon;
        }
        time = next_time;
        if lat.fire(total, rng) {
            events += 1;
        }
        peak = peak.max(lat.active());
    };

    if outcome != Outcome::Cap {
        while next_sample < opts.sample_times.len() && opts.sample_times[next_sample] <= opts.horizon {
            samples.push(lat.snapshot(opts.sample_times[next_sample], sample_sites));
            next_sample += 1;
        }
    }

    let ever_full = opts.track_ever_full.then(|| {
        lat.sites
            .iter()
            .zip(lat.coords.chunks_exact(lat.dim))
            .filter(|(s, _)| s.ever_full)
            .map(|(_, x)| SiteCoord::new(x.to_vec()))
            .collect::<BTreeSet<_>>()
    });
    let final_config = opts.keep_final.then(|| lat.snapshot(time, None));
    Ok(TrajectorySummary {
        outcome,
        final_config,
        peak_active: peak,
        event_count: events,
        ever_full,
        samples,
    })
}

/// Long-run state occupation fractions `[healthy, semi, full]` of the
/// contact process on a torus started from all sites fully infected,
/// averaged over replicas at time `t`. A diagnostic only.
pub fn long_run_density(
    params: &ProcessParams,
    torus: &LatticeGeometry,
    t: f64,
    replicas: u64,
    seed: StreamSeed,
) -> Result<[f64; 3]> {
    use rayon::prelude::*;
    let init = SparseConfig::uniform(torus, SiteState::Full)?;
    let n_sites = torus.site_count().unwrap_or(u64::MAX) as f64;
    let opts = SimOptions::new(t).sampled_at(&[t], None).without_final();
    let per: Vec<[f64; 3]> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<[f64; 3]> {
            let mut rng = seed.replica(r);
            let run = simulate(ProcessKind::Contact, &init, params, torus, &opts, &mut rng)?;
            let snap = &run.samples[0];
            let semi = snap.iter().filter(|(_, s)| *s == SiteState::Semi).count() as f64;
            let full = snap.iter().filter(|(_, s)| *s == SiteState::Full).count() as f64;
            Ok([(n_sites - semi - full) / n_sites, semi / n_sites, full / n_sites])
        })
        .collect::<Result<_>>()?;
    let mut acc = [0.0; 3];
    for f in &per {
        for k in 0..3 {
            acc[k] += f[k] / replicas as f64;
        }
    }
    Ok(acc)
}
