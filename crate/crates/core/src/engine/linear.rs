use rand::Rng;
use rand_distr::Exp1;
use rustc_hash::FxHashMap;

use super::{LinearConfig, ProcessParams, SiteState, SparseConfig};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};

const OUTSIDE: u32 = u32::MAX;

// Per-site membership sets: 0 = (zeta, theta) != (0, 0) [reset, rate 1],
// 1 = theta > 0 [delta and gamma rows], 2 = zeta > 0 [source of 2d
// infection clocks of rate lambda].
const NONZERO: usize = 0;
const THETA: usize = 1;
const ZETA: usize = 2;

struct Cell {
    coord: SiteCoord,
    zeta: u64,
    theta: u64,
    slots: [u32; 3],
    neighbours: Option<Box<[u32]>>,
}

struct LinearLattice<'a> {
    geometry: &'a LatticeGeometry,
    index: FxHashMap<SiteCoord, u32>,
    cells: Vec<Cell>,
    sets: [Vec<u32>; 3],
}

const ABSENT: u32 = u32::MAX;

impl<'a> LinearLattice<'a> {
    fn intern(&mut self, x: SiteCoord) -> u32 {
        if let Some(&i) = self.index.get(&x) {
            return i;
        }
        let i = self.cells.len() as u32;
        self.index.insert(x.clone(), i);
        self.cells.push(Cell { coord: x, zeta: 0, theta: 0, slots: [ABSENT; 3], neighbours: None });
        i
    }

    /// Neighbour ids in the fixed direction order `+e_1, -e_1, ...`, with
    /// [`OUTSIDE`] where the step leaves a box.
    fn neighbour(&mut self, i: u32, direction: usize) -> u32 {
        if self.cells[i as usize].neighbours.is_none() {
            let coord = self.cells[i as usize].coord.clone();
            let d = self.geometry.dim();
            let mut ids = Vec::with_capacity(2 * d);
            for axis in 0..d {
                for step in [1, -1] {
                    ids.push(match self.geometry.step(&coord, axis, step) {
                        Some(y) => self.intern(y),
                        None => OUTSIDE,
                    });
                }
            }
            self.cells[i as usize].neighbours = Some(ids.into_boxed_slice());
        }
        self.cells[i as usize].neighbours.as_ref().unwrap()[direction]
    }

    fn set_membership(&mut self, i: u32, set: usize, member: bool) {
        let slot = self.cells[i as usize].slots[set];
        match (slot != ABSENT, member) {
            (false, true) => {
                self.cells[i as usize].slots[set] = self.sets[set].len() as u32;
                self.sets[set].push(i);
            }
            (true, false) => {
                let v = &mut self.sets[set];
                v.swap_remove(slot as usize);
                if let Some(&moved) = v.get(slot as usize) {
                    self.cells[moved as usize].slots[set] = slot;
                }
                self.cells[i as usize].slots[set] = ABSENT;
            }
            _ => {}
        }
    }

    fn assign(&mut self, i: u32, zeta: u64, theta: u64) {
        let c = &mut self.cells[i as usize];
        c.zeta = zeta;
        c.theta = theta;
        self.set_membership(i, NONZERO, zeta > 0 || theta > 0);
        self.set_membership(i, THETA, theta > 0);
        self.set_membership(i, ZETA, zeta > 0);
    }

    fn snapshot(&self, time: f64, only: Option<&[SiteCoord]>) -> LinearConfig {
        let mut cfg = LinearConfig::new();
        cfg.time = time;
        match only {
            Some(sites) => {
                for x in sites {
                    if let Some(&i) = self.index.get(x) {
                        let c = &self.cells[i as usize];
                        cfg.set(x.clone(), (c.zeta, c.theta));
                    }
                }
            }
            None => {
                for c in &self.cells {
                    cfg.set(c.coord.clone(), (c.zeta, c.theta));
                }
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearTrajectory {
    /// One snapshot per requested sample time.
    pub samples: Vec<LinearConfig>,
    pub final_config: LinearConfig,
    pub event_count: u64,
}

/// Simulates the linear system from `init` up to `horizon`, recording the
/// configuration (restricted to `sample_sites` when given) at each of the
/// ascending `sample_times`.
///
/// Transitions that leave the state unchanged (the delta and gamma rows with
/// `theta = 0`, infection from a source with `zeta = 0`) are never generated;
/// skipping them does not change the law.
pub fn simulate_linear<R: Rng + ?Sized>(
    init: &LinearConfig,
    params: &ProcessParams,
    geometry: &LatticeGeometry,
    horizon: f64,
    sample_times: &[f64],
    sample_sites: Option<&[SiteCoord]>,
    rng: &mut R,
) -> Result<LinearTrajectory> {
    params.validate()?;
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Parameter(format!("horizon {horizon} must be finite and > 0")));
    }
    if sample_times.windows(2).any(|w| w[0] > w[1]) || sample_times.iter().any(|t| !(*t >= 0.0)) {
        return Err(Error::Parameter("sample times must be ascending and >= 0".into()));
    }
    let mut lat = LinearLattice {
        geometry,
        index: FxHashMap::default(),
        cells: Vec::new(),
        sets: [Vec::new(), Vec::new(), Vec::new()],
    };
    for (x, (z, th)) in init.iter() {
        geometry.check(x)?;
        let i = lat.intern(x.clone());
        lat.assign(i, z, th);
    }

    let directions = 2 * geometry.dim();
    let infect_rate = params.lambda * directions as f64;
    let theta_rate = params.gamma + params.delta;
    let mut samples = Vec::with_capacity(sample_times.len());
    let mut next_sample = 0;
    let mut time = init.time;
    let mut events = 0u64;

    loop {
        let masses = [
            lat.sets[NONZERO].len() as f64,
            lat.sets[THETA].len() as f64 * theta_rate,
            lat.sets[ZETA].len() as f64 * infect_rate,
        ];
        let total: f64 = masses.iter().sum();
        let next_time = if total > 0.0 {
            time + rng.sample::<f64, _>(Exp1) / total
        } else {
            f64::INFINITY
        };
        while next_sample < sample_times.len() && sample_times[next_sample] < next_time.min(horizon) {
            samples.push(lat.snapshot(sample_times[next_sample], sample_sites));
            next_sample += 1;
        }
        if next_time > horizon {
            time = horizon;
            break;
        }
        time = next_time;
        events += 1;

        let mut u = rng.random::<f64>() * total;
        let mut set = 2;
        for (k, m) in masses.iter().enumerate() {
            if u < *m {
                set = k;
                break;
            }
            u -= m;
        }
        let members = &lat.sets[set];
        let pick = rng.random_range(0..members.len());
        let i = members[pick];
        let (z, th) = (lat.cells[i as usize].zeta, lat.cells[i as usize].theta);
        match set {
            NONZERO => lat.assign(i, 0, 0),
            THETA => {
                if rng.random::<f64>() * theta_rate < params.gamma {
                    let merged = z
                        .checked_add(th)
                        .ok_or_else(|| Error::Resource("zeta overflowed u64".into()))?;
                    lat.assign(i, merged, 0);
                } else {
                    lat.assign(i, z, 0);
                }
            }
            _ => {
                let target = lat.neighbour(i, rng.random_range(0..directions));
                if target != OUTSIDE {
                    let t = &lat.cells[target as usize];
                    let (tz, tth) = (t.zeta, t.theta);
                    let raised = tth
                        .checked_add(z)
                        .ok_or_else(|| Error::Resource("theta overflowed u64".into()))?;
                    lat.assign(target, tz, raised);
                }
            }
        }
    }
    while next_sample < sample_times.len() && sample_times[next_sample] <= horizon {
        samples.push(lat.snapshot(sample_times[next_sample], sample_sites));
        next_sample += 1;
    }
    Ok(LinearTrajectory { samples, final_config: lat.snapshot(time, None), event_count: events })
}

/// Maps `(zeta, theta)` to the contact-process state: 2 if `zeta > 0`,
/// 1 if only `theta > 0`, healthy otherwise.
pub fn project_linear(lc: &LinearConfig) -> SparseConfig {
    let mut out = SparseConfig::new();
    out.time = lc.time;
    for (x, (z, th)) in lc.iter() {
        let s = if z > 0 {
            SiteState::Full
        } else if th > 0 {
            SiteState::Semi
        } else {
            SiteState::Healthy
        };
        out.set(x.clone(), s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeed;

    #[test]
    fn projection_rows() {
        let mut lc = LinearConfig::new();
        let a = SiteCoord::new(vec![0]);
        let b = SiteCoord::new(vec![1]);
        let c = SiteCoord::new(vec![2]);
        lc.set(a.clone(), (3, 0));
        lc.set(b.clone(), (0, 5));
        lc.set(c.clone(), (0, 0));
        let p = project_linear(&lc);
        assert_eq!(p.get(&a), SiteState::Full);
        assert_eq!(p.get(&b), SiteState::Semi);
        assert_eq!(p.get(&c), SiteState::Healthy);
        assert_eq!(p.len(), 2);
    }

    #[test]
    fn isolated_unit_site_resets_at_rate_one() {
        // theta = 0 makes the delta and gamma rows idempotent, and with
        // lambda = 0 nothing arrives from neighbours.
        let g = LatticeGeometry::boxed(1, 3).unwrap();
        let p = ProcessParams::new(0.0, 2.0, 0.7).unwrap();
        let mut init = LinearConfig::new();
        init.set(SiteCoord::origin(1), (1, 0));
        let seed = StreamSeed::new(4);
        let n = 50_000u64;
        for r in 0..1000 {
            let traj = simulate_linear(&init, &p, &g, 1e6, &[], None, &mut seed.replica(r)).unwrap();
            assert_eq!(traj.event_count, 1);
            assert!(traj.final_config.is_empty());
        }
        let alive: u64 = (0..n)
            .filter(|&r| {
                let traj = simulate_linear(&init, &p, &g, 1.0, &[], None, &mut seed.replica(r)).unwrap();
                !traj.final_config.is_empty()
            })
            .count() as u64;
        let phat = alive as f64 / n as f64;
        let want = (-1.0f64).exp();
        assert!((phat - want).abs() < 3.0 * (want * (1.0 - want) / n as f64).sqrt(), "{phat}");
    }

    #[test]
    fn infection_adds_source_zeta() {
        // Source at O with zeta = 4 and no resets possible before the first
        // infection event lands: check that theta increments are multiples
        // of 4 at the neighbours.
        let g = LatticeGeometry::torus(1, 3).unwrap();
        let p = ProcessParams::new(5.0, 1e-9, 0.0).unwrap();
        let mut init = LinearConfig::new();
        init.set(SiteCoord::origin(1), (4, 0));
        let seed = StreamSeed::new(8);
        for r in 0..200 {
            let traj = simulate_linear(&init, &p, &g, 0.05, &[], None, &mut seed.replica(r)).unwrap();
            for (x, (z, th)) in traj.final_config.iter() {
                if !x.is_origin() {
                    assert_eq!(z, 0);
                    assert_eq!(th % 4, 0);
                }
            }
        }
    }

    #[test]
    fn outside_init_is_rejected() {
        let g = LatticeGeometry::boxed(2, 1).unwrap();
        let p = ProcessParams::new(1.0, 1.0, 1.0).unwrap();
        let mut init = LinearConfig::new();
        init.set(SiteCoord::new(vec![2, 0]), (1, 0));
        let mut rng = StreamSeed::new(0).replica(0);
        assert!(matches!(simulate_linear(&init, &p, &g, 1.0, &[], None, &mut rng), Err(Error::Domain(_))));
    }
}
