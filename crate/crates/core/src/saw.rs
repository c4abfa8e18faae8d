//! The drifted self-avoiding walk and the second-moment lower bound on the
//! probability that some structured path carries an unbroken infection
//! chain.
//!
//! Coordinates split into a *free* block `0..d - band` and a *drift* block
//! `d - band..d`, with `band = floor(d / ln d)` and `period = floor(ln d)`.
//! Step `i` (the move onto `S_i`) is a drift step when `period | i`: it
//! moves `+1` along a uniformly chosen drift axis. Every other step moves
//! `+-1` along a free axis, uniformly among the unvisited targets. Logarithms
//! are natural.

use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;

use crate::engine::ProcessParams;
use crate::error::{Error, Result};
use crate::lattice::SiteCoord;
use crate::rng::{mix64, StreamSeed};
use crate::stats::{MeanVar, Z95};

/// Shape parameters of the walk for a given dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkShape {
    pub d: usize,
    /// `floor(ln d)`.
    pub drift_period: usize,
    /// `floor(d / ln d)`.
    pub drift_band: usize,
}

impl WalkShape {
    pub fn new(d: usize) -> Result<Self> {
        if d < 2 {
            return Err(Error::Parameter(format!("walk needs d >= 3, got {d}")));
        }
        let ln = (d as f64).ln();
        let shape = WalkShape { d, drift_period: ln.floor() as usize, drift_band: (d as f64 / ln).floor() as usize };
        if shape.drift_period == 0 || shape.drift_band == 0 || shape.drift_band >= d || shape.free_bound() < 1 {
            return Err(Error::Parameter(format!(
                "d = {d} too small: period {}, band {}",
                shape.drift_period, shape.drift_band
            )));
        }
        Ok(shape)
    }

    pub fn free_axes(&self) -> usize {
        self.d - self.drift_band
    }

    /// Whether the step onto `S_i` is a drift step.
    pub fn is_drift_step(&self, i: usize) -> bool {
        i >= 1 && i % self.drift_period == 0
    }

    /// Guaranteed minimum number of admissible free moves,
    /// `2 (d - band) - period`.
    pub fn free_bound(&self) -> i64 {
        2 * (self.d as i64 - self.drift_band as i64) - self.drift_period as i64
    }

    /// `sum_{j in drift block} |x_j|`.
    pub fn drift_level(&self, x: &SiteCoord) -> u64 {
        x.coords()[self.free_axes()..].iter().map(|c| c.unsigned_abs() as u64).sum()
    }
}

fn axis_keys(d: usize) -> Vec<u64> {
    (0..d as u64).map(|j| mix64(0x5157_u64 ^ mix64(j))).collect()
}

fn linear_hash(keys: &[u64], x: &SiteCoord) -> u64 {
    x.coords()
        .iter()
        .zip(keys)
        .fold(0u64, |h, (&c, &k)| h.wrapping_add((c as i64 as u64).wrapping_mul(k)))
}

/// A self-avoiding path from the origin. Site membership is indexed by a
/// hash that is linear in the coordinates, so the hash of a neighbour costs
/// O(1).
#[derive(Debug, Clone)]
pub struct WalkPath {
    shape: WalkShape,
    keys: Vec<u64>,
    sites: Vec<SiteCoord>,
    hashes: Vec<u64>,
    index: FxHashMap<u64, u32>,
    // Sites whose hash was already taken by a different site.
    spill: Vec<u32>,
}

impl WalkPath {
    pub fn new(shape: WalkShape) -> Self {
        let keys = axis_keys(shape.d);
        let mut p = WalkPath {
            shape,
            keys,
            sites: Vec::new(),
            hashes: Vec::new(),
            index: FxHashMap::default(),
            spill: Vec::new(),
        };
        p.push_hashed(SiteCoord::origin(shape.d), 0);
        p
    }

    /// Builds a path from explicit sites, checking membership in `R_n`.
    pub fn from_sites(shape: WalkShape, sites: &[SiteCoord]) -> Result<Self> {
        validate_rn(shape, sites)?;
        let mut p = WalkPath::new(shape);
        for x in &sites[1..] {
            let h = linear_hash(&p.keys, x);
            p.push_hashed(x.clone(), h);
        }
        Ok(p)
    }

    fn push_hashed(&mut self, x: SiteCoord, h: u64) {
        let i = self.sites.len() as u32;
        self.sites.push(x);
        self.hashes.push(h);
        if self.index.contains_key(&h) {
            self.spill.push(i);
        } else {
            self.index.insert(h, i);
        }
    }

    pub fn shape(&self) -> WalkShape {
        self.shape
    }

    /// Number of steps `n` (the path has `n + 1` sites).
    pub fn len(&self) -> usize {
        self.sites.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sites(&self) -> &[SiteCoord] {
        &self.sites
    }

    pub fn last(&self) -> &SiteCoord {
        self.sites.last().expect("path always holds the origin")
    }

    fn find(&self, h: u64, matches: impl Fn(&SiteCoord) -> bool) -> Option<usize> {
        if let Some(&i) = self.index.get(&h) {
            if matches(&self.sites[i as usize]) {
                return Some(i as usize);
            }
        }
        self.spill
            .iter()
            .map(|&i| i as usize)
            .find(|&i| self.hashes[i] == h && matches(&self.sites[i]))
    }

    /// Position of `x` on the path.
    pub fn index_of(&self, x: &SiteCoord) -> Option<usize> {
        self.find(linear_hash(&self.keys, x), |y| y == x)
    }

    fn index_of_hashed(&self, x: &SiteCoord, h: u64) -> Option<usize> {
        self.find(h, |y| y == x)
    }

    pub fn contains(&self, x: &SiteCoord) -> bool {
        self.index_of(x).is_some()
    }

    /// Whether the free move `(axis, step)` from the endpoint hits a visited
    /// site.
    fn move_visited(&self, axis: usize, step: i32) -> bool {
        let last = self.last();
        let h = self.hashes[self.hashes.len() - 1]
            .wrapping_add((step as i64 as u64).wrapping_mul(self.keys[axis]));
        self.find(h, |y| {
            y.coords()
                .iter()
                .zip(last.coords())
                .enumerate()
                .all(|(j, (&a, &b))| a == if j == axis { b + step } else { b })
        })
        .is_some()
    }

    /// Unvisited free moves `(axis, +-1)` from the endpoint, in axis order.
    pub fn admissible_moves(&self) -> Vec<(usize, i32)> {
        let mut out = Vec::with_capacity(2 * self.shape.free_axes());
        for axis in 0..self.shape.free_axes() {
            for step in [1, -1] {
                if !self.move_visited(axis, step) {
                    out.push((axis, step));
                }
            }
        }
        out
    }

    fn push_move(&mut self, axis: usize, step: i32) -> SiteCoord {
        let next = self.last().shifted(axis, step);
        let h = self.hashes[self.hashes.len() - 1]
            .wrapping_add((step as i64 as u64).wrapping_mul(self.keys[axis]));
        self.push_hashed(next.clone(), h);
        next
    }
}

/// Checks that `sites` is a path of `R_n`: starts at the origin, never
/// revisits a site, takes free `+-e_j` steps except at drift steps, where it
/// takes a `+e_j` step in the drift block.
pub fn validate_rn(shape: WalkShape, sites: &[SiteCoord]) -> Result<()> {
    let first = sites.first().ok_or_else(|| Error::Contract("empty path".into()))?;
    if first.dim() != shape.d || !first.is_origin() {
        return Err(Error::Contract("path must start at the origin".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for (i, x) in sites.iter().enumerate() {
        if x.dim() != shape.d {
            return Err(Error::Contract(format!("site {i} has the wrong dimension")));
        }
        if !seen.insert(x) {
            return Err(Error::Contract(format!("site {x} visited twice")));
        }
        if i == 0 {
            continue;
        }
        let diff = x.sub(&sites[i - 1]);
        let moved: Vec<(usize, i32)> = diff
            .coords()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0)
            .map(|(j, &c)| (j, c))
            .collect();
        let ok = match moved.as_slice() {
            [(axis, step)] if step.abs() == 1 => {
                if shape.is_drift_step(i) {
                    *axis >= shape.free_axes() && *step == 1
                } else {
                    *axis < shape.free_axes()
                }
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Contract(format!("step {i} ({diff}) is not allowed in R_n")));
        }
    }
    Ok(())
}

/// The set `H`: unvisited sites one free step away from the endpoint.
/// Only defined when the next step is a free step.
pub fn admissible_next(history: &WalkPath) -> Result<Vec<SiteCoord>> {
    let i = history.len() + 1;
    if history.shape.is_drift_step(i) {
        return Err(Error::Contract(format!("step {i} is a drift step")));
    }
    Ok(history
        .admissible_moves()
        .into_iter()
        .map(|(axis, step)| history.last().shifted(axis, step))
        .collect())
}

/// Extends the walk by one step and returns the new endpoint.
pub fn step_walk<R: Rng + ?Sized>(history: &mut WalkPath, rng: &mut R) -> Result<SiteCoord> {
    let shape = history.shape;
    let i = history.len() + 1;
    if shape.is_drift_step(i) {
        let axis = shape.free_axes() + rng.random_range(0..shape.drift_band);
        return Ok(history.push_move(axis, 1));
    }
    let moves = history.admissible_moves();
    if moves.is_empty() {
        return Err(Error::Contract(format!("no admissible move at step {i}")));
    }
    let (axis, step) = moves[rng.random_range(0..moves.len())];
    Ok(history.push_move(axis, step))
}

/// Samples a walk with `n` steps.
pub fn sample_walk<R: Rng + ?Sized>(shape: WalkShape, n: usize, rng: &mut R) -> Result<WalkPath> {
    let mut w = WalkPath::new(shape);
    for _ in 0..n {
        step_walk(&mut w, rng)?;
    }
    Ok(w)
}

/// Sizes of the collision sets between two paths truncated at `n` steps:
/// `F` holds the indices `i <= n` with `V_i` among `S_0..S_n`, and `K` the
/// indices `i <= n - 1` where the directed edge `(V_i, V_{i+1})` is also an
/// edge `(S_j, S_{j+1})` with `j <= n - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairStats {
    pub f_size: usize,
    pub k_size: usize,
    pub f_minus_k_size: usize,
}

pub fn pair_stats(s: &WalkPath, v: &WalkPath, n: usize) -> Result<PairStats> {
    if s.len() < n || v.len() < n {
        return Err(Error::Contract(format!("paths of length {} and {} shorter than {n}", s.len(), v.len())));
    }
    let (mut f, mut k, mut f_only) = (0, 0, 0);
    for i in 0..=n {
        let Some(j) = s.index_of_hashed(&v.sites[i], v.hashes[i]).filter(|&j| j <= n) else {
            continue;
        };
        f += 1;
        let edge = i < n && j < n && s.sites[j + 1] == v.sites[i + 1];
        if edge {
            k += 1;
        } else {
            f_only += 1;
        }
    }
    Ok(PairStats { f_size: f, k_size: k, f_minus_k_size: f_only })
}

/// Natural log of the pair weight
/// `2^{|F \ K|} ((1 + gamma + delta) / gamma)^{|F| - 1} ((lambda + 1) / lambda)^{|K|}`.
pub fn ln_lemma42_weight(stats: &PairStats, p: &ProcessParams) -> Result<f64> {
    if stats.f_size == 0 {
        return Err(Error::Contract("F is empty; the origin is always shared".into()));
    }
    if p.lambda <= 0.0 {
        return Err(Error::Parameter("pair weight needs lambda > 0".into()));
    }
    let maturation = (p.semi_exit_rate() / p.gamma).ln();
    let infection = ((p.lambda + 1.0) / p.lambda).ln();
    Ok(stats.f_minus_k_size as f64 * std::f64::consts::LN_2
        + (stats.f_size - 1) as f64 * maturation
        + stats.k_size as f64 * infection)
}

pub fn lemma42_weight(stats: &PairStats, p: &ProcessParams) -> Result<f64> {
    ln_lemma42_weight(stats, p).map(f64::exp)
}

/// Second-moment bound evaluated at one truncation depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPoint {
    pub n: usize,
    pub ln_mean_weight: f64,
    /// Standard error of the mean weight, relative to the mean.
    pub rel_std_err: f64,
    /// `1 / mean weight`.
    pub bound: f64,
    pub ci95: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SawBound {
    pub shape: WalkShape,
    pub params: ProcessParams,
    pub replicas: u64,
    /// Evaluations at `n_max / 4`, `n_max / 2` and `n_max`.
    pub points: Vec<BoundPoint>,
    /// Share of the total weight carried by the top 1% of pairs at `n_max`.
    pub top_share: f64,
    /// Set when the top 1% carries more than half the mean.
    pub heavy_tail: bool,
}

impl SawBound {
    pub fn final_point(&self) -> &BoundPoint {
        self.points.last().expect("at least one checkpoint")
    }

    /// Relative change of the bound between the last two checkpoints.
    pub fn drift(&self) -> f64 {
        match self.points.as_slice() {
            [.., a, b] => (b.bound - a.bound).abs() / b.bound.max(f64::MIN_POSITIVE),
            _ => 0.0,
        }
    }
}

fn summarise(n: usize, ln_weights: &[f64]) -> BoundPoint {
    let top = ln_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: MeanVar = ln_weights.iter().map(|w| (w - top).exp()).collect();
    let ln_mean = top + scaled.mean().ln();
    let rel = scaled.std_err() / scaled.mean();
    let bound = (-ln_mean).exp();
    // Delta method: se(1/m) = se(m) / m^2 = bound * rel.
    let half = Z95 * bound * rel;
    BoundPoint {
        n,
        ln_mean_weight: ln_mean,
        rel_std_err: rel,
        bound,
        ci95: ((bound - half).max(0.0), (bound + half).min(1.0)),
    }
}

/// Total walk steps one bound estimate may sample.
pub const MAX_WALK_STEPS: u128 = 20_000_000_000;

/// Monte Carlo estimate of the mean pair weight over independent walk
/// pairs, reported as the survival lower bound `1 / mean`.
pub fn estimate_survival_lower_bound(
    d: usize,
    p: &ProcessParams,
    n_max: usize,
    replicas: u64,
    seed: StreamSeed,
) -> Result<SawBound> {
    let shape = WalkShape::new(d)?;
    p.validate()?;
    if n_max < 4 || replicas < 2 {
        return Err(Error::Parameter("need n_max >= 4 and at least 2 replicas".into()));
    }
    if 2 * replicas as u128 * n_max as u128 > MAX_WALK_STEPS {
        return Err(Error::Resource(format!("{replicas} pairs of {n_max}-step walks exceed the step budget")));
    }
    let checkpoints = [n_max / 4, n_max / 2, n_max];
    let per_pair: Vec<[f64; 3]> = (0..replicas)
        .into_par_iter()
        .map(|r| -> Result<[f64; 3]> {
            let mut rng = seed.replica(r);
            let s = sample_walk(shape, n_max, &mut rng)?;
            let v = sample_walk(shape, n_max, &mut rng)?;
            let mut out = [0.0; 3];
            for (slot, &n) in out.iter_mut().zip(&checkpoints) {
                *slot = ln_lemma42_weight(&pair_stats(&s, &v, n)?, p)?;
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let points = (0..3)
        .map(|c| summarise(checkpoints[c], &per_pair.iter().map(|w| w[c]).collect::<Vec<_>>()))
        .collect::<Vec<_>>();

    let mut last: Vec<f64> = per_pair.iter().map(|w| w[2]).collect();
    last.sort_by(|a, b| b.total_cmp(a));
    let top = last[0];
    let total: f64 = last.iter().map(|w| (w - top).exp()).sum();
    let k = ((last.len() as f64) * 0.01).ceil() as usize;
    let head: f64 = last[..k].iter().map(|w| (w - top).exp()).sum();
    let top_share = head / total;

    Ok(SawBound { shape, params: *p, replicas, points, top_share, heavy_tail: top_share > 0.5 })
}

/// `1 / sum_{i,j} p_i p_j P(B_i & B_j) / (P(B_i) P(B_j))`, a lower bound on
/// `P(B_1 | ... | B_n)` for any weights `p` summing to one.
pub fn union_lower_bound(probs: &[f64], pair_probs: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    let n = probs.len();
    if n == 0 || weights.len() != n || pair_probs.len() != n || pair_probs.iter().any(|r| r.len() != n) {
        return Err(Error::Contract("inconsistent event-family dimensions".into()));
    }
    if let Some(bad) = probs.iter().find(|&&q| !(q > 0.0 && q <= 1.0)) {
        return Err(Error::Domain(format!("event probability {bad} must lie in (0, 1]")));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::Domain("weights must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("weights sum to {total}, not 1")));
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += weights[i] * weights[j] * pair_probs[i][j] / (probs[i] * probs[j]);
        }
    }
    Ok(1.0 / s)
}
