//! Geometry of `Z^d` and its finite truncations.
//!
//! Two truncations are supported: a box of radius `L` whose exterior is
//! permanently healthy, and a torus of side `M`. Coordinates of torus sites
//! are always stored reduced to `0..M`.

use std::borrow::Borrow;
use std::fmt;

use crate::error::{Error, Result};

/// A point of `Z^d`.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteCoord(Vec<i32>);

impl SiteCoord {
    pub fn new(coords: Vec<i32>) -> Self {
        SiteCoord(coords)
    }

    pub fn origin(d: usize) -> Self {
        SiteCoord(vec![0; d])
    }

    /// The unit vector along `axis` (zero-based).
    pub fn unit(d: usize, axis: usize) -> Self {
        let mut c = vec![0; d];
        c[axis] = 1;
        SiteCoord(c)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i32] {
        &self.0
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Returns a copy moved by `step` (`+1` or `-1`) along `axis`.
    pub fn shifted(&self, axis: usize, step: i32) -> Self {
        let mut c = self.0.clone();
        c[axis] += step;
        SiteCoord(c)
    }

    pub fn sub(&self, other: &SiteCoord) -> SiteCoord {
        debug_assert_eq!(self.dim(), other.dim());
        SiteCoord(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

impl Borrow<[i32]> for SiteCoord {
    fn borrow(&self) -> &[i32] {
        &self.0
    }
}

impl fmt::Debug for SiteCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for SiteCoord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl From<Vec<i32>> for SiteCoord {
    fn from(v: Vec<i32>) -> Self {
        SiteCoord(v)
    }
}

/// `l1` norm, `sum |x_i|`.
pub fn l1_norm(x: &SiteCoord) -> u64 {
    x.0.iter().map(|c| c.unsigned_abs() as u64).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    /// `{x : |x_i| <= radius}`; everything outside is absorbing.
    Box { radius: i32 },
    /// `(Z / side Z)^d`.
    Torus { side: i32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeGeometry {
    d: usize,
    domain: Domain,
}

impl LatticeGeometry {
    pub fn new(d: usize, domain: Domain) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("dimension must be at least 1".into()));
        }
        match domain {
            Domain::Box { radius } if radius < 1 => {
                return Err(Error::Parameter(format!("box radius {radius} < 1")))
            }
            Domain::Torus { side } if side < 3 => {
                return Err(Error::Parameter(format!("torus side {side} < 3")))
            }
            _ => {}
        }
        Ok(LatticeGeometry { d, domain })
    }

    pub fn boxed(d: usize, radius: i32) -> Result<Self> {
        Self::new(d, Domain::Box { radius })
    }

    pub fn torus(d: usize, side: i32) -> Result<Self> {
        Self::new(d, Domain::Torus { side })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.domain, Domain::Torus { .. })
    }

    pub fn contains(&self, x: &SiteCoord) -> bool {
        if x.dim() != self.d {
            return false;
        }
        match self.domain {
            Domain::Box { radius } => x.0.iter().all(|c| c.abs() <= radius),
            Domain::Torus { side } => x.0.iter().all(|&c| (0..side).contains(&c)),
        }
    }

    pub fn check(&self, x: &SiteCoord) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain(format!("site {x} lies outside {self:?}")))
        }
    }

    /// Neighbours of `x` inside the domain.
    pub fn neighbors(&self, x: &SiteCoord) -> Result<Vec<SiteCoord>> {
        self.check(x)?;
        let mut out = Vec::with_capacity(2 * self.d);
        self.for_each_neighbor(x, |y| out.push(y));
        Ok(out)
    }

    /// Visits the in-domain neighbours of `x` in a fixed order
    /// (`+e_1, -e_1, +e_2, ...`). `x` must already lie in the domain.
    pub fn for_each_neighbor(&self, x: &SiteCoord, mut visit: impl FnMut(SiteCoord)) {
        for axis in 0..self.d {
            for step in [1, -1] {
                if let Some(y) = self.step(x, axis, step) {
                    visit(y);
                }
            }
        }
    }

    /// Same order as [`for_each_neighbor`](Self::for_each_neighbor), but
    /// hands out borrowed coordinates from one scratch buffer.
    pub fn for_each_neighbor_slice(&self, x: &[i32], scratch: &mut Vec<i32>, mut visit: impl FnMut(&[i32])) {
        scratch.clear();
        scratch.extend_from_slice(x);
        for axis in 0..self.d {
            let c = x[axis];
            for step in [1, -1] {
                let moved = match self.domain {
                    Domain::Box { radius } => Some(c + step).filter(|m| m.abs() <= radius),
                    Domain::Torus { side } => Some((c + step).rem_euclid(side)),
                };
                if let Some(m) = moved {
                    scratch[axis] = m;
                    visit(scratch);
                }
            }
            scratch[axis] = c;
        }
    }

    /// The site reached from `x` by one step along `axis`, or `None` if the
    /// step leaves the box.
    pub fn step(&self, x: &SiteCoord, axis: usize, step: i32) -> Option<SiteCoord> {
        let mut c = x.0.clone();
        match self.domain {
            Domain::Box { radius } => {
                c[axis] += step;
                (c[axis].abs() <= radius).then_some(SiteCoord(c))
            }
            Domain::Torus { side } => {
                c[axis] = (c[axis] + step).rem_euclid(side);
                Some(SiteCoord(c))
            }
        }
    }

    /// Number of sites in the domain, if it fits in a `u64`.
    pub fn site_count(&self) -> Option<u64> {
        let side = match self.domain {
            Domain::Box { radius } => 2 * radius as u64 + 1,
            Domain::Torus { side } => side as u64,
        };
        (0..self.d).try_fold(1u64, |acc, _| acc.checked_mul(side))
    }

    /// Every site of the domain in lexicographic order. Meant for tiny
    /// geometries only.
    pub fn sites(&self) -> Result<Vec<SiteCoord>> {
        let count = self
            .site_count()
            .filter(|&n| n <= 10_000_000)
            .ok_or_else(|| Error::Resource(format!("{self:?} has too many sites to enumerate")))?;
        let (lo, hi) = match self.domain {
            Domain::Box { radius } => (-radius, radius),
            Domain::Torus { side } => (0, side - 1),
        };
        let mut out = Vec::with_capacity(count as usize);
        let mut cur = vec![lo; self.d];
        loop {
            out.push(SiteCoord(cur.clone()));
            let mut axis = self.d;
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                if cur[axis] < hi {
                    cur[axis] += 1;
                    break;
                }
                cur[axis] = lo;
            }
        }
    }
}
