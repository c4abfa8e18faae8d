use super::{ProcessKind, ProcessParams, SiteState, SparseConfig};
use crate::error::{Error, Result};
use crate::lattice::{LatticeGeometry, SiteCoord};

fn full_neighbours(cfg: &SparseConfig, x: &SiteCoord, g: &LatticeGeometry) -> Result<usize> {
    Ok(g.neighbors(x)?
        .iter()
        .filter(|y| cfg.get(y) == SiteState::Full)
        .count())
}

/// Outgoing transitions of site `x` in the two-stage contact process.
/// Zero-rate transitions are omitted.
pub fn site_rates_contact(
    cfg: &SparseConfig,
    x: &SiteCoord,
    p: &ProcessParams,
    g: &LatticeGeometry,
) -> Result<Vec<(SiteState, f64)>> {
    site_rates(ProcessKind::Contact, cfg, x, p, g)
}

/// Outgoing transitions of site `x` in the two-stage SIR model.
pub fn site_rates_sir(
    cfg: &SparseConfig,
    x: &SiteCoord,
    p: &ProcessParams,
    g: &LatticeGeometry,
) -> Result<Vec<(SiteState, f64)>> {
    site_rates(ProcessKind::Sir, cfg, x, p, g)
}

pub fn site_rates(
    kind: ProcessKind,
    cfg: &SparseConfig,
    x: &SiteCoord,
    p: &ProcessParams,
    g: &LatticeGeometry,
) -> Result<Vec<(SiteState, f64)>> {
    g.check(x)?;
    let cleared = match kind {
        ProcessKind::Contact => SiteState::Healthy,
        ProcessKind::Sir => SiteState::Recovered,
    };
    let rates = match cfg.get(x) {
        SiteState::Full => vec![(cleared, 1.0)],
        SiteState::Semi => match kind {
            ProcessKind::Contact => vec![(SiteState::Full, p.gamma), (cleared, 1.0 + p.delta)],
            ProcessKind::Sir => vec![(cleared, 1.0 + p.delta), (SiteState::Full, p.gamma)],
        },
        SiteState::Healthy => {
            let k = full_neighbours(cfg, x, g)?;
            let rate = p.lambda * k as f64;
            if rate > 0.0 {
                vec![(SiteState::Semi, rate)]
            } else {
                vec![]
            }
        }
        SiteState::Recovered => match kind {
            ProcessKind::Sir => vec![],
            ProcessKind::Contact => {
                return Err(Error::Domain(format!(
                    "site {x} is recovered, which the contact process does not allow"
                )))
            }
        },
    };
    Ok(rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize) -> (LatticeGeometry, SiteCoord) {
        (LatticeGeometry::torus(d, 5).unwrap(), SiteCoord::origin(d))
    }

    #[test]
    fn contact_examples() {
        let (g, o) = setup(3);
        let p = ProcessParams::new(0.1, 2.0, 0.5).unwrap();
        let mut cfg = SparseConfig::single(o.clone());
        assert_eq!(site_rates_contact(&cfg, &o, &p, &g).unwrap(), vec![(SiteState::Healthy, 1.0)]);
        cfg.set(o.clone(), SiteState::Semi);
        assert_eq!(
            site_rates_contact(&cfg, &o, &p, &g).unwrap(),
            vec![(SiteState::Full, 2.0), (SiteState::Healthy, 1.5)]
        );
        let mut cfg = SparseConfig::new();
        for axis in 0..3 {
            cfg.set(SiteCoord::unit(3, axis), SiteState::Full);
        }
        let r = site_rates_contact(&cfg, &o, &p, &g).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, SiteState::Semi);
        assert!((r[0].1 - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sir_examples() {
        let (g, o) = setup(2);
        let p = ProcessParams::new(0.7, 1.0, 1.0).unwrap();
        let mut cfg = SparseConfig::single(o.clone());
        assert_eq!(site_rates_sir(&cfg, &o, &p, &g).unwrap(), vec![(SiteState::Recovered, 1.0)]);
        cfg.set(o.clone(), SiteState::Recovered);
        cfg.set(SiteCoord::unit(2, 0), SiteState::Full);
        assert!(site_rates_sir(&cfg, &o, &p, &g).unwrap().is_empty());
        assert!(site_rates_sir(&SparseConfig::new(), &o, &p, &g).unwrap().is_empty());
    }

    #[test]
    fn recovered_is_invalid_for_contact() {
        let (g, o) = setup(1);
        let mut cfg = SparseConfig::new();
        cfg.set(o.clone(), SiteState::Recovered);
        let p = ProcessParams::new(1.0, 1.0, 1.0).unwrap();
        assert!(site_rates_contact(&cfg, &o, &p, &g).is_err());
    }
}
