use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subcarriers per PRB in LTE.
pub const N_SUBCARRIERS: u32 = 12;

const PRB_TABLE: [(f64, u32); 6] = [(1.4, 6), (3.0, 15), (5.0, 25), (10.0, 50), (15.0, 75), (20.0, 100)];

pub fn n_prb_from_bandwidth(bandwidth_mhz: f64) -> Result<u32> {
    PRB_TABLE
        .iter()
        .find(|(b, _)| *b == bandwidth_mhz)
        .map(|(_, n)| *n)
        .ok_or_else(|| Error::Domain(format!("unsupported LTE bandwidth {bandwidth_mhz} MHz")))
}

/// Power spread over all resource elements: 10 log10(N_PRB * N_SC).
pub fn resource_element_spread_db(n_prb: u32) -> f64 {
    10.0 * f64::from(n_prb * N_SUBCARRIERS).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    pub eirp_dbm: f64,
    pub path_loss_db: f64,
    pub correction_db: f64,
    pub n_prb: u32,
    pub n_sc: u32,
}

impl LinkBudget {
    pub fn new(eirp_dbm: f64, path_loss_db: f64, correction_db: f64, n_prb: u32) -> Result<Self> {
        if !PRB_TABLE.iter().any(|(_, n)| *n == n_prb) {
            return Err(Error::Domain(format!("unsupported PRB count {n_prb}")));
        }
        Ok(LinkBudget {
            eirp_dbm,
            path_loss_db,
            correction_db,
            n_prb,
            n_sc: N_SUBCARRIERS,
        })
    }

    pub fn rsrp(&self) -> f64 {
        rsrp(self)
    }
}

/// RSRP = EIRP - 10 log10(N_PRB * N_SC) - L + dL.
pub fn rsrp(budget: &LinkBudget) -> f64 {
    budget.eirp_dbm - 10.0 * f64::from(budget.n_prb * budget.n_sc).log10() - budget.path_loss_db
        + budget.correction_db
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prb_table() {
        assert_eq!(n_prb_from_bandwidth(20.0).unwrap(), 100);
        assert_eq!(n_prb_from_bandwidth(10.0).unwrap(), 50);
        assert_eq!(n_prb_from_bandwidth(1.4).unwrap(), 6);
        assert!(n_prb_from_bandwidth(7.0).is_err());
    }

    #[test]
    fn rsrp_reference() {
        let b = LinkBudget::new(20.0, 100.0, 0.0, 100).unwrap();
        assert!((b.rsrp() - (-110.79)).abs() < 0.01);
        let shifted = LinkBudget::new(20.0, 100.0, 5.0, 100).unwrap();
        assert_eq!(shifted.rsrp() - b.rsrp(), 5.0);
        let narrow = LinkBudget::new(20.0, 100.0, 0.0, 6).unwrap();
        assert!((narrow.rsrp() - b.rsrp() - 12.22).abs() < 0.01);
        assert!(LinkBudget::new(20.0, 100.0, 0.0, 7).is_err());
    }

    #[test]
    fn rsrp_affine_unit_slope() {
        for c in [-3.25, 0.5, 17.0] {
            let a = LinkBudget::new(10.0, 95.0, 1.0, 50).unwrap();
            let mut e = a;
            e.eirp_dbm += c;
            let mut d = a;
            d.correction_db += c;
            assert_eq!(e.rsrp(), a.eirp_dbm + c - resource_element_spread_db(50) - 95.0 + 1.0);
            assert_eq!(d.rsrp(), a.eirp_dbm - resource_element_spread_db(50) - 95.0 + (1.0 + c));
        }
    }
}
