use std::collections::BTreeMap;

use super::{n_prb_from_bandwidth, resource_element_spread_db, ChannelParams, Link};
use crate::error::{Error, Result};
use crate::geo::{Cell, Measurement, Scenario};

/// Mean squared residual of received powers against `eirp - L`.
pub fn eirp_objective(prx_dbm: &[f64], losses_db: &[f64], eirp_dbm: f64) -> f64 {
    let n = prx_dbm.len() as f64;
    prx_dbm
        .iter()
        .zip(losses_db)
        .map(|(p, l)| (p - eirp_dbm + l).powi(2))
        .sum::<f64>()
        / n
}

/// The quadratic objective is minimized by the mean of `P_RX + L`.
pub fn eirp_closed_form(prx_dbm: &[f64], losses_db: &[f64]) -> Result<f64> {
    if prx_dbm.is_empty() {
        return Err(Error::InsufficientData("EIRP fit needs at least one measurement".into()));
    }
    if prx_dbm.len() != losses_db.len() {
        return Err(Error::Consistency("received powers and losses differ in length".into()));
    }
    Ok(prx_dbm.iter().zip(losses_db).map(|(p, l)| p + l).sum::<f64>() / prx_dbm.len() as f64)
}

/// EIRP of one cell from its RSRP measurements, using the UMa baseline as `L`.
///
/// RSRP readings are lifted to total received power by adding the resource
/// element spread of the cell's bandwidth.
pub fn fit_eirp(s: &Scenario, cell: &Cell, measurements: &[Measurement], params: &ChannelParams) -> Result<f64> {
    let spread = resource_element_spread_db(n_prb_from_bandwidth(cell.bandwidth_mhz)?);
    let mut prx = Vec::new();
    let mut losses = Vec::new();
    for m in measurements.iter().filter(|m| m.cell_id == cell.id) {
        let link = Link::new(s, cell, &m.position)?;
        prx.push(m.rsrp_dbm + spread);
        losses.push(link.uma_loss(params.los_mode)?);
    }
    if prx.is_empty() {
        return Err(Error::InsufficientData(format!("no measurements for cell `{}`", cell.id)));
    }
    eirp_closed_form(&prx, &losses)
}

/// Fits every cell that has measurements; cells without data are reported and skipped.
pub fn fit_all_eirp(
    s: &Scenario,
    measurements: &[Measurement],
    params: &ChannelParams,
) -> Result<(BTreeMap<String, f64>, Vec<String>)> {
    let mut fitted = BTreeMap::new();
    let mut missing = Vec::new();
    for cell in s.cells() {
        match fit_eirp(s, cell, measurements, params) {
            Ok(v) => {
                fitted.insert(cell.id.clone(), v);
            }
            Err(Error::InsufficientData(_)) => missing.push(cell.id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((fitted, missing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Golden-section search, independent of the closed form.
    fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        let mut c = b - r * (b - a);
        let mut d = a + r * (b - a);
        while (b - a).abs() > tol {
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
            c = b - r * (b - a);
            d = a + r * (b - a);
        }
        0.5 * (a + b)
    }

    #[test]
    fn two_point_fit() {
        assert_eq!(eirp_closed_form(&[-80.0, -90.0], &[100.0, 110.0]).unwrap(), 20.0);
        assert_eq!(eirp_closed_form(&[-73.5], &[118.25]).unwrap(), -73.5 + 118.25);
        assert!(matches!(eirp_closed_form(&[], &[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn closed_form_matches_numeric_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let prx: Vec<f64> = (0..n).map(|_| rng.random_range(-120.0..-50.0)).collect();
            let l: Vec<f64> = (0..n).map(|_| rng.random_range(60.0..160.0)).collect();
            let closed = eirp_closed_form(&prx, &l).unwrap();
            let numeric = golden_section(|e| eirp_objective(&prx, &l, e), -100.0, 100.0, 1e-9);
            assert!((closed - numeric).abs() < 1e-6, "{closed} vs {numeric}");
        }
    }
}
