//! Path-loss models. All losses are in dB and positive for attenuation.

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};
use crate::raypath::PathProfile;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// UMa validity range for the horizontal distance.
pub const UMA_D2D_RANGE_M: (f64, f64) = (10.0, 5000.0);
/// UMa validity range for the receiver height.
pub const UMA_HUT_RANGE_M: (f64, f64) = (1.5, 22.5);
/// Effective environment height used in the UMa breakpoint distance.
pub const UMA_ENV_HEIGHT_M: f64 = 1.0;
/// WINNER II C2 validity range for the link distance.
pub const WINNER_C2_D_RANGE_M: (f64, f64) = (50.0, 5000.0);

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn friis(d_m: f64, freq_mhz: f64) -> Result<f64> {
    positive("distance", d_m)?;
    positive("frequency", freq_mhz)?;
    let f_hz = freq_mhz * 1e6;
    Ok(20.0 * (4.0 * std::f64::consts::PI * d_m * f_hz / SPEED_OF_LIGHT).log10())
}

/// Two-ray ground reflection; free space up to the crossover distance.
pub fn two_ray_ground(d_m: f64, freq_mhz: f64, h_tx_m: f64, h_rx_m: f64) -> Result<f64> {
    positive("distance", d_m)?;
    positive("frequency", freq_mhz)?;
    positive("tx height", h_tx_m)?;
    positive("rx height", h_rx_m)?;
    let lambda = SPEED_OF_LIGHT / (freq_mhz * 1e6);
    let d_c = 4.0 * std::f64::consts::PI * h_tx_m * h_rx_m / lambda;
    if d_m <= d_c {
        friis(d_m, freq_mhz)
    } else {
        Ok(40.0 * d_m.log10() - 20.0 * (h_tx_m * h_rx_m).log10())
    }
}

pub fn nakagami_check(m: f64) -> Result<()> {
    if m >= 0.5 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("Nakagami shape must be >= 0.5, got {m}")))
    }
}

/// Mean-power Nakagami: unit-mean fading leaves the loss unchanged.
pub fn nakagami_mean(base_loss_db: f64) -> f64 {
    base_loss_db
}

/// One faded realization: the power gain is Gamma(m, 1/m) distributed.
pub fn nakagami_sample<R: Rng + ?Sized>(base_loss_db: f64, m: f64, rng: &mut R) -> Result<f64> {
    nakagami_check(m)?;
    let gamma = Gamma::new(m, 1.0 / m).map_err(|e| Error::Domain(e.to_string()))?;
    let g: f64 = gamma.sample(rng);
    Ok(base_loss_db - 10.0 * g.log10())
}

/// Which inputs were clamped into the UMa validity range.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UmaClamp {
    pub d_2d_m: Option<f64>,
    pub h_ut_m: Option<f64>,
}

impl UmaClamp {
    pub fn any(&self) -> bool {
        self.d_2d_m.is_some() || self.h_ut_m.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UmaLoss {
    pub loss_db: f64,
    pub los_db: f64,
    pub nlos_db: f64,
    pub clamp: UmaClamp,
}

/// UMa path loss with both branches and clamp diagnostics.
pub fn uma_b_detailed(d_2d_m: f64, d_3d_m: f64, freq_ghz: f64, h_bs_m: f64, h_ut_m: f64, los: bool) -> Result<UmaLoss> {
    positive("2D distance", d_2d_m)?;
    positive("3D distance", d_3d_m)?;
    positive("frequency", freq_ghz)?;
    positive("BS height", h_bs_m)?;
    positive("UT height", h_ut_m)?;
    let mut clamp = UmaClamp::default();
    let d_2d = d_2d_m.clamp(UMA_D2D_RANGE_M.0, UMA_D2D_RANGE_M.1);
    if d_2d != d_2d_m {
        clamp.d_2d_m = Some(d_2d);
    }
    let h_ut = h_ut_m.clamp(UMA_HUT_RANGE_M.0, UMA_HUT_RANGE_M.1);
    if h_ut != h_ut_m {
        clamp.h_ut_m = Some(h_ut);
    }
    let d_3d = if clamp.any() {
        d_2d.hypot(h_bs_m - h_ut)
    } else {
        d_3d_m.max(d_2d)
    };
    if clamp.any() {
        log::warn!(
            "UMa inputs clamped to validity range: d_2d {d_2d_m:.2} -> {d_2d:.2} m, h_ut {h_ut_m:.2} -> {h_ut:.2} m"
        );
    }

    let f_term = 20.0 * freq_ghz.log10();
    let d_bp = 4.0 * (h_bs_m - UMA_ENV_HEIGHT_M) * (h_ut - UMA_ENV_HEIGHT_M) * freq_ghz * 1e9 / SPEED_OF_LIGHT;
    let los_db = if d_2d <= d_bp {
        28.0 + 22.0 * d_3d.log10() + f_term
    } else {
        28.0 + 40.0 * d_3d.log10() + f_term - 9.0 * (d_bp * d_bp + (h_bs_m - h_ut).powi(2)).log10()
    };
    let nlos_candidate = 13.54 + 39.08 * d_3d.log10() + f_term - 0.6 * (h_ut - 1.5);
    let nlos_db = los_db.max(nlos_candidate);
    Ok(UmaLoss {
        loss_db: if los { los_db } else { nlos_db },
        los_db,
        nlos_db,
        clamp,
    })
}

pub fn uma_b(d_2d_m: f64, d_3d_m: f64, freq_ghz: f64, h_bs_m: f64, h_ut_m: f64, los: bool) -> Result<f64> {
    uma_b_detailed(d_2d_m, d_3d_m, freq_ghz, h_bs_m, h_ut_m, los).map(|u| u.loss_db)
}

/// UMa LOS probability as a function of horizontal distance and receiver height.
pub fn uma_los_probability(d_2d_m: f64, h_ut_m: f64) -> f64 {
    if d_2d_m <= 18.0 {
        return 1.0;
    }
    let c_prime = if h_ut_m <= 13.0 {
        0.0
    } else {
        ((h_ut_m - 13.0) / 10.0).powf(1.5)
    };
    let base = 18.0 / d_2d_m + (-d_2d_m / 63.0).exp() * (1.0 - 18.0 / d_2d_m);
    base * (1.0 + c_prime * 1.25 * (d_2d_m / 100.0).powi(3) * (-d_2d_m / 150.0).exp())
}

/// LOS-probability weighted mean of the two UMa branches.
pub fn uma_b_expected(d_2d_m: f64, d_3d_m: f64, freq_ghz: f64, h_bs_m: f64, h_ut_m: f64) -> Result<f64> {
    let u = uma_b_detailed(d_2d_m, d_3d_m, freq_ghz, h_bs_m, h_ut_m, true)?;
    let p = uma_los_probability(d_2d_m, h_ut_m);
    Ok(p * u.los_db + (1.0 - p) * u.nlos_db)
}

/// WINNER II C2 (typical urban macro) NLOS path loss.
pub fn winner_c2_nlos(d_m: f64, freq_ghz: f64, h_bs_m: f64, h_ut_m: f64) -> Result<f64> {
    positive("distance", d_m)?;
    positive("frequency", freq_ghz)?;
    positive("BS height", h_bs_m)?;
    positive("UT height", h_ut_m)?;
    let d = d_m.clamp(WINNER_C2_D_RANGE_M.0, WINNER_C2_D_RANGE_M.1);
    if d != d_m {
        log::warn!("WINNER II C2 distance clamped: {d_m:.2} -> {d:.2} m");
    }
    let lh = h_bs_m.log10();
    Ok((44.9 - 6.55 * lh) * d.log10() + 34.46 + 5.83 * lh + 23.0 * (freq_ghz / 5.0).log10())
}

/// Shadowing coefficients: per wall and per meter of indoor distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadowingCoefficients {
    pub beta_db_per_wall: f64,
    pub gamma_db_per_m: f64,
}

impl Default for ShadowingCoefficients {
    fn default() -> Self {
        ShadowingCoefficients {
            beta_db_per_wall: 9.0,
            gamma_db_per_m: 0.4,
        }
    }
}

/// Excess loss from building penetrations; each merged run crosses two walls.
pub fn shadowing_excess(profile: &PathProfile, coeff: ShadowingCoefficients) -> f64 {
    let walls = 2.0 * profile.n_obs as f64;
    coeff.beta_db_per_wall * walls + coeff.gamma_db_per_m * profile.d_obs
}

pub fn obstacle_shadowing(base_loss_db: f64, profile: &PathProfile, coeff: ShadowingCoefficients) -> f64 {
    base_loss_db + shadowing_excess(profile, coeff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn profile(n_obs: usize, runs: &[(f64, f64)]) -> PathProfile {
        PathProfile {
            d_2d: 100.0,
            d_3d: 100.0,
            n_obs,
            d_obs: runs.iter().map(|(a, b)| b - a).sum(),
            n_ter: 0,
            d_ter: 0.0,
            building_intervals: runs.to_vec(),
            terrain_intervals: vec![],
        }
    }

    #[test]
    fn friis_reference_value() {
        // 20 log10(4 pi d f / c), evaluated independently.
        let expected = 20.0 * (4.0 * std::f64::consts::PI * 100.0 * 2.6e9 / 299_792_458.0f64).log10();
        let v = friis(100.0, 2600.0).unwrap();
        assert!((v - 80.75).abs() < 0.01);
        assert!((v - expected).abs() < 1e-12);
        let doubled = friis(200.0, 2600.0).unwrap();
        assert!((doubled - v - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(friis(0.0, 2600.0).is_err());
        assert!(friis(-1.0, 2600.0).is_err());
    }

    #[test]
    fn two_ray_far_field() {
        let v = two_ray_ground(10_000.0, 2600.0, 30.0, 1.5).unwrap();
        assert!((v - 126.93).abs() < 0.01, "{v}");
        let v2 = two_ray_ground(20_000.0, 2600.0, 30.0, 1.5).unwrap();
        assert!((v2 - v - 40.0 * 2f64.log10()).abs() < 1e-9);
        assert!(two_ray_ground(100.0, 2600.0, 0.0, 1.5).is_err());
    }

    #[test]
    fn two_ray_crossover_uses_free_space() {
        let (f, ht, hr) = (900.0, 10.0, 1.5);
        let lambda = SPEED_OF_LIGHT / (f * 1e6);
        let d_c = 4.0 * std::f64::consts::PI * ht * hr / lambda;
        assert_eq!(two_ray_ground(d_c, f, ht, hr).unwrap(), friis(d_c, f).unwrap());
        // The two branches meet at the crossover.
        let far = 40.0 * d_c.log10() - 20.0 * (ht * hr).log10();
        assert!((far - friis(d_c, f).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn nakagami_modes() {
        assert_eq!(nakagami_mean(97.5), 97.5);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16).map(|_| nakagami_sample(100.0, 2.0, &mut rng).unwrap().to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
        assert!(nakagami_sample(100.0, 0.3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn nakagami_gain_moments() {
        let m = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let gains: Vec<f64> = (0..n)
            .map(|_| 10f64.powf((100.0 - nakagami_sample(100.0, m, &mut rng).unwrap()) / 10.0))
            .collect();
        let mean = gains.iter().sum::<f64>() / n as f64;
        let var = gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((var - 1.0 / m).abs() < 0.05 / m, "var {var}");
    }

    #[test]
    fn uma_los_below_breakpoint() {
        let v = uma_b(99.0, 100.0, 2.6, 25.0, 1.5, true).unwrap();
        assert!((v - 80.30).abs() < 0.01, "{v}");
        assert!((v - (28.0 + 44.0 + 20.0 * 2.6f64.log10())).abs() < 1e-12);
    }

    #[test]
    fn uma_los_above_breakpoint_is_continuous() {
        let (f, hb, hu) = (2.6, 25.0, 1.5);
        let d_bp = 4.0 * (hb - 1.0) * (hu - 1.0) * f * 1e9 / SPEED_OF_LIGHT;
        let d3 = |d2: f64| d2.hypot(hb - hu);
        let below = uma_b(d_bp, d3(d_bp), f, hb, hu, true).unwrap();
        let above = uma_b(d_bp + 1e-6, d3(d_bp + 1e-6), f, hb, hu, true).unwrap();
        assert!((below - above).abs() < 1e-3);
    }

    #[test]
    fn uma_nlos_takes_max_with_los() {
        // Receiver close to a high UT position: NLOS candidate falls below LOS.
        let (d2, hb, hu, f): (f64, f64, f64, f64) = (10.0, 25.0, 22.5, 2.6);
        let d3 = d2.hypot(hb - hu);
        let los = 28.0 + 22.0 * d3.log10() + 20.0 * f.log10();
        let cand = 13.54 + 39.08 * d3.log10() + 20.0 * f.log10() - 0.6 * (hu - 1.5);
        assert!(cand < los);
        assert_eq!(uma_b(d2, d3, f, hb, hu, false).unwrap(), los);
        // Far away the NLOS candidate dominates.
        let d3 = 1000f64.hypot(hb - 1.5);
        let u = uma_b_detailed(1000.0, d3, f, hb, 1.5, false).unwrap();
        assert!(u.nlos_db > u.los_db);
    }

    #[test]
    fn uma_clamps_short_distances() {
        let u = uma_b_detailed(8.0, 8.0f64.hypot(23.5), 2.6, 25.0, 1.5, true).unwrap();
        assert_eq!(u.clamp.d_2d_m, Some(10.0));
        let at10 = uma_b(10.0, 10.0f64.hypot(23.5), 2.6, 25.0, 1.5, true).unwrap();
        assert_eq!(u.loss_db, at10);
        assert!(uma_b(0.0, 5.0, 2.6, 25.0, 1.5, true).is_err());
    }

    #[test]
    fn los_probability_shape() {
        assert_eq!(uma_los_probability(10.0, 1.5), 1.0);
        assert!(uma_los_probability(2000.0, 1.5) < 0.05);
        let mut prev = 1.0;
        for d in 0..=5000 {
            let p = uma_los_probability(d as f64, 1.5);
            assert!(p <= prev + 1e-15 && p > 0.0 && p <= 1.0);
            prev = p;
        }
    }

    #[test]
    fn expected_mode_between_branches() {
        for d2 in [20.0f64, 50.0, 200.0, 800.0, 3000.0] {
            let d3 = d2.hypot(23.5);
            let u = uma_b_detailed(d2, d3, 2.6, 25.0, 1.5, true).unwrap();
            let e = uma_b_expected(d2, d3, 2.6, 25.0, 1.5).unwrap();
            let p = uma_los_probability(d2, 1.5);
            assert!((e - (p * u.los_db + (1.0 - p) * u.nlos_db)).abs() < 1e-12);
            assert!(e >= u.los_db.min(u.nlos_db) - 1e-12 && e <= u.los_db.max(u.nlos_db) + 1e-12);
        }
    }

    #[test]
    fn winner_formula() {
        // Direct evaluation of the C2 NLOS expression.
        let lh = 25f64.log10();
        let expected = (44.9 - 6.55 * lh) * 3.0 + 34.46 + 5.83 * lh + 23.0 * (2.6f64 / 5.0).log10();
        let v = winner_c2_nlos(1000.0, 2.6, 25.0, 1.5).unwrap();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 143.31).abs() < 0.01, "{v}");
        let at5 = winner_c2_nlos(1000.0, 5.0, 25.0, 1.5).unwrap();
        assert!((at5 - ((44.9 - 6.55 * lh) * 3.0 + 34.46 + 5.83 * lh)).abs() < 1e-12);
    }

    #[test]
    fn winner_decreases_with_bs_height() {
        for d in [20.0, 100.0, 1000.0] {
            let mut prev = f64::INFINITY;
            for h in [5.0, 10.0, 20.0, 40.0, 80.0] {
                let v = winner_c2_nlos(d, 2.6, h, 1.5).unwrap();
                // Finite-difference slope in h_bs.
                let slope = (winner_c2_nlos(d, 2.6, h + 1e-4, 1.5).unwrap() - v) / 1e-4;
                assert!(slope < 0.0 && v < prev);
                prev = v;
            }
        }
    }

    #[test]
    fn shadowing_linear() {
        let c = ShadowingCoefficients::default();
        assert_eq!(obstacle_shadowing(90.0, &profile(0, &[]), c), 90.0);
        let one = obstacle_shadowing(90.0, &profile(1, &[(10.0, 20.0)]), c);
        assert!((one - 112.0).abs() < 1e-12);
        let a = shadowing_excess(&profile(1, &[(10.0, 14.0)]), c);
        let b = shadowing_excess(&profile(1, &[(30.0, 37.0)]), c);
        let both = shadowing_excess(&profile(2, &[(10.0, 14.0), (30.0, 37.0)]), c);
        assert!((both - (a + b)).abs() < 1e-12);
    }

    #[test]
    fn losses_increase_with_distance() {
        let mut prev = [f64::NEG_INFINITY; 5];
        for i in 0..500 {
            let d: f64 = 60.0 + 9.0 * i as f64;
            let d3 = d.hypot(23.5);
            let now = [
                friis(d, 2600.0).unwrap(),
                two_ray_ground(d, 2600.0, 25.0, 1.5).unwrap(),
                uma_b(d, d3, 2.6, 25.0, 1.5, true).unwrap(),
                uma_b(d, d3, 2.6, 25.0, 1.5, false).unwrap(),
                winner_c2_nlos(d, 2.6, 25.0, 1.5).unwrap(),
            ];
            for k in 0..5 {
                assert!(now[k] > prev[k], "model {k} at d={d}");
            }
            prev = now;
        }
    }
}
