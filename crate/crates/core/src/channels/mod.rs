//! Analytical and empirical channel models, EIRP estimation, and the
//! link-budget assembly of RSRP.

mod budget;
mod eirp;
mod models;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use budget::{n_prb_from_bandwidth, resource_element_spread_db, rsrp, LinkBudget, N_SUBCARRIERS};
pub use eirp::{eirp_closed_form, eirp_objective, fit_eirp, fit_all_eirp};
pub use models::{
    friis, nakagami_check, nakagami_mean, nakagami_sample, obstacle_shadowing, shadowing_excess, two_ray_ground,
    uma_b, uma_b_detailed, uma_b_expected, uma_los_probability, winner_c2_nlos, ShadowingCoefficients, UmaClamp,
    UmaLoss, SPEED_OF_LIGHT, UMA_D2D_RANGE_M, UMA_ENV_HEIGHT_M, UMA_HUT_RANGE_M, WINNER_C2_D_RANGE_M,
};

use crate::error::{Error, Result};
use crate::geo::{Cell, LocalPoint, Scenario};
use crate::raypath::{self, PathProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LosMode {
    /// LOS iff the direct path is unobstructed.
    Geometric,
    /// LOS-probability weighted mean of the LOS and NLOS branches.
    ProbabilisticExpected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelParams {
    pub freq_mhz: f64,
    pub h_bs_m: f64,
    pub h_ut_m: f64,
    pub los_mode: LosMode,
    pub shadowing_beta_db_per_wall: f64,
    pub shadowing_gamma_db_per_m: f64,
    pub nakagami_m: f64,
    pub rng_seed: u64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            freq_mhz: 2600.0,
            h_bs_m: 25.0,
            h_ut_m: 1.5,
            los_mode: LosMode::Geometric,
            shadowing_beta_db_per_wall: 9.0,
            shadowing_gamma_db_per_m: 0.4,
            nakagami_m: 2.0,
            rng_seed: 0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.freq_mhz > 0.0) {
            return Err(Error::Domain("freq_mhz must be positive".into()));
        }
        if !(self.h_bs_m > self.h_ut_m && self.h_ut_m > 0.0) {
            return Err(Error::Domain("heights must satisfy h_bs > h_ut > 0".into()));
        }
        if self.shadowing_beta_db_per_wall < 0.0 || self.shadowing_gamma_db_per_m < 0.0 {
            return Err(Error::Domain("shadowing coefficients must be non-negative".into()));
        }
        nakagami_check(self.nakagami_m)
    }

    pub fn shadowing(&self) -> ShadowingCoefficients {
        ShadowingCoefficients {
            beta_db_per_wall: self.shadowing_beta_db_per_wall,
            gamma_db_per_m: self.shadowing_gamma_db_per_m,
        }
    }
}

/// Geometry of one cell-to-receiver link.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub tx: LocalPoint,
    pub rx: LocalPoint,
    pub freq_mhz: f64,
    /// Antenna height above ground at the cell.
    pub h_bs_m: f64,
    /// Receiver height above ground.
    pub h_ut_m: f64,
    pub profile: PathProfile,
}

impl Link {
    pub fn new(s: &Scenario, cell: &Cell, rx: &LocalPoint) -> Result<Self> {
        let profile = raypath::trace(s, &cell.position, rx)?;
        let ground = s.terrain_elevation(rx.x, rx.y)?;
        Ok(Link {
            tx: cell.position,
            rx: *rx,
            freq_mhz: cell.freq_mhz,
            h_bs_m: cell.antenna_height_m,
            h_ut_m: (rx.z - ground).max(1e-3),
            profile,
        })
    }

    pub fn freq_ghz(&self) -> f64 {
        self.freq_mhz / 1000.0
    }

    /// Slant distance, floored so that co-located antennas still yield a finite loss.
    fn distance(&self) -> f64 {
        self.profile.d_3d.max(1.0)
    }

    /// UMa loss for this link under the given LOS treatment.
    pub fn uma_loss(&self, mode: LosMode) -> Result<f64> {
        let d_2d = self.profile.d_2d.max(1e-3);
        let d_3d = self.profile.d_3d.max(d_2d);
        match mode {
            LosMode::Geometric => uma_b(d_2d, d_3d, self.freq_ghz(), self.h_bs_m, self.h_ut_m, self.profile.is_los()),
            LosMode::ProbabilisticExpected => uma_b_expected(d_2d, d_3d, self.freq_ghz(), self.h_bs_m, self.h_ut_m),
        }
    }
}

/// The analytical predictors available for comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PathLossModel {
    Friis,
    TwoRay,
    Nakagami,
    UmaB,
    WinnerC2,
    Obstacle,
}

impl PathLossModel {
    pub const ALL: [PathLossModel; 6] = [
        PathLossModel::Friis,
        PathLossModel::TwoRay,
        PathLossModel::Nakagami,
        PathLossModel::UmaB,
        PathLossModel::WinnerC2,
        PathLossModel::Obstacle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PathLossModel::Friis => "friis",
            PathLossModel::TwoRay => "two-ray",
            PathLossModel::Nakagami => "nakagami",
            PathLossModel::UmaB => "uma-b",
            PathLossModel::WinnerC2 => "winner-c2",
            PathLossModel::Obstacle => "obstacle",
        }
    }

    /// Deterministic path loss for a link. Nakagami uses its mean-power form;
    /// Nakagami and obstacle shadowing sit on top of free space.
    pub fn loss(&self, link: &Link, params: &ChannelParams) -> Result<f64> {
        let d = link.distance();
        match self {
            PathLossModel::Friis => friis(d, link.freq_mhz),
            PathLossModel::TwoRay => two_ray_ground(d, link.freq_mhz, link.h_bs_m, link.h_ut_m),
            PathLossModel::Nakagami => friis(d, link.freq_mhz).map(nakagami_mean),
            PathLossModel::UmaB => link.uma_loss(params.los_mode),
            PathLossModel::WinnerC2 => winner_c2_nlos(d, link.freq_ghz(), link.h_bs_m, link.h_ut_m),
            PathLossModel::Obstacle => {
                friis(d, link.freq_mhz).map(|base| obstacle_shadowing(base, &link.profile, params.shadowing()))
            }
        }
    }
}

impl std::fmt::Display for PathLossModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PathLossModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PathLossModel::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown path-loss model `{s}`")))
    }
}

/// RSRP for a cell at `rx` with an analytical loss and a correction offset.
pub fn predict_rsrp(cell: &Cell, path_loss_db: f64, correction_db: f64) -> Result<f64> {
    let eirp = cell
        .eirp_dbm
        .ok_or_else(|| Error::MissingPrerequisite(format!("cell `{}` has no fitted EIRP", cell.id)))?;
    let n_prb = n_prb_from_bandwidth(cell.bandwidth_mhz)?;
    Ok(LinkBudget::new(eirp, path_loss_db, correction_db, n_prb)?.rsrp())
}
