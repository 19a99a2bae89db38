//! Single-cell deployment: user placement on an annular theater, large-scale
//! fading and normalized transmit powers.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical parameters of the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    /// Inner radius of the seating annulus (m).
    pub r1: f64,
    /// Outer radius of the seating annulus (m).
    pub r2: f64,
    /// Number of users.
    #[serde(rename = "K")]
    pub users: usize,
    /// Number of base-station antennas.
    #[serde(rename = "N")]
    pub antennas: usize,
    /// Path-loss constant `c` in `psi = c / tau^kappa`.
    #[serde(rename = "c")]
    pub pathloss_const: f64,
    #[serde(rename = "kappa")]
    pub pathloss_exp: f64,
    /// Noise power spectral density (dBm/Hz).
    #[serde(rename = "noise_dbm_hz")]
    pub noise_dbm_per_hz: f64,
    /// Uplink (headset) power (W).
    #[serde(rename = "P_u")]
    pub uplink_power: f64,
    /// Total downlink power (W).
    #[serde(rename = "P_d")]
    pub downlink_power: f64,
    /// Bandwidth (Hz).
    #[serde(rename = "W")]
    pub bandwidth: f64,
    /// Coherence bandwidth (Hz).
    #[serde(rename = "C_B")]
    pub coherence_bandwidth: f64,
    /// Coherence time (s).
    #[serde(rename = "C_T")]
    pub coherence_time: f64,
    /// Coherence interval (symbols).
    #[serde(rename = "T")]
    pub coherence_symbols: usize,
}

impl CellConfig {
    /// The reference theater: 100 users, 128 antennas, 100 MHz at -174 dBm/Hz.
    pub fn reference() -> Self {
        Self {
            r1: 40.0,
            r2: 45.0,
            users: 100,
            antennas: 128,
            pathloss_const: 10f64.powf(-3.5),
            pathloss_exp: 3.76,
            noise_dbm_per_hz: -174.0,
            uplink_power: 0.1,
            downlink_power: 10.0,
            bandwidth: 100e6,
            coherence_bandwidth: 200e3,
            coherence_time: 1e-3,
            coherence_symbols: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.r1 > 0.0 && self.r1 < self.r2) {
            return bad(format!(
                "need 0 < r1 < r2, got r1={} r2={}",
                self.r1, self.r2
            ));
        }
        if self.users == 0 {
            return bad("K must be at least 1".into());
        }
        if self.antennas == 0 {
            return bad("N must be at least 1".into());
        }
        if !(self.pathloss_const > 0.0 && self.pathloss_exp > 0.0) {
            return bad("path-loss constant and exponent must be positive".into());
        }
        if !(self.bandwidth > 0.0) {
            return bad("W must be positive".into());
        }
        if !(self.uplink_power > 0.0 && self.downlink_power > 0.0) {
            return bad("P_u and P_d must be positive".into());
        }
        let product = self.coherence_bandwidth * self.coherence_time;
        if (product - self.coherence_symbols as f64).abs() > 1e-6 * product.max(1.0) {
            return bad(format!(
                "T={} does not match C_B*C_T={}",
                self.coherence_symbols, product
            ));
        }
        Ok(())
    }

    /// Noise power spectral density in W/Hz.
    pub fn noise_density(&self) -> f64 {
        10f64.powf((self.noise_dbm_per_hz - 30.0) / 10.0)
    }

    /// Large-scale fading coefficient at distance `tau`.
    pub fn large_scale_fading(&self, tau: f64) -> f64 {
        self.pathloss_const / tau.powf(self.pathloss_exp)
    }
}

/// One user's link to the base station.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLink {
    pub id: usize,
    /// Distance to the base station (m).
    pub tau: f64,
    /// Large-scale fading coefficient.
    pub psi: f64,
    /// Zero-based viewport index.
    pub viewport: usize,
}

/// Powers divided by the noise power `W * sigma^2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizedPowers {
    pub uplink: f64,
    pub downlink: f64,
}

pub fn normalize_powers(config: &CellConfig) -> Result<NormalizedPowers> {
    if !(config.uplink_power > 0.0 && config.downlink_power > 0.0) {
        return Err(Error::InvalidConfig("powers must be positive".into()));
    }
    if !(config.bandwidth > 0.0) {
        return Err(Error::InvalidConfig("W must be positive".into()));
    }
    let noise = config.bandwidth * config.noise_density();
    Ok(NormalizedPowers {
        uplink: config.uplink_power / noise,
        downlink: config.downlink_power / noise,
    })
}

/// Places `config.users` users uniformly in distance on `[r1, r2]` and spreads
/// them round-robin over `viewports` viewports after a seeded shuffle.
pub fn generate_users(config: &CellConfig, viewports: usize, seed: u64) -> Result<Vec<UserLink>> {
    config.validate()?;
    if viewports == 0 || viewports > config.users {
        return Err(Error::InvalidConfig(format!(
            "cannot spread {} users over {} viewports",
            config.users, viewports
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let taus: Vec<f64> = (0..config.users)
        .map(|_| rng.random_range(config.r1..=config.r2))
        .collect();
    let mut order: Vec<usize> = (0..config.users).collect();
    order.shuffle(&mut rng);
    let mut assignment = vec![0; config.users];
    for (slot, &user) in order.iter().enumerate() {
        assignment[user] = slot % viewports;
    }
    Ok(taus
        .into_iter()
        .enumerate()
        .map(|(id, tau)| UserLink {
            id,
            tau,
            psi: config.large_scale_fading(tau),
            viewport: assignment[id],
        })
        .collect())
}

/// User ids per viewport, indexed by viewport.
pub fn members_by_viewport(users: &[UserLink], viewports: usize) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); viewports];
    for u in users {
        members[u.viewport].push(u.id);
    }
    members
}

pub fn write_users_csv<W: Write>(out: W, users: &[UserLink]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["id", "tau", "psi", "viewport"])?;
    for u in users {
        w.write_record([
            u.id.to_string(),
            u.tau.to_string(),
            u.psi.to_string(),
            u.viewport.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
