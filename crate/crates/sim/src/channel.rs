// SPDX-License-Identifier: Apache-2.0

//! Log-distance path-loss proximity channel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Distances below this are treated as this, so the loss stays finite.
pub const MIN_DISTANCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    /// Received power at 1 m.
    pub tx_power_dbm: f64,
    pub path_loss_exponent: f64,
    /// Metres; nothing is received beyond this.
    pub max_range: f64,
    /// Standard deviation of additive Gaussian noise in dB.
    pub noise_sigma: f64,
    pub reception_prob: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            tx_power_dbm: -59.0,
            path_loss_exponent: 2.0,
            max_range: 10.0,
            noise_sigma: 0.0,
            reception_prob: 1.0,
        }
    }
}

impl ChannelModel {
    /// Noise-free received signal at `distance` metres.
    pub fn signal_at(&self, distance: f64) -> f64 {
        self.tx_power_dbm - 10.0 * self.path_loss_exponent * distance.max(MIN_DISTANCE).log10()
    }

    pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// One reception attempt. Draws from `rng` only when noise or loss is
    /// configured.
    pub fn receive<R: Rng>(&self, distance: f64, boost_db: f64, rng: &mut R) -> Option<f64> {
        if distance > self.max_range {
            return None;
        }
        if self.reception_prob < 1.0 && rng.gen::<f64>() >= self.reception_prob {
            return None;
        }
        let mut s = self.signal_at(distance) + boost_db;
        if self.noise_sigma > 0.0 {
            let n = Normal::new(0.0, self.noise_sigma).expect("sigma checked by validation");
            s += n.sample(rng);
        }
        Some(s)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.path_loss_exponent > 0.0) {
            out.push("path_loss_exponent must be positive".into());
        }
        if !(self.max_range > 0.0) {
            out.push("max_range must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            out.push("noise_sigma must be a non-negative number".into());
        }
        if !(self.reception_prob > 0.0 && self.reception_prob <= 1.0) {
            out.push("reception_prob must lie in (0, 1]".into());
        }
        out
    }
}
