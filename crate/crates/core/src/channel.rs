//! Free-space path loss and IID Rayleigh block fading.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Radio parameters shared by all devices of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// `G0`
    pub antenna_gain: f64,
    /// `f0`, in Hz.
    pub carrier_freq: f64,
    /// `PL`
    pub path_loss_exponent: f64,
    /// Receiver noise power `sigma_z^2`, in W.
    pub noise_power: f64,
    /// Per-device transmit power budget `P`, in W.
    pub tx_power: f64,
    /// Device-to-server distances in meters.
    pub distances: Vec<f64>,
}

impl ChannelConfig {
    /// Places `n_devices` at distances uniform in `[d_min, d_max]`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_uniform_distances<R: Rng + ?Sized>(
        antenna_gain: f64,
        carrier_freq: f64,
        path_loss_exponent: f64,
        noise_power: f64,
        tx_power: f64,
        n_devices: usize,
        (d_min, d_max): (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        if !(d_min > 0.0 && d_min <= d_max && d_max.is_finite()) {
            return Err(Error::invalid(format!(
                "distance range [{d_min}, {d_max}] must be positive and ordered"
            )));
        }
        let distances = (0..n_devices)
            .map(|_| {
                if d_min == d_max {
                    d_min
                } else {
                    rng.random_range(d_min..=d_max)
                }
            })
            .collect();
        let config = ChannelConfig {
            antenna_gain,
            carrier_freq,
            path_loss_exponent,
            noise_power,
            tx_power,
            distances,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("antenna gain", self.antenna_gain),
            ("carrier frequency", self.carrier_freq),
            ("transmit power", self.tx_power),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.path_loss_exponent >= 0.0 && self.path_loss_exponent.is_finite()) {
            return Err(Error::invalid("path loss exponent must be nonnegative"));
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return Err(Error::invalid("noise power must be nonnegative"));
        }
        if self.distances.is_empty() {
            return Err(Error::invalid("channel config has no devices"));
        }
        if let Some(d) = self
            .distances
            .iter()
            .find(|d| !(**d > 0.0 && d.is_finite()))
        {
            return Err(Error::invalid(format!(
                "device distance {d} must be positive"
            )));
        }
        Ok(())
    }

    pub fn n_devices(&self) -> usize {
        self.distances.len()
    }
}

/// Large-scale gain `g = G0 * (c / (4 pi f0 d))^PL`.
pub fn path_loss(distance: f64, config: &ChannelConfig) -> Result<f64> {
    if !(distance > 0.0 && distance.is_finite()) {
        return Err(Error::invalid(format!(
            "distance {distance} must be positive"
        )));
    }
    let ratio = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * config.carrier_freq * distance);
    Ok(config.antenna_gain * ratio.powf(config.path_loss_exponent))
}

/// A complex channel coefficient in polar form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCoefficient {
    pub magnitude: f64,
    pub phase: f64,
}

/// Channel coefficients `h_i = sqrt(g_i) * lambda_i` for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub h: Vec<ChannelCoefficient>,
    pub path_gain: Vec<f64>,
}

impl ChannelRealization {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.h.iter().map(|c| c.magnitude).collect()
    }

    /// `|h_i|^2 / g_i`, the small-scale power gain `|lambda_i|^2`.
    pub fn fading_power(&self) -> Vec<f64> {
        self.h
            .iter()
            .zip(&self.path_gain)
            .map(|(c, g)| c.magnitude * c.magnitude / g)
            .collect()
    }
}

/// Draws one block-fading realization with `lambda_i ~ CN(0, 1)`.
pub fn draw_channels<R: Rng + ?Sized>(
    config: &ChannelConfig,
    rng: &mut R,
) -> Result<ChannelRealization> {
    // Real and imaginary parts each carry half the unit power.
    let component = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid normal");
    let mut h = Vec::with_capacity(config.n_devices());
    let mut path_gain = Vec::with_capacity(config.n_devices());
    for &d in &config.distances {
        let g = path_loss(d, config)?;
        let (mut re, mut im): (f64, f64) = (component.sample(rng), component.sample(rng));
        // Exact zero has probability zero, but a zero gain cannot be inverted.
        while re == 0.0 && im == 0.0 {
            re = component.sample(rng);
            im = component.sample(rng);
        }
        h.push(ChannelCoefficient {
            magnitude: g.sqrt() * re.hypot(im),
            phase: im.atan2(re),
        });
        path_gain.push(g);
    }
    Ok(ChannelRealization { h, path_gain })
}
