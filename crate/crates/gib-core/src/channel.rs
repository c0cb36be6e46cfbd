//! Physical-layer simulation: per-symbol power normalization, the additive
//! Gaussian channel for the analog path, and the symmetric discrete channel
//! for index transmission.
//!
//! Conventions: the transmit vector is normalized to unit mean per-symbol
//! power, so `snr_db = 10 log10(1 / sigma^2)` with `sigma^2` the per-symbol
//! noise variance; the recorded `N0` equals `2 sigma^2`.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ChannelError {
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Which channel a pipeline runs through, with its quality knob and the
/// base seed of its noise stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelConfig {
    /// Gaussian channel for the analog path.
    Analog { snr_db: f64, seed: u64 },
    /// Symmetric discrete channel over a symbol set of size `r`; each
    /// symbol survives with probability `epsilon`, otherwise it is replaced
    /// uniformly by one of the other `r - 1` symbols.
    Discrete { epsilon: f64, r: usize, seed: u64 },
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        match *self {
            ChannelConfig::Analog { snr_db, .. } => {
                if !snr_db.is_finite() {
                    return Err(ChannelError::Argument(format!("snr_db {snr_db} not finite")));
                }
            }
            ChannelConfig::Discrete { epsilon, r, .. } => {
                if !(0.0..=1.0).contains(&epsilon) {
                    return Err(ChannelError::Argument(format!(
                        "epsilon {epsilon} outside [0, 1]"
                    )));
                }
                if r < 2 {
                    return Err(ChannelError::Argument(format!("symbol set size {r} < 2")));
                }
            }
        }
        Ok(())
    }

    pub fn is_digital(&self) -> bool {
        matches!(self, ChannelConfig::Discrete { .. })
    }

    pub fn seed(&self) -> u64 {
        match *self {
            ChannelConfig::Analog { seed, .. } => seed,
            ChannelConfig::Discrete { seed, .. } => seed,
        }
    }

    /// The quality knob as a bare number (SNR in dB or epsilon).
    pub fn setting_value(&self) -> f64 {
        match *self {
            ChannelConfig::Analog { snr_db, .. } => snr_db,
            ChannelConfig::Discrete { epsilon, .. } => epsilon,
        }
    }
}

/// Per-symbol noise variance at a given SNR (unit signal power).
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// Two-sided noise density `N0 = 2 sigma^2`, recorded in run metadata.
pub fn n0(snr_db: f64) -> f64 {
    2.0 * noise_variance(snr_db)
}

/// Scale a row vector so its mean per-symbol power is exactly 1:
/// `x * sqrt(d) / ||x||_2`. Errors on the zero vector.
pub fn normalize_power(x: &Array2<f64>) -> Result<Array2<f64>, ChannelError> {
    assert_eq!(x.nrows(), 1, "normalize_power expects a single row");
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(ChannelError::ZeroVector);
    }
    let c = (x.ncols() as f64).sqrt();
    Ok(x * (c / norm))
}

/// Sample a Gaussian noise row with variance `10^(-snr_db/10)` per entry.
pub fn sample_awgn_noise(dim: usize, snr_db: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let sigma = noise_variance(snr_db).sqrt();
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    Array2::from_shape_fn((1, dim), |_| normal.sample(rng))
}

/// Additive Gaussian channel: `x + noise`. The input is expected to be
/// power-normalized; the noise is treated as a constant on the gradient
/// path (identity Jacobian).
pub fn awgn(x: &Array2<f64>, snr_db: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    x + &sample_awgn_noise(x.ncols(), snr_db, rng)
}

/// Symmetric discrete channel on a slice of symbol indices.
pub fn sdc_transmit(
    symbols: &[usize],
    epsilon: f64,
    r: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, ChannelError> {
    if r < 2 {
        return Err(ChannelError::Argument(format!("symbol set size {r} < 2")));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(ChannelError::Argument(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(symbols.len());
    for &s in symbols {
        if s >= r {
            return Err(ChannelError::Argument(format!("symbol {s} outside [0, {r})")));
        }
        if rng.random_range(0.0..1.0) < epsilon {
            out.push(s);
        } else {
            // uniform over the other r - 1 symbols
            let j = rng.random_range(0..r - 1);
            out.push(if j >= s { j + 1 } else { j });
        }
    }
    Ok(out)
}
