use serde::{Deserialize, Serialize};

use crate::error::LheError;

/// Slot count, level budget and optional perturbation of the simulated scheme.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LheParams {
    slot_count: usize,
    max_level: u32,
    noise_sigma: f64,
}

impl LheParams {
    pub fn new(slot_count: usize, max_level: u32) -> Result<Self, LheError> {
        Self::with_noise(slot_count, max_level, 0.0)
    }

    pub fn with_noise(slot_count: usize, max_level: u32, noise_sigma: f64) -> Result<Self, LheError> {
        if slot_count < 2 || !slot_count.is_power_of_two() {
            return Err(LheError::InvalidParams(format!("slot count {slot_count} must be a power of two >= 2")));
        }
        if slot_count > u32::MAX as usize {
            return Err(LheError::InvalidParams(format!("slot count {slot_count} too large")));
        }
        if max_level < 1 {
            return Err(LheError::InvalidParams("max level must be >= 1".into()));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(LheError::InvalidParams(format!("noise sigma {noise_sigma} must be finite and nonnegative")));
        }
        Ok(Self { slot_count, max_level, noise_sigma })
    }

    /// S
    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    /// L
    pub fn max_level(&self) -> u32 {
        self.max_level
    }

    /// Level of a fresh or re-encrypted ciphertext, L-1.
    pub fn top_level(&self) -> u32 {
        self.max_level - 1
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    /// Serialized size in bytes of one ciphertext under these parameters.
    pub fn ciphertext_bytes(&self) -> usize {
        super::wire::HEADER_LEN + 8 * self.slot_count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_params() {
        assert!(LheParams::new(6, 3).is_err());
        assert!(LheParams::new(1, 3).is_err());
        assert!(LheParams::new(8, 0).is_err());
        assert!(LheParams::with_noise(8, 2, -1.0).is_err());
        assert!(LheParams::with_noise(8, 2, f64::NAN).is_err());
    }

    #[test]
    fn pass_through() {
        let p = LheParams::new(8, 6).unwrap();
        assert_eq!((p.slot_count(), p.max_level(), p.top_level()), (8, 6, 5));
        assert_eq!(p.noise_sigma(), 0.0);
    }
}
