//! Additive noise at a controlled signal-to-noise ratio.
//!
//! SNR is measured over the whole utterance:
//! `10·log10(E_clean / E_scaled_noise)`. If the mixture would leave
//! `[-1, 1]`, both addends are scaled by the same factor so the ratio is
//! untouched.

use serde::{Deserialize, Serialize};

use super::features::{energy, Waveform};
use crate::error::{Error, Result};

/// How to fit a noise clip to the clean signal's length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFit {
    /// Repeat shorter noise; trim longer noise.
    #[default]
    Loop,
    /// Trim longer noise; reject shorter noise.
    Trim,
}

/// A mixture together with its two (already scaled) addends.
#[derive(Clone, Debug)]
pub struct Mixture {
    pub mixed: Waveform,
    pub clean_part: Vec<f64>,
    pub noise_part: Vec<f64>,
    /// Gain applied to the fitted noise before normalization.
    pub noise_gain: f64,
    /// Common factor applied to both parts to stay within `[-1, 1]`.
    pub normalization: f64,
}

impl Mixture {
    pub fn measured_snr_db(&self) -> f64 {
        let ec: f64 = self.clean_part.iter().map(|v| v * v).sum();
        let en: f64 = self.noise_part.iter().map(|v| v * v).sum();
        10.0 * (ec / en).log10()
    }
}

/// Gain `α` such that `10·log10(E_clean / (α²·E_noise)) = snr_db`.
pub fn noise_gain_for_snr(clean_energy: f64, noise_energy: f64, snr_db: f64) -> f64 {
    (clean_energy / (noise_energy * 10f64.powf(snr_db / 10.0))).sqrt()
}

fn fit_noise(noise: &[f32], len: usize, fit: NoiseFit) -> Result<Vec<f32>> {
    if noise.len() >= len {
        return Ok(noise[..len].to_vec());
    }
    match fit {
        NoiseFit::Loop => Ok(noise.iter().copied().cycle().take(len).collect()),
        NoiseFit::Trim => Err(Error::InvalidInput(format!(
            "noise has {} samples, clean has {len}, and looping is disabled",
            noise.len()
        ))),
    }
}

/// Mixes `noise` into `clean` at `snr_db`. `f64::INFINITY` means no noise.
pub fn mix_noise_detailed(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    fit: NoiseFit,
) -> Result<Mixture> {
    if clean.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: clean {} Hz, noise {} Hz",
            clean.sample_rate_hz(),
            noise.sample_rate_hz()
        )));
    }
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidInput(format!("unusable SNR target {snr_db}")));
    }
    let clean_part: Vec<f64> = clean.samples().iter().map(|&v| f64::from(v)).collect();
    if snr_db == f64::INFINITY {
        return Ok(Mixture {
            mixed: clean.clone(),
            noise_part: vec![0.0; clean_part.len()],
            clean_part,
            noise_gain: 0.0,
            normalization: 1.0,
        });
    }
    let ec = clean.energy();
    if ec == 0.0 {
        return Err(Error::InvalidInput("clean signal has zero energy; SNR undefined".into()));
    }
    let fitted = fit_noise(noise.samples(), clean.len(), fit)?;
    let en = energy(&fitted);
    if en == 0.0 {
        return Err(Error::InvalidInput("noise has zero energy; SNR undefined".into()));
    }
    let gain = noise_gain_for_snr(ec, en, snr_db);
    let mut noise_part: Vec<f64> = fitted.iter().map(|&v| gain * f64::from(v)).collect();
    let mut clean_part = clean_part;
    let peak = clean_part
        .iter()
        .zip(&noise_part)
        .map(|(c, n)| (c + n).abs())
        .fold(0.0, f64::max);
    let normalization = if peak > 1.0 { 1.0 / peak } else { 1.0 };
    if normalization != 1.0 {
        clean_part.iter_mut().for_each(|v| *v *= normalization);
        noise_part.iter_mut().for_each(|v| *v *= normalization);
    }
    let mixed: Vec<f32> = clean_part
        .iter()
        .zip(&noise_part)
        .map(|(c, n)| ((c + n) as f32).clamp(-1.0, 1.0))
        .collect();
    Ok(Mixture {
        mixed: Waveform::new(mixed, clean.sample_rate_hz())?,
        clean_part,
        noise_part,
        noise_gain: gain,
        normalization,
    })
}

pub fn mix_noise_at_snr(
    clean: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    fit: NoiseFit,
) -> Result<Waveform> {
    mix_noise_detailed(clean, noise, snr_db, fit).map(|m| m.mixed)
}
