//! Waveforms, log-mel filter-bank features and the feature container.

use std::sync::Arc;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Mono audio with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidInput(format!(
                "sample {i} = {} is not a finite amplitude in [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Sum of squared amplitudes.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }
}

pub(crate) fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&s| f64::from(s) * f64::from(s)).sum()
}

/// `T × F` feature frames stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    frame_shift_ms: f64,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, frame_shift_ms: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "feature matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} feature matrix",
                data.len()
            )));
        }
        if !(frame_shift_ms > 0.0 && frame_shift_ms.is_finite()) {
            return Err(Error::InvalidInput("frame shift must be positive".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            frame_shift_ms,
        })
    }

    pub fn frames(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.cols
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub num_mel_bins: usize,
    pub window_ms: f64,
    pub shift_ms: f64,
    pub low_freq_hz: f64,
    /// Upper edge; `None` means Nyquist.
    pub high_freq_hz: Option<f64>,
    pub energy_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            num_mel_bins: 80,
            window_ms: 25.0,
            shift_ms: 10.0,
            low_freq_hz: 20.0,
            high_freq_hz: None,
            energy_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Frames produced for `num_samples`: one per shift, the last window
    /// zero-padded past the end.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.shift_samples()).max(1)
    }

    fn validate(&self) -> Result<()> {
        let high = self.high_freq_hz.unwrap_or(self.sample_rate_hz as f64 / 2.0);
        if self.num_mel_bins == 0 || self.shift_samples() == 0 || self.window_samples() == 0 {
            return Err(Error::Config("feature bins, window and shift must be positive".into()));
        }
        if !(self.low_freq_hz >= 0.0 && self.low_freq_hz < high) {
            return Err(Error::Config("mel band edges out of order".into()));
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular mel filters over the one-sided FFT bins,
/// `num_mel_bins × (fft_size/2 + 1)`.
pub fn mel_filterbank(cfg: &FeatureConfig) -> Mat {
    let n_fft = cfg.fft_size();
    let n_bins = n_fft / 2 + 1;
    let high = cfg.high_freq_hz.unwrap_or(cfg.sample_rate_hz as f64 / 2.0);
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.low_freq_hz), hz_to_mel(high));
    let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    let mut fb = Mat::zeros(cfg.num_mel_bins, n_bins);
    for m in 0..cfg.num_mel_bins {
        let left = mel_lo + step * m as f64;
        let center = left + step;
        let right = center + step;
        for b in 0..n_bins {
            let hz = b as f64 * cfg.sample_rate_hz as f64 / n_fft as f64;
            let mel = hz_to_mel(hz);
            let w = if mel > left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel < right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
            fb.set(m, b, w);
        }
    }
    fb
}

/// Center frequency in Hz of each mel filter.
pub fn mel_centers_hz(cfg: &FeatureConfig) -> Vec<f64> {
    let high = cfg.high_freq_hz.unwrap_or(cfg.sample_rate_hz as f64 / 2.0);
    let (mel_lo, mel_hi) = (hz_to_mel(cfg.low_freq_hz), hz_to_mel(high));
    let step = (mel_hi - mel_lo) / (cfg.num_mel_bins + 1) as f64;
    (0..cfg.num_mel_bins)
        .map(|m| mel_to_hz(mel_lo + step * (m + 1) as f64))
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Log-mel filter-bank energies.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    if w.sample_rate_hz() != cfg.sample_rate_hz {
        return Err(Error::InvalidInput(format!(
            "waveform is {} Hz, feature config expects {} Hz",
            w.sample_rate_hz(),
            cfg.sample_rate_hz
        )));
    }
    let (win, shift, n_fft) = (cfg.window_samples(), cfg.shift_samples(), cfg.fft_size());
    let frames = cfg.frame_count(w.len());
    let window = hann_window(win);
    let fb = mel_filterbank(cfg);
    let fft: Arc<dyn rustfft::Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_bins];
    let mut out = Vec::with_capacity(frames * cfg.num_mel_bins);
    let samples = w.samples();
    for t in 0..frames {
        let start = t * shift;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = if i < win {
                samples.get(start + i).map_or(0.0, |&v| f64::from(v)) * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.num_mel_bins {
            let e: f64 = fb.row(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(cfg.energy_floor).ln() as f32);
        }
    }
    FeatureMatrix::new(frames, cfg.num_mel_bins, out, cfg.shift_ms)
}
