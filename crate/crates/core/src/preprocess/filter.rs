//! IIR filter design (bilinear transform with frequency pre-warping) and
//! causal direct-form II transposed evaluation.
//!
//! The bandpass is a first-order Butterworth high-pass (6 dB/oct) cascaded
//! with a fourth-order Butterworth low-pass (24 dB/oct). The notch is a
//! constrained biquad with zeros pinned on the unit circle at the center
//! frequency, so the digital -3 dB bandwidth is exact rather than warped.

use crate::signal_io::ChannelSignal;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("corner {corner} Hz at or above Nyquist ({nyquist} Hz)")]
    CornerAboveNyquist { corner: f64, nyquist: f64 },
}

/// One second-order section. Transfer function
/// `H(z) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Pole magnitudes of the section (both roots of `z^2 + a1 z + a2`).
    pub fn pole_magnitudes(&self) -> [f64; 2] {
        let disc = self.a1 * self.a1 - 4.0 * self.a2;
        if disc >= 0.0 {
            let r = disc.sqrt();
            [((-self.a1 + r) / 2.0).abs(), ((-self.a1 - r) / 2.0).abs()]
        } else {
            // Complex conjugate pair: |z| = sqrt(a2).
            let m = self.a2.abs().sqrt();
            [m, m]
        }
    }
}

/// A cascade of biquad sections with an overall gain.
#[derive(Debug, Clone)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub gain: f64,
}

impl BiquadCascade {
    pub fn identity() -> Self {
        Self {
            sections: Vec::new(),
            gain: 1.0,
        }
    }

    pub fn cascade(mut self, other: BiquadCascade) -> Self {
        self.sections.extend(other.sections);
        self.gain *= other.gain;
        self
    }

    /// All poles strictly inside the unit circle.
    pub fn is_stable(&self) -> bool {
        self.max_pole_magnitude() < 1.0 - 1e-9
    }

    pub fn max_pole_magnitude(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.pole_magnitudes())
            .fold(0.0, f64::max)
    }

    /// Magnitude of the frequency response at `f` Hz.
    pub fn magnitude_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f / fs;
        let (zr, zi) = (w.cos(), -w.sin()); // z^-1
        let (z2r, z2i) = (zr * zr - zi * zi, 2.0 * zr * zi); // z^-2
        let mut mag = self.gain.abs();
        for s in &self.sections {
            let nr = s.b0 + s.b1 * zr + s.b2 * z2r;
            let ni = s.b1 * zi + s.b2 * z2i;
            let dr = 1.0 + s.a1 * zr + s.a2 * z2r;
            let di = s.a1 * zi + s.a2 * z2i;
            mag *= (nr * nr + ni * ni).sqrt() / (dr * dr + di * di).sqrt();
        }
        mag
    }

    /// Single forward (causal) pass, zero initial state, direct form II
    /// transposed per section.
    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = input.iter().map(|&v| v * self.gain).collect();
        for s in &self.sections {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for v in out.iter_mut() {
                let x = *v;
                let y = s.b0 * x + s1;
                s1 = s.b1 * x - s.a1 * y + s2;
                s2 = s.b2 * x - s.a2 * y;
                *v = y;
            }
        }
        out
    }
}

/// Filter a channel without mutating it; rate and label carry over.
pub fn apply_filter(cascade: &BiquadCascade, sig: &ChannelSignal) -> ChannelSignal {
    ChannelSignal {
        label: sig.label.clone(),
        fs: sig.fs,
        samples: cascade.process(&sig.samples),
    }
}

/// First-order Butterworth high-pass, bilinear transform with pre-warping.
fn highpass_first_order(fs: f64, fc: f64) -> Result<BiquadCascade, FilterError> {
    check_corner(fs, fc)?;
    let k = (PI * fc / fs).tan();
    let norm = 1.0 / (1.0 + k);
    let section = Biquad {
        b0: norm,
        b1: -norm,
        b2: 0.0,
        a1: (k - 1.0) * norm,
        a2: 0.0,
    };
    Ok(BiquadCascade {
        sections: vec![section],
        gain: 1.0,
    })
}

/// Fourth-order Butterworth low-pass as two cascaded second-order sections
/// with the standard pole quality factors 1/(2 sin(pi/8)) and 1/(2 sin(3pi/8)).
fn lowpass_fourth_order(fs: f64, fc: f64) -> Result<BiquadCascade, FilterError> {
    check_corner(fs, fc)?;
    let q_values = [
        1.0 / (2.0 * (PI / 8.0).sin()),
        1.0 / (2.0 * (3.0 * PI / 8.0).sin()),
    ];
    let w0 = 2.0 * PI * fc / fs;
    let (sw, cw) = (w0.sin(), w0.cos());
    let sections = q_values
        .iter()
        .map(|q| {
            let alpha = sw / (2.0 * q);
            let a0 = 1.0 + alpha;
            Biquad {
                b0: (1.0 - cw) / 2.0 / a0,
                b1: (1.0 - cw) / a0,
                b2: (1.0 - cw) / 2.0 / a0,
                a1: -2.0 * cw / a0,
                a2: (1.0 - alpha) / a0,
            }
        })
        .collect();
    Ok(BiquadCascade {
        sections,
        gain: 1.0,
    })
}

/// The 0.5-70 Hz bandpass used by the pipeline.
pub fn design_bandpass(fs: f64) -> Result<BiquadCascade, FilterError> {
    design_bandpass_corners(fs, 0.5, 70.0)
}

pub(super) fn design_bandpass_corners(
    fs: f64,
    lo: f64,
    hi: f64,
) -> Result<BiquadCascade, FilterError> {
    Ok(highpass_first_order(fs, lo)?.cascade(lowpass_fourth_order(fs, hi)?))
}

/// Second-order notch with an exact digital -3 dB bandwidth.
///
/// Zeros sit on the unit circle at the center frequency (unbounded rejection
/// there); poles are placed via `beta = 1 / (1 + tan(dw/2))` so the -3 dB
/// points land at `f0 +- bandwidth/2`. Gain is exactly 1 at DC and Nyquist.
pub fn design_notch(fs: f64, f0: f64, bandwidth: f64) -> Result<BiquadCascade, FilterError> {
    check_corner(fs, f0 + bandwidth / 2.0)?;
    let w0 = 2.0 * PI * f0 / fs;
    let dw = 2.0 * PI * bandwidth / fs;
    let beta = 1.0 / (1.0 + (dw / 2.0).tan());
    let cw = w0.cos();
    let section = Biquad {
        b0: beta,
        b1: -2.0 * beta * cw,
        b2: beta,
        a1: -2.0 * beta * cw,
        a2: 2.0 * beta - 1.0,
    };
    Ok(BiquadCascade {
        sections: vec![section],
        gain: 1.0,
    })
}

fn check_corner(fs: f64, corner: f64) -> Result<(), FilterError> {
    if corner >= fs / 2.0 {
        Err(FilterError::CornerAboveNyquist {
            corner,
            nyquist: fs / 2.0,
        })
    } else {
        Ok(())
    }
}

/// Steady-state amplitude of a sine pushed through `cascade`.
///
/// Feeds `settle + measure` seconds of a unit sine at `f` Hz, then projects
/// the tail onto the quadrature pair at `f`. Used as the measurement oracle
/// for the response criteria; `measure` should hold an integer cycle count.
pub fn measure_sine_gain(cascade: &BiquadCascade, f: f64, fs: f64, settle_s: f64, measure_s: f64) -> f64 {
    let n_settle = (settle_s * fs).round() as usize;
    let n_measure = (measure_s * fs).round() as usize;
    let n = n_settle + n_measure;
    let input: Vec<f64> = (0..n)
        .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
        .collect();
    let output = cascade.process(&input);
    let mut re = 0.0;
    let mut im = 0.0;
    for i in n_settle..n {
        let phase = 2.0 * PI * f * i as f64 / fs;
        re += output[i] * phase.cos();
        im += output[i] * phase.sin();
    }
    2.0 * (re * re + im * im).sqrt() / n_measure as f64
}
