//! The three reconstruction losses.
//!
//! - `L_TS`: MAE between the window and its reconstruction.
//! - `L_FT`: MAE between 8-30 Hz Fourier magnitudes of both, normalized per
//!   window to the 99th percentile of the original's band magnitudes.
//! - `L_STFT`: MAE between full spectrograms (window 64, hop 8), normalized
//!   per window to the 99th percentile of the original's spectrogram.
//!
//! Combined totals: `L_TS`, `20 * L_FT + 1 * L_TS`, or
//! `20 * L_STFT + 1 * L_TS` depending on the mode.
//!
//! Each loss exists twice: as graph nodes (differentiable, drives training)
//! and as a pure function over slices (logging, evaluation, and the oracle
//! side of tests). The two routes agree to float precision.

use super::{DcaeConfig, DcaeError, LossMode};
use crate::nn::{Graph, NodeId, Scalar};
use crate::spectral;

/// Per-batch loss components. All components are recorded for logging even
/// when the mode leaves them unweighted; `total` always satisfies the mode's
/// weighting identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ts: f64,
    pub l_ft: f64,
    pub l_stft: f64,
    pub total: f64,
    /// Element count in the time-domain MAE denominator.
    pub n: usize,
}

impl LossBreakdown {
    /// Recombine components per the mode's weighting identity.
    pub fn combined(mode: LossMode, ft_weight: f64, stft_weight: f64, l_ts: f64, l_ft: f64, l_stft: f64, n: usize) -> Self {
        let total = match mode {
            LossMode::Ts => l_ts,
            LossMode::TsFt => ft_weight * l_ft + l_ts,
            LossMode::TsStft => stft_weight * l_stft + l_ts,
        };
        Self {
            l_ts,
            l_ft,
            l_stft,
            total,
            n,
        }
    }
}

/// Graph handles of the loss assembled for one batch.
pub struct LossNodes {
    pub total: NodeId,
    pub l_ts: NodeId,
    pub l_ft: Option<NodeId>,
    pub l_stft: Option<NodeId>,
}

/// Time-domain MAE over all elements.
pub fn loss_ts_value<S: Scalar>(x: &[S], xhat: &[S]) -> f64 {
    assert_eq!(x.len(), xhat.len());
    let sum: f64 = x
        .iter()
        .zip(xhat)
        .map(|(&a, &b)| (a - b).into_f64().abs())
        .sum();
    sum / x.len() as f64
}

/// Band-restricted Fourier magnitude MAE with per-window p99 normalization
/// taken from the original's band magnitudes.
pub fn loss_ft_value<S: Scalar>(
    x: &[S],
    xhat: &[S],
    n: usize,
    channels: usize,
    t: usize,
    lo_bin: usize,
    hi_bin: usize,
    fs: f64,
) -> f64 {
    let window_len = channels * t;
    let mask = spectral::BandMask {
        lo_bin,
        hi_bin,
    };
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for w in 0..n {
        let orig = &x[w * window_len..(w + 1) * window_len];
        let recon = &xhat[w * window_len..(w + 1) * window_len];
        let orig_band =
            spectral::band_select(&spectral::rfft_magnitude(orig, channels, fs), &mask)
                .expect("band within spectrum");
        let recon_band =
            spectral::band_select(&spectral::rfft_magnitude(recon, channels, fs), &mask)
                .expect("band within spectrum");
        let scale = spectral::p99_scale(&orig_band).into_f64();
        for (&a, &b) in orig_band.iter().zip(&recon_band) {
            sum += ((a - b).into_f64() / scale).abs();
        }
        count += orig_band.len();
    }
    sum / count as f64
}

/// Full-spectrogram STFT magnitude MAE with per-window p99 normalization
/// taken from the original's spectrogram.
pub fn loss_stft_value<S: Scalar>(x: &[S], xhat: &[S], n: usize, channels: usize, t: usize) -> f64 {
    let window_len = channels * t;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for w in 0..n {
        let orig = spectral::stft_magnitude(&x[w * window_len..(w + 1) * window_len], channels);
        let recon =
            spectral::stft_magnitude(&xhat[w * window_len..(w + 1) * window_len], channels);
        let scale = spectral::p99_scale(&orig.magnitudes).into_f64();
        for (&a, &b) in orig.magnitudes.iter().zip(&recon.magnitudes) {
            sum += ((a - b).into_f64() / scale).abs();
        }
        count += orig.magnitudes.len();
    }
    sum / count as f64
}

/// Assemble the mode's loss over a reconstruction node against the constant
/// input batch `x` of shape `[n, channels, t]`.
pub fn build_loss<S: Scalar>(
    g: &mut Graph<S>,
    xhat: NodeId,
    x: &[S],
    cfg: &DcaeConfig,
) -> Result<LossNodes, DcaeError> {
    let shape = g.shape(xhat).to_vec();
    if shape.len() != 3 || shape.iter().product::<usize>() != x.len() {
        return Err(DcaeError::ShapeMismatch(format!(
            "loss: reconstruction {:?} vs input of {} values",
            shape,
            x.len()
        )));
    }
    let (n, channels, t) = (shape[0], shape[1], shape[2]);
    let window_len = channels * t;

    // L_TS = mean |x - xhat|
    let diff = g.sub_const(xhat, x)?;
    let abs = g.abs(diff);
    let l_ts = g.mean(abs);

    let mut l_ft = None;
    let mut l_stft = None;
    let total = match cfg.loss_mode {
        LossMode::Ts => l_ts,
        LossMode::TsFt => {
            let (lo, hi) = cfg.band_bins();
            let mask = spectral::BandMask {
                lo_bin: lo,
                hi_bin: hi,
            };
            // Per-window normalized original band magnitudes (constants) and
            // the matching inverse scales for the reconstruction path.
            let mut target = Vec::with_capacity(n * channels * mask.len());
            let mut inv_scales = Vec::with_capacity(n);
            for w in 0..n {
                let orig = &x[w * window_len..(w + 1) * window_len];
                let band = spectral::band_select(
                    &spectral::rfft_magnitude(orig, channels, cfg.sample_rate_hz),
                    &mask,
                )
                .expect("validated band");
                let scale = spectral::p99_scale(&band);
                let inv = S::one() / scale;
                target.extend(band.iter().map(|&v| v * inv));
                inv_scales.push(inv);
            }
            let mag = g.rfft_mag(xhat);
            let band = g.band_select(mag, lo, hi)?;
            let normalized = g.scale_per_window(band, &inv_scales)?;
            let diff = g.sub_const(normalized, &target)?;
            let abs = g.abs(diff);
            let ft = g.mean(abs);
            l_ft = Some(ft);
            let weighted = g.scale(ft, cfg.ft_weight);
            g.add(weighted, l_ts)?
        }
        LossMode::TsStft => {
            let mut target = Vec::new();
            let mut inv_scales = Vec::with_capacity(n);
            for w in 0..n {
                let orig = &x[w * window_len..(w + 1) * window_len];
                let sg = spectral::stft_magnitude(orig, channels);
                let scale = spectral::p99_scale(&sg.magnitudes);
                let inv = S::one() / scale;
                target.extend(sg.magnitudes.iter().map(|&v| v * inv));
                inv_scales.push(inv);
            }
            let sg = g.stft_mag(xhat);
            let normalized = g.scale_per_window(sg, &inv_scales)?;
            let diff = g.sub_const(normalized, &target)?;
            let abs = g.abs(diff);
            let stft = g.mean(abs);
            l_stft = Some(stft);
            let weighted = g.scale(stft, cfg.stft_weight);
            g.add(weighted, l_ts)?
        }
    };

    Ok(LossNodes {
        total,
        l_ts,
        l_ft,
        l_stft,
    })
}
