//! Frequency-domain machinery: one-sided FFT magnitudes, the 8-30 Hz band
//! mask, STFT spectrograms (window 64, hop 8, periodic Hann), and
//! 99th-percentile normalization.
//!
//! Both transforms expose analytic gradients (`*_vjp`) so they can sit
//! inside training losses. The gradient of a magnitude at a zero complex
//! bin is defined as 0 (subgradient choice).

use crate::nn::Scalar;
use thiserror::Error;

/// STFT analysis window length in samples.
pub const STFT_WINDOW: usize = 64;
/// STFT hop length in samples (87.5 % overlap).
pub const STFT_HOP: usize = 8;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("band mask bins [{lo}, {hi}] out of range for {bins} spectrum bins")]
    MaskOutOfRange { lo: usize, hi: usize, bins: usize },
}

/// Number of one-sided bins for a length-`t` transform.
pub fn rfft_bins(t: usize) -> usize {
    t / 2 + 1
}

/// Number of STFT frames for a length-`t` window.
pub fn stft_frames(t: usize) -> usize {
    (t - STFT_WINDOW) / STFT_HOP + 1
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cx<S> {
    pub re: S,
    pub im: S,
}

impl<S: Scalar> Cx<S> {
    pub fn zero() -> Self {
        Self {
            re: S::zero(),
            im: S::zero(),
        }
    }

    pub fn magnitude(self) -> S {
        (self.re * self.re + self.im * self.im).sqrt()
    }

    fn mul(self, other: Self) -> Self {
        Self {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }
}

/// Radix-2 decimation-in-time FFT plan for a fixed power-of-two length.
pub struct FftPlan<S> {
    n: usize,
    /// e^(-2 pi i k / n) for k < n/2.
    twiddles: Vec<Cx<S>>,
}

impl<S: Scalar> FftPlan<S> {
    pub fn new(n: usize) -> Self {
        assert!(n.is_power_of_two() && n >= 2, "FFT length {n} must be a power of two");
        let twiddles = (0..n / 2)
            .map(|k| {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Cx {
                    re: S::from_f64(angle.cos()),
                    im: S::from_f64(angle.sin()),
                }
            })
            .collect();
        Self { n, twiddles }
    }

    /// Unnormalized forward DFT in place.
    pub fn fft_in_place(&self, data: &mut [Cx<S>]) {
        let n = self.n;
        assert_eq!(data.len(), n);
        // Bit-reversal permutation.
        let mut j = 0usize;
        for i in 1..n {
            let mut bit = n >> 1;
            while j & bit != 0 {
                j ^= bit;
                bit >>= 1;
            }
            j |= bit;
            if i < j {
                data.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let stride = n / len;
            let half = len / 2;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let w = self.twiddles[k * stride];
                    let a = data[start + k];
                    let b = data[start + k + half].mul(w);
                    data[start + k] = Cx {
                        re: a.re + b.re,
                        im: a.im + b.im,
                    };
                    data[start + k + half] = Cx {
                        re: a.re - b.re,
                        im: a.im - b.im,
                    };
                }
            }
            len <<= 1;
        }
    }

    /// One-sided spectrum of a real signal: bins 0..=n/2.
    pub fn rfft(&self, x: &[S]) -> Vec<Cx<S>> {
        assert_eq!(x.len(), self.n);
        let mut buf: Vec<Cx<S>> = x
            .iter()
            .map(|&v| Cx {
                re: v,
                im: S::zero(),
            })
            .collect();
        self.fft_in_place(&mut buf);
        buf.truncate(self.n / 2 + 1);
        buf
    }

    /// Pull a one-sided magnitude gradient back to the real input.
    ///
    /// Given the saved one-sided spectrum `bins` and upstream gradients
    /// `grad_mag` (dL/d|X_k|), returns dL/dx. Derivation: with
    /// `W_k = g_k X_k / |X_k|` on the one-sided bins and zero elsewhere,
    /// `dL/dx_t = Re(FFT(conj(W))[t])`.
    pub fn rfft_magnitude_vjp(&self, bins: &[Cx<S>], grad_mag: &[S]) -> Vec<S> {
        let n = self.n;
        assert_eq!(bins.len(), n / 2 + 1);
        assert_eq!(grad_mag.len(), n / 2 + 1);
        let mut w = vec![Cx::zero(); n];
        for k in 0..=n / 2 {
            let mag = bins[k].magnitude();
            if mag > S::zero() {
                let unit = Cx {
                    re: bins[k].re / mag,
                    im: bins[k].im / mag,
                };
                // conj(g * unit)
                w[k] = Cx {
                    re: grad_mag[k] * unit.re,
                    im: -(grad_mag[k] * unit.im),
                };
            }
        }
        self.fft_in_place(&mut w);
        w.into_iter().map(|c| c.re).collect()
    }
}

/// One-sided magnitude spectrum per channel, no window, no scaling (raw |X_k|).
#[derive(Debug, Clone)]
pub struct Spectrum<S> {
    /// Row-major `[channels * bins]`.
    pub magnitudes: Vec<S>,
    pub channels: usize,
    pub bins: usize,
    /// Bin width in Hz.
    pub df: f64,
}

/// Hann-windowed STFT magnitudes per channel, `[channels, bins, frames]`.
#[derive(Debug, Clone)]
pub struct Spectrogram<S> {
    pub magnitudes: Vec<S>,
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
}

/// Inclusive FFT bin range covering a frequency band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BandMask {
    pub lo_bin: usize,
    pub hi_bin: usize,
}

impl BandMask {
    /// Closed interval `[lo_hz, hi_hz]` mapped to bins at resolution `df`.
    pub fn for_band(lo_hz: f64, hi_hz: f64, df: f64) -> Self {
        Self {
            lo_bin: (lo_hz / df).round() as usize,
            hi_bin: (hi_hz / df).round() as usize,
        }
    }

    pub fn len(&self) -> usize {
        self.hi_bin - self.lo_bin + 1
    }

    pub fn is_empty(&self) -> bool {
        self.hi_bin < self.lo_bin
    }
}

/// One-sided DFT magnitude per channel of a `channels x t` window.
pub fn rfft_magnitude<S: Scalar>(window: &[S], channels: usize, fs: f64) -> Spectrum<S> {
    let t = window.len() / channels;
    let plan = FftPlan::new(t);
    let bins = rfft_bins(t);
    let mut magnitudes = Vec::with_capacity(channels * bins);
    for c in 0..channels {
        let spectrum = plan.rfft(&window[c * t..(c + 1) * t]);
        magnitudes.extend(spectrum.iter().map(|b| b.magnitude()));
    }
    Spectrum {
        magnitudes,
        channels,
        bins,
        df: fs / t as f64,
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window<S: Scalar>(n: usize) -> Vec<S> {
    (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            S::from_f64(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

/// STFT magnitudes of a `channels x t` window: frames start at hop multiples,
/// each frame is Hann-weighted then transformed one-sided.
pub fn stft_magnitude<S: Scalar>(window: &[S], channels: usize) -> Spectrogram<S> {
    let t = window.len() / channels;
    let frames = stft_frames(t);
    let bins = rfft_bins(STFT_WINDOW);
    let plan = FftPlan::new(STFT_WINDOW);
    let hann = hann_window::<S>(STFT_WINDOW);
    let mut magnitudes = vec![S::zero(); channels * bins * frames];
    let mut frame_buf = vec![S::zero(); STFT_WINDOW];
    for c in 0..channels {
        let row = &window[c * t..(c + 1) * t];
        for m in 0..frames {
            let start = m * STFT_HOP;
            for (i, f) in frame_buf.iter_mut().enumerate() {
                *f = row[start + i] * hann[i];
            }
            let spectrum = plan.rfft(&frame_buf);
            for (k, bin) in spectrum.iter().enumerate() {
                magnitudes[c * bins * frames + k * frames + m] = bin.magnitude();
            }
        }
    }
    Spectrogram {
        magnitudes,
        channels,
        bins,
        frames,
    }
}

/// Extract the masked bins of every channel, `[channels * mask.len()]`.
pub fn band_select<S: Scalar>(spec: &Spectrum<S>, mask: &BandMask) -> Result<Vec<S>, SpectralError> {
    if mask.hi_bin >= spec.bins || mask.is_empty() {
        return Err(SpectralError::MaskOutOfRange {
            lo: mask.lo_bin,
            hi: mask.hi_bin,
            bins: spec.bins,
        });
    }
    let mut out = Vec::with_capacity(spec.channels * mask.len());
    for c in 0..spec.channels {
        let row = &spec.magnitudes[c * spec.bins..(c + 1) * spec.bins];
        out.extend_from_slice(&row[mask.lo_bin..=mask.hi_bin]);
    }
    Ok(out)
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile_linear<S: Scalar>(values: &[S], q: f64) -> S {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = S::from_f64(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// The normalization scalar: 99th percentile, floored at 1e-8 so blank
/// windows divide by the guard instead of zero.
pub fn p99_scale<S: Scalar>(original: &[S]) -> S {
    quantile_linear(original, 0.99).max(S::from_f64(1e-8))
}

/// Divide both tensors by the 99th percentile of `original`.
pub fn p99_normalize<S: Scalar>(original: &[S], reconstruction: &[S]) -> (Vec<S>, Vec<S>) {
    let scale = p99_scale(original);
    let inv = S::one() / scale;
    (
        original.iter().map(|&v| v * inv).collect(),
        reconstruction.iter().map(|&v| v * inv).collect(),
    )
}

/// Magnitude spectra for a batch of windows, `[n, channels, bins]`.
/// Fans out across windows under the `parallel` feature.
pub fn batch_rfft_magnitude<S: Scalar>(
    data: &[S],
    n: usize,
    channels: usize,
    t: usize,
    fs: f64,
) -> Vec<S> {
    let window_len = channels * t;
    let bins = rfft_bins(t);
    let run = |w: usize| rfft_magnitude(&data[w * window_len..(w + 1) * window_len], channels, fs).magnitudes;
    let rows = map_windows(n, run);
    let mut out = Vec::with_capacity(n * channels * bins);
    for row in rows {
        out.extend(row);
    }
    out
}

/// Sequential reference for the batch transform; the benchmark baseline.
pub fn batch_rfft_magnitude_seq<S: Scalar>(
    data: &[S],
    n: usize,
    channels: usize,
    t: usize,
    fs: f64,
) -> Vec<S> {
    let window_len = channels * t;
    let bins = rfft_bins(t);
    let mut out = Vec::with_capacity(n * channels * bins);
    for w in 0..n {
        out.extend(rfft_magnitude(&data[w * window_len..(w + 1) * window_len], channels, fs).magnitudes);
    }
    out
}

#[cfg(feature = "parallel")]
fn map_windows<S: Send, F: Fn(usize) -> Vec<S> + Send + Sync>(n: usize, f: F) -> Vec<Vec<S>> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_windows<S, F: Fn(usize) -> Vec<S>>(n: usize, f: F) -> Vec<Vec<S>> {
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_PI: f64 = std::f64::consts::TAU;

    /// Naive O(N^2) DFT magnitude oracle.
    fn naive_dft_magnitude(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, &v) in x.iter().enumerate() {
                    let angle = -TWO_PI * (k * t) as f64 / n as f64;
                    re += v * angle.cos();
                    im += v * angle.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn zero_input_zero_spectrum() {
        let spec = rfft_magnitude::<f64>(&vec![0.0; 2 * 512], 2, 256.0);
        assert_eq!(spec.bins, 257);
        assert!(spec.magnitudes.iter().all(|&v| v == 0.0));
        let sg = stft_magnitude::<f64>(&vec![0.0; 512], 1);
        assert!(sg.magnitudes.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_at_bin_16_has_magnitude_n_over_2() {
        let x: Vec<f64> = (0..512).map(|t| (TWO_PI * 8.0 * t as f64 / 256.0).cos()).collect();
        let spec = rfft_magnitude(&x, 1, 256.0);
        assert!((spec.magnitudes[16] - 256.0).abs() < 1e-9);
        for (k, &m) in spec.magnitudes.iter().enumerate() {
            if k != 16 {
                assert!(m < 1e-9, "bin {k} leaked {m}");
            }
        }
        assert_eq!(spec.df, 0.5);
    }

    #[test]
    fn fft_matches_naive_dft() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let ours = rfft_magnitude(&x, 1, 256.0).magnitudes;
            let oracle = naive_dft_magnitude(&x);
            let peak = oracle.iter().fold(0.0f64, |a, &b| a.max(b));
            for (k, (a, b)) in ours.iter().zip(&oracle).enumerate() {
                assert!((a - b).abs() / peak < 1e-9, "bin {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn parseval_identity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mags = rfft_magnitude(&x, 1, 256.0).magnitudes;
        // Interior one-sided bins represent two conjugate bins.
        let mut spectral: f64 = mags[0] * mags[0] + mags[256] * mags[256];
        for m in &mags[1..256] {
            spectral += 2.0 * m * m;
        }
        let time: f64 = x.iter().map(|v| v * v).sum();
        let rel = (spectral - 512.0 * time).abs() / (512.0 * time);
        assert!(rel < 1e-6, "Parseval violated: rel {rel}");
    }

    #[test]
    fn stft_shape_and_support() {
        assert_eq!(stft_frames(512), 57);
        let mut x = vec![0.0f64; 512];
        x[100] = 1.0;
        let sg = stft_magnitude(&x, 1);
        assert_eq!((sg.bins, sg.frames), (33, 57));
        for m in 0..57 {
            let energy: f64 = (0..33).map(|k| sg.magnitudes[k * 57 + m]).sum();
            // frame m covers samples [8m, 8m + 63]
            let covers = 8 * m <= 100 && 100 <= 8 * m + 63;
            assert_eq!(covers, (5..=12).contains(&m), "support arithmetic");
            if covers {
                assert!(energy > 1e-12, "frame {m} should see the impulse");
            } else {
                assert!(energy < 1e-12, "frame {m} should be empty, got {energy}");
            }
        }
    }

    #[test]
    fn stft_frame_matches_naive_windowed_dft() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(29);
        let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sg = stft_magnitude(&x, 1);
        let hann = hann_window::<f64>(64);
        for m in [0usize, 13, 56] {
            let frame: Vec<f64> = (0..64).map(|i| x[m * 8 + i] * hann[i]).collect();
            let oracle = naive_dft_magnitude(&frame);
            for k in 0..33 {
                let got = sg.magnitudes[k * 57 + m];
                assert!((got - oracle[k]).abs() < 1e-9, "frame {m} bin {k}");
            }
        }
    }

    #[test]
    fn band_mask_bins() {
        let mask = BandMask::for_band(8.0, 30.0, 0.5);
        assert_eq!((mask.lo_bin, mask.hi_bin), (16, 60));
        assert_eq!(mask.len(), 45);

        let mut x = vec![0.0f64; 512];
        for t in 0..512 {
            // 6 Hz is outside the band, 30 Hz is on the inclusive upper edge.
            x[t] = (TWO_PI * 6.0 * t as f64 / 256.0).cos() + (TWO_PI * 30.0 * t as f64 / 256.0).cos();
        }
        let spec = rfft_magnitude(&x, 1, 256.0);
        let banded = band_select(&spec, &mask).unwrap();
        assert_eq!(banded.len(), 45);
        assert!(banded[0] < 1e-6, "bin 16 should not hold 6 Hz energy");
        assert!((banded[44] - 256.0).abs() < 1e-6, "bin 60 holds the 30 Hz peak");

        let bad = BandMask { lo_bin: 0, hi_bin: 257 };
        assert!(matches!(
            band_select(&spec, &bad),
            Err(SpectralError::MaskOutOfRange { .. })
        ));
    }

    #[test]
    fn p99_examples() {
        let values: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let q = quantile_linear(&values, 0.99);
        assert!((q - 99.01).abs() < 1e-12, "got {q}");

        let original = vec![4.0; 10];
        let recon = vec![2.0; 10];
        let (no, nr) = p99_normalize(&original, &recon);
        assert!(no.iter().all(|&v| v == 1.0));
        assert!(nr.iter().all(|&v| v == 0.5));

        let zeros = vec![0.0f64; 8];
        let (no, _) = p99_normalize(&zeros, &zeros);
        assert!(no.iter().all(|&v| v == 0.0), "epsilon guard keeps zeros");
    }

    #[test]
    fn p99_scale_equivariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let original: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
        let recon: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..10.0)).collect();
        let (no, _) = p99_normalize(&original, &recon);
        let scaled: Vec<f64> = original.iter().map(|v| v * 7.5).collect();
        let recon_scaled: Vec<f64> = recon.iter().map(|v| v * 7.5).collect();
        let (no2, _) = p99_normalize(&scaled, &recon_scaled);
        for (a, b) in no.iter().zip(&no2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rfft_vjp_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let n = 64;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..=n / 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let plan = FftPlan::<f64>::new(n);

        let bins = plan.rfft(&x);
        let grad = plan.rfft_magnitude_vjp(&bins, &g);

        let loss = |x: &[f64]| -> f64 {
            let bins = plan.rfft(x);
            bins.iter().zip(&g).map(|(b, gk)| gk * b.magnitude()).sum()
        };
        let h = 1e-6;
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-7,
                "coordinate {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn batch_transform_matches_sequential() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let (n, c, t) = (4, 3, 128);
        let data: Vec<f64> = (0..n * c * t).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let par = batch_rfft_magnitude(&data, n, c, t, 256.0);
        let seq = batch_rfft_magnitude_seq(&data, n, c, t, 256.0);
        assert_eq!(par, seq);
    }
}
