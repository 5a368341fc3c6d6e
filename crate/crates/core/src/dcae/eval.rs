//! Reconstruction metrics and single-window reconstruction.

use super::{DcaeError, DcaeModel};
use crate::nn::{Graph, Scalar};
use crate::spectral::{self, Spectrum};
use crate::windowing::WindowSet;

/// The two reported reconstruction errors: time-domain MAE and the
/// frequency-domain MAE over p99-normalized full-spectrum magnitudes (all
/// bins, no band mask, one normalization scalar per window taken from the
/// original).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub mae_time: f64,
    pub mae_frequency: f64,
}

const EVAL_BATCH: usize = 32;

/// Evaluate a model over a window set in eval mode (running batchnorm
/// statistics, no dropout).
pub fn evaluate<S: Scalar>(
    model: &DcaeModel<S>,
    windows: &WindowSet,
) -> Result<EvalMetrics, DcaeError> {
    if windows.is_empty() {
        return Err(DcaeError::EmptyDataset);
    }
    let (c, t) = (windows.channels, windows.samples);
    let window_len = c * t;
    let fs = model.cfg.sample_rate_hz;
    let mut acc = MetricAccumulator::default();
    let mut start = 0;
    while start < windows.n {
        let count = EVAL_BATCH.min(windows.n - start);
        let input: Vec<S> = windows.data[start * window_len..(start + count) * window_len]
            .iter()
            .map(|&v| S::from_f32(v))
            .collect();
        let mut g = Graph::new();
        let x = g.constant(vec![count, c, t], input.clone());
        let pass = model.forward_eval(&mut g, x)?;
        let xhat = g.values(pass.output);
        for w in 0..count {
            acc.add_window(
                &input[w * window_len..(w + 1) * window_len],
                &xhat[w * window_len..(w + 1) * window_len],
                c,
                fs,
            );
        }
        start += count;
    }
    Ok(acc.finish())
}

/// Evaluate an arbitrary reconstruction function window by window; the
/// oracle-friendly route (e.g. an identity stub must score exactly zero).
pub fn evaluate_with<S: Scalar>(
    windows: &WindowSet,
    fs: f64,
    reconstruct: impl Fn(&[S]) -> Vec<S>,
) -> Result<EvalMetrics, DcaeError> {
    if windows.is_empty() {
        return Err(DcaeError::EmptyDataset);
    }
    let (c, t) = (windows.channels, windows.samples);
    let window_len = c * t;
    let mut acc = MetricAccumulator::default();
    for w in 0..windows.n {
        let x: Vec<S> = windows.data[w * window_len..(w + 1) * window_len]
            .iter()
            .map(|&v| S::from_f32(v))
            .collect();
        let xhat = reconstruct(&x);
        assert_eq!(xhat.len(), x.len());
        acc.add_window(&x, &xhat, c, fs);
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct MetricAccumulator {
    time_sum: f64,
    time_count: usize,
    freq_sum: f64,
    freq_count: usize,
}

impl MetricAccumulator {
    fn add_window<S: Scalar>(&mut self, x: &[S], xhat: &[S], channels: usize, fs: f64) {
        for (&a, &b) in x.iter().zip(xhat) {
            self.time_sum += (a - b).into_f64().abs();
        }
        self.time_count += x.len();

        let orig = spectral::rfft_magnitude(x, channels, fs);
        let recon = spectral::rfft_magnitude(xhat, channels, fs);
        let scale = spectral::p99_scale(&orig.magnitudes).into_f64();
        for (&a, &b) in orig.magnitudes.iter().zip(&recon.magnitudes) {
            self.freq_sum += ((a - b).into_f64() / scale).abs();
        }
        self.freq_count += orig.magnitudes.len();
    }

    fn finish(self) -> EvalMetrics {
        EvalMetrics {
            mae_time: self.time_sum / self.time_count as f64,
            mae_frequency: self.freq_sum / self.freq_count as f64,
        }
    }
}

/// Reconstruct one window in eval mode.
pub fn reconstruct<S: Scalar>(model: &DcaeModel<S>, window: &[S]) -> Result<Vec<S>, DcaeError> {
    let (c, t) = (model.cfg.in_channels, model.cfg.in_time);
    if window.len() != c * t {
        return Err(DcaeError::ShapeMismatch(format!(
            "window holds {} values, model expects {c} x {t}",
            window.len()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(vec![1, c, t], window.to_vec());
    let pass = model.forward_eval(&mut g, x)?;
    Ok(g.values(pass.output).to_vec())
}

/// Reconstruction plus paired time traces and unnormalized magnitude
/// spectra, for plotting.
pub struct ReconstructionTraces<S> {
    pub xhat: Vec<S>,
    pub original_spectrum: Spectrum<S>,
    pub reconstruction_spectrum: Spectrum<S>,
}

pub fn reconstruct_with_traces<S: Scalar>(
    model: &DcaeModel<S>,
    window: &[S],
) -> Result<ReconstructionTraces<S>, DcaeError> {
    let xhat = reconstruct(model, window)?;
    let c = model.cfg.in_channels;
    let fs = model.cfg.sample_rate_hz;
    Ok(ReconstructionTraces {
        original_spectrum: spectral::rfft_magnitude(window, c, fs),
        reconstruction_spectrum: spectral::rfft_magnitude(&xhat, c, fs),
        xhat,
    })
}
