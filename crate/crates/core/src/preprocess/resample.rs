//! Rate conversion via natural cubic spline interpolation.

use crate::signal_io::ChannelSignal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ResampleError {
    #[error("signal has {0} samples; a cubic spline needs at least 4")]
    TooShort(usize),
    #[error("sampling rate {0} Hz must be positive")]
    BadRate(f64),
}

/// Natural cubic spline over uniformly spaced knots `i * h`.
///
/// Second derivatives vanish at both ends; the tridiagonal system for the
/// interior second derivatives is solved with the Thomas algorithm.
pub struct NaturalCubicSpline {
    h: f64,
    y: Vec<f64>,
    /// Second derivative at each knot.
    m: Vec<f64>,
}

impl NaturalCubicSpline {
    pub fn fit(y: &[f64], h: f64) -> Result<Self, ResampleError> {
        let n = y.len();
        if n < 4 {
            return Err(ResampleError::TooShort(n));
        }
        // Interior equations: m[i-1] + 4 m[i] + m[i+1] = 6 (y[i+1] - 2 y[i] + y[i-1]) / h^2
        let k = n - 2;
        let mut diag = vec![4.0; k];
        let mut rhs: Vec<f64> = (1..n - 1)
            .map(|i| 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h))
            .collect();
        for i in 1..k {
            let w = 1.0 / diag[i - 1];
            diag[i] -= w;
            rhs[i] -= w * rhs[i - 1];
        }
        let mut m = vec![0.0; n];
        if k > 0 {
            m[n - 2] = rhs[k - 1] / diag[k - 1];
            for i in (1..k).rev() {
                m[i] = (rhs[i - 1] - m[i + 1]) / diag[i - 1];
            }
        }
        Ok(Self {
            h,
            y: y.to_vec(),
            m,
        })
    }

    /// Evaluate at `pos` in knot units (`pos = t / h`).
    ///
    /// Points beyond the last knot extrapolate the final segment polynomial;
    /// points that land exactly on a knot return the sample value verbatim.
    pub fn eval_at(&self, pos: f64) -> f64 {
        let knot = pos.round();
        if pos == knot && knot >= 0.0 && (knot as usize) < self.y.len() {
            return self.y[knot as usize];
        }
        let i = (pos.floor() as isize).clamp(0, self.y.len() as isize - 2) as usize;
        let dt = (pos - i as f64) * self.h;
        let h = self.h;
        let (y0, y1) = (self.y[i], self.y[i + 1]);
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let b = (y1 - y0) / h - h * (2.0 * m0 + m1) / 6.0;
        y0 + dt * (b + dt * (m0 / 2.0 + dt * (m1 - m0) / (6.0 * h)))
    }
}

/// Resample a channel to `target_fs` by evaluating a natural cubic spline,
/// fitted to the input at times `i / fs`, at the output grid `j / target_fs`
/// for `j` in `[0, floor(duration * target_fs))`.
pub fn resample_cubic(sig: &ChannelSignal, target_fs: f64) -> Result<ChannelSignal, ResampleError> {
    if sig.fs <= 0.0 || target_fs <= 0.0 {
        return Err(ResampleError::BadRate(sig.fs.min(target_fs)));
    }
    let spline = NaturalCubicSpline::fit(&sig.samples, 1.0 / sig.fs)?;
    let out_len = (sig.samples.len() as f64 * target_fs / sig.fs).floor() as usize;
    // Output sample j sits at time j / target_fs, i.e. j * fs / target_fs in
    // knot units; for equal rates this is exactly j, so knots round-trip
    // bit-exactly.
    let samples = (0..out_len)
        .map(|j| spline.eval_at(j as f64 * sig.fs / target_fs))
        .collect();
    Ok(ChannelSignal {
        label: sig.label.clone(),
        fs: target_fs,
        samples,
    })
}
