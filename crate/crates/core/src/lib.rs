//! EEG signal-processing and unsupervised representation-learning toolkit.
//!
//! The crate covers the full path from raw EDF recordings to a trained
//! convolutional autoencoder:
//!
//! ```text
//! EDF files
//!   ├─ signal_io    EDF read/write, binary tensor files, corpus census
//!   ├─ preprocess   channel cleaning, cubic-spline resampling to 256 Hz,
//!   │               0.5–70 Hz bandpass + 60 Hz notch, average montage
//!   ├─ windowing    2-second windows (50 % overlap), plausibility screen,
//!   │               per-channel histogram scaler, electrode-flip augmentation
//!   ├─ spectral     FFT / STFT magnitudes with analytic gradients,
//!   │               8–30 Hz band mask, 99th-percentile normalization
//!   ├─ nn           minimal reverse-mode tensor engine (conv, batchnorm,
//!   │               dropout, pooling, dense, upsampling) + Adam
//!   ├─ dcae         encoder/decoder assembly, the three loss modes,
//!   │               training loop, evaluation metrics, checkpoints
//!   └─ synthgen     seeded synthetic EEG corpora with a manifest oracle
//! ```
//!
//! Data-parallel fan-out (per-file preprocessing, batch transforms) runs on
//! rayon when the default `parallel` feature is enabled and falls back to
//! sequential loops without it. Results are bit-identical either way: every
//! parallel loop writes disjoint output regions and keeps reductions in a
//! fixed order.

pub mod dcae;
pub mod nn;
pub mod pipeline;
pub mod preprocess;
pub mod signal_io;
pub mod spectral;
pub mod synthgen;
pub mod windowing;

pub use dcae::{DcaeConfig, DcaeModel, LossBreakdown, LossMode};
pub use nn::Scalar;
pub use signal_io::{ChannelSignal, Recording};
pub use windowing::{HistogramScaler, WindowSet};
