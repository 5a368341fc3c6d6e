//! The convolutional autoencoder: architecture assembly, the three loss
//! configurations, the training loop and evaluation metrics.
//!
//! The encoder maps a `[23, 512]` window through three conv blocks to a
//! 500-dimensional latent vector; the decoder mirrors the encoder with
//! upsampling and reconstructs the window. Reconstruction quality is driven
//! by one of three losses: plain time-series MAE, time + band-restricted
//! Fourier magnitudes, or time + STFT magnitudes.

mod checkpoint;
mod eval;
mod loss;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, LoadedCheckpoint};
pub use eval::{
    evaluate, evaluate_with, reconstruct, reconstruct_with_traces, EvalMetrics,
    ReconstructionTraces,
};
pub use loss::{
    build_loss, loss_ft_value, loss_stft_value, loss_ts_value, LossBreakdown, LossNodes,
};
pub use train::{train, EpochLog, TrainConfig};

use crate::nn::{BatchStats, Graph, Mode, NnError, NodeId, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DcaeError {
    #[error("invalid model configuration: {0}")]
    ConfigInvalid(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; training aborted")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dataset holds no complete batch")]
    EmptyDataset,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which reconstruction loss drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Time-series MAE only.
    Ts,
    /// `20 * L_FT + 1 * L_TS` with the Fourier term restricted to 8-30 Hz.
    TsFt,
    /// `20 * L_STFT + 1 * L_TS` over the full spectrogram.
    TsStft,
}

impl LossMode {
    pub fn all() -> [LossMode; 3] {
        [LossMode::Ts, LossMode::TsFt, LossMode::TsStft]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::Ts => "ts",
            LossMode::TsFt => "ts_ft",
            LossMode::TsStft => "ts_stft",
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ts" => Ok(LossMode::Ts),
            "ts_ft" | "ts-ft" => Ok(LossMode::TsFt),
            "ts_stft" | "ts-stft" => Ok(LossMode::TsStft),
            other => Err(format!("unknown loss mode {other:?}")),
        }
    }
}

/// Architecture and loss configuration.
///
/// Defaults follow the reference setup: 23 x 512 input, encoder widths
/// 32/64/128 with kernels 7/5/3, latent dimension 500, dropout 0.2, loss
/// weights 20, band 8-30 Hz at a 256 Hz window rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcaeConfig {
    pub in_channels: usize,
    pub in_time: usize,
    pub latent_dim: usize,
    pub encoder_channels: [usize; 3],
    pub encoder_kernels: [usize; 3],
    pub dropout: f64,
    pub loss_mode: LossMode,
    pub ft_weight: f64,
    pub stft_weight: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    /// Sample rate of the windows, fixing the Hz -> bin mapping.
    pub sample_rate_hz: f64,
}

impl Default for DcaeConfig {
    fn default() -> Self {
        Self {
            in_channels: 23,
            in_time: 512,
            latent_dim: 500,
            encoder_channels: [32, 64, 128],
            encoder_kernels: [7, 5, 3],
            dropout: 0.2,
            loss_mode: LossMode::Ts,
            ft_weight: 20.0,
            stft_weight: 20.0,
            band_lo_hz: 8.0,
            band_hi_hz: 30.0,
            sample_rate_hz: 256.0,
        }
    }
}

impl DcaeConfig {
    /// Reduced profile for desk-scale experiments and tests: same topology,
    /// far fewer parameters.
    pub fn tiny() -> Self {
        Self {
            encoder_channels: [4, 8, 8],
            latent_dim: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DcaeError> {
        let bad = |msg: String| Err(DcaeError::ConfigInvalid(msg));
        if self.in_channels == 0 || self.latent_dim == 0 {
            return bad("channel and latent dimensions must be positive".into());
        }
        if !self.in_time.is_power_of_two() || self.in_time < 8 {
            return bad(format!(
                "in_time {} must be a power of two >= 8 (two pooling stages + FFT)",
                self.in_time
            ));
        }
        if self.encoder_channels.iter().any(|&c| c == 0) {
            return bad("encoder channel widths must be positive".into());
        }
        if self.encoder_kernels.iter().any(|&k| k % 2 == 0) {
            return bad("encoder kernels must be odd for same padding".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.band_lo_hz >= self.band_hi_hz {
            return bad(format!(
                "band [{}, {}] Hz is empty",
                self.band_lo_hz, self.band_hi_hz
            ));
        }
        let df = self.sample_rate_hz / self.in_time as f64;
        let hi_bin = (self.band_hi_hz / df).round() as usize;
        if hi_bin > self.in_time / 2 {
            return bad(format!(
                "band upper edge {} Hz exceeds Nyquist for {} Hz windows",
                self.band_hi_hz, self.sample_rate_hz
            ));
        }
        Ok(())
    }

    /// Flattened feature count between the encoder convs and the latent
    /// dense layer.
    pub fn flat_features(&self) -> usize {
        self.encoder_channels[2] * (self.in_time / 4)
    }

    /// Inclusive FFT bin range of the loss band.
    pub fn band_bins(&self) -> (usize, usize) {
        let df = self.sample_rate_hz / self.in_time as f64;
        (
            (self.band_lo_hz / df).round() as usize,
            (self.band_hi_hz / df).round() as usize,
        )
    }
}

/// Per-layer running statistics for eval-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BnRunning<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

/// The encoder/decoder parameter set.
#[derive(Debug, Clone)]
pub struct DcaeModel<S: Scalar> {
    pub cfg: DcaeConfig,
    pub init_seed: u64,
    params: Vec<Tensor<S>>,
    bn_running: Vec<BnRunning<S>>,
}

/// Node handles for one forward pass through the graph.
pub struct ForwardPass {
    pub output: NodeId,
    pub latent: NodeId,
    /// Graph leaves bound to the model parameters, in parameter order.
    pub param_nodes: Vec<NodeId>,
    /// Batch statistics per batchnorm layer (train mode only).
    pub bn_stats: Vec<BatchStats<f64>>,
}

const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

/// Build a model with Kaiming-uniform weights (`U(+-sqrt(6 / fan_in))`),
/// zero biases and unit batchnorm scales. Equal seeds give bit-identical
/// parameters.
pub fn build_model<S: Scalar>(cfg: &DcaeConfig, seed: u64) -> Result<DcaeModel<S>, DcaeError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [w1, w2, w3] = cfg.encoder_channels;
    let [k1, k2, k3] = cfg.encoder_kernels;
    let c = cfg.in_channels;
    let flat = cfg.flat_features();
    let d = cfg.latent_dim;

    let mut params = Vec::new();
    let mut conv = |params: &mut Vec<Tensor<S>>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng| {
        params.push(kaiming_conv::<S>(name, cout, cin, k, rng));
        params.push(Tensor::zeros(format!("{name}.bias"), vec![cout]));
    };
    let bn = |params: &mut Vec<Tensor<S>>, name: &str, width: usize| {
        params.push(Tensor::new(
            format!("{name}.gamma"),
            vec![width],
            vec![S::one(); width],
        ));
        params.push(Tensor::zeros(format!("{name}.beta"), vec![width]));
    };

    conv(&mut params, "enc1.conv", w1, c, k1, &mut rng);
    bn(&mut params, "enc1.bn", w1);
    conv(&mut params, "enc2.conv", w2, w1, k2, &mut rng);
    bn(&mut params, "enc2.bn", w2);
    conv(&mut params, "enc3.conv", w3, w2, k3, &mut rng);
    bn(&mut params, "enc3.bn", w3);
    params.push(kaiming_dense::<S>("enc.latent", d, flat, &mut rng));
    params.push(Tensor::zeros("enc.latent.bias", vec![d]));
    params.push(kaiming_dense::<S>("dec.expand", flat, d, &mut rng));
    params.push(Tensor::zeros("dec.expand.bias", vec![flat]));
    conv(&mut params, "dec1.conv", w2, w3, k3, &mut rng);
    bn(&mut params, "dec1.bn", w2);
    conv(&mut params, "dec2.conv", w1, w2, k2, &mut rng);
    bn(&mut params, "dec2.bn", w1);
    conv(&mut params, "out.conv", c, w1, k1, &mut rng);

    let bn_running = [w1, w2, w3, w2, w1]
        .iter()
        .map(|&width| BnRunning {
            mean: vec![S::zero(); width],
            var: vec![S::one(); width],
        })
        .collect();

    Ok(DcaeModel {
        cfg: cfg.clone(),
        init_seed: seed,
        params,
        bn_running,
    })
}

fn kaiming_conv<S: Scalar>(
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let fan_in = cin * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let data = (0..cout * cin * k)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(format!("{name}.weight"), vec![cout, cin, k], data)
}

fn kaiming_dense<S: Scalar>(
    name: &str,
    dout: usize,
    din: usize,
    rng: &mut ChaCha8Rng,
) -> Tensor<S> {
    let bound = (6.0 / din as f64).sqrt();
    let data = (0..dout * din)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(format!("{name}.weight"), vec![dout, din], data)
}

impl<S: Scalar> DcaeModel<S> {
    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn bn_running(&self) -> &[BnRunning<S>] {
        &self.bn_running
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub(crate) fn set_state(&mut self, params: Vec<Tensor<S>>, bn: Vec<BnRunning<S>>) {
        self.params = params;
        self.bn_running = bn;
    }

    /// Training forward pass: batch statistics, dropout from `rng`.
    pub fn forward_train(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardPass, DcaeError> {
        self.forward_impl(g, x, Mode::Train, Some(rng))
    }

    /// Deterministic eval forward pass: running statistics, no dropout.
    pub fn forward_eval(&self, g: &mut Graph<S>, x: NodeId) -> Result<ForwardPass, DcaeError> {
        self.forward_impl(g, x, Mode::Eval, None)
    }

    /// Eval forward pass over externally created parameter leaves (ordered
    /// like [`Self::params`]); the finite-difference harness uses this to
    /// differentiate the whole model with respect to its parameters.
    pub fn forward_eval_with(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        param_nodes: &[NodeId],
    ) -> Result<ForwardPass, DcaeError> {
        assert_eq!(param_nodes.len(), self.params.len());
        self.forward_bound(g, x, Mode::Eval, None, Some(param_nodes))
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn forward_impl(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass, DcaeError> {
        self.forward_bound(g, x, mode, rng, None)
    }

    fn forward_bound(
        &self,
        g: &mut Graph<S>,
        x: NodeId,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
        bound: Option<&[NodeId]>,
    ) -> Result<ForwardPass, DcaeError> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.in_channels || shape[2] != self.cfg.in_time {
            return Err(DcaeError::ShapeMismatch(format!(
                "input {:?}, model expects [N, {}, {}]",
                shape, self.cfg.in_channels, self.cfg.in_time
            )));
        }
        let n = shape[0];
        let param_nodes: Vec<NodeId> = match bound {
            Some(ids) => ids.to_vec(),
            None => self
                .params
                .iter()
                .map(|p| g.leaf(p.shape.clone(), p.data.clone(), true))
                .collect(),
        };
        let p = |name: &str| param_nodes[self.param_index(name)];

        let mut bn_stats = Vec::new();
        let mut bn_index = 0usize;
        let mut batchnorm = |g: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId, DcaeError> {
            let gamma = p(&format!("{name}.gamma"));
            let beta = p(&format!("{name}.beta"));
            let out = match mode {
                Mode::Train => {
                    let (out, batch) = g.batchnorm_train(x, gamma, beta, BN_EPS)?;
                    bn_stats.push(BatchStats {
                        mean: batch.mean.iter().map(|v| v.into_f64()).collect(),
                        var: batch.var.iter().map(|v| v.into_f64()).collect(),
                    });
                    out
                }
                Mode::Eval => {
                    let running = &self.bn_running[bn_index];
                    g.batchnorm_eval(x, gamma, beta, &running.mean, &running.var, BN_EPS)?
                }
            };
            bn_index += 1;
            Ok(out)
        };
        let mut dropout = |g: &mut Graph<S>, x: NodeId| match mode {
            Mode::Train => {
                let rng = rng.as_deref_mut().expect("train mode needs an rng");
                g.dropout(x, self.cfg.dropout, rng)
            }
            Mode::Eval => x,
        };

        // Encoder.
        let mut h = g.conv1d_same(x, p("enc1.conv.weight"), p("enc1.conv.bias"))?;
        h = batchnorm(g, h, "enc1.bn")?;
        h = g.relu(h);
        h = dropout(g, h);

        h = g.conv1d_same(h, p("enc2.conv.weight"), p("enc2.conv.bias"))?;
        h = batchnorm(g, h, "enc2.bn")?;
        h = g.relu(h);
        h = g.maxpool2(h)?;

        h = g.conv1d_same(h, p("enc3.conv.weight"), p("enc3.conv.bias"))?;
        h = batchnorm(g, h, "enc3.bn")?;
        h = g.relu(h);
        h = g.maxpool2(h)?;

        let flat = g.reshape(h, vec![n, self.cfg.flat_features()])?;
        let latent = g.dense(flat, p("enc.latent.weight"), p("enc.latent.bias"))?;

        // Decoder.
        let mut d = g.dense(latent, p("dec.expand.weight"), p("dec.expand.bias"))?;
        d = g.reshape(
            d,
            vec![n, self.cfg.encoder_channels[2], self.cfg.in_time / 4],
        )?;

        d = g.upsample2(d);
        d = g.conv1d_same(d, p("dec1.conv.weight"), p("dec1.conv.bias"))?;
        d = batchnorm(g, d, "dec1.bn")?;
        d = g.relu(d);
        d = dropout(g, d);

        d = g.upsample2(d);
        d = g.conv1d_same(d, p("dec2.conv.weight"), p("dec2.conv.bias"))?;
        d = batchnorm(g, d, "dec2.bn")?;
        d = g.relu(d);
        d = dropout(g, d);

        // Linear output: inputs are clipped to [-1, 1], MAE handles the
        // range directly.
        let output = g.conv1d_same(d, p("out.conv.weight"), p("out.conv.bias"))?;

        Ok(ForwardPass {
            output,
            latent,
            param_nodes,
            bn_stats,
        })
    }

    /// Fold batch statistics into the running buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, stats: &[BatchStats<f64>]) {
        assert_eq!(stats.len(), self.bn_running.len());
        for (running, batch) in self.bn_running.iter_mut().zip(stats) {
            for (r, &b) in running.mean.iter_mut().zip(&batch.mean) {
                *r = S::from_f64((1.0 - BN_MOMENTUM) * r.into_f64() + BN_MOMENTUM * b);
            }
            for (r, &b) in running.var.iter_mut().zip(&batch.var) {
                *r = S::from_f64((1.0 - BN_MOMENTUM) * r.into_f64() + BN_MOMENTUM * b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_through_the_network() {
        let cfg = DcaeConfig::tiny();
        let model = build_model::<f64>(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(vec![2, 23, 512], vec![0.1; 2 * 23 * 512]);
        let pass = model.forward_eval(&mut g, x).unwrap();
        assert_eq!(g.shape(pass.latent), &[2, 32]);
        assert_eq!(g.shape(pass.output), &[2, 23, 512]);
    }

    #[test]
    fn default_config_matches_reference_dimensions() {
        let cfg = DcaeConfig::default();
        assert_eq!(cfg.flat_features(), 128 * 128);
        assert_eq!(cfg.latent_dim, 500);
        assert_eq!(cfg.band_bins(), (16, 60));
        // time-length bookkeeping through the encoder: 512 -> 512 -> 256 -> 128
        assert_eq!(cfg.in_time / 4, 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn equal_seeds_build_identical_models() {
        let cfg = DcaeConfig::tiny();
        let a = build_model::<f32>(&cfg, 42).unwrap();
        let b = build_model::<f32>(&cfg, 42).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.name, pb.name);
            let bits_a: Vec<u32> = pa.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = pb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        let c = build_model::<f32>(&cfg, 43).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(c.params())
            .any(|(x, y)| x.data != y.data));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = DcaeConfig::tiny();
        cfg.in_time = 500;
        assert!(matches!(
            build_model::<f64>(&cfg, 0),
            Err(DcaeError::ConfigInvalid(_))
        ));
        let mut cfg = DcaeConfig::tiny();
        cfg.encoder_kernels = [7, 4, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = DcaeConfig::tiny();
        cfg.band_hi_hz = 200.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = DcaeConfig::tiny();
        let model = build_model::<f32>(&cfg, 7).unwrap();
        let window: Vec<f32> = (0..23 * 512)
            .map(|i| ((i % 97) as f32 / 97.0) - 0.5)
            .collect();
        let run = || {
            let mut g = Graph::new();
            let x = g.constant(vec![1, 23, 512], window.clone());
            let pass = model.forward_eval(&mut g, x).unwrap();
            g.values(pass.output)
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
