//! Seeded training loop: shuffled batches, on-the-fly electrode flipping,
//! Adam updates, per-epoch logs and checkpoints.

use super::{build_loss, save_checkpoint, DcaeError, DcaeModel, LossBreakdown};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Scalar};
use crate::windowing::{flip_electrodes, WindowSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Probability of swapping hemispheres per window per epoch.
    pub flip_probability: f64,
    /// Write a checkpoint (with optimizer state) after each epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// First epoch index; nonzero when resuming from a checkpoint.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 0,
            flip_probability: 0.5,
            checkpoint_dir: None,
            start_epoch: 0,
        }
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_ts: f64,
    pub l_ft: f64,
    pub l_stft: f64,
    pub total: f64,
    pub wall_seconds: f64,
}

/// Derive the RNG stream of one epoch. Keyed by (seed, epoch) so a resumed
/// run replays exactly the shuffle, flip and dropout draws of an unbroken
/// one.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Train in place. Batches are shuffled per epoch (seeded), the trailing
/// partial batch is dropped, and every epoch logs the mean of all loss
/// components regardless of the active mode.
pub fn train<S: Scalar>(
    model: &mut DcaeModel<S>,
    adam: &mut AdamState<S>,
    windows: &WindowSet,
    tc: &TrainConfig,
) -> Result<Vec<EpochLog>, DcaeError> {
    let batches = windows.n / tc.batch_size;
    if batches == 0 {
        return Err(DcaeError::EmptyDataset);
    }
    let (c, t) = (windows.channels, windows.samples);
    let window_len = c * t;
    let (lo_bin, hi_bin) = model.cfg.band_bins();
    let fs = model.cfg.sample_rate_hz;

    let mut logs = Vec::with_capacity(tc.epochs.saturating_sub(tc.start_epoch));
    for epoch in tc.start_epoch..tc.epochs {
        let started = Instant::now();
        let mut rng = epoch_rng(tc.seed, epoch);
        let mut order: Vec<usize> = (0..windows.n).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for batch in 0..batches {
            let ids = &order[batch * tc.batch_size..(batch + 1) * tc.batch_size];
            let mut input = Vec::with_capacity(ids.len() * window_len);
            for &i in ids {
                let offset = input.len();
                input.extend(windows.window(i).iter().map(|&v| S::from_f32(v)));
                if rng.gen::<f64>() < tc.flip_probability {
                    flip_electrodes(&mut input[offset..], c);
                }
            }

            let mut g = Graph::new();
            let x = g.constant(vec![ids.len(), c, t], input.clone());
            let pass = model.forward_train(&mut g, x, &mut rng)?;
            let nodes = build_loss(&mut g, pass.output, &input, &model.cfg)?;

            let total = g.scalar_value(nodes.total).into_f64();
            if !total.is_finite() {
                return Err(DcaeError::NonFiniteLoss { epoch, batch });
            }

            // Components for the log; the unweighted ones come from the pure
            // route so the graph stays as small as the mode needs.
            let xhat = g.values(pass.output);
            let l_ts = g.scalar_value(nodes.l_ts).into_f64();
            let l_ft = match nodes.l_ft {
                Some(id) => g.scalar_value(id).into_f64(),
                None => super::loss_ft_value(&input, xhat, ids.len(), c, t, lo_bin, hi_bin, fs),
            };
            let l_stft = match nodes.l_stft {
                Some(id) => g.scalar_value(id).into_f64(),
                None => super::loss_stft_value(&input, xhat, ids.len(), c, t),
            };
            let breakdown = LossBreakdown::combined(
                model.cfg.loss_mode,
                model.cfg.ft_weight,
                model.cfg.stft_weight,
                l_ts,
                l_ft,
                l_stft,
                input.len(),
            );
            debug_assert!((breakdown.total - total).abs() <= 1e-6 * total.abs().max(1.0));

            let mut grads = g.backward(nodes.total);
            let grad_vecs: Vec<Vec<S>> = pass
                .param_nodes
                .iter()
                .zip(model.params())
                .map(|(&id, p)| grads.take(id).unwrap_or_else(|| vec![S::zero(); p.data.len()]))
                .collect();
            drop(grads);
            drop(g);

            let grad_refs: Vec<&[S]> = grad_vecs.iter().map(|v| v.as_slice()).collect();
            let mut param_refs: Vec<&mut [S]> = model
                .params_mut()
                .iter_mut()
                .map(|p| p.data.as_mut_slice())
                .collect();
            adam_step(&mut param_refs, &grad_refs, adam, &tc.adam)?;
            drop(param_refs);
            model.apply_bn_updates(&pass.bn_stats);

            sums.0 += breakdown.l_ts;
            sums.1 += breakdown.l_ft;
            sums.2 += breakdown.l_stft;
            sums.3 += breakdown.total;
        }

        let inv = 1.0 / batches as f64;
        let log = EpochLog {
            epoch,
            l_ts: sums.0 * inv,
            l_ft: sums.1 * inv,
            l_stft: sums.2 * inv,
            total: sums.3 * inv,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &tc.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            save_checkpoint(model, Some(adam), (epoch + 1) as u64, &path)?;
        }
        logs.push(log);
    }
    Ok(logs)
}
