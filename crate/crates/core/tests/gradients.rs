//! Finite-difference verification of every differentiable layer and every
//! loss mode at 64-bit precision on tiny shapes.
//!
//! Layer checks must land under 1e-4 relative error; the full model with
//! spectral losses under 1e-3. Dropout is excluded (its mask is sampled,
//! not differentiated) and batch normalization runs through both its train
//! and eval paths.

use dcae_core::dcae::{build_loss, build_model, DcaeConfig, LossMode};
use dcae_core::nn::{grad_check, Graph, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Targets are offset away from the predictions so mean-absolute losses
/// never straddle their kink under the +-h probes.
fn offset_target(rng: &mut ChaCha8Rng, n: usize, offset: f64) -> Vec<f64> {
    (0..n).map(|_| offset + rng.gen_range(-0.3..0.3)).collect()
}

fn mae_against(
    g: &mut Graph<f64>,
    y: NodeId,
    target: &[f64],
) -> Result<NodeId, dcae_core::nn::NnError> {
    let diff = g.sub_const(y, target)?;
    let abs = g.abs(diff);
    Ok(g.mean(abs))
}

#[test]
fn conv1d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (n, cin, l, cout, k) = (2, 2, 8, 3, 3);
    let x = random_vec(&mut rng, n * cin * l);
    let w = random_vec(&mut rng, cout * cin * k);
    let b = random_vec(&mut rng, cout);
    let target = offset_target(&mut rng, n * cout * l, 5.0);
    let report = grad_check(
        &[vec![n, cin, l], vec![cout, cin, k], vec![cout]],
        &[x, w, b],
        |g, ids| {
            let y = g.conv1d_same(ids[0], ids[1], ids[2])?;
            mae_against(g, y, &target)
        },
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn dense_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (n, din, dout) = (3, 5, 4);
    let x = random_vec(&mut rng, n * din);
    let w = random_vec(&mut rng, dout * din);
    let b = random_vec(&mut rng, dout);
    let target = offset_target(&mut rng, n * dout, 5.0);
    let report = grad_check(
        &[vec![n, din], vec![dout, din], vec![dout]],
        &[x, w, b],
        |g, ids| {
            let y = g.dense(ids[0], ids[1], ids[2])?;
            mae_against(g, y, &target)
        },
        1e-3,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn batchnorm_train_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let (n, c, l) = (3, 2, 6);
    let x = random_vec(&mut rng, n * c * l);
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = random_vec(&mut rng, c);
    let target = offset_target(&mut rng, n * c * l, 4.0);
    let report = grad_check(
        &[vec![n, c, l], vec![c], vec![c]],
        &[x, gamma, beta],
        |g, ids| {
            let (y, _) = g.batchnorm_train(ids[0], ids[1], ids[2], 1e-5)?;
            mae_against(g, y, &target)
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn batchnorm_eval_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (n, c, l) = (2, 3, 4);
    let x = random_vec(&mut rng, n * c * l);
    let gamma: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = random_vec(&mut rng, c);
    let mean = random_vec(&mut rng, c);
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let target = offset_target(&mut rng, n * c * l, 4.0);
    let report = grad_check(
        &[vec![n, c, l], vec![c], vec![c]],
        &[x, gamma, beta],
        |g, ids| {
            let y = g.batchnorm_eval(ids[0], ids[1], ids[2], &mean, &var, 1e-5)?;
            mae_against(g, y, &target)
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn maxpool_and_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (n, c, l) = (2, 2, 8);
    let x = random_vec(&mut rng, n * c * l);
    let target = offset_target(&mut rng, n * c * l, 4.0);
    let report = grad_check(
        &[vec![n, c, l]],
        &[x],
        |g, ids| {
            let pooled = g.maxpool2(ids[0])?;
            let up = g.upsample2(pooled);
            mae_against(g, up, &target)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn relu_and_arithmetic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let n = 24;
    // keep activations away from the ReLU kink under +-h
    let x: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let target = offset_target(&mut rng, n, 3.0);
    let report = grad_check(
        &[vec![n]],
        &[x],
        |g, ids| {
            let r = g.relu(ids[0]);
            let scaled = g.scale(r, 1.7);
            let summed = g.add(scaled, ids[0])?;
            mae_against(g, summed, &target)
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn spectral_loss_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let (n, c, t) = (1, 2, 64);
    let x = random_vec(&mut rng, n * c * t);
    // band-selected, per-window scaled magnitude MAE against an offset target
    let bins = t / 2 + 1;
    let target = offset_target(&mut rng, n * c * (11 - 4 + 1), 40.0);
    let report = grad_check(
        &[vec![n, c, t]],
        &[x],
        |g, ids| {
            let mag = g.rfft_mag(ids[0]);
            assert_eq!(g.shape(mag), &[n, c, bins]);
            let band = g.band_select(mag, 4, 11)?;
            let scaled = g.scale_per_window(band, &[0.25])?;
            mae_against(g, scaled, &target)
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");

    let x = random_vec(&mut rng, c * t);
    let frames = dcae_core::spectral::stft_frames(t);
    let target = offset_target(&mut rng, c * 33 * frames, 20.0);
    let report = grad_check(
        &[vec![1, c, t]],
        &[x],
        |g, ids| {
            let sg = g.stft_mag(ids[0]);
            mae_against(g, sg, &target)
        },
        1e-4,
        1e-4,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

fn tiny_model_cfg(mode: LossMode, t: usize) -> DcaeConfig {
    DcaeConfig {
        in_channels: 2,
        in_time: t,
        latent_dim: 5,
        encoder_channels: [2, 3, 4],
        encoder_kernels: [7, 5, 3],
        loss_mode: mode,
        // keep the band inside the tiny window's spectrum
        band_lo_hz: 8.0,
        band_hi_hz: 30.0,
        ..DcaeConfig::default()
    }
}

fn full_model_check(mode: LossMode, t: usize, tolerance: f64) -> f64 {
    let cfg = tiny_model_cfg(mode, t);
    let model = build_model::<f64>(&cfg, 301).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let window = random_vec(&mut rng, 2 * t);
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape.clone()).collect();
    let values: Vec<Vec<f64>> = model.params().iter().map(|p| p.data.clone()).collect();
    let report = grad_check(
        &shapes,
        &values,
        |g, ids| {
            let x = g.constant(vec![1, 2, t], window.clone());
            let pass = model
                .forward_eval_with(g, x, ids)
                .map_err(|e| dcae_core::nn::NnError::ShapeMismatch(e.to_string()))?;
            let nodes = build_loss(g, pass.output, &window, &model.cfg)
                .map_err(|e| dcae_core::nn::NnError::ShapeMismatch(e.to_string()))?;
            Ok(nodes.total)
        },
        1e-4,
        tolerance,
    )
    .unwrap();
    report.max_rel_err
}

#[test]
fn full_model_ts_loss_gradients() {
    let err = full_model_check(LossMode::Ts, 32, 1e-4);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_model_ts_ft_loss_gradients() {
    let err = full_model_check(LossMode::TsFt, 32, 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
}

#[test]
fn full_model_ts_stft_loss_gradients() {
    // STFT frames need at least 64 samples.
    let err = full_model_check(LossMode::TsStft, 64, 1e-3);
    assert!(err < 1e-3, "max relative error {err}");
}
