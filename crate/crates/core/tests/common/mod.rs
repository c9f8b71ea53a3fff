#![allow(dead_code)]

use maskmap::clip::{FaceClip, Label, PRISTINE};
use maskmap::geometry::LandmarkSet;
use maskmap::mapping::MapperConfig;
use maskmap::params::{Grads, ParamId, ParamStore};
use maskmap::recovery::RecoveryConfig;

pub fn tiny_recovery() -> RecoveryConfig {
    RecoveryConfig {
        image_size: 24,
        patch_size: 8,
        frames: 2,
        tubelet: 2,
        encoder_dim: 16,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_dim: 16,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        ..RecoveryConfig::default()
    }
}

pub fn tiny_mapper() -> MapperConfig {
    MapperConfig {
        input_size: 16,
        stem_channels: 4,
        stage_channels: [4, 6, 8],
        map_channels: [4, 4],
        ..Default::default()
    }
}

/// Smooth synthetic clip with fixture landmarks scaled to the frame.
pub fn wave_clip(frames: usize, size: usize, label: Label, phase: f64) -> FaceClip {
    let lm = LandmarkSet::fixture().rescaled((size, size)).unwrap();
    let n = frames * size * size * 3;
    let data = (0..n)
        .map(|i| 0.5 + 0.4 * ((i as f64) * 0.013 + phase).sin())
        .collect();
    let manipulation = if label == Label::Real {
        PRISTINE
    } else {
        "oval"
    };
    FaceClip::new(
        format!("w{phase}"),
        label,
        manipulation,
        (frames, size, size),
        data,
        vec![lm; frames],
    )
    .unwrap()
}

/// Wave clips with given manipulation names; `PRISTINE` entries are real.
pub fn toy_clips(kinds: &[&str], frames: usize, size: usize) -> Vec<FaceClip> {
    kinds
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let label = if kind == PRISTINE {
                Label::Real
            } else {
                Label::Fake
            };
            let base = wave_clip(frames, size, label, 0.37 * i as f64);
            FaceClip::new(
                format!("toy{i:03}"),
                label,
                kind,
                base.shape(),
                base.data,
                base.landmarks,
            )
            .unwrap()
        })
        .collect()
}

/// Deterministic perturbation of every parameter, so zero-initialised heads
/// and branch scales carry gradient to the layers behind them.
pub fn perturb(store: &mut ParamStore, amp: f64) {
    for (n, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
        for (k, v) in store.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += amp * (1.7 * k as f64 + 0.9 * n as f64).sin();
        }
    }
}

/// Worst relative error between analytic and central-difference gradients,
/// per parameter tensor. Up to `per_tensor` evenly spaced entries are probed.
pub fn gradient_errors(
    store: &ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    eval: impl Fn(&ParamStore) -> (f64, Grads),
) -> Vec<(String, f64)> {
    let (_, analytic) = eval(store);
    let h = 1e-5;
    let mut out = Vec::new();
    for &id in ids {
        let len = store.get(id).len();
        let step = (len / per_tensor).max(1);
        let mut worst: f64 = 0.0;
        for k in (0..len).step_by(step).take(per_tensor) {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[k] += h;
            let up = eval(&p).0;
            p.get_mut(id).data_mut()[k] -= 2.0 * h;
            let down = eval(&p).0;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        out.push((store.name(id).to_string(), worst));
    }
    out
}
