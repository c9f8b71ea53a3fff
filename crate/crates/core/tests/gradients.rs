mod common;

use maskmap::autodiff::Graph;
use maskmap::clip::{patchify, Label};
use maskmap::mapping::{map_loss, Mapper};
use maskmap::params::{Grads, ParamStore};
use maskmap::recovery::{finetune_forward, reconstruction_graph, Phase, RecoveryModel};

use common::{gradient_errors, perturb, tiny_mapper, tiny_recovery, wave_clip};

const TOL: f64 = 1e-3;

fn assert_close(errors: &[(String, f64)]) {
    let bad: Vec<_> = errors.iter().filter(|(_, e)| !(*e < TOL)).collect();
    assert!(bad.is_empty(), "gradient mismatch: {bad:?}");
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let model = RecoveryModel::new(tiny_recovery(), 3).unwrap();
    let clip = wave_clip(2, 24, Label::Real, 0.3);
    let layout = model.layout();
    let tokens = patchify(&clip, &layout).unwrap();
    let tm = model
        .clip_mask(&clip, 5)
        .unwrap()
        .token_mask(&layout)
        .unwrap();
    assert!(tm.iter().any(|&m| m) && tm.iter().any(|&m| !m));
    let eval = |p: &ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        let mut g = Graph::new();
        let (loss, _, _) = reconstruction_graph(&m, &mut g, &tokens, &tm).unwrap();
        let mut grads = Grads::zeros_like(p);
        g.backward(loss, &mut grads);
        (g.value(loss).item(), grads)
    };
    let errors = gradient_errors(&model.params, &model.trainable(Phase::Pretrain), 6, eval);
    assert!(errors.len() > 10);
    assert_close(&errors);
}

#[test]
fn classification_gradients_match_finite_differences() {
    let mut model = RecoveryModel::new(tiny_recovery(), 4).unwrap();
    perturb(&mut model.params, 0.1);
    let clip = wave_clip(2, 24, Label::Fake, 1.1);
    let eval = |p: &ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        let mut g = Graph::new();
        let logits = finetune_forward(&m, &mut g, &clip).unwrap();
        let loss = g.cross_entropy(logits, clip.label.as_index());
        let mut grads = Grads::zeros_like(p);
        g.backward(loss, &mut grads);
        (g.value(loss).item(), grads)
    };
    assert_close(&gradient_errors(
        &model.params,
        &model.trainable(Phase::Finetune),
        6,
        eval,
    ));
}

#[test]
fn mapper_gradients_match_finite_differences() {
    let cfg = tiny_mapper();
    let mut mapper = Mapper::new(cfg.clone(), 2).unwrap();
    perturb(&mut mapper.params, 0.1);
    let clip = wave_clip(1, 16, Label::Fake, 0.7);
    let frame = clip.frame_chw(0);
    let eval = |p: &ParamStore| {
        let mut m = mapper.clone();
        m.params = p.clone();
        let mut g = Graph::new();
        let out = m.forward(&mut g, frame.clone());
        let (mse, bce) = map_loss(&mut g, &cfg, &out, &frame, Label::Fake);
        let loss = g.add(mse, bce);
        let mut grads = Grads::zeros_like(p);
        g.backward(loss, &mut grads);
        (g.value(loss).item(), grads)
    };
    let ids: Vec<_> = mapper.params.ids().collect();
    assert_close(&gradient_errors(&mapper.params, &ids, 6, eval));
}
