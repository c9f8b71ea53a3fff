//! Recovery stage: a masked autoencoder over face clips.
//!
//! The encoder is a plain ViT with joint space-time attention over the
//! visible tubelet tokens only; the lighter decoder sees the encoded
//! visible tokens plus a shared learned mask token at every hidden
//! position and predicts raw pixels for the hidden tubelets. After
//! pretraining on pristine clips the decoder is dropped and the encoder is
//! finetuned with a two-way classification head on unmasked clips.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::clip::{patchify, unpatchify, FaceClip, Label, TokenLayout};
use crate::error::{Error, Result};
use crate::geometry::BlockGrid;
use crate::masking::{apply_mask, expand_temporal, plan_mask, ClipMask, MaskConfig};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::params::{Grads, Init, ParamId, ParamStore};
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

/// Optimisation settings for one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            warmup_epochs: 1,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PhaseConfig {
    pub fn schedule(&self, num_clips: usize) -> CosineSchedule {
        let per_epoch = num_clips.div_ceil(self.batch_size.max(1)) as u64;
        CosineSchedule {
            base: self.optimizer.lr,
            warmup_steps: per_epoch * self.warmup_epochs as u64,
            total_steps: per_epoch * self.epochs as u64,
            min_frac: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub frames: usize,
    /// Frames per tubelet token.
    pub tubelet: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask: MaskConfig,
    pub pretrain: PhaseConfig,
    pub finetune: PhaseConfig,
}

impl Default for RecoveryConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            frames: 8,
            tubelet: 2,
            encoder_dim: 128,
            encoder_depth: 4,
            encoder_heads: 4,
            decoder_dim: 64,
            decoder_depth: 2,
            decoder_heads: 4,
            mlp_ratio: 4,
            mask: MaskConfig::default(),
            pretrain: PhaseConfig {
                epochs: 12,
                batch_size: 8,
                warmup_epochs: 1,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
            },
            finetune: PhaseConfig {
                epochs: 3,
                batch_size: 8,
                warmup_epochs: 0,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
            },
        }
    }
}

impl RecoveryConfig {
    /// Published full-scale settings (224 px input, 16 px patches,
    /// mask ratio 0.75, batch 8, AdamW 1.5e-4 / finetune 1e-3).
    pub fn full_scale() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            frames: 16,
            tubelet: 2,
            encoder_dim: 768,
            encoder_depth: 12,
            encoder_heads: 12,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 6,
            mlp_ratio: 4,
            mask: MaskConfig::default(),
            pretrain: PhaseConfig {
                epochs: 100,
                batch_size: 8,
                warmup_epochs: 5,
                optimizer: AdamWConfig {
                    lr: 1.5e-4,
                    ..AdamWConfig::default()
                },
            },
            finetune: PhaseConfig {
                epochs: 30,
                batch_size: 8,
                warmup_epochs: 2,
                optimizer: AdamWConfig {
                    lr: 1e-3,
                    ..AdamWConfig::default()
                },
            },
        }
    }

    /// Reduced desk model for quick single-core experiments.
    pub fn compact() -> Self {
        Self {
            encoder_dim: 64,
            encoder_depth: 2,
            encoder_heads: 4,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            pretrain: PhaseConfig {
                batch_size: 4,
                ..Self::default().pretrain
            },
            finetune: PhaseConfig {
                epochs: 6,
                ..Self::default().finetune
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        TokenLayout::new(self.frames, self.image_size, self.patch_size, self.tubelet)?;
        if self.image_size / self.patch_size < 3 {
            return c("the block grid needs at least three rows".into());
        }
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || heads == 0 || dim % heads != 0 {
                return c(format!(
                    "{name} dim {dim} must be a positive multiple of {heads} heads"
                ));
            }
        }
        if self.encoder_depth == 0 || self.mlp_ratio == 0 {
            return c("encoder depth and mlp ratio must be positive".into());
        }
        for (name, p) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if p.batch_size == 0 {
                return c(format!("{name} batch size must be positive"));
            }
        }
        self.mask.validate()
    }

    pub fn layout(&self) -> TokenLayout {
        TokenLayout::new(self.frames, self.image_size, self.patch_size, self.tubelet)
            .expect("validated layout")
    }

    pub fn grid(&self) -> BlockGrid {
        BlockGrid::new(self.image_size, self.patch_size).expect("validated grid")
    }
}

/// Fixed sinusoidal position table `[n, dim]`.
pub fn sinusoid_table(n: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, dim]);
    for pos in 0..n {
        for j in 0..dim {
            let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
            t.data_mut()[pos * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let n = t.cols();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_vec(&[idx.len(), n], data)
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
    heads: usize,
}

fn add_linear(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.w"), init.xavier(fan_in, fan_out)),
        store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
    )
}

fn add_norm(store: &mut ParamStore, name: &str, dim: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0)),
        store.add(format!("{name}.b"), Tensor::zeros(&[dim])),
    )
}

impl BlockIds {
    fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        mlp: usize,
    ) -> Self {
        Self {
            ln1: add_norm(store, &format!("{name}.ln1"), dim),
            q: add_linear(store, init, &format!("{name}.q"), dim, dim),
            k: add_linear(store, init, &format!("{name}.k"), dim, dim),
            v: add_linear(store, init, &format!("{name}.v"), dim, dim),
            proj: add_linear(store, init, &format!("{name}.proj"), dim, dim),
            ln2: add_norm(store, &format!("{name}.ln2"), dim),
            fc1: add_linear(store, init, &format!("{name}.fc1"), dim, dim * mlp),
            fc2: add_linear(store, init, &format!("{name}.fc2"), dim * mlp, dim),
            heads,
        }
    }
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, (w, b): (ParamId, ParamId)) -> Var {
    let w = g.param(store, w);
    let b = g.param(store, b);
    g.linear(x, w, b)
}

fn norm(g: &mut Graph, store: &ParamStore, x: Var, (gamma, beta): (ParamId, ParamId)) -> Var {
    let gamma = g.param(store, gamma);
    let beta = g.param(store, beta);
    g.layer_norm(x, gamma, beta)
}

/// Pre-norm transformer block with joint attention over every row of `x`.
fn transformer_block(g: &mut Graph, store: &ParamStore, ids: &BlockIds, x: Var) -> Var {
    let h = norm(g, store, x, ids.ln1);
    let q = linear(g, store, h, ids.q);
    let k = linear(g, store, h, ids.k);
    let v = linear(g, store, h, ids.v);
    let a = g.attention(q, k, v, ids.heads);
    let a = linear(g, store, a, ids.proj);
    let x = g.add(x, a);
    let h = norm(g, store, x, ids.ln2);
    let h = linear(g, store, h, ids.fc1);
    let h = g.gelu(h);
    let h = linear(g, store, h, ids.fc2);
    g.add(x, h)
}

#[derive(Clone, Debug)]
struct Ids {
    embed: (ParamId, ParamId),
    enc_blocks: Vec<BlockIds>,
    enc_norm: (ParamId, ParamId),
    dec_embed: (ParamId, ParamId),
    mask_token: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_norm: (ParamId, ParamId),
    head: (ParamId, ParamId),
    cls: (ParamId, ParamId),
}

/// Masked autoencoder with its finetuning head.
#[derive(Clone, Debug)]
pub struct RecoveryModel {
    pub cfg: RecoveryConfig,
    pub params: ParamStore,
    ids: Ids,
    pos_enc: Tensor,
    pos_dec: Tensor,
}

/// Which parameters a training phase updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl RecoveryModel {
    pub fn new(cfg: RecoveryConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = cfg.layout();
        let mut init = Init::new(seeds::derive(seed, &[stream::INIT]));
        let mut store = ParamStore::new();
        let (de, dd, mlp) = (cfg.encoder_dim, cfg.decoder_dim, cfg.mlp_ratio);
        let embed = add_linear(&mut store, &mut init, "enc.embed", layout.token_dim(), de);
        let enc_blocks = (0..cfg.encoder_depth)
            .map(|i| {
                BlockIds::new(
                    &mut store,
                    &mut init,
                    &format!("enc.block{i}"),
                    de,
                    cfg.encoder_heads,
                    mlp,
                )
            })
            .collect();
        let enc_norm = add_norm(&mut store, "enc.norm", de);
        let dec_embed = add_linear(&mut store, &mut init, "dec.embed", de, dd);
        let mask_token = store.add("dec.mask_token", init.normal(&[dd], 0.02));
        let dec_blocks = (0..cfg.decoder_depth)
            .map(|i| {
                BlockIds::new(
                    &mut store,
                    &mut init,
                    &format!("dec.block{i}"),
                    dd,
                    cfg.decoder_heads,
                    mlp,
                )
            })
            .collect();
        let dec_norm = add_norm(&mut store, "dec.norm", dd);
        let head = add_linear(&mut store, &mut init, "dec.head", dd, layout.token_dim());
        let cls = add_linear(&mut store, &mut init, "cls.head", de, 2);
        // Zero head: finetuning starts from uniform predictions.
        store.get_mut(cls.0).data_mut().fill(0.0);
        let ids = Ids {
            embed,
            enc_blocks,
            enc_norm,
            dec_embed,
            mask_token,
            dec_blocks,
            dec_norm,
            head,
            cls,
        };
        Ok(Self {
            pos_enc: sinusoid_table(layout.num_tokens(), de),
            pos_dec: sinusoid_table(layout.num_tokens(), dd),
            cfg,
            params: store,
            ids,
        })
    }

    pub fn layout(&self) -> TokenLayout {
        self.cfg.layout()
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serialises")
    }

    /// Parameters updated in a phase: encoder + decoder when pretraining,
    /// encoder + classifier head when finetuning.
    pub fn trainable(&self, phase: Phase) -> Vec<ParamId> {
        let keep = |name: &str| match phase {
            Phase::Pretrain => name.starts_with("enc.") || name.starts_with("dec."),
            Phase::Finetune => name.starts_with("enc.") || name.starts_with("cls."),
        };
        self.params
            .ids()
            .filter(|&id| keep(self.params.name(id)))
            .collect()
    }

    /// Encode visible tokens (`[n_visible, token_dim]`) sitting at token
    /// positions `visible_idx`. Output is `[n_visible, encoder_dim]`.
    pub fn encode(&self, g: &mut Graph, visible: Tensor, visible_idx: &[usize]) -> Var {
        let p = &self.params;
        let x = g.constant(visible);
        let mut x = linear(g, p, x, self.ids.embed);
        let pos = g.constant(gather(&self.pos_enc, visible_idx));
        x = g.add(x, pos);
        for b in &self.ids.enc_blocks {
            x = transformer_block(g, p, b, x);
        }
        norm(g, p, x, self.ids.enc_norm)
    }

    /// Predict pixel tubelets at `masked_idx` from encoded visible tokens.
    /// Output is `[n_masked, token_dim]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        latents: Var,
        visible_idx: &[usize],
        masked_idx: &[usize],
    ) -> Var {
        let p = &self.params;
        let y = linear(g, p, latents, self.ids.dec_embed);
        let fill = g.param(p, self.ids.mask_token);
        let mut y = g.interleave(y, fill, visible_idx, masked_idx);
        let pos = g.constant(gather(
            &self.pos_dec,
            &(0..visible_idx.len() + masked_idx.len()).collect::<Vec<_>>(),
        ));
        y = g.add(y, pos);
        for b in &self.ids.dec_blocks {
            y = transformer_block(g, p, b, y);
        }
        let y = norm(g, p, y, self.ids.dec_norm);
        let y = g.gather_rows(y, masked_idx);
        linear(g, p, y, self.ids.head)
    }

    /// Two-way logits for an unmasked token sequence.
    pub fn classify(&self, g: &mut Graph, tokens: Tensor) -> Var {
        let all: Vec<usize> = (0..tokens.rows()).collect();
        let z = self.encode(g, tokens, &all);
        let pooled = g.mean_rows(z);
        linear(g, &self.params, pooled, self.ids.cls)
    }

    /// Masking draw for `clip` using its first-frame landmarks.
    pub fn clip_mask(&self, clip: &FaceClip, seed: u64) -> Result<ClipMask> {
        mask_for_clip(clip, &self.cfg.grid(), &self.cfg.mask, seed)
    }
}

pub fn mask_for_clip(
    clip: &FaceClip,
    grid: &BlockGrid,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<ClipMask> {
    let plan = plan_mask(&clip.landmarks[0], grid, cfg, seed)?;
    expand_temporal(&plan, clip.frames)
}

/// Latent sequence for the visible tokens of `tokens` under `token_mask`.
pub fn encode_visible(
    model: &RecoveryModel,
    g: &mut Graph,
    tokens: &Tensor,
    token_mask: &[bool],
) -> Result<(Var, Vec<usize>, Vec<usize>)> {
    let split = apply_mask(tokens, token_mask)?;
    let z = model.encode(g, split.visible, &split.visible_idx);
    Ok((z, split.visible_idx, split.masked_idx))
}

/// Decoder predictions, one row per masked position.
pub fn decode_masked(
    model: &RecoveryModel,
    g: &mut Graph,
    latents: Var,
    visible_idx: &[usize],
    masked_idx: &[usize],
) -> Var {
    model.decode(g, latents, visible_idx, masked_idx)
}

/// Mean squared error over the masked token rows only. `pred` and
/// `target` are full `[n_tokens, token_dim]` sequences; rows at visible
/// positions are ignored.
pub fn recon_loss(pred: &Tensor, target: &Tensor, token_mask: &[bool]) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    assert_eq!(pred.rows(), token_mask.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for (r, &masked) in token_mask.iter().enumerate() {
        if masked {
            for (p, t) in pred.row(r).iter().zip(target.row(r)) {
                sum += (p - t) * (p - t);
            }
            n += pred.cols();
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Forward pass of the reconstruction objective; returns the loss node and
/// the masked-row predictions.
pub fn reconstruction_graph(
    model: &RecoveryModel,
    g: &mut Graph,
    tokens: &Tensor,
    token_mask: &[bool],
) -> Result<(Var, Var, Vec<usize>)> {
    let (z, vis, masked) = encode_visible(model, g, tokens, token_mask)?;
    let pred = model.decode(g, z, &vis, &masked);
    let loss = g.mse(pred, gather(tokens, &masked));
    Ok((loss, pred, masked))
}

/// A pretraining batch; construction rejects manipulated clips.
pub struct RealBatch<'a> {
    clips: Vec<&'a FaceClip>,
}

impl<'a> RealBatch<'a> {
    pub fn new(clips: Vec<&'a FaceClip>) -> Result<Self> {
        if let Some(fake) = clips.iter().find(|c| c.label != Label::Real) {
            return Err(Error::FakeInPretrainBatch(fake.id.clone()));
        }
        Ok(Self { clips })
    }

    pub fn clips(&self) -> &[&'a FaceClip] {
        &self.clips
    }
}

/// Mask seed for a clip in a given epoch.
pub fn epoch_mask_seed(global: u64, epoch: u64, clip_id: &str) -> u64 {
    seeds::derive(global, &[stream::MASK, epoch, seeds::hash_str(clip_id)])
}

/// One AdamW step on the batch-mean reconstruction loss. Returns that loss.
pub fn pretrain_step(
    model: &mut RecoveryModel,
    opt: &mut AdamW,
    batch: &RealBatch<'_>,
    masks: &[ClipMask],
    lr: f64,
) -> Result<f64> {
    assert_eq!(batch.clips.len(), masks.len());
    let layout = model.layout();
    let mut grads = Grads::zeros_like(&model.params);
    let mut total = 0.0;
    for (clip, mask) in batch.clips.iter().zip(masks) {
        let tokens = patchify(clip, &layout)?;
        let tm = mask.token_mask(&layout)?;
        let mut g = Graph::new();
        let (loss, _, _) = reconstruction_graph(model, &mut g, &tokens, &tm)?;
        total += g.value(loss).item();
        g.backward(loss, &mut grads);
    }
    let n = batch.clips.len() as f64;
    grads.scale(1.0 / n);
    let loss = total / n;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!("pretraining loss {loss}")));
    }
    let trainable = model.trainable(Phase::Pretrain);
    opt.update(&mut model.params, &grads, &trainable, lr);
    Ok(loss)
}

/// Recovered clip plus residual diagnostics.
#[derive(Clone, Debug)]
pub struct RecoveryOutput {
    pub recovered: FaceClip,
    /// Mean squared residual of each masked tubelet, in token order.
    pub residuals: Vec<f64>,
    /// Reconstruction loss over the masked tubelets.
    pub loss: f64,
}

/// Replace the masked tubelets of `clip` by the decoder's predictions
/// (clamped to `[0, 1]`); visible pixels are copied through unchanged.
pub fn recover_clip(
    model: &RecoveryModel,
    clip: &FaceClip,
    mask: &ClipMask,
) -> Result<RecoveryOutput> {
    let layout = model.layout();
    let tokens = patchify(clip, &layout)?;
    let tm = mask.token_mask(&layout)?;
    if !tm.iter().any(|&m| m) {
        return Ok(RecoveryOutput {
            recovered: clip.clone(),
            residuals: Vec::new(),
            loss: 0.0,
        });
    }
    let mut g = Graph::new();
    let (loss, pred, masked) = reconstruction_graph(model, &mut g, &tokens, &tm)?;
    let pred = g.value(pred);
    let mut out_tokens = tokens.clone();
    let dim = tokens.cols();
    let mut residuals = Vec::with_capacity(masked.len());
    for (r, &i) in masked.iter().enumerate() {
        let row = pred.row(r);
        let target = tokens.row(i);
        residuals.push(
            row.iter()
                .zip(target)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / dim as f64,
        );
        for (o, p) in out_tokens.data_mut()[i * dim..(i + 1) * dim]
            .iter_mut()
            .zip(row)
        {
            *o = p.clamp(0.0, 1.0);
        }
    }
    let mut recovered = clip.clone();
    recovered.data = unpatchify(&out_tokens, &layout);
    Ok(RecoveryOutput {
        recovered,
        residuals,
        loss: g.value(loss).item(),
    })
}

/// Recover each facial part in turn from the untouched clip (one forced-part
/// mask per band, all drawn from `seed`) and compose the predictions. The
/// bands are disjoint, so every block is predicted at most once. With the
/// whole-face strategy this is a single [`recover_clip`] pass.
pub fn recover_all_parts(
    model: &RecoveryModel,
    clip: &FaceClip,
    seed: u64,
) -> Result<RecoveryOutput> {
    let grid = model.cfg.grid();
    if model.cfg.mask.strategy == crate::masking::MaskStrategy::WholeFace {
        let mask = mask_for_clip(clip, &grid, &model.cfg.mask, seed)?;
        return recover_clip(model, clip, &mask);
    }
    let layout = model.layout();
    let mut composite = patchify(clip, &layout)?;
    let dim = composite.cols();
    let mut residuals = Vec::new();
    for part in crate::geometry::Part::ALL {
        let cfg = MaskConfig {
            forced_part: Some(part),
            ..model.cfg.mask.clone()
        };
        let mask = mask_for_clip(clip, &grid, &cfg, seed)?;
        let out = recover_clip(model, clip, &mask)?;
        let tokens = patchify(&out.recovered, &layout)?;
        for (i, masked) in mask.token_mask(&layout)?.into_iter().enumerate() {
            if masked {
                composite.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(tokens.row(i));
            }
        }
        residuals.extend(out.residuals);
    }
    let loss = if residuals.is_empty() {
        0.0
    } else {
        residuals.iter().sum::<f64>() / residuals.len() as f64
    };
    let mut recovered = clip.clone();
    recovered.data = unpatchify(&composite, &layout);
    Ok(RecoveryOutput {
        recovered,
        residuals,
        loss,
    })
}

/// Two-way logits `[1, 2]` (index 1 = fake) for an unmasked clip.
pub fn finetune_forward(model: &RecoveryModel, g: &mut Graph, clip: &FaceClip) -> Result<Var> {
    let tokens = patchify(clip, &model.layout())?;
    Ok(model.classify(g, tokens))
}

/// Softmax probability that `clip` is fake.
pub fn fake_probability(model: &RecoveryModel, clip: &FaceClip) -> Result<f64> {
    let mut g = Graph::new();
    let logits = finetune_forward(model, &mut g, clip)?;
    Ok(softmax2(g.value(logits).data())[1])
}

pub fn softmax2(z: &[f64]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let (a, b) = ((z[0] - m).exp(), (z[1] - m).exp());
    [a / (a + b), b / (a + b)]
}

/// One AdamW step of cross-entropy finetuning over a labelled batch.
pub fn finetune_step(
    model: &mut RecoveryModel,
    opt: &mut AdamW,
    batch: &[&FaceClip],
    lr: f64,
) -> Result<f64> {
    let mut grads = Grads::zeros_like(&model.params);
    let mut total = 0.0;
    for clip in batch {
        let mut g = Graph::new();
        let logits = finetune_forward(model, &mut g, clip)?;
        let loss = g.cross_entropy(logits, clip.label.as_index());
        total += g.value(loss).item();
        g.backward(loss, &mut grads);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let loss = total / n;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!("finetuning loss {loss}")));
    }
    let trainable = model.trainable(Phase::Finetune);
    opt.update(&mut model.params, &grads, &trainable, lr);
    Ok(loss)
}

/// Resumable training position for either phase.
#[derive(Clone, Debug)]
pub struct RecoveryTrainer {
    pub model: RecoveryModel,
    pub opt: AdamW,
    pub phase: Phase,
    pub seed: u64,
    /// Epochs completed so far.
    pub epoch: u64,
}

pub const PRETRAIN_KIND: &str = "recovery-pretrain";
pub const FINETUNE_KIND: &str = "recovery-finetune";

impl RecoveryTrainer {
    pub fn new(model: RecoveryModel, phase: Phase, seed: u64) -> Self {
        let cfg = match phase {
            Phase::Pretrain => model.cfg.pretrain.optimizer.clone(),
            Phase::Finetune => model.cfg.finetune.optimizer.clone(),
        };
        let opt = AdamW::new(cfg, &model.params);
        Self {
            model,
            opt,
            phase,
            seed,
            epoch: 0,
        }
    }

    fn phase_cfg(&self) -> &PhaseConfig {
        match self.phase {
            Phase::Pretrain => &self.model.cfg.pretrain,
            Phase::Finetune => &self.model.cfg.finetune,
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch as usize >= self.phase_cfg().epochs
    }

    /// Train one epoch over `clips`; returns the mean step loss.
    pub fn run_epoch(&mut self, clips: &[FaceClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(Error::Validation("no training clips".into()));
        }
        if self.phase == Phase::Pretrain {
            RealBatch::new(clips.iter().collect())?;
        }
        let cfg = self.phase_cfg().clone();
        let schedule = cfg.schedule(clips.len());
        let per_epoch = clips.len().div_ceil(cfg.batch_size) as u64;
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut seeds::rng(
            self.seed,
            &[stream::SHUFFLE, self.phase as u64, self.epoch],
        ));
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = self.epoch * per_epoch + b as u64;
            let lr = schedule.lr(step);
            let batch: Vec<&FaceClip> = chunk.iter().map(|&i| &clips[i]).collect();
            let loss = match self.phase {
                Phase::Pretrain => {
                    let masks = batch
                        .iter()
                        .map(|c| {
                            self.model
                                .clip_mask(c, epoch_mask_seed(self.seed, self.epoch, &c.id))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    pretrain_step(
                        &mut self.model,
                        &mut self.opt,
                        &RealBatch::new(batch)?,
                        &masks,
                        lr,
                    )?
                }
                Phase::Finetune => finetune_step(&mut self.model, &mut self.opt, &batch, lr)?,
            };
            losses.push(loss);
        }
        self.epoch += 1;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn kind(&self) -> &'static str {
        match self.phase {
            Phase::Pretrain => PRETRAIN_KIND,
            Phase::Finetune => FINETUNE_KIND,
        }
    }

    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        use crate::checkpoint::{Checkpoint, RngState};
        let mut ck = Checkpoint::new(
            self.kind(),
            self.model.config_json(),
            RngState {
                seed: self.seed,
                epoch: self.epoch,
                step: self.opt.step,
            },
        );
        ck.push_params("model.", &self.model.params);
        ck.tensors
            .extend(self.opt.state_tensors(&self.model.params));
        ck.meta
            .insert("fingerprint".into(), self.model.params.fingerprint());
        ck
    }

    /// Restore a trainer; fails if the checkpoint was written under a
    /// different configuration.
    pub fn from_checkpoint(
        ck: &crate::checkpoint::Checkpoint,
        cfg: RecoveryConfig,
    ) -> Result<Self> {
        let phase = match ck.kind.as_str() {
            PRETRAIN_KIND => Phase::Pretrain,
            FINETUNE_KIND => Phase::Finetune,
            other => {
                return Err(Error::Checkpoint(format!(
                    "not a recovery checkpoint: {other}"
                )))
            }
        };
        let mut model = RecoveryModel::new(cfg, ck.rng.seed)?;
        ck.expect_config(&model.config_json())?;
        ck.load_params("model.", &mut model.params)?;
        let opt_cfg = match phase {
            Phase::Pretrain => model.cfg.pretrain.optimizer.clone(),
            Phase::Finetune => model.cfg.finetune.optimizer.clone(),
        };
        let opt = AdamW::restore(opt_cfg, ck.rng.step, &model.params, |n| {
            ck.tensor(n).cloned()
        })?;
        Ok(Self {
            model,
            opt,
            phase,
            seed: ck.rng.seed,
            epoch: ck.rng.epoch,
        })
    }

    /// Start finetuning from a pretrained model (optimizer state is fresh).
    pub fn into_finetune(self) -> Self {
        Self::new(self.model, Phase::Finetune, self.seed)
    }
}

/// Per-parameter-group summary used in logs.
pub fn param_summary(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (name, t) in store.iter() {
        let group = name.split('.').next().unwrap_or(name).to_string();
        *out.entry(group).or_insert(0) += t.len();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::PRISTINE;
    use crate::geometry::LandmarkSet;
    use crate::geometry::Part;
    use crate::masking::MaskPlan;
    use std::collections::BTreeSet;

    pub(crate) fn tiny_cfg() -> RecoveryConfig {
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

    fn clip(cfg: &RecoveryConfig, label: Label, phase: f64) -> FaceClip {
        let s = cfg.image_size;
        let lm = LandmarkSet::fixture().rescaled((s, s)).unwrap();
        let n = cfg.frames * s * s * 3;
        let data = (0..n)
            .map(|i| 0.5 + 0.4 * ((i as f64) * 0.013 + phase).sin())
            .collect();
        FaceClip::new(
            format!("c{phase}"),
            label,
            PRISTINE,
            (cfg.frames, s, s),
            data,
            vec![lm; cfg.frames],
        )
        .unwrap()
    }

    fn mask_blocks(cfg: &RecoveryConfig, blocks: &[usize]) -> ClipMask {
        let grid = cfg.grid();
        let plan = MaskPlan {
            selected_part: Some(Part::Eyes),
            signed_blocks: blocks.iter().copied().collect(),
            masked_blocks: blocks.iter().copied().collect::<BTreeSet<_>>(),
            num_blocks: grid.num_blocks(),
            mask_ratio_milli: 750,
            seed: 0,
            fallback: false,
        };
        expand_temporal(&plan, cfg.frames).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(RecoveryConfig::default().validate().is_ok());
        assert!(RecoveryConfig::full_scale().validate().is_ok());
        let bad = RecoveryConfig {
            encoder_heads: 3,
            ..RecoveryConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = RecoveryConfig {
            frames: 7,
            ..RecoveryConfig::default()
        };
        assert!(bad.validate().is_err());
        let p = RecoveryConfig::full_scale();
        assert_eq!(
            (
                p.mask.mask_ratio,
                p.pretrain.batch_size,
                p.patch_size,
                p.image_size
            ),
            (0.75, 8, 16, 224)
        );
        assert_eq!(p.pretrain.optimizer.lr, 1.5e-4);
        assert_eq!(p.pretrain.optimizer.weight_decay, 0.05);
        assert_eq!(p.finetune.optimizer.lr, 1e-3);
    }

    #[test]
    fn shapes_of_encoder_and_decoder() {
        let cfg = tiny_cfg();
        let model = RecoveryModel::new(cfg.clone(), 1).unwrap();
        let c = clip(&cfg, Label::Real, 0.0);
        let tokens = patchify(&c, &model.layout()).unwrap();
        let cm = mask_blocks(&cfg, &[0, 4]);
        let tm = cm.token_mask(&model.layout()).unwrap();
        let mut g = Graph::new();
        let (z, vis, masked) = encode_visible(&model, &mut g, &tokens, &tm).unwrap();
        assert_eq!(g.value(z).shape(), &[7, 16]);
        let pred = decode_masked(&model, &mut g, z, &vis, &masked);
        assert_eq!(g.value(pred).shape(), &[2, model.layout().token_dim()]);
        // No masked positions: an empty prediction.
        let none = ClipMask::none(cfg.frames, 9)
            .token_mask(&model.layout())
            .unwrap();
        let mut g = Graph::new();
        let (z, vis, masked) = encode_visible(&model, &mut g, &tokens, &none).unwrap();
        assert_eq!(g.value(z).rows(), 9);
        let pred = decode_masked(&model, &mut g, z, &vis, &masked);
        assert_eq!(g.value(pred).shape(), &[0, model.layout().token_dim()]);
    }

    #[test]
    fn encoder_is_equivariant_to_joint_token_and_position_swaps() {
        let cfg = tiny_cfg();
        let model = RecoveryModel::new(cfg.clone(), 2).unwrap();
        let tokens = patchify(&clip(&cfg, Label::Real, 0.3), &model.layout()).unwrap();
        let idx: Vec<usize> = vec![0, 1, 2, 3, 5, 6];
        let visible = gather(&tokens, &idx);
        let mut g = Graph::new();
        let z = model.encode(&mut g, visible, &idx);
        let swapped_idx: Vec<usize> = vec![0, 5, 2, 3, 1, 6];
        let swapped = gather(&tokens, &swapped_idx);
        let mut g2 = Graph::new();
        let z2 = model.encode(&mut g2, swapped, &swapped_idx);
        let (a, b) = (g.value(z), g2.value(z2));
        for (ra, rb) in [(0, 0), (1, 4), (4, 1), (5, 5)] {
            for (x, y) in a.row(ra).iter().zip(b.row(rb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recon_loss_semantics() {
        let target = Tensor::from_vec(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let mask = [true, false, true];
        assert_eq!(recon_loss(&target, &target, &mask), 0.0);
        let mut shifted = target.clone();
        for v in shifted.data_mut() {
            *v += 0.25;
        }
        assert!((recon_loss(&shifted, &target, &mask) - 0.0625).abs() < 1e-15);
        let base = recon_loss(&shifted, &target, &mask);
        shifted.data_mut()[2] = 1e9;
        shifted.data_mut()[3] = f64::NAN;
        assert_eq!(
            recon_loss(&shifted, &target, &mask).to_bits(),
            base.to_bits()
        );
    }

    #[test]
    fn recovery_composition() {
        let cfg = tiny_cfg();
        let model = RecoveryModel::new(cfg.clone(), 3).unwrap();
        let c = clip(&cfg, Label::Real, 0.7);
        let all_visible = ClipMask::none(cfg.frames, 9);
        assert_eq!(
            recover_clip(&model, &c, &all_visible)
                .unwrap()
                .recovered
                .data,
            c.data
        );
        let cm = mask_blocks(&cfg, &[4]);
        let out = recover_clip(&model, &c, &cm).unwrap();
        assert_eq!(out.residuals.len(), 1);
        let s = cfg.image_size;
        for t in 0..cfg.frames {
            for y in 0..s {
                for x in 0..s {
                    let inside = (8..16).contains(&y) && (8..16).contains(&x);
                    for ch in 0..3 {
                        let i = ((t * s + y) * s + x) * 3 + ch;
                        if !inside {
                            assert_eq!(out.recovered.data[i], c.data[i]);
                        }
                    }
                }
            }
        }
        assert_ne!(out.recovered.data, c.data);
    }

    #[test]
    fn finetune_outputs() {
        let cfg = tiny_cfg();
        let model = RecoveryModel::new(cfg.clone(), 4).unwrap();
        let c = clip(&cfg, Label::Fake, 0.1);
        let mut g = Graph::new();
        let a = finetune_forward(&model, &mut g, &c).unwrap();
        let b = finetune_forward(&model, &mut g, &c).unwrap();
        assert_eq!(g.value(a), g.value(b));
        let p = softmax2(g.value(a).data());
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, 0.3]));
        let ce = g.cross_entropy(z, 1);
        assert!((g.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pretraining_rejects_fakes_and_is_deterministic() {
        let cfg = tiny_cfg();
        let real = clip(&cfg, Label::Real, 0.2);
        let fake = clip(&cfg, Label::Fake, 0.4);
        assert!(matches!(
            RealBatch::new(vec![&real, &fake]),
            Err(Error::FakeInPretrainBatch(_))
        ));

        let run = || {
            let mut model = RecoveryModel::new(cfg.clone(), 5).unwrap();
            let mut opt = AdamW::new(cfg.pretrain.optimizer.clone(), &model.params);
            let masks = vec![mask_blocks(&cfg, &[1, 4])];
            for _ in 0..2 {
                pretrain_step(
                    &mut model,
                    &mut opt,
                    &RealBatch::new(vec![&real]).unwrap(),
                    &masks,
                    1e-3,
                )
                .unwrap();
            }
            model.params
        };
        assert_eq!(run(), run());

        let mut model = RecoveryModel::new(cfg.clone(), 5).unwrap();
        let before = model.params.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                weight_decay: 0.0,
                ..Default::default()
            },
            &model.params,
        );
        let masks = vec![mask_blocks(&cfg, &[1, 4])];
        pretrain_step(
            &mut model,
            &mut opt,
            &RealBatch::new(vec![&real]).unwrap(),
            &masks,
            0.0,
        )
        .unwrap();
        assert_eq!(model.params, before);
    }

    #[test]
    fn trainable_groups() {
        let model = RecoveryModel::new(tiny_cfg(), 0).unwrap();
        let pre = model.trainable(Phase::Pretrain);
        let fine = model.trainable(Phase::Finetune);
        let cls = model.params.find("cls.head.w").unwrap();
        let head = model.params.find("dec.head.w").unwrap();
        assert!(!pre.contains(&cls) && pre.contains(&head));
        assert!(fine.contains(&cls) && !fine.contains(&head));
        let groups = param_summary(&model.params);
        assert_eq!(
            groups.keys().cloned().collect::<Vec<_>>(),
            vec!["cls", "dec", "enc"]
        );
    }
}
