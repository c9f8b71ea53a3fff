//! Episodic training of the mapping network over meta-train / meta-test
//! pools whose forgery types differ.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::clip::{FaceClip, Label};
use crate::error::{Error, Result};
use crate::mapping::{map_loss, Mapper, MAPPER_KIND};
use crate::optim::{CosineSchedule, Sgd, SgdConfig};
use crate::params::Grads;
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    /// Fake forgery types are partitioned between the pools.
    #[default]
    #[serde(rename = "by-type")]
    ByType,
    /// Stratified random 7:3 split.
    #[serde(rename = "random-7:3")]
    Random73,
}

impl std::str::FromStr for SplitPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "by-type" => Ok(Self::ByType),
            "random-7:3" | "random" => Ok(Self::Random73),
            other => Err(Error::Config(format!("unknown split policy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MetaItem {
    pub id: String,
    pub label: Label,
    pub manipulation: String,
}

impl MetaItem {
    pub fn of(clip: &FaceClip) -> Self {
        Self {
            id: clip.id.clone(),
            label: clip.label,
            manipulation: clip.manipulation.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaSplit {
    pub policy: SplitPolicy,
    pub meta_train: Vec<MetaItem>,
    pub meta_test: Vec<MetaItem>,
}

fn seventy(n: usize) -> usize {
    (n as f64 * 0.7).round() as usize
}

/// Partition `items` into meta-train and meta-test pools.
pub fn split_meta(items: &[MetaItem], policy: SplitPolicy, seed: u64) -> Result<MetaSplit> {
    let mut rng = seeds::rng(seed, &[stream::SPLIT]);
    let mut reals: Vec<MetaItem> = items
        .iter()
        .filter(|i| i.label == Label::Real)
        .cloned()
        .collect();
    let mut fakes: Vec<MetaItem> = items
        .iter()
        .filter(|i| i.label == Label::Fake)
        .cloned()
        .collect();
    reals.sort();
    fakes.sort();
    reals.shuffle(&mut rng);
    let cut = seventy(reals.len());
    let mut meta_test = reals.split_off(cut);
    let mut meta_train = reals;
    match policy {
        SplitPolicy::ByType => {
            let mut types: Vec<String> = fakes
                .iter()
                .map(|f| f.manipulation.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if types.len() < 2 {
                return Err(Error::Config(format!(
                    "the by-type split needs at least two forgery types, found {}; use the random-7:3 policy",
                    types.len()
                )));
            }
            types.shuffle(&mut rng);
            let n_test = (types.len() - seventy(types.len())).clamp(1, types.len() - 1);
            let test_types: BTreeSet<String> = types[..n_test].iter().cloned().collect();
            for f in fakes {
                if test_types.contains(&f.manipulation) {
                    meta_test.push(f);
                } else {
                    meta_train.push(f);
                }
            }
        }
        SplitPolicy::Random73 => {
            fakes.shuffle(&mut rng);
            let cut = seventy(fakes.len());
            meta_test.extend(fakes.split_off(cut));
            meta_train.extend(fakes);
        }
    }
    Ok(MetaSplit {
        policy,
        meta_train,
        meta_test,
    })
}

/// Balanced batch composition for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    /// Clips per class in each of the two batches.
    pub per_class: usize,
    /// Inner-step learning rate; `None` uses the outer rate.
    pub inner_lr: Option<f64>,
    pub seed: u64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            per_class: 4,
            inner_lr: None,
            seed: 0,
        }
    }
}

/// Meta-train and meta-test clip batches of one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub train: Vec<MetaItem>,
    pub test: Vec<MetaItem>,
}

const POOL_TAGS: [u64; 4] = [1, 2, 3, 4];

fn pool_batch(
    pool: &[MetaItem],
    k: usize,
    seed: u64,
    epoch: u64,
    tag: u64,
    episode: u64,
) -> Vec<MetaItem> {
    if k == 0 {
        return Vec::new();
    }
    let per_cycle = (pool.len() / k) as u64;
    let (cycle, within) = (episode / per_cycle, (episode % per_cycle) as usize);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeds::rng(seed, &[stream::EPISODE, epoch, tag, cycle]));
    order[within * k..(within + 1) * k]
        .iter()
        .map(|&i| pool[i].clone())
        .collect()
}

fn class_pools(items: &[MetaItem]) -> (Vec<MetaItem>, Vec<MetaItem>) {
    let mut items = items.to_vec();
    items.sort();
    items.into_iter().partition(|i| i.label == Label::Real)
}

/// Draw episode `episode` of `epoch`. Each class pool is walked without
/// replacement through a seeded permutation and reshuffled once exhausted.
/// A pool smaller than the requested size shrinks both classes of that
/// batch to the same count.
pub fn sample_episode(
    split: &MetaSplit,
    spec: &EpisodeSpec,
    epoch: u64,
    episode: u64,
) -> Result<Episode> {
    let mut out = Vec::with_capacity(2);
    for (side, items) in [&split.meta_train, &split.meta_test]
        .into_iter()
        .enumerate()
    {
        let (reals, fakes) = class_pools(items);
        if reals.is_empty() || fakes.is_empty() {
            return Err(Error::Validation(format!(
                "meta-{} pool needs both real and fake clips",
                if side == 0 { "train" } else { "test" }
            )));
        }
        let k = spec.per_class.min(reals.len()).min(fakes.len());
        if k < spec.per_class {
            log::info!(
                "episode batch shrunk to {k} per class (pool sizes {} real, {} fake)",
                reals.len(),
                fakes.len()
            );
        }
        let mut batch = pool_batch(&reals, k, spec.seed, epoch, POOL_TAGS[2 * side], episode);
        batch.extend(pool_batch(
            &fakes,
            k,
            spec.seed,
            epoch,
            POOL_TAGS[2 * side + 1],
            episode,
        ));
        out.push(batch);
    }
    let test = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Episode { train, test })
}

/// One recovered frame with its label.
#[derive(Clone, Debug)]
pub struct MapSample {
    /// `[3, s, s]` recovered frame.
    pub frame: Tensor,
    pub label: Label,
    pub tag: String,
}

/// The four terms of the joint objective and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls_train: f64,
    pub mse_train: f64,
    pub cls_test: f64,
    pub mse_test: f64,
    pub total: f64,
}

impl LossReport {
    pub fn from_terms(cls_train: f64, mse_train: f64, cls_test: f64, mse_test: f64) -> Self {
        Self {
            cls_train,
            mse_train,
            cls_test,
            mse_test,
            total: cls_train + mse_train + cls_test + mse_test,
        }
    }
}

/// Batch-mean classification and map losses, plus gradients of their sum.
pub fn batch_losses(mapper: &Mapper, batch: &[MapSample]) -> (f64, f64, Grads) {
    let mut grads = Grads::zeros_like(&mapper.params);
    let (mut cls, mut mse) = (0.0, 0.0);
    for s in batch {
        let mut g = Graph::new();
        let out = mapper.forward(&mut g, s.frame.clone());
        let (m, c) = map_loss(&mut g, &mapper.cfg, &out, &s.frame, s.label);
        mse += g.value(m).item();
        cls += g.value(c).item();
        let total = g.sum_scalars(&[c, m]);
        g.backward(total, &mut grads);
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    (cls / n, mse / n, grads)
}

/// First-order episodic update: gradient on the meta-train batch at the
/// current parameters, one plain inner step, gradient on the meta-test
/// batch at the adapted parameters, then one outer optimizer step on the
/// sum of both gradients.
pub fn meta_step(
    mapper: &mut Mapper,
    opt: &mut Sgd,
    train: &[MapSample],
    test: &[MapSample],
    lr: f64,
    inner_lr: f64,
) -> Result<LossReport> {
    let (cls_tr, mse_tr, g_tr) = batch_losses(mapper, train);
    let mut adapted = mapper.clone();
    for (id, g) in mapper.params.ids().zip(g_tr.iter()) {
        for (p, d) in adapted
            .params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .zip(g.data())
        {
            *p -= inner_lr * d;
        }
    }
    let (cls_te, mse_te, g_te) = batch_losses(&adapted, test);
    let report = LossReport::from_terms(cls_tr, mse_tr, cls_te, mse_te);
    let mut grads = g_tr;
    grads.add(&g_te);
    if !report.total.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged(format!(
            "mapping loss is not finite: cls_train {} mse_train {} cls_test {} mse_test {}",
            report.cls_train, report.mse_train, report.cls_test, report.mse_test
        )));
    }
    opt.update(&mut mapper.params, &grads, lr);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub policy: SplitPolicy,
    pub epochs: usize,
    /// Episodes per epoch; 0 means enough to cover the largest meta-train pool once.
    pub episodes_per_epoch: usize,
    pub per_class: usize,
    /// Recovered frames drawn from each clip per episode.
    pub frames_per_clip: usize,
    pub inner_lr: Option<f64>,
    pub sgd: SgdConfig,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            policy: SplitPolicy::ByType,
            epochs: 12,
            episodes_per_epoch: 0,
            per_class: 2,
            frames_per_clip: 2,
            inner_lr: None,
            sgd: SgdConfig {
                lr: 0.02,
                ..SgdConfig::default()
            },
        }
    }
}

impl MetaConfig {
    pub fn full_scale() -> Self {
        Self {
            sgd: SgdConfig::default(),
            per_class: 4,
            frames_per_clip: 1,
            epochs: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 || self.frames_per_clip == 0 {
            return Err(Error::Config(
                "per-class batch size and frames per clip must be positive".into(),
            ));
        }
        if !(self.sgd.lr >= 0.0 && self.sgd.momentum >= 0.0 && self.sgd.weight_decay >= 0.0) {
            return Err(Error::Config("SGD settings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn episodes(&self, split: &MetaSplit) -> usize {
        if self.episodes_per_epoch > 0 {
            return self.episodes_per_epoch;
        }
        let (r, f) = class_pools(&split.meta_train);
        r.len().max(f.len()).div_ceil(self.per_class).max(1)
    }
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub episode: u64,
    pub cls_train: f64,
    pub mse_train: f64,
    pub cls_test: f64,
    pub mse_test: f64,
    pub total: f64,
    pub lr: f64,
    /// `clip@frame` tags of the meta-train batch.
    pub train_batch: Vec<String>,
    pub test_batch: Vec<String>,
}

/// Resumable episodic trainer over a fixed set of recovered clips.
#[derive(Clone, Debug)]
pub struct MetaTrainer {
    pub mapper: Mapper,
    pub opt: Sgd,
    pub cfg: MetaConfig,
    pub seed: u64,
    /// Epochs completed.
    pub epoch: u64,
}

/// Frames of `clip` used for a given episode.
pub fn episode_frames(
    clip: &FaceClip,
    k: usize,
    seed: u64,
    epoch: u64,
    episode: u64,
) -> Vec<usize> {
    let mut frames: Vec<usize> = (0..clip.frames).collect();
    frames.shuffle(&mut seeds::rng(
        seed,
        &[stream::FRAMES, epoch, episode, seeds::hash_str(&clip.id)],
    ));
    frames.truncate(k.min(clip.frames));
    frames.sort_unstable();
    frames
}

pub fn samples_for(
    items: &[MetaItem],
    recovered: &BTreeMap<String, FaceClip>,
    frames_per_clip: usize,
    seed: u64,
    epoch: u64,
    episode: u64,
) -> Result<Vec<MapSample>> {
    let mut out = Vec::new();
    for item in items {
        let clip = recovered
            .get(&item.id)
            .ok_or_else(|| Error::Validation(format!("no recovered clip for {}", item.id)))?;
        for t in episode_frames(clip, frames_per_clip, seed, epoch, episode) {
            out.push(MapSample {
                frame: clip.frame_chw(t),
                label: item.label,
                tag: format!("{}@{t}", item.id),
            });
        }
    }
    Ok(out)
}

impl MetaTrainer {
    pub fn new(mapper: Mapper, cfg: MetaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.sgd.clone(), &mapper.params);
        Ok(Self {
            mapper,
            opt,
            cfg,
            seed,
            epoch: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch as usize >= self.cfg.epochs
    }

    fn schedule(&self, split: &MetaSplit) -> CosineSchedule {
        CosineSchedule {
            base: self.cfg.sgd.lr,
            warmup_steps: 0,
            total_steps: (self.cfg.epochs * self.cfg.episodes(split)) as u64,
            min_frac: 0.05,
        }
    }

    /// Run one epoch of episodes; each step's record is passed to `log`.
    pub fn run_epoch(
        &mut self,
        split: &MetaSplit,
        recovered: &BTreeMap<String, FaceClip>,
        mut log: impl FnMut(&LogRecord) -> Result<()>,
    ) -> Result<f64> {
        let spec = EpisodeSpec {
            per_class: self.cfg.per_class,
            inner_lr: self.cfg.inner_lr,
            seed: self.seed,
        };
        let schedule = self.schedule(split);
        let n = self.cfg.episodes(split);
        let mut sum = 0.0;
        for e in 0..n as u64 {
            let ep = sample_episode(split, &spec, self.epoch, e)?;
            let k = self.cfg.frames_per_clip;
            let train = samples_for(&ep.train, recovered, k, self.seed, self.epoch, e)?;
            let test = samples_for(&ep.test, recovered, k, self.seed, self.epoch, e)?;
            let lr = schedule.lr(self.epoch * n as u64 + e);
            let inner = spec.inner_lr.unwrap_or(lr);
            let report = meta_step(&mut self.mapper, &mut self.opt, &train, &test, lr, inner)?;
            sum += report.total;
            log(&LogRecord {
                epoch: self.epoch,
                episode: e,
                cls_train: report.cls_train,
                mse_train: report.mse_train,
                cls_test: report.cls_test,
                mse_test: report.mse_test,
                total: report.total,
                lr,
                train_batch: train.iter().map(|s| s.tag.clone()).collect(),
                test_batch: test.iter().map(|s| s.tag.clone()).collect(),
            })?;
        }
        self.epoch += 1;
        Ok(sum / n as f64)
    }

    pub fn to_checkpoint(&self, recovery_fingerprint: &str) -> crate::checkpoint::Checkpoint {
        use crate::checkpoint::{Checkpoint, RngState};
        let cfg = serde_json::json!({ "mapper": self.mapper.cfg, "meta": self.cfg }).to_string();
        let mut ck = Checkpoint::new(
            MAPPER_KIND,
            cfg,
            RngState {
                seed: self.seed,
                epoch: self.epoch,
                step: self.opt.step,
            },
        );
        ck.push_params("model.", &self.mapper.params);
        ck.tensors
            .extend(self.opt.state_tensors(&self.mapper.params));
        ck.meta
            .insert("recovery_fingerprint".into(), recovery_fingerprint.into());
        ck.meta
            .insert("fingerprint".into(), self.mapper.params.fingerprint());
        ck
    }

    pub fn from_checkpoint(
        ck: &crate::checkpoint::Checkpoint,
        mapper_cfg: crate::mapping::MapperConfig,
        cfg: MetaConfig,
    ) -> Result<Self> {
        ck.expect_kind(MAPPER_KIND)?;
        ck.expect_config(&serde_json::json!({ "mapper": mapper_cfg, "meta": cfg }).to_string())?;
        let mut mapper = Mapper::new(mapper_cfg, ck.rng.seed)?;
        ck.load_params("model.", &mut mapper.params)?;
        let opt = Sgd::restore(cfg.sgd.clone(), ck.rng.step, &mapper.params, |n| {
            ck.tensor(n).cloned()
        })?;
        Ok(Self {
            mapper,
            opt,
            cfg,
            seed: ck.rng.seed,
            epoch: ck.rng.epoch,
        })
    }
}

/// Append log records as JSON lines.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("log record serialises");
        writeln!(self.out, "{line}").map_err(|e| Error::io("training log", e))
    }
}
