//! End-to-end orchestration shared by the CLI and the experiments.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{FaceClip, Label};
use crate::dataset::{generate_clips, DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::mapping::{original_in_map_space, Mapper, MapperConfig};
use crate::meta::{split_meta, LogRecord, MetaConfig, MetaItem, MetaTrainer};
use crate::metrics::{similarity_score, EvalReport, ScoreRecord, DEFAULT_BINS};
use crate::recovery::{
    fake_probability, recover_all_parts, Phase, RecoveryConfig, RecoveryModel, RecoveryTrainer,
};
use crate::seeds::{self, stream};

/// Mask seed used when recovering `clip_id` for mapping and evaluation.
pub fn eval_mask_seed(seed: u64, clip_id: &str) -> u64 {
    seeds::derive(seed, &[stream::EVAL_MASK, seeds::hash_str(clip_id)])
}

/// Train a recovery model phase to completion, calling `on_epoch` with the
/// trainer and mean loss after every epoch.
pub fn train_recovery(
    mut trainer: RecoveryTrainer,
    clips: &[FaceClip],
    mut on_epoch: impl FnMut(&RecoveryTrainer, f64) -> Result<()>,
) -> Result<RecoveryTrainer> {
    while !trainer.finished() {
        let loss = trainer.run_epoch(clips)?;
        log::info!("{} epoch {} loss {loss:.6}", trainer.kind(), trainer.epoch);
        on_epoch(&trainer, loss)?;
    }
    Ok(trainer)
}

/// Recover every clip with all facial parts masked in turn.
pub fn recover_clips(
    model: &RecoveryModel,
    clips: &[FaceClip],
    seed: u64,
) -> Result<BTreeMap<String, FaceClip>> {
    clips
        .par_iter()
        .map(|c| {
            Ok((
                c.id.clone(),
                recover_all_parts(model, c, eval_mask_seed(seed, &c.id))?.recovered,
            ))
        })
        .collect()
}

/// Train the mapping network to completion.
pub fn train_mapping(
    mut trainer: MetaTrainer,
    clips: &[FaceClip],
    recovered: &BTreeMap<String, FaceClip>,
    mut log: impl FnMut(&LogRecord) -> Result<()>,
    mut on_epoch: impl FnMut(&MetaTrainer, f64) -> Result<()>,
) -> Result<MetaTrainer> {
    let items: Vec<MetaItem> = clips.iter().map(MetaItem::of).collect();
    let split = split_meta(&items, trainer.cfg.policy, trainer.seed)?;
    while !trainer.finished() {
        let loss = trainer.run_epoch(&split, recovered, &mut log)?;
        log::info!("mapping epoch {} loss {loss:.6}", trainer.epoch);
        on_epoch(&trainer, loss)?;
    }
    Ok(trainer)
}

/// Score one clip with both stages and measure its similarity statistics.
pub fn score_clip(
    model: &RecoveryModel,
    mapper: &Mapper,
    original: &FaceClip,
    recovered: &FaceClip,
) -> Result<ScoreRecord> {
    let frames: Vec<usize> = (0..original.frames).collect();
    let (mut sim_rec, mut sim_map, mut map_score) = (0.0, 0.0, 0.0);
    for &t in &frames {
        let orig = original.frame_chw(t);
        sim_rec += similarity_score(&recovered.frame_chw(t), &orig)?;
        let mapped = mapper.map_frame(recovered, t);
        let (m, o) = original_in_map_space(&mapper.cfg, &mapped.map, &orig);
        sim_map += similarity_score(&m, &o)?;
        map_score += mapped.score;
    }
    let n = frames.len() as f64;
    Ok(ScoreRecord::new(
        original.id.clone(),
        original.label,
        fake_probability(model, original)?,
        map_score / n,
        sim_rec / n,
        sim_map / n,
    ))
}

pub fn score_clips(
    model: &RecoveryModel,
    mapper: &Mapper,
    clips: &[FaceClip],
    recovered: &BTreeMap<String, FaceClip>,
) -> Result<Vec<ScoreRecord>> {
    clips
        .par_iter()
        .map(|c| {
            let r = recovered
                .get(&c.id)
                .ok_or_else(|| Error::Validation(format!("no recovered clip for {}", c.id)))?;
            score_clip(model, mapper, c, r)
        })
        .collect()
}

/// Everything needed for one synthetic train-and-evaluate run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub recovery: RecoveryConfig,
    pub mapper: MapperConfig,
    pub meta: MetaConfig,
    pub bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            recovery: RecoveryConfig::default(),
            mapper: MapperConfig::default(),
            meta: MetaConfig::default(),
            bins: DEFAULT_BINS,
        }
    }
}

impl ExperimentConfig {
    /// Compact desk settings sized for a single CPU core.
    pub fn compact(seed: u64) -> Self {
        Self {
            seed,
            dataset: DatasetConfig {
                seed,
                ..DatasetConfig::default()
            },
            recovery: RecoveryConfig::compact(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.recovery.validate()?;
        self.mapper.validate()?;
        self.meta.validate()?;
        if self.dataset.image_size != self.recovery.image_size
            || self.dataset.frames != self.recovery.frames
        {
            return Err(Error::Config(
                "dataset and recovery model disagree on clip geometry".into(),
            ));
        }
        if self.mapper.input_size != self.recovery.image_size {
            return Err(Error::Config(
                "mapper input size must equal the recovered frame size".into(),
            ));
        }
        if self.bins < 2 {
            return Err(Error::Config(
                "at least two histogram bins are needed".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub records: Vec<ScoreRecord>,
    pub report: EvalReport,
    pub pretrain_losses: Vec<f64>,
    pub finetune_losses: Vec<f64>,
    pub mapping_losses: Vec<f64>,
    pub mapping_log: Vec<LogRecord>,
}

/// Generate data, pretrain and finetune the recovery model, train the
/// mapping network, and evaluate on the held-out split.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let data = generate_clips(&cfg.dataset)?;
    let pick = |split: Split, real_only: bool| -> Vec<FaceClip> {
        data.iter()
            .filter(|g| g.split == split && (!real_only || g.clip.label == Label::Real))
            .map(|g| g.clip.clone())
            .collect()
    };
    let (train_real, train_all, test) = (
        pick(Split::Train, true),
        pick(Split::Train, false),
        pick(Split::Test, false),
    );

    let model = RecoveryModel::new(cfg.recovery.clone(), cfg.seed)?;
    let mut pretrain_losses = Vec::new();
    let pre = train_recovery(
        RecoveryTrainer::new(model, Phase::Pretrain, cfg.seed),
        &train_real,
        |_, l| {
            pretrain_losses.push(l);
            Ok(())
        },
    )?;
    // Recovered faces come from the pretrained autoencoder; finetuning only
    // adapts the encoder for the classification head.
    let recovered_train = recover_clips(&pre.model, &train_all, cfg.seed)?;
    let recovered_test = recover_clips(&pre.model, &test, cfg.seed)?;
    let mut finetune_losses = Vec::new();
    let fine = train_recovery(pre.into_finetune(), &train_all, |_, l| {
        finetune_losses.push(l);
        Ok(())
    })?;

    let mapper = Mapper::new(cfg.mapper.clone(), cfg.seed)?;
    let mut mapping_log = Vec::new();
    let mut mapping_losses = Vec::new();
    let mapping = train_mapping(
        MetaTrainer::new(mapper, cfg.meta.clone(), cfg.seed)?,
        &train_all,
        &recovered_train,
        |r| {
            mapping_log.push(r.clone());
            Ok(())
        },
        |_, l| {
            mapping_losses.push(l);
            Ok(())
        },
    )?;
    let records = score_clips(&fine.model, &mapping.mapper, &test, &recovered_test)?;
    let report = EvalReport::from_scores(&records, cfg.bins)?;
    Ok(ExperimentResult {
        records,
        report,
        pretrain_losses,
        finetune_losses,
        mapping_losses,
        mapping_log,
    })
}
