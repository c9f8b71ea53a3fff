//! Facial-part masking: pick one facial band, sign the blocks that overlap
//! regions of interest inside it, mask a fixed fraction of those blocks,
//! and replicate the block mask over every frame of the clip (tube mask).

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clip::TokenLayout;
use crate::error::{Error, Result};
use crate::geometry::{
    blocks_intersecting, compute_part_bands, compute_rois, default_margin, BlockGrid, LandmarkSet,
    Part, PartBands, RoiSet, ROI_SUBSETS,
};
use crate::seeds::{self, stream};
use crate::tensor::Tensor;

/// How Algorithm-style signing decides a block belongs to an ROI.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// Block area intersects an ROI rectangle (clipped to the band).
    #[default]
    RoiIntersect,
    /// Block contains one of the ROI-defining landmark points.
    LandmarkPoint,
}

/// Masking strategy, including the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskStrategy {
    /// Random facial part, ROI-signed blocks only.
    #[default]
    FacialPart,
    /// Random facial part, every block of the band is signed.
    NoRoi,
    /// Random blocks anywhere on the face.
    WholeFace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
    pub sign_mode: SignMode,
    /// Always mask this part instead of sampling one.
    pub forced_part: Option<Part>,
    /// ROI padding in pixels; defaults to 8 px scaled from 224.
    pub pad_margin: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            strategy: MaskStrategy::FacialPart,
            sign_mode: SignMode::RoiIntersect,
            forced_part: None,
            pad_margin: None,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratio {} must lie in (0, 1]",
                self.mask_ratio
            )));
        }
        Ok(())
    }
}

/// Result of one masking draw for a clip.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// `None` for whole-face masking.
    pub selected_part: Option<Part>,
    pub signed_blocks: BTreeSet<usize>,
    pub masked_blocks: BTreeSet<usize>,
    pub num_blocks: usize,
    pub mask_ratio_milli: u32,
    pub seed: u64,
    /// Signing came up empty and the whole band was used instead.
    pub fallback: bool,
}

impl MaskPlan {
    pub fn mask_ratio(&self) -> f64 {
        self.mask_ratio_milli as f64 / 1000.0
    }
}

impl fmt::Display for MaskPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let part = self
            .selected_part
            .map(|p| p.to_string())
            .unwrap_or_else(|| "whole-face".into());
        write!(
            f,
            "part={part} signed={} masked={:?}",
            self.signed_blocks.len(),
            self.masked_blocks
        )
    }
}

/// Number of blocks to mask out of `signed`: floor, clamped to at least one.
pub fn mask_count(signed: usize, ratio: f64) -> usize {
    ((signed as f64 * ratio + 1e-9).floor() as usize)
        .max(1)
        .min(signed)
}

/// Blocks of `part`'s band whose area touches an ROI clipped to that band.
pub fn sign_roi_blocks(
    grid: &BlockGrid,
    bands: &PartBands,
    rois: &RoiSet,
    part: Part,
) -> BTreeSet<usize> {
    let band = grid.row_band_rect(bands.band(part));
    let mut out = BTreeSet::new();
    for roi in &rois.rois {
        let clipped = roi.rect.intersect(&band);
        out.extend(blocks_intersecting(grid, &clipped));
    }
    out
}

/// Blocks of `part`'s band containing an ROI-defining landmark point.
pub fn sign_landmark_blocks(
    grid: &BlockGrid,
    bands: &PartBands,
    landmarks: &LandmarkSet,
    part: Part,
) -> BTreeSet<usize> {
    let rows = bands.band(part);
    ROI_SUBSETS
        .iter()
        .flat_map(|(_, subset)| subset.iter())
        .filter_map(|&i| grid.block_at(landmarks.point(i)))
        .filter(|&b| rows.contains(&grid.block_row(b)))
        .collect()
}

/// Uniformly choose one of the three facial parts.
pub fn select_part(seed: u64) -> Part {
    let mut rng = seeds::rng(seed, &[stream::PART]);
    Part::ALL[rng.random_range(0..3)]
}

/// Sample `mask_count(|signed|, ratio)` blocks without replacement.
pub fn sample_mask(
    signed: &BTreeSet<usize>,
    mask_ratio: f64,
    seed: u64,
) -> Result<BTreeSet<usize>> {
    if signed.is_empty() {
        return Err(Error::EmptySignedSet);
    }
    if !(mask_ratio > 0.0 && mask_ratio <= 1.0) {
        return Err(Error::Config(format!(
            "mask ratio {mask_ratio} must lie in (0, 1]"
        )));
    }
    let ids: Vec<usize> = signed.iter().copied().collect();
    let mut rng = seeds::rng(seed, &[stream::MASK]);
    let picked = index::sample(&mut rng, ids.len(), mask_count(ids.len(), mask_ratio));
    Ok(picked.into_iter().map(|i| ids[i]).collect())
}

/// Run the full facial-part masking procedure for one clip.
pub fn plan_mask(
    landmarks: &LandmarkSet,
    grid: &BlockGrid,
    cfg: &MaskConfig,
    seed: u64,
) -> Result<MaskPlan> {
    cfg.validate()?;
    let ratio_milli = (cfg.mask_ratio * 1000.0).round() as u32;
    if cfg.strategy == MaskStrategy::WholeFace {
        let signed: BTreeSet<usize> = (0..grid.num_blocks()).collect();
        let masked = sample_mask(&signed, cfg.mask_ratio, seed)?;
        return Ok(MaskPlan {
            selected_part: None,
            signed_blocks: signed,
            masked_blocks: masked,
            num_blocks: grid.num_blocks(),
            mask_ratio_milli: ratio_milli,
            seed,
            fallback: false,
        });
    }
    let bands = compute_part_bands(landmarks, grid)?;
    let part = cfg.forced_part.unwrap_or_else(|| select_part(seed));
    let mut signed = match (cfg.strategy, cfg.sign_mode) {
        (MaskStrategy::NoRoi, _) => bands.band_blocks(grid, part),
        (_, SignMode::RoiIntersect) => {
            let margin = cfg
                .pad_margin
                .unwrap_or_else(|| default_margin(grid.image_size));
            sign_roi_blocks(grid, &bands, &compute_rois(landmarks, margin), part)
        }
        (_, SignMode::LandmarkPoint) => sign_landmark_blocks(grid, &bands, landmarks, part),
    };
    let mut fallback = false;
    if signed.is_empty() {
        log::warn!("no ROI blocks in the {part} band; masking the whole band");
        signed = bands.band_blocks(grid, part);
        fallback = true;
    }
    let masked = sample_mask(&signed, cfg.mask_ratio, seed)?;
    Ok(MaskPlan {
        selected_part: Some(part),
        signed_blocks: signed,
        masked_blocks: masked,
        num_blocks: grid.num_blocks(),
        mask_ratio_milli: ratio_milli,
        seed,
        fallback,
    })
}

/// A block mask replicated over every frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipMask {
    frame_maps: Vec<Vec<bool>>,
}

impl ClipMask {
    pub fn frames(&self) -> usize {
        self.frame_maps.len()
    }

    pub fn frame_map(&self, t: usize) -> &[bool] {
        &self.frame_maps[t]
    }

    pub fn blocks_per_frame(&self) -> usize {
        self.frame_maps[0].len()
    }

    pub fn masked_per_frame(&self) -> usize {
        self.frame_maps[0].iter().filter(|&&m| m).count()
    }

    pub fn is_tube(&self) -> bool {
        self.frame_maps.windows(2).all(|w| w[0] == w[1])
    }

    /// A mask that hides nothing.
    pub fn none(frames: usize, blocks: usize) -> Self {
        Self {
            frame_maps: vec![vec![false; blocks]; frames],
        }
    }

    /// Per-token mask for a tubelet layout (true = masked).
    pub fn token_mask(&self, layout: &TokenLayout) -> Result<Vec<bool>> {
        if layout.frames != self.frames() || layout.blocks_per_frame() != self.blocks_per_frame() {
            return Err(Error::Validation(format!(
                "mask ({} frames x {} blocks) does not match token layout {:?}",
                self.frames(),
                self.blocks_per_frame(),
                layout
            )));
        }
        let mut out = Vec::with_capacity(layout.num_tokens());
        for slot in 0..layout.temporal_slots() {
            out.extend_from_slice(&self.frame_maps[slot * layout.tubelet]);
        }
        Ok(out)
    }
}

/// Replicate the plan's block mask over `frames` frames.
pub fn expand_temporal(plan: &MaskPlan, frames: usize) -> Result<ClipMask> {
    if frames == 0 {
        return Err(Error::Validation("a clip needs at least one frame".into()));
    }
    let mut map = vec![false; plan.num_blocks];
    for &b in &plan.masked_blocks {
        map[b] = true;
    }
    Ok(ClipMask {
        frame_maps: vec![map; frames],
    })
}

/// Visible tokens plus the index lists needed to reassemble the sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedTokens {
    pub visible: Tensor,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
}

/// Split a token sequence into visible rows and masked positions.
pub fn apply_mask(tokens: &Tensor, token_mask: &[bool]) -> Result<MaskedTokens> {
    if tokens.shape().len() != 2 || tokens.rows() != token_mask.len() {
        return Err(Error::Validation(format!(
            "token sequence {:?} does not match a mask of {} positions",
            tokens.shape(),
            token_mask.len()
        )));
    }
    let (visible_idx, masked_idx): (Vec<usize>, Vec<usize>) =
        (0..token_mask.len()).partition(|&i| !token_mask[i]);
    let dim = tokens.cols();
    let mut data = Vec::with_capacity(visible_idx.len() * dim);
    for &i in &visible_idx {
        data.extend_from_slice(tokens.row(i));
    }
    Ok(MaskedTokens {
        visible: Tensor::from_vec(&[visible_idx.len(), dim], data),
        visible_idx,
        masked_idx,
    })
}

/// Put visible and masked rows back in token order.
pub fn reassemble(
    visible: &Tensor,
    masked: &Tensor,
    visible_idx: &[usize],
    masked_idx: &[usize],
) -> Tensor {
    let dim = visible.cols().max(masked.cols());
    let n = visible_idx.len() + masked_idx.len();
    let mut out = Tensor::zeros(&[n, dim]);
    for (r, &i) in visible_idx.iter().enumerate() {
        out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(visible.row(r));
    }
    for (r, &i) in masked_idx.iter().enumerate() {
        out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(masked.row(r));
    }
    out
}
