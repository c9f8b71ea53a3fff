//! Face clips and their tubelet token layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LandmarkSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// 0 for real, 1 for fake.
    pub fn as_index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_target(self) -> f64 {
        self.as_index() as f64
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

impl std::str::FromStr for Label {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(Error::Validation(format!("unknown label {other:?}"))),
        }
    }
}

/// Manipulation type recorded for pristine clips.
pub const PRISTINE: &str = "none";

/// A `T x H x W x 3` clip with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceClip {
    pub id: String,
    pub label: Label,
    pub manipulation: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Frame-major, then row, column, channel.
    pub data: Vec<f64>,
    /// One landmark set per frame.
    pub landmarks: Vec<LandmarkSet>,
}

impl FaceClip {
    pub fn new(
        id: impl Into<String>,
        label: Label,
        manipulation: impl Into<String>,
        (frames, height, width): (usize, usize, usize),
        data: Vec<f64>,
        landmarks: Vec<LandmarkSet>,
    ) -> Result<Self> {
        let clip = Self {
            id: id.into(),
            label,
            manipulation: manipulation.into(),
            frames,
            height,
            width,
            data,
            landmarks,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "clip {} has an empty dimension",
                self.id
            )));
        }
        if self.data.len() != self.frames * self.height * self.width * 3 {
            return Err(Error::Validation(format!(
                "clip {} data length does not match its shape",
                self.id
            )));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "clip {} has value {v} outside [0, 1]",
                self.id
            )));
        }
        if self.landmarks.len() != self.frames {
            return Err(Error::Validation(format!(
                "clip {} has {} landmark sets for {} frames",
                self.id,
                self.landmarks.len(),
                self.frames
            )));
        }
        if self
            .landmarks
            .iter()
            .any(|l| l.frame() != (self.height, self.width))
        {
            return Err(Error::Validation(format!(
                "clip {} landmarks use a different frame size",
                self.id
            )));
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[t * n..(t + 1) * n]
    }

    /// Frame `t` as a channel-first `[3, H, W]` tensor.
    pub fn frame_chw(&self, t: usize) -> Tensor {
        hwc_to_chw(self.frame(t), self.height, self.width)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }
}

pub fn hwc_to_chw(hwc: &[f64], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in hwc.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c];
        }
    }
    Tensor::from_vec(&[3, h, w], out)
}

/// Spatio-temporal token layout of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub frames: usize,
    pub image_size: usize,
    pub patch: usize,
    pub tubelet: usize,
}

impl TokenLayout {
    pub fn new(frames: usize, image_size: usize, patch: usize, tubelet: usize) -> Result<Self> {
        if patch == 0 || tubelet == 0 || frames == 0 {
            return Err(Error::Config(
                "frames, patch and tubelet sizes must be positive".into(),
            ));
        }
        if image_size % patch != 0 {
            return Err(Error::Config(format!(
                "patch {patch} does not divide image size {image_size}"
            )));
        }
        if frames % tubelet != 0 {
            return Err(Error::Config(format!(
                "tubelet {tubelet} does not divide {frames} frames"
            )));
        }
        Ok(Self {
            frames,
            image_size,
            patch,
            tubelet,
        })
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn blocks_per_frame(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn temporal_slots(&self) -> usize {
        self.frames / self.tubelet
    }

    pub fn num_tokens(&self) -> usize {
        self.temporal_slots() * self.blocks_per_frame()
    }

    pub fn token_dim(&self) -> usize {
        self.tubelet * self.patch * self.patch * 3
    }

    /// Spatial block of a token id.
    pub fn block_of(&self, token: usize) -> usize {
        token % self.blocks_per_frame()
    }
}

/// Cut a clip into flattened tubelets, ordered (time slot, block row, block
/// column); each vector is laid out (frame offset, y, x, channel).
pub fn patchify(clip: &FaceClip, layout: &TokenLayout) -> Result<Tensor> {
    if clip.frames != layout.frames
        || clip.height != layout.image_size
        || clip.width != layout.image_size
    {
        return Err(Error::Validation(format!(
            "clip {} shape {:?} does not match token layout {:?}",
            clip.id,
            clip.shape(),
            layout
        )));
    }
    let (p, tt, side) = (layout.patch, layout.tubelet, layout.grid_side());
    let s = layout.image_size;
    let dim = layout.token_dim();
    let mut out = vec![0.0; layout.num_tokens() * dim];
    for slot in 0..layout.temporal_slots() {
        for br in 0..side {
            for bc in 0..side {
                let tok = (slot * side + br) * side + bc;
                let dst = &mut out[tok * dim..(tok + 1) * dim];
                let mut k = 0;
                for dt in 0..tt {
                    let frame = clip.frame(slot * tt + dt);
                    for py in 0..p {
                        let row = (br * p + py) * s + bc * p;
                        dst[k..k + p * 3].copy_from_slice(&frame[row * 3..(row + p) * 3]);
                        k += p * 3;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[layout.num_tokens(), dim], out))
}

/// Inverse of [`patchify`]: rebuild the `T x H x W x 3` pixel buffer.
pub fn unpatchify(tokens: &Tensor, layout: &TokenLayout) -> Vec<f64> {
    let (p, tt, side) = (layout.patch, layout.tubelet, layout.grid_side());
    let s = layout.image_size;
    let dim = layout.token_dim();
    assert_eq!(tokens.shape(), &[layout.num_tokens(), dim]);
    let frame_len = s * s * 3;
    let mut out = vec![0.0; layout.frames * frame_len];
    for slot in 0..layout.temporal_slots() {
        for br in 0..side {
            for bc in 0..side {
                let tok = (slot * side + br) * side + bc;
                let src = tokens.row(tok);
                let mut k = 0;
                for dt in 0..tt {
                    let frame =
                        &mut out[(slot * tt + dt) * frame_len..(slot * tt + dt + 1) * frame_len];
                    for py in 0..p {
                        let row = (br * p + py) * s + bc * p;
                        frame[row * 3..(row + p) * 3].copy_from_slice(&src[k..k + p * 3]);
                        k += p * 3;
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_clip(t: usize, s: usize) -> FaceClip {
        let lm = LandmarkSet::fixture().rescaled((s, s)).unwrap();
        let n = t * s * s * 3;
        let data = (0..n).map(|i| (i % 251) as f64 / 250.0).collect();
        FaceClip::new("c", Label::Real, PRISTINE, (t, s, s), data, vec![lm; t]).unwrap()
    }

    #[test]
    fn token_counts() {
        let layout = TokenLayout::new(8, 64, 8, 2).unwrap();
        assert_eq!(layout.num_tokens(), 256);
        assert_eq!(layout.token_dim(), 2 * 8 * 8 * 3);
        let full = TokenLayout::new(30, 224, 16, 2).unwrap();
        assert_eq!(full.num_tokens(), 15 * 196);
        assert!(TokenLayout::new(7, 64, 8, 2).is_err());
        assert!(TokenLayout::new(8, 60, 8, 2).is_err());
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let clip = ramp_clip(4, 32);
        let layout = TokenLayout::new(4, 32, 8, 2).unwrap();
        let tokens = patchify(&clip, &layout).unwrap();
        assert_eq!(tokens.shape(), &[2 * 16, 2 * 8 * 8 * 3]);
        assert_eq!(unpatchify(&tokens, &layout), clip.data);
    }

    #[test]
    fn patchify_rejects_mismatched_geometry() {
        let clip = ramp_clip(4, 32);
        assert!(patchify(&clip, &TokenLayout::new(4, 64, 8, 2).unwrap()).is_err());
    }

    #[test]
    fn clip_validation() {
        let lm = LandmarkSet::fixture().rescaled((8, 8)).unwrap();
        assert!(FaceClip::new(
            "x",
            Label::Real,
            PRISTINE,
            (1, 8, 8),
            vec![1.5; 192],
            vec![lm.clone()]
        )
        .is_err());
        assert!(FaceClip::new(
            "x",
            Label::Real,
            PRISTINE,
            (1, 8, 8),
            vec![0.5; 191],
            vec![lm.clone()]
        )
        .is_err());
        assert!(FaceClip::new(
            "x",
            Label::Real,
            PRISTINE,
            (2, 8, 8),
            vec![0.5; 384],
            vec![lm]
        )
        .is_err());
    }
}
