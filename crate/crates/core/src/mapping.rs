//! Mapping stage: a small residual CNN that re-maps recovered face frames
//! into low-resolution maps and scores them.
//!
//! Layout: a strided stem (7x7 conv, channel affine, relu, 3x3 max pool)
//! brings the frame to stride 4; three residual stages follow at strides
//! 4, 8 and 16. Their outputs are resized to the stride-4 grid and
//! concatenated. Three 3x3 convolutions turn the fused tensor into a
//! three-channel map; a fully connected layer over the pooled fused tensor
//! gives the fake logit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::clip::{FaceClip, Label};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::seeds::{self, stream};
use crate::tensor::{conv_out, resize_bilinear, Tensor};

/// What the map is compared against in the reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapTarget {
    /// Recovered frame bilinearly resized to the map size.
    #[default]
    ResizeRecovered,
    /// Map bilinearly upsampled to the frame size.
    UpsampleMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub blocks_per_stage: usize,
    /// Hidden widths of the first two mapping convolutions.
    pub map_channels: [usize; 2],
    pub target: MapTarget,
}

impl Default for MapperConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            stem_channels: 16,
            stage_channels: [16, 32, 64],
            blocks_per_stage: 1,
            map_channels: [32, 16],
            target: MapTarget::ResizeRecovered,
        }
    }
}

impl MapperConfig {
    /// Full-scale widths of the first three residual stages of an 18-layer
    /// residual network on 224 px frames.
    pub fn full_scale() -> Self {
        Self {
            input_size: 224,
            stem_channels: 64,
            stage_channels: [64, 128, 256],
            blocks_per_stage: 2,
            map_channels: [64, 32],
            target: MapTarget::ResizeRecovered,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "mapper input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        let widths = [
            self.stem_channels,
            self.map_channels[0],
            self.map_channels[1],
        ];
        if widths.iter().chain(&self.stage_channels).any(|&c| c == 0) || self.blocks_per_stage == 0
        {
            return Err(Error::Config(
                "mapper channel counts and block counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial sizes of the three stage outputs.
    pub fn stage_sizes(&self) -> [usize; 3] {
        let stem = conv_out(conv_out(self.input_size, 7, 2, 3), 3, 2, 1);
        let s2 = conv_out(stem, 3, 2, 1);
        [stem, s2, conv_out(s2, 3, 2, 1)]
    }

    pub fn map_size(&self) -> usize {
        self.stage_sizes()[0]
    }

    pub fn fused_channels(&self) -> usize {
        self.stage_channels.iter().sum()
    }
}

#[derive(Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct AffineIds {
    scale: ParamId,
    shift: ParamId,
    normalise: bool,
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: ConvIds,
    aff1: AffineIds,
    conv2: ConvIds,
    aff2: AffineIds,
    shortcut: Option<(ConvIds, AffineIds)>,
}

#[derive(Clone, Debug)]
struct Ids {
    stem: ConvIds,
    stem_aff: AffineIds,
    stages: Vec<Vec<ResBlock>>,
    map: [ConvIds; 3],
    fc: (ParamId, ParamId),
}

fn add_conv(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> ConvIds {
    ConvIds {
        w: store.add(format!("{name}.w"), init.kaiming(cout, cin, k)),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[cout])),
        stride,
        pad: k / 2,
    }
}

fn add_affine(
    store: &mut ParamStore,
    name: &str,
    c: usize,
    scale: f64,
    normalise: bool,
) -> AffineIds {
    AffineIds {
        scale: store.add(format!("{name}.scale"), Tensor::full(&[c], scale)),
        shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c])),
        normalise,
    }
}

fn conv(g: &mut Graph, p: &ParamStore, x: Var, c: &ConvIds) -> Var {
    let w = g.param(p, c.w);
    let b = g.param(p, c.b);
    g.conv2d(x, w, b, c.stride, c.pad)
}

/// Learned per-channel affine, optionally preceded by per-sample
/// normalisation over all of `[C, H, W]` (one-group group norm).
fn affine(g: &mut Graph, p: &ParamStore, x: Var, a: &AffineIds) -> Var {
    let x = if a.normalise {
        let shape = g.value(x).shape().to_vec();
        let n = shape.iter().product::<usize>();
        let flat = g.reshape(x, &[1, n]);
        let ones = g.constant(Tensor::full(&[n], 1.0));
        let zeros = g.constant(Tensor::zeros(&[n]));
        let normed = g.layer_norm(flat, ones, zeros);
        g.reshape(normed, &shape)
    } else {
        x
    };
    let s = g.param(p, a.scale);
    let t = g.param(p, a.shift);
    g.channel_affine(x, s, t)
}

fn res_block(g: &mut Graph, p: &ParamStore, x: Var, b: &ResBlock) -> Var {
    let h = conv(g, p, x, &b.conv1);
    let h = affine(g, p, h, &b.aff1);
    let h = g.relu(h);
    let h = conv(g, p, h, &b.conv2);
    let h = affine(g, p, h, &b.aff2);
    let skip = match &b.shortcut {
        Some((c, a)) => {
            let s = conv(g, p, x, c);
            affine(g, p, s, a)
        }
        None => x,
    };
    let y = g.add(h, skip);
    g.relu(y)
}

/// Subtracted from every input pixel before the stem.
pub const INPUT_MEAN: f64 = 0.5;

/// Mapping network parameters and architecture.
#[derive(Clone, Debug)]
pub struct Mapper {
    pub cfg: MapperConfig,
    pub params: ParamStore,
    ids: Ids,
}

/// Forward results for one frame.
#[derive(Clone, Copy, Debug)]
pub struct MapperOutput {
    pub stages: [Var; 3],
    pub fused: Var,
    pub map: Var,
    pub logit: Var,
}

/// A mapped frame and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct MappedFace {
    pub source_id: String,
    pub frame: usize,
    /// `[3, s, s]` map.
    pub map: Tensor,
    /// Sigmoid fake probability.
    pub score: f64,
}

impl Mapper {
    pub fn new(cfg: MapperConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seeds::derive(seed, &[stream::INIT, 2]));
        let mut store = ParamStore::new();
        let stem = add_conv(
            &mut store,
            &mut init,
            "stem.conv",
            3,
            cfg.stem_channels,
            7,
            2,
        );
        let stem_aff = add_affine(&mut store, "stem.affine", cfg.stem_channels, 1.0, false);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (si, &cout) in cfg.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..cfg.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{si}.block{bi}");
                let shortcut = (stride != 1 || cin != cout).then(|| {
                    (
                        add_conv(
                            &mut store,
                            &mut init,
                            &format!("{name}.down"),
                            cin,
                            cout,
                            1,
                            stride,
                        ),
                        add_affine(&mut store, &format!("{name}.down_affine"), cout, 1.0, false),
                    )
                });
                blocks.push(ResBlock {
                    conv1: add_conv(
                        &mut store,
                        &mut init,
                        &format!("{name}.conv1"),
                        cin,
                        cout,
                        3,
                        stride,
                    ),
                    aff1: add_affine(&mut store, &format!("{name}.affine1"), cout, 1.0, true),
                    conv2: add_conv(
                        &mut store,
                        &mut init,
                        &format!("{name}.conv2"),
                        cout,
                        cout,
                        3,
                        1,
                    ),
                    aff2: add_affine(&mut store, &format!("{name}.affine2"), cout, 0.0, true),
                    shortcut,
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let fused = cfg.fused_channels();
        let [m1, m2] = cfg.map_channels;
        let map = [
            add_conv(&mut store, &mut init, "map.conv1", fused, m1, 3, 1),
            add_conv(&mut store, &mut init, "map.conv2", m1, m2, 3, 1),
            add_conv(&mut store, &mut init, "map.conv3", m2, 3, 3, 1),
        ];
        let fc = (
            store.add("fc.w", Tensor::zeros(&[fused, 1])),
            store.add("fc.b", Tensor::zeros(&[1])),
        );
        Ok(Self {
            cfg,
            params: store,
            ids: Ids {
                stem,
                stem_aff,
                stages,
                map,
                fc,
            },
        })
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.cfg).expect("config serialises")
    }

    /// Stage outputs at strides 4, 8 and 16 for a `[3, s, s]` frame.
    pub fn extract_features(&self, g: &mut Graph, frame: Var) -> [Var; 3] {
        let p = &self.params;
        let x = conv(g, p, frame, &self.ids.stem);
        let x = affine(g, p, x, &self.ids.stem_aff);
        let x = g.relu(x);
        let mut x = g.max_pool(x, 3, 2, 1);
        let mut outs = Vec::with_capacity(3);
        for stage in &self.ids.stages {
            for b in stage {
                x = res_block(g, p, x, b);
            }
            outs.push(x);
        }
        [outs[0], outs[1], outs[2]]
    }

    /// Three convolutions from the fused tensor to a 3-channel map.
    pub fn map_face(&self, g: &mut Graph, fused: Var) -> Var {
        let p = &self.params;
        let [c1, c2, c3] = &self.ids.map;
        let h = conv(g, p, fused, c1);
        let h = g.relu(h);
        let h = conv(g, p, h, c2);
        let h = g.relu(h);
        conv(g, p, h, c3)
    }

    /// Fake logit from the pooled fused tensor.
    pub fn classify(&self, g: &mut Graph, fused: Var) -> Var {
        let pooled = g.global_avg_pool(fused);
        let w = g.param(&self.params, self.ids.fc.0);
        let b = g.param(&self.params, self.ids.fc.1);
        g.linear(pooled, w, b)
    }

    pub fn forward(&self, g: &mut Graph, frame: Tensor) -> MapperOutput {
        assert_eq!(
            frame.shape(),
            &[3, self.cfg.input_size, self.cfg.input_size],
            "mapper input shape"
        );
        let mut frame = frame;
        frame.data_mut().iter_mut().for_each(|v| *v -= INPUT_MEAN);
        let x = g.constant(frame);
        let stages = self.extract_features(g, x);
        let fused = fuse_concat(g, &stages);
        let map = self.map_face(g, fused);
        let logit = self.classify(g, fused);
        MapperOutput {
            stages,
            fused,
            map,
            logit,
        }
    }

    /// Map and score frame `t` of a recovered clip.
    pub fn map_frame(&self, clip: &FaceClip, t: usize) -> MappedFace {
        let mut g = Graph::new();
        let out = self.forward(&mut g, clip.frame_chw(t));
        MappedFace {
            source_id: clip.id.clone(),
            frame: t,
            map: g.value(out.map).clone(),
            score: sigmoid(g.value(out.logit).item()),
        }
    }

    /// Clip-level fake probability: mean of the per-frame scores over `frames`.
    pub fn clip_score(&self, clip: &FaceClip, frames: &[usize]) -> f64 {
        frames
            .iter()
            .map(|&t| self.map_frame(clip, t).score)
            .sum::<f64>()
            / frames.len() as f64
    }
}

/// Resize every stage output to the spatial size of the first (largest)
/// and concatenate along channels.
pub fn fuse_concat(g: &mut Graph, stages: &[Var]) -> Var {
    let s = g.value(stages[0]).shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let resized: Vec<Var> = stages
        .iter()
        .map(|&v| {
            if g.value(v).shape()[1..] == [h, w] {
                v
            } else {
                g.resize(v, h, w)
            }
        })
        .collect();
    g.concat_channels(&resized)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Target frame for the map reconstruction term.
pub fn map_target(cfg: &MapperConfig, recovered_frame: &Tensor) -> Tensor {
    match cfg.target {
        MapTarget::ResizeRecovered => {
            resize_bilinear(recovered_frame, cfg.map_size(), cfg.map_size())
        }
        MapTarget::UpsampleMap => recovered_frame.clone(),
    }
}

/// The two mapping-stage loss nodes `(mse, bce)`.
pub fn map_loss(
    g: &mut Graph,
    cfg: &MapperConfig,
    out: &MapperOutput,
    recovered_frame: &Tensor,
    label: Label,
) -> (Var, Var) {
    let target = map_target(cfg, recovered_frame);
    let pred = match cfg.target {
        MapTarget::ResizeRecovered => out.map,
        MapTarget::UpsampleMap => g.resize(out.map, cfg.input_size, cfg.input_size),
    };
    let mse = g.mse(pred, target);
    let bce = g.bce_with_logits(out.logit, label.as_target());
    (mse, bce)
}

/// Map-space view of an original frame, for similarity measurements
/// against a map.
pub fn original_in_map_space(
    cfg: &MapperConfig,
    map: &Tensor,
    original_frame: &Tensor,
) -> (Tensor, Tensor) {
    match cfg.target {
        MapTarget::ResizeRecovered => (
            map.clone(),
            resize_bilinear(original_frame, cfg.map_size(), cfg.map_size()),
        ),
        MapTarget::UpsampleMap => (
            resize_bilinear(map, cfg.input_size, cfg.input_size),
            original_frame.clone(),
        ),
    }
}

pub const MAPPER_KIND: &str = "mapper";

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MapperConfig {
        MapperConfig {
            input_size: 16,
            stem_channels: 4,
            stage_channels: [4, 6, 8],
            map_channels: [4, 4],
            ..Default::default()
        }
    }

    #[test]
    fn stage_sizes_follow_strides() {
        assert_eq!(MapperConfig::full_scale().stage_sizes(), [56, 28, 14]);
        assert_eq!(MapperConfig::default().stage_sizes(), [16, 8, 4]);
        assert_eq!(MapperConfig::full_scale().map_size(), 56);
        assert!(MapperConfig {
            input_size: 60,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn forward_shapes() {
        let cfg = MapperConfig::default();
        let m = Mapper::new(cfg.clone(), 0).unwrap();
        let mut g = Graph::new();
        let out = m.forward(&mut g, Tensor::full(&[3, 64, 64], 0.5));
        let sizes: Vec<Vec<usize>> = out
            .stages
            .iter()
            .map(|&v| g.value(v).shape().to_vec())
            .collect();
        assert_eq!(
            sizes,
            vec![vec![16, 16, 16], vec![32, 8, 8], vec![64, 4, 4]]
        );
        assert_eq!(g.value(out.fused).shape(), &[112, 16, 16]);
        assert_eq!(g.value(out.map).shape(), &[3, 16, 16]);
        assert_eq!(g.value(out.logit).shape(), &[1, 1]);
    }

    #[test]
    fn zero_input_and_zero_affine_give_zero_stages() {
        let mut m = Mapper::new(tiny(), 1).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            if m.params.name(id).contains("affine") {
                for v in m.params.get_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut g = Graph::new();
        let out = m.forward(&mut g, Tensor::zeros(&[3, 16, 16]));
        for s in out.stages {
            assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn fusion_of_identical_stages_permutes_channels() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(Tensor::from_vec(&[2, 1, 1], vec![5.0, 6.0]));
        let ab = fuse_concat(&mut g, &[a, b]);
        let a2 = g.constant(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let ba = fuse_concat(&mut g, &[a2, b]);
        assert_eq!(g.value(ab).shape(), &[3, 2, 2]);
        assert_eq!(g.value(ab), g.value(ba));
        assert_eq!(
            &g.value(ab).data()[4..],
            &[5.0, 5.0, 5.0, 5.0, 6.0, 6.0, 6.0, 6.0]
        );
    }

    #[test]
    fn loss_values() {
        let cfg = tiny();
        let m = Mapper::new(cfg.clone(), 2).unwrap();
        let mut g = Graph::new();
        let frame = Tensor::full(&[3, 16, 16], 0.25);
        let out = m.forward(&mut g, frame.clone());
        let target = map_target(&cfg, &frame);
        let offset: Vec<f64> = target.data().iter().map(|v| v + 0.5).collect();
        let exact = MapperOutput {
            map: g.constant(target.clone()),
            ..out
        };
        let shifted = MapperOutput {
            map: g.constant(Tensor::from_vec(target.shape(), offset)),
            ..out
        };
        let (z, _) = map_loss(&mut g, &cfg, &exact, &frame, Label::Real);
        let (c, _) = map_loss(&mut g, &cfg, &shifted, &frame, Label::Real);
        assert_eq!(g.value(z).item(), 0.0);
        assert!((g.value(c).item() - 0.25).abs() < 1e-15);
        let zero = g.constant(Tensor::from_vec(&[1, 1], vec![0.0]));
        let big = g.constant(Tensor::from_vec(&[1, 1], vec![40.0]));
        let (_, uniform) = map_loss(
            &mut g,
            &cfg,
            &MapperOutput { logit: zero, ..out },
            &frame,
            Label::Fake,
        );
        let (_, sure) = map_loss(
            &mut g,
            &cfg,
            &MapperOutput { logit: big, ..out },
            &frame,
            Label::Fake,
        );
        assert!((g.value(uniform).item() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(g.value(sure).item() < 1e-15);
    }

    #[test]
    fn sigmoid_is_monotone_and_bounded() {
        let zs = [-800.0, -5.0, -0.1, 0.0, 0.1, 5.0, 800.0];
        for w in zs.windows(2) {
            assert!(sigmoid(w[0]) <= sigmoid(w[1]));
        }
        assert!(zs.iter().all(|&z| (0.0..=1.0).contains(&sigmoid(z))));
    }
}
