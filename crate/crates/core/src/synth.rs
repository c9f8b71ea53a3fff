//! Procedural face clips: pristine identities with small temporal jitter,
//! and forgeries that splice a donor identity into part of the face.
//!
//! Faces are drawn analytically from a 68-point landmark layout with soft
//! edges. Part colours are tied to each other (iris follows hair, lips and
//! blush follow skin) and the skin texture is mirror-symmetric, so a
//! pristine face is predictable from any large piece of itself. Pixel
//! values are quantised to multiples of 1/255 so clips survive 8-bit
//! lossless storage exactly.

use std::f64::consts::{PI, TAU};
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::{FaceClip, Label, PRISTINE};
use crate::error::{Error, Result};
use crate::geometry::{groups, LandmarkSet, Part};
use crate::seeds::{self, stream};

type Rgb = [f64; 3];

/// Appearance and geometry of one synthetic person.
#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub seed: u64,
    pub skin: Rgb,
    pub hair: Rgb,
    pub iris: Rgb,
    pub lips: Rgb,
    pub background: Rgb,
    pub blush: f64,
    /// `(kx, ky, phase, amplitude)` of the mirror-symmetric skin texture.
    pub texture: Vec<(f64, f64, f64, f64)>,
    /// Neutral landmark layout in the identity's frame.
    pub landmarks: LandmarkSet,
}

/// Largest landmark displacement from the template, as a fraction of the frame.
pub const MAX_DEFORMATION: f64 = 0.10;
/// Largest per-frame translation of a pristine clip, in pixels at 64 px.
pub const MAX_JITTER_64: f64 = 0.6;

fn quantise_coord(v: f64) -> f64 {
    (v * 16.0).round() / 16.0
}

fn mix(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn scale_rgb(a: Rgb, s: f64) -> Rgb {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Draw an identity for a `size x size` frame.
pub fn generate_identity(seed: u64, size: usize) -> Identity {
    let mut rng = seeds::rng(seed, &[stream::IDENTITY]);
    let tone = rng.random_range(0.25..0.95);
    let warm = rng.random_range(-0.06..0.06);
    let skin = [
        0.30 + 0.62 * tone + warm,
        0.20 + 0.55 * tone,
        0.14 + 0.48 * tone - warm,
    ];
    let hair_l = rng.random_range(0.05..0.6);
    let hair_hue = rng.random_range(0.0..1.0);
    let hair = [
        hair_l * (1.0 + 0.5 * hair_hue),
        hair_l * (0.8 + 0.2 * hair_hue),
        hair_l * (0.6 + 0.1 * hair_hue),
    ];
    let iris = mix(
        scale_rgb(hair, 0.9),
        [0.2, 0.35, 0.45],
        rng.random_range(0.0..0.5),
    );
    let redness = rng.random_range(0.3..0.6);
    let lips = mix(scale_rgb(skin, 0.85), [0.72, 0.22, 0.26], redness);
    let background = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let blush = rng.random_range(0.0..0.35);
    let texture = (0..4)
        .map(|_| {
            (
                rng.random_range(0.5..3.0),
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..TAU),
                rng.random_range(0.01..0.035),
            )
        })
        .collect();

    let s = size as f64;
    let template = LandmarkSet::fixture()
        .rescaled((size, size))
        .expect("template fits any frame");
    let scale = rng.random_range(0.92..1.04);
    let (tx, ty) = (
        rng.random_range(-0.03..0.03) * s,
        rng.random_range(-0.03..0.03) * s,
    );
    let eye_lift = rng.random_range(-0.015..0.015) * s;
    let mouth_drop = rng.random_range(-0.015..0.015) * s;
    let eye_spread = rng.random_range(0.95..1.05);
    let (cx, cy) = (s / 2.0, s / 2.0);
    let points = template
        .points()
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let (mut dx, mut dy) = (x - cx, y - cy);
            if groups::EYES.contains(&i) || groups::BROWS.contains(&i) {
                dx *= eye_spread;
                dy += eye_lift;
            }
            if groups::MOUTH.contains(&i) {
                dy += mouth_drop;
            }
            let px = (cx + dx * scale + tx).clamp(0.0, s - 1.0);
            let py = (cy + dy * scale + ty).clamp(0.0, s - 1.0);
            (quantise_coord(px), quantise_coord(py))
        })
        .collect();
    let landmarks =
        LandmarkSet::new(points, (size, size)).expect("deformed landmarks stay in frame");
    Identity {
        seed,
        skin,
        hair,
        iris,
        lips,
        background,
        blush,
        texture,
        landmarks,
    }
}

fn coverage(d: f64) -> f64 {
    (0.5 - d).clamp(0.0, 1.0)
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let t = ((wx * vx + wy * vy) / (vx * vx + vy * vy).max(1e-12)).clamp(0.0, 1.0);
    ((wx - t * vx).powi(2) + (wy - t * vy).powi(2)).sqrt()
}

/// Signed distance to a closed polygon, negative inside.
fn polygon_sdf(p: (f64, f64), poly: &[(f64, f64)]) -> f64 {
    let mut d = f64::INFINITY;
    let mut inside = false;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        d = d.min(seg_dist(p, a, b));
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < a.0 + (p.1 - a.1) * (b.0 - a.0) / (b.1 - a.1) {
            inside = !inside;
        }
    }
    if inside {
        -d
    } else {
        d
    }
}

/// Approximate signed distance to an axis-aligned ellipse, in pixels.
fn ellipse_sdf(p: (f64, f64), c: (f64, f64), rx: f64, ry: f64) -> f64 {
    let (nx, ny) = ((p.0 - c.0) / rx, (p.1 - c.1) / ry);
    let r = (nx * nx + ny * ny).sqrt();
    (r - 1.0) * rx.min(ry)
}

fn centroid(lm: &LandmarkSet, idx: impl Iterator<Item = usize>) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for i in idx {
        let (x, y) = lm.point(i);
        sx += x;
        sy += y;
        n += 1.0;
    }
    (sx / n, sy / n)
}

/// Face layout derived from landmarks, shared by all renderings on them.
struct FaceShape {
    face_c: (f64, f64),
    face_r: (f64, f64),
    hair_c: (f64, f64),
    hair_r: (f64, f64),
    hairline: f64,
    eyes: [((f64, f64), f64, f64); 2],
    brows: [Vec<(f64, f64)>; 2],
    brow_width: f64,
    bridge: ((f64, f64), (f64, f64)),
    nostrils: [(f64, f64); 2],
    cheeks: [(f64, f64); 2],
    lips: Vec<(f64, f64)>,
    mouth_line: Vec<(f64, f64)>,
    unit: f64,
}

impl FaceShape {
    fn new(lm: &LandmarkSet) -> Self {
        let p = |i: usize| lm.point(i);
        let (x0, x16) = (p(0).0, p(16).0);
        let chin = p(8).1;
        let brow_top = groups::BROWS.map(|i| p(i).1).fold(f64::INFINITY, f64::min);
        let top = brow_top - 0.45 * (chin - brow_top);
        let face_c = ((x0 + x16) / 2.0, (top + chin) / 2.0);
        let face_r = ((x16 - x0) / 2.0 * 1.02, (chin - top) / 2.0);
        let unit = face_r.0;
        let eye = |r: std::ops::Range<usize>| {
            let c = centroid(lm, r.clone());
            let xs = r.clone().map(|i| p(i).0);
            let ys = r.map(|i| p(i).1);
            let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| {
                (a.0.min(v), a.1.max(v))
            });
            let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |a, v| {
                (a.0.min(v), a.1.max(v))
            });
            (
                c,
                ((xmax - xmin) / 2.0).max(0.8),
                ((ymax - ymin) / 2.0 * 1.2).max(0.6),
            )
        };
        let mouth_l = p(48);
        let mouth_r = p(54);
        Self {
            face_c,
            face_r,
            hair_c: (face_c.0, face_c.1 - 0.06 * face_r.1),
            hair_r: (face_r.0 * 1.12, face_r.1 * 1.08),
            hairline: brow_top - 0.22 * (chin - brow_top),
            eyes: [eye(groups::LEFT_EYE), eye(groups::RIGHT_EYE)],
            brows: [(17..22).map(p).collect(), (22..27).map(p).collect()],
            brow_width: 0.045 * unit,
            bridge: (p(27), p(30)),
            nostrils: [p(31), p(35)],
            cheeks: [
                (
                    (p(36).0 + mouth_l.0) / 2.0 - 0.05 * unit,
                    (p(41).1 + mouth_l.1) / 2.0,
                ),
                (
                    (p(45).0 + mouth_r.0) / 2.0 + 0.05 * unit,
                    (p(46).1 + mouth_r.1) / 2.0,
                ),
            ],
            lips: (48..60).map(p).collect(),
            mouth_line: (60..68).map(p).collect(),
            unit,
        }
    }

    fn polyline_dist(q: (f64, f64), pts: &[(f64, f64)]) -> f64 {
        pts.windows(2)
            .map(|w| seg_dist(q, w[0], w[1]))
            .fold(f64::INFINITY, f64::min)
    }

    fn shade(&self, id: &Identity, q: (f64, f64)) -> Rgb {
        let mut c = id.background;
        let hair = coverage(ellipse_sdf(q, self.hair_c, self.hair_r.0, self.hair_r.1));
        c = mix(c, id.hair, hair);
        // Skin with a texture mirrored about the face axis.
        let u = (q.0 - self.face_c.0).abs() / self.unit;
        let v = (q.1 - self.face_c.1) / self.unit;
        let tex: f64 = id
            .texture
            .iter()
            .map(|&(kx, ky, ph, a)| a * (kx * PI * u).cos() * (ky * PI * v + ph).cos())
            .sum();
        let mut skin = scale_rgb(id.skin, 1.0 + tex);
        for ch in &self.cheeks {
            let w = (-((q.0 - ch.0).powi(2) + (q.1 - ch.1).powi(2))
                / (0.03 * self.unit * self.unit))
                .exp();
            skin = mix(skin, id.lips, id.blush * w);
        }
        let bridge =
            (-(seg_dist(q, self.bridge.0, self.bridge.1) / (0.05 * self.unit)).powi(2)).exp();
        skin = scale_rgb(skin, 1.0 - 0.08 * bridge);
        let face = coverage(ellipse_sdf(q, self.face_c, self.face_r.0, self.face_r.1));
        let below_hairline = (q.1 - self.hairline + 0.5).clamp(0.0, 1.0);
        c = mix(c, skin, face * below_hairline.max(1.0 - hair));
        for n in &self.nostrils {
            let k = coverage(ellipse_sdf(q, *n, 0.05 * self.unit, 0.03 * self.unit));
            c = mix(c, scale_rgb(id.skin, 0.55), k);
        }
        for brow in &self.brows {
            let k = coverage(Self::polyline_dist(q, brow) - self.brow_width);
            c = mix(c, id.hair, k);
        }
        for &(ec, rx, ry) in &self.eyes {
            let k = coverage(ellipse_sdf(q, ec, rx, ry));
            if k > 0.0 {
                let ir = 0.95 * ry;
                let iris = coverage(ellipse_sdf(q, ec, ir, ir));
                let pupil = coverage(ellipse_sdf(q, ec, 0.45 * ir, 0.45 * ir));
                let eye = mix(
                    mix([0.93, 0.91, 0.88], id.iris, iris),
                    [0.04, 0.04, 0.05],
                    pupil,
                );
                c = mix(c, eye, k);
            }
        }
        let lip = coverage(polygon_sdf(q, &self.lips));
        c = mix(c, id.lips, lip);
        let line = coverage(Self::polyline_dist(q, &self.mouth_line) - 0.02 * self.unit);
        c = mix(c, scale_rgb(id.lips, 0.45), line * lip);
        c
    }
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Per-frame translation and gain of a pristine clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameJitter {
    pub dx: f64,
    pub dy: f64,
    pub gain: f64,
}

pub fn clip_jitter(size: usize, frames: usize, seed: u64) -> Vec<FrameJitter> {
    let mut rng = seeds::rng(seed, &[stream::REAL]);
    let amp = MAX_JITTER_64 * size as f64 / 64.0;
    let (ax, ay) = (rng.random_range(0.0..amp), rng.random_range(0.0..amp));
    let (px, py, pg) = (
        rng.random_range(0.0..TAU),
        rng.random_range(0.0..TAU),
        rng.random_range(0.0..TAU),
    );
    let w = rng.random_range(0.2..0.6);
    (0..frames)
        .map(|t| {
            let t = t as f64;
            FrameJitter {
                dx: quantise_coord(ax * (w * t + px).sin()),
                dy: quantise_coord(ay * (w * t + py).sin()),
                gain: 1.0 + 0.01 * (w * t + pg).sin(),
            }
        })
        .collect()
}

fn shifted(lm: &LandmarkSet, j: &FrameJitter) -> LandmarkSet {
    let (h, w) = lm.frame();
    let pts = lm
        .points()
        .iter()
        .map(|&(x, y)| {
            (
                (x + j.dx).clamp(0.0, w as f64 - 1.0),
                (y + j.dy).clamp(0.0, h as f64 - 1.0),
            )
        })
        .collect();
    LandmarkSet::new(pts, lm.frame()).expect("jittered landmarks stay in frame")
}

/// Render `id`'s appearance on landmark layout `lm` (unquantised, HWC).
fn render(id: &Identity, lm: &LandmarkSet, gain: f64) -> Vec<f64> {
    let (h, w) = lm.frame();
    let shape = FaceShape::new(lm);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let c = shape.shade(id, (x as f64 + 0.5, y as f64 + 0.5));
            out.extend(c.iter().map(|v| v * gain));
        }
    }
    out
}

/// A pristine clip of `id`: the neutral face under small smooth jitter.
pub fn generate_real_clip(
    id: &Identity,
    clip_id: &str,
    frames: usize,
    seed: u64,
) -> Result<FaceClip> {
    let (size, _) = id.landmarks.frame();
    let mut data = Vec::with_capacity(frames * size * size * 3);
    let mut landmarks = Vec::with_capacity(frames);
    for j in clip_jitter(size, frames, seed) {
        let lm = shifted(&id.landmarks, &j);
        data.extend(render(id, &lm, j.gain).into_iter().map(quantise));
        landmarks.push(lm);
    }
    FaceClip::new(
        clip_id,
        Label::Real,
        PRISTINE,
        (frames, size, size),
        data,
        landmarks,
    )
}

/// Outline of a spliced region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpliceShape {
    Oval,
    Rect,
    Polygon,
    Freeform,
}

impl SpliceShape {
    pub const ALL: [SpliceShape; 4] = [
        SpliceShape::Oval,
        SpliceShape::Rect,
        SpliceShape::Polygon,
        SpliceShape::Freeform,
    ];
}

impl fmt::Display for SpliceShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpliceShape::Oval => "oval",
            SpliceShape::Rect => "rect",
            SpliceShape::Polygon => "polygon",
            SpliceShape::Freeform => "freeform",
        })
    }
}

impl std::str::FromStr for SpliceShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SpliceShape::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Validation(format!("unknown splice shape {s:?}")))
    }
}

/// How a forgery is made.
#[derive(Clone, Debug, PartialEq)]
pub struct ForgerySpec {
    pub shape: SpliceShape,
    /// Feather width of the seam, in pixels.
    pub blend_width: f64,
    pub donor_seed: u64,
    /// Facial part the region is centred on.
    pub anchor: Part,
    /// Region size relative to the face half-width; 0 gives an empty region.
    pub size: f64,
    /// Offset of the donor content against the target face, in pixels.
    pub misalign: (f64, f64),
    /// Per-frame wobble of the donor content, in pixels; also drives a
    /// small brightness flicker.
    pub flicker: f64,
    /// Amplitude of the checkerboard left by the generator's up-sampling.
    pub fingerprint: f64,
    /// Side of one checkerboard cell, in pixels.
    pub fingerprint_cell: usize,
}

/// Concrete splice region in face coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SpliceRegion {
    pub shape: SpliceShape,
    pub center: (f64, f64),
    pub radius: f64,
    pub aspect: f64,
    pub angle: f64,
    /// Polygon vertex radii or freeform harmonics, depending on the shape.
    pub detail: Vec<f64>,
    pub blend_width: f64,
}

impl SpliceRegion {
    /// Draw the randomised placement of `spec` on the layout `lm`.
    pub fn place(spec: &ForgerySpec, lm: &LandmarkSet, rng: &mut ChaCha8Rng) -> Self {
        let shape = FaceShape::new(lm);
        let anchor = match spec.anchor {
            Part::Eyes => centroid(lm, groups::EYES),
            Part::NoseCheek => centroid(lm, groups::NOSE_BRIDGE.chain(groups::NOSTRILS)),
            Part::Lips => centroid(lm, groups::MOUTH),
        };
        let u = shape.unit;
        let center = (
            anchor.0 + rng.random_range(-0.15..0.15) * u,
            anchor.1 + rng.random_range(-0.1..0.1) * u,
        );
        let detail = match spec.shape {
            SpliceShape::Polygon => {
                let n = rng.random_range(5..8);
                (0..n).map(|_| rng.random_range(0.75..1.15)).collect()
            }
            SpliceShape::Freeform => (0..6)
                .map(|k| {
                    if k % 2 == 0 {
                        rng.random_range(0.0..0.18)
                    } else {
                        rng.random_range(0.0..TAU)
                    }
                })
                .collect(),
            _ => Vec::new(),
        };
        Self {
            shape: spec.shape,
            center,
            radius: spec.size * u * rng.random_range(0.85..1.15),
            aspect: rng.random_range(0.6..1.0),
            angle: rng.random_range(0.0..PI),
            detail,
            blend_width: spec.blend_width.max(0.0),
        }
    }

    /// Signed distance (pixels, negative inside) of `q`.
    pub fn sdf(&self, q: (f64, f64)) -> f64 {
        if self.radius <= 0.0 {
            return f64::INFINITY;
        }
        let (dx, dy) = (q.0 - self.center.0, q.1 - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        let (rx, ry) = (self.radius, self.radius * self.aspect);
        match self.shape {
            SpliceShape::Oval => ellipse_sdf((lx, ly), (0.0, 0.0), rx, ry),
            SpliceShape::Rect => {
                let (ox, oy) = (lx.abs() - rx, ly.abs() - ry);
                let outside = (ox.max(0.0).powi(2) + oy.max(0.0).powi(2)).sqrt();
                outside + ox.max(oy).min(0.0)
            }
            SpliceShape::Polygon => {
                let n = self.detail.len();
                let poly: Vec<(f64, f64)> = self
                    .detail
                    .iter()
                    .enumerate()
                    .map(|(k, r)| {
                        let a = TAU * k as f64 / n as f64;
                        (r * rx * a.cos(), r * ry * a.sin())
                    })
                    .collect();
                polygon_sdf((lx, ly), &poly)
            }
            SpliceShape::Freeform => {
                let theta = ly.atan2(lx);
                let mut r = 1.0;
                for (k, pair) in self.detail.chunks(2).enumerate() {
                    r += pair[0] * ((k as f64 + 2.0) * theta + pair[1]).cos();
                }
                let (nx, ny) = (lx / rx, ly / ry);
                ((nx * nx + ny * ny).sqrt() - r) * rx.min(ry)
            }
        }
    }

    /// Donor weight at `q`: 1 inside, feathered to 0 over the blend width,
    /// exactly 0 beyond it.
    pub fn alpha(&self, q: (f64, f64)) -> f64 {
        let d = self.sdf(q);
        if d <= 0.0 {
            1.0
        } else if d >= self.blend_width {
            0.0
        } else {
            let t = d / self.blend_width;
            1.0 - t * t * (3.0 - 2.0 * t)
        }
    }
}

/// Forgery of `target`: its pristine clip (drawn from `seed`) with
/// `donor`'s appearance, rendered on the target's landmarks, blended into a
/// randomly placed region. Outside the region the result equals the
/// pristine clip bitwise.
pub fn generate_fake_clip(
    target: &Identity,
    donor: &Identity,
    spec: &ForgerySpec,
    clip_id: &str,
    frames: usize,
    seed: u64,
) -> Result<(FaceClip, SpliceRegion)> {
    if spec.blend_width < 0.0 || spec.size < 0.0 {
        return Err(Error::Validation(
            "blend width and region size must be non-negative".into(),
        ));
    }
    if target.landmarks.frame() != donor.landmarks.frame() {
        return Err(Error::Validation(
            "target and donor use different frame sizes".into(),
        ));
    }
    let pristine = generate_real_clip(target, clip_id, frames, seed)?;
    let mut rng = seeds::rng(seed, &[stream::FORGERY]);
    let region = SpliceRegion::place(spec, &target.landmarks, &mut rng);
    let (size, _) = target.landmarks.frame();
    let mut data = pristine.data.clone();
    let mut wobble = seeds::rng(seed, &[stream::FORGERY, 1]);
    for (t, j) in clip_jitter(size, frames, seed).into_iter().enumerate() {
        let lm = &pristine.landmarks[t];
        let shape = FaceShape::new(lm);
        let base = t * size * size * 3;
        let (fx, fy, fg) = if spec.flicker > 0.0 {
            let f = spec.flicker;
            (
                wobble.random_range(-f..=f),
                wobble.random_range(-f..=f),
                1.0 + wobble.random_range(-0.03..=0.03),
            )
        } else {
            (0.0, 0.0, 1.0)
        };
        let (ox, oy) = (spec.misalign.0 + fx, spec.misalign.1 + fy);
        for y in 0..size {
            for x in 0..size {
                let q = (x as f64 + 0.5, y as f64 + 0.5);
                let a = region.alpha((q.0 - j.dx, q.1 - j.dy));
                if a == 0.0 {
                    continue;
                }
                let c = shape.shade(donor, (q.0 - ox, q.1 - oy));
                let cell = spec.fingerprint_cell.max(1);
                let checker = if (x / cell + y / cell) % 2 == 0 {
                    spec.fingerprint
                } else {
                    -spec.fingerprint
                };
                let i = base + (y * size + x) * 3;
                for ch in 0..3 {
                    let own = data[i + ch];
                    data[i + ch] =
                        quantise(own + ((c[ch] * j.gain * fg + checker).clamp(0.0, 1.0) - own) * a);
                }
            }
        }
    }
    let clip = FaceClip::new(
        clip_id,
        Label::Fake,
        spec.shape.to_string(),
        (frames, size, size),
        data,
        pristine.landmarks,
    )?;
    Ok((clip, region))
}

/// Mean absolute gradient magnitude over the pixels of `frame` selected by `mask`.
pub fn mean_gradient(frame: &[f64], size: usize, mask: impl Fn(usize, usize) -> bool) -> f64 {
    let at = |x: usize, y: usize, c: usize| frame[(y * size + x) * 3 + c];
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..size - 1 {
        for x in 0..size - 1 {
            if !mask(x, y) {
                continue;
            }
            for c in 0..3 {
                sum +=
                    (at(x + 1, y, c) - at(x, y, c)).abs() + (at(x, y + 1, c) - at(x, y, c)).abs();
            }
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
