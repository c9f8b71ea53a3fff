//! Face geometry: the 68-point landmark set, the square block grid over
//! the face image, the three horizontal facial-part bands, and the eleven
//! landmark-derived regions of interest.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Reference frame edge (pixels) the default ROI margin is defined at.
pub const REFERENCE_FRAME: usize = 224;
const REFERENCE_MARGIN: f64 = 8.0;

const FIXTURE: &str = include_str!("../assets/fixture_landmarks.txt");

/// Landmark index groups (standard 68-point ordering).
pub mod groups {
    use std::ops::Range;
    pub const JAW: Range<usize> = 0..17;
    pub const BROWS: Range<usize> = 17..27;
    pub const NOSE_BRIDGE: Range<usize> = 27..31;
    pub const NOSTRILS: Range<usize> = 31..36;
    pub const EYES: Range<usize> = 36..48;
    pub const LEFT_EYE: Range<usize> = 36..42;
    pub const RIGHT_EYE: Range<usize> = 42..48;
    pub const MOUTH: Range<usize> = 48..68;
}

/// 68 ordered `(x, y)` pixel coordinates in an `H x W` frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
    frame: (usize, usize),
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>, frame: (usize, usize)) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Validation(format!(
                "expected {NUM_LANDMARKS} landmarks, got {}",
                points.len()
            )));
        }
        let (h, w) = frame;
        for (i, &(x, y)) in points.iter().enumerate() {
            if !(x >= 0.0 && x < w as f64 && y >= 0.0 && y < h as f64) {
                return Err(Error::Validation(format!(
                    "landmark {i} at ({x}, {y}) lies outside the {h}x{w} frame"
                )));
            }
        }
        Ok(Self { points, frame })
    }

    /// The canonical template shipped with the crate, in a 224x224 frame.
    pub fn fixture() -> Self {
        let faces = parse_landmark_text(
            FIXTURE,
            (REFERENCE_FRAME, REFERENCE_FRAME),
            Path::new("fixture"),
        )
        .expect("embedded fixture parses");
        faces.into_iter().next().expect("fixture has one face").1
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        self.points[i]
    }

    /// `(height, width)` of the frame.
    pub fn frame(&self) -> (usize, usize) {
        self.frame
    }

    /// Rescale coordinates into a new frame size.
    pub fn rescaled(&self, frame: (usize, usize)) -> Result<Self> {
        let sy = frame.0 as f64 / self.frame.0 as f64;
        let sx = frame.1 as f64 / self.frame.1 as f64;
        Self::new(
            self.points.iter().map(|&(x, y)| (x * sx, y * sy)).collect(),
            frame,
        )
    }

    pub fn max_y(&self, idx: Range<usize>) -> f64 {
        self.points[idx]
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Half-open integer pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub const EMPTY: Rect = Rect {
        x0: 0,
        y0: 0,
        x1: 0,
        y1: 0,
    };

    pub fn new(x0: i64, y0: i64, x1: i64, y1: i64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn area(&self) -> i64 {
        if self.is_empty() {
            0
        } else {
            (self.x1 - self.x0) * (self.y1 - self.y0)
        }
    }

    pub fn intersect(&self, other: &Rect) -> Rect {
        let r = Rect {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        if r.is_empty() {
            Rect::EMPTY
        } else {
            r
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        !self.intersect(other).is_empty()
    }

    pub fn contains_point(&self, (x, y): (f64, f64)) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        other.is_empty()
            || (other.x0 >= self.x0
                && other.y0 >= self.y0
                && other.x1 <= self.x1
                && other.y1 <= self.y1)
    }
}

/// Square grid of `patch_size` blocks over an `image_size` face image,
/// ids assigned row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub image_size: usize,
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn new(image_size: usize, patch_size: usize) -> Result<Self> {
        if image_size == 0 || patch_size == 0 {
            return Err(Error::Config(
                "image and patch sizes must be positive".into(),
            ));
        }
        if image_size % patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {patch_size} does not divide image size {image_size}"
            )));
        }
        let n = image_size / patch_size;
        Ok(Self {
            image_size,
            patch_size,
            rows: n,
            cols: n,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols
    }

    pub fn block_rect(&self, id: usize) -> Rect {
        let p = self.patch_size as i64;
        let (r, c) = ((id / self.cols) as i64, (id % self.cols) as i64);
        Rect::new(c * p, r * p, (c + 1) * p, (r + 1) * p)
    }

    pub fn frame_rect(&self) -> Rect {
        let s = self.image_size as i64;
        Rect::new(0, 0, s, s)
    }

    /// Pixel rectangle covering block rows `rows`, full width.
    pub fn row_band_rect(&self, rows: Range<usize>) -> Rect {
        let p = self.patch_size as i64;
        Rect::new(
            0,
            rows.start as i64 * p,
            self.image_size as i64,
            rows.end as i64 * p,
        )
    }

    pub fn block_row(&self, id: usize) -> usize {
        id / self.cols
    }

    /// Block containing a pixel coordinate, if it lies in the image.
    pub fn block_at(&self, (x, y): (f64, f64)) -> Option<usize> {
        let s = self.image_size as f64;
        if !(x >= 0.0 && x < s && y >= 0.0 && y < s) {
            return None;
        }
        let p = self.patch_size as f64;
        Some((y / p) as usize * self.cols + (x / p) as usize)
    }
}

/// Ids of blocks whose pixel area intersects `region`.
pub fn blocks_intersecting(grid: &BlockGrid, region: &Rect) -> BTreeSet<usize> {
    let region = region.intersect(&grid.frame_rect());
    if region.is_empty() {
        return BTreeSet::new();
    }
    let p = grid.patch_size as i64;
    let (c0, c1) = (region.x0 / p, (region.x1 - 1) / p);
    let (r0, r1) = (region.y0 / p, (region.y1 - 1) / p);
    let mut out = BTreeSet::new();
    for r in r0..=r1 {
        for c in c0..=c1 {
            out.insert(r as usize * grid.cols + c as usize);
        }
    }
    out
}

/// The three facial parts masked by the recovery stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Part {
    /// M1: eyes and brows.
    Eyes,
    /// M2: nose and cheeks.
    NoseCheek,
    /// M3: lips, chin and jaw.
    Lips,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Eyes, Part::NoseCheek, Part::Lips];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Part> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Eyes => "eyes",
            Part::NoseCheek => "nose-cheek",
            Part::Lips => "lips",
        })
    }
}

impl std::str::FromStr for Part {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eyes" | "m1" | "M1" => Ok(Part::Eyes),
            "nose-cheek" | "m2" | "M2" => Ok(Part::NoseCheek),
            "lips" | "m3" | "M3" => Ok(Part::Lips),
            other => Err(Error::Config(format!("unknown facial part {other:?}"))),
        }
    }
}

/// Block-row boundaries splitting the grid into eyes / nose-cheek / lips.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBands {
    /// First row of the nose-cheek band.
    pub b1: usize,
    /// First row of the lips band.
    pub b2: usize,
    pub rows: usize,
}

impl PartBands {
    pub fn band(&self, part: Part) -> Range<usize> {
        match part {
            Part::Eyes => 0..self.b1,
            Part::NoseCheek => self.b1..self.b2,
            Part::Lips => self.b2..self.rows,
        }
    }

    pub fn part_of_row(&self, row: usize) -> Part {
        if row < self.b1 {
            Part::Eyes
        } else if row < self.b2 {
            Part::NoseCheek
        } else {
            Part::Lips
        }
    }

    pub fn band_blocks(&self, grid: &BlockGrid, part: Part) -> BTreeSet<usize> {
        let band = self.band(part);
        (band.start * grid.cols..band.end * grid.cols).collect()
    }
}

/// Split the grid at the rows just below the lowest eye landmark and the
/// lowest nostril landmark.
pub fn compute_part_bands(landmarks: &LandmarkSet, grid: &BlockGrid) -> Result<PartBands> {
    if landmarks.frame() != (grid.image_size, grid.image_size) {
        return Err(Error::Validation(format!(
            "landmark frame {:?} does not match the {}-pixel grid",
            landmarks.frame(),
            grid.image_size
        )));
    }
    if grid.rows < 3 {
        return Err(Error::Config(
            "the block grid needs at least three rows".into(),
        ));
    }
    let p = grid.patch_size as f64;
    let rows = grid.rows;
    let edge = |y: f64| (y / p).floor() as usize + 1;
    let mut b1 = edge(landmarks.max_y(groups::EYES)).min(rows - 2).max(1);
    let mut b2 = edge(landmarks.max_y(groups::NOSTRILS)).max(b1 + 1);
    if b2 > rows - 1 {
        b2 = rows - 1;
        b1 = b1.min(b2 - 1);
    }
    Ok(PartBands { b1, b2, rows })
}

/// Semantic labels of the eleven regions of interest, in R1..R11 order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoiLabel {
    EyebrowLeft,
    EyebrowRight,
    LowerEyelidLeft,
    LowerEyelidRight,
    NoseRoot,
    CheekLeft,
    CheekRight,
    MouthCornerLeft,
    MouthCornerRight,
    ChinSide,
    Chin,
}

/// Landmark subsets defining each ROI bounding box.
pub const ROI_SUBSETS: [(RoiLabel, &[usize]); 11] = [
    (RoiLabel::EyebrowLeft, &[17, 18, 19, 20, 21]),
    (RoiLabel::EyebrowRight, &[22, 23, 24, 25, 26]),
    (RoiLabel::LowerEyelidLeft, &[39, 40, 41]),
    (RoiLabel::LowerEyelidRight, &[45, 46, 47]),
    (RoiLabel::NoseRoot, &[27, 28]),
    (RoiLabel::CheekLeft, &[2, 3, 31]),
    (RoiLabel::CheekRight, &[13, 14, 35]),
    (RoiLabel::MouthCornerLeft, &[48]),
    (RoiLabel::MouthCornerRight, &[54]),
    (RoiLabel::ChinSide, &[4, 5, 6]),
    (RoiLabel::Chin, &[7, 8, 9]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub label: RoiLabel,
    pub rect: Rect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiSet {
    pub rois: Vec<Roi>,
    pub pad_margin: usize,
}

impl RoiSet {
    pub fn get(&self, label: RoiLabel) -> &Roi {
        self.rois
            .iter()
            .find(|r| r.label == label)
            .expect("all eleven labels present")
    }
}

/// Default ROI padding: 8 px at 224, scaled with the frame edge.
pub fn default_margin(frame_edge: usize) -> usize {
    (REFERENCE_MARGIN * frame_edge as f64 / REFERENCE_FRAME as f64).round() as usize
}

/// Bounding box of the landmark subset, padded and clipped to the frame.
pub fn subset_bbox(landmarks: &LandmarkSet, subset: &[usize], pad_margin: usize) -> Rect {
    let (h, w) = landmarks.frame();
    let m = pad_margin as i64;
    let xs = subset.iter().map(|&i| landmarks.point(i).0.floor() as i64);
    let ys = subset.iter().map(|&i| landmarks.point(i).1.floor() as i64);
    let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
    let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
    Rect::new(x0 - m, y0 - m, x1 + 1 + m, y1 + 1 + m)
        .intersect(&Rect::new(0, 0, w as i64, h as i64))
}

pub fn compute_rois(landmarks: &LandmarkSet, pad_margin: usize) -> RoiSet {
    let rois = ROI_SUBSETS
        .iter()
        .map(|&(label, subset)| Roi {
            label,
            rect: subset_bbox(landmarks, subset, pad_margin),
        })
        .collect();
    RoiSet { rois, pad_margin }
}

fn parse_landmark_text(
    text: &str,
    frame: (usize, usize),
    path: &Path,
) -> Result<Vec<(String, LandmarkSet)>> {
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let mut fields = line.split_whitespace();
        let frame_id = fields.next().unwrap_or_default().to_string();
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for pair in fields {
            let (x, y) = pair
                .split_once(',')
                .ok_or_else(|| perr(format!("expected x,y pair, got {pair:?}")))?;
            let x: f64 = x
                .parse()
                .map_err(|_| perr(format!("bad x coordinate {x:?}")))?;
            let y: f64 = y
                .parse()
                .map_err(|_| perr(format!("bad y coordinate {y:?}")))?;
            points.push((x, y));
        }
        let set = LandmarkSet::new(points, frame).map_err(|e| perr(e.to_string()))?;
        faces.push((frame_id, set));
    }
    Ok(faces)
}

/// Read a landmark file: one face per line, a frame identifier followed by
/// 68 `x,y` pairs. Blank lines and `#` comments are skipped.
pub fn load_landmark_file(
    path: &Path,
    frame: (usize, usize),
) -> Result<Vec<(String, LandmarkSet)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_landmark_text(&text, frame, path)
}

/// First face of a landmark file.
pub fn load_landmarks(path: &Path, frame: (usize, usize)) -> Result<LandmarkSet> {
    load_landmark_file(path, frame)?
        .into_iter()
        .next()
        .map(|(_, l)| l)
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no landmark lines".into(),
        })
}

pub fn format_landmark_line(frame_id: &str, landmarks: &LandmarkSet) -> String {
    let mut s = frame_id.to_string();
    for &(x, y) in landmarks.points() {
        s.push_str(&format!(" {x:.4},{y:.4}"));
    }
    s
}

pub fn write_landmark_file(path: &Path, faces: &[(String, LandmarkSet)]) -> Result<()> {
    let mut text = String::new();
    for (id, lm) in faces {
        text.push_str(&format_landmark_line(id, lm));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
