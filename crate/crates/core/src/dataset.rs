//! Synthetic dataset assembly, clip storage and manifests.
//!
//! On disk a dataset is a directory holding `manifest.tsv` and one
//! directory per clip with `frame_NNN.png` files and a `landmarks.txt`
//! listing one landmark line per frame.

use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clip::{FaceClip, Label, PRISTINE};
use crate::error::{Error, Result};
use crate::geometry::{load_landmark_file, write_landmark_file, Part};
use crate::seeds::{self, stream};
use crate::synth::{
    generate_fake_clip, generate_identity, generate_real_clip, ForgerySpec, SpliceShape,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub frames: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub test_real: usize,
    pub test_fake: usize,
    pub shapes: Vec<SpliceShape>,
    /// Largest seam feather, in pixels at 64 px.
    pub max_blend_width: f64,
    /// Range of region sizes relative to the face half-width.
    pub region_size: (f64, f64),
    /// Largest donor misregistration, in pixels at 64 px.
    pub max_misalign: f64,
    /// Per-frame donor wobble, in pixels at 64 px.
    pub flicker: f64,
    /// Checkerboard amplitude on spliced pixels.
    pub fingerprint: f64,
    /// Checkerboard cell side, in pixels at 64 px.
    pub fingerprint_cell: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            frames: 8,
            train_real: 200,
            train_fake: 100,
            test_real: 50,
            test_fake: 50,
            shapes: SpliceShape::ALL.to_vec(),
            max_blend_width: 3.0,
            region_size: (0.5, 0.8),
            max_misalign: 2.0,
            flicker: 0.5,
            fingerprint: 0.08,
            fingerprint_cell: 4.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |m: &str| Err(Error::Config(m.into()));
        if self.image_size < 16 || self.frames == 0 {
            return c("image size must be at least 16 and frames positive");
        }
        if self.shapes.is_empty() && self.train_fake + self.test_fake > 0 {
            return c("fake clips need at least one splice shape");
        }
        if (self.train_fake > 0 && self.train_real == 0)
            || (self.test_fake > 0 && self.test_real == 0)
        {
            return c("fake clips are built on pristine clips of the same split");
        }
        let (lo, hi) = self.region_size;
        if !(0.0 <= lo && lo <= hi) || !(self.max_blend_width >= 0.0) {
            return c("region size range and blend width must be non-negative and ordered");
        }
        if !(self.max_misalign >= 0.0)
            || !(self.flicker >= 0.0)
            || !(0.0..=0.5).contains(&self.fingerprint)
        {
            return c(
                "misalignment and flicker must be non-negative and the fingerprint within [0, 0.5]",
            );
        }
        if !(self.fingerprint_cell > 0.0) {
            return c("fingerprint cell must be positive");
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.train_real + self.train_fake + self.test_real + self.test_fake
    }
}

/// A generated clip with its bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub clip: FaceClip,
    pub split: Split,
    /// Pristine counterpart of a fake.
    pub source: Option<String>,
}

#[derive(Clone, Debug)]
enum Job {
    Real {
        n: usize,
        split: Split,
    },
    Fake {
        n: usize,
        target: usize,
        split: Split,
        k: usize,
    },
}

fn clip_name(n: usize) -> String {
    format!("clip{n:05}")
}

/// Generate every clip of the dataset in memory, in manifest order.
pub fn generate_clips(cfg: &DatasetConfig) -> Result<Vec<GeneratedClip>> {
    cfg.validate()?;
    let mut jobs = Vec::with_capacity(cfg.total());
    let mut n = 0;
    let mut add_split = |real: usize, fake: usize, split: Split, jobs: &mut Vec<Job>, k0: usize| {
        let first = n;
        for _ in 0..real {
            jobs.push(Job::Real { n, split });
            n += 1;
        }
        let mut pick = seeds::rng(cfg.seed, &[stream::FORGERY, split as u64]);
        for k in 0..fake {
            let target = if fake <= real {
                first + k
            } else {
                first + pick.random_range(0..real)
            };
            jobs.push(Job::Fake {
                n,
                target,
                split,
                k: k0 + k,
            });
            n += 1;
        }
    };
    add_split(cfg.train_real, cfg.train_fake, Split::Train, &mut jobs, 0);
    add_split(
        cfg.test_real,
        cfg.test_fake,
        Split::Test,
        &mut jobs,
        cfg.train_fake,
    );
    let size = cfg.image_size;
    let scale = size as f64 / 64.0;
    jobs.par_iter()
        .map(|job| match *job {
            Job::Real { n, split } => {
                let id =
                    generate_identity(seeds::derive(cfg.seed, &[stream::IDENTITY, n as u64]), size);
                let clip = generate_real_clip(
                    &id,
                    &clip_name(n),
                    cfg.frames,
                    seeds::derive(cfg.seed, &[stream::REAL, n as u64]),
                )?;
                Ok(GeneratedClip {
                    clip,
                    split,
                    source: None,
                })
            }
            Job::Fake {
                n,
                target,
                split,
                k,
            } => {
                let mut rng = seeds::rng(cfg.seed, &[stream::FORGERY, 100, k as u64]);
                let donor_seed = seeds::derive(cfg.seed, &[stream::IDENTITY, 1 << 32, k as u64]);
                let spec = ForgerySpec {
                    shape: cfg.shapes[k % cfg.shapes.len()],
                    blend_width: rng.random_range(0.0..=cfg.max_blend_width) * scale,
                    donor_seed,
                    anchor: Part::from_index(rng.random_range(0..3)).expect("three parts"),
                    size: rng.random_range(cfg.region_size.0..=cfg.region_size.1),
                    misalign: {
                        let (r, a) = (
                            rng.random_range(0.5..=1.0) * cfg.max_misalign * scale,
                            rng.random_range(0.0..TAU),
                        );
                        (r * a.cos(), r * a.sin())
                    },
                    flicker: cfg.flicker * scale,
                    fingerprint: cfg.fingerprint,
                    fingerprint_cell: ((cfg.fingerprint_cell * scale).round() as usize).max(1),
                };
                let target_id = generate_identity(
                    seeds::derive(cfg.seed, &[stream::IDENTITY, target as u64]),
                    size,
                );
                let donor = generate_identity(donor_seed, size);
                let real_seed = seeds::derive(cfg.seed, &[stream::REAL, target as u64]);
                let (clip, _) = generate_fake_clip(
                    &target_id,
                    &donor,
                    &spec,
                    &clip_name(n),
                    cfg.frames,
                    real_seed,
                )?;
                Ok(GeneratedClip {
                    clip,
                    split,
                    source: Some(clip_name(target)),
                })
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Clip directory, relative to the manifest.
    pub path: String,
    pub label: Label,
    pub manipulation: String,
    pub landmarks: String,
    pub split: Split,
    pub source: Option<String>,
}

impl ManifestEntry {
    pub fn id(&self) -> &str {
        self.path.rsplit('/').next().unwrap_or(&self.path)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClipManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

const HEADER: &str = "path\tlabel\tmanipulation\tlandmarks\tsplit\tsource";

impl ClipManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("# maskmap manifest\n# seed={}\n{HEADER}\n", self.seed);
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path,
                e.label,
                e.manipulation,
                e.landmarks,
                e.split,
                e.source.as_deref().unwrap_or("-")
            ));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut m = ClipManifest {
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            ..Default::default()
        };
        for (i, line) in text.lines().enumerate() {
            let no = i + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    m.seed = v
                        .trim()
                        .parse()
                        .map_err(|_| err(no, format!("bad seed {v:?}")))?;
                }
                continue;
            }
            if line.trim().is_empty() || line == HEADER {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(err(
                    no,
                    format!("expected 6 tab-separated columns, found {}", cols.len()),
                ));
            }
            let label: Label = cols[1]
                .parse()
                .map_err(|_| err(no, format!("bad label {:?}", cols[1])))?;
            let split: Split = cols[4]
                .parse()
                .map_err(|_| err(no, format!("bad split {:?}", cols[4])))?;
            if label == Label::Real && cols[2] != PRISTINE {
                return Err(err(
                    no,
                    format!("real clip with manipulation {:?}", cols[2]),
                ));
            }
            m.entries.push(ManifestEntry {
                path: cols[0].to_string(),
                label,
                manipulation: cols[2].to_string(),
                landmarks: cols[3].to_string(),
                split,
                source: (cols[5] != "-").then(|| cols[5].to_string()),
            });
        }
        Ok(m)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

pub fn load_manifest(path: &Path) -> Result<ClipManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ClipManifest::parse(&text, path)
}

pub fn write_manifest(path: &Path, manifest: &ClipManifest) -> Result<()> {
    crate::checkpoint::write_atomic(path, manifest.to_text().as_bytes())
}

fn frame_name(t: usize) -> String {
    format!("frame_{t:03}")
}

/// Store a clip as lossless 8-bit PNG frames plus its landmark file.
pub fn save_clip(dir: &Path, clip: &FaceClip) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for t in 0..clip.frames {
        let bytes: Vec<u8> = clip
            .frame(t)
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(clip.width as u32, clip.height as u32, bytes)
            .expect("frame buffer size");
        let path = dir.join(format!("{}.png", frame_name(t)));
        img.save_with_format(&path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path, source: e })?;
    }
    let faces: Vec<_> = clip
        .landmarks
        .iter()
        .enumerate()
        .map(|(t, l)| (frame_name(t), l.clone()))
        .collect();
    write_landmark_file(&dir.join("landmarks.txt"), &faces)
}

/// Load the clip described by a manifest entry.
pub fn load_clip(manifest: &ClipManifest, entry: &ManifestEntry) -> Result<FaceClip> {
    let dir = manifest.resolve(&entry.path);
    let lm_path = manifest.resolve(&entry.landmarks);
    let mut frames = Vec::new();
    let mut data = Vec::new();
    let mut size = None;
    for t in 0.. {
        let path = dir.join(format!("{}.png", frame_name(t)));
        if !path.exists() {
            break;
        }
        let img = image::open(&path)
            .map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?
            .to_rgb8();
        let dims = (img.height() as usize, img.width() as usize);
        if *size.get_or_insert(dims) != dims {
            return Err(Error::Validation(format!(
                "{} has a different size from earlier frames",
                path.display()
            )));
        }
        data.extend(img.as_raw().iter().map(|&b| b as f64 / 255.0));
        frames.push(t);
    }
    let (h, w) =
        size.ok_or_else(|| Error::Validation(format!("no frames found in {}", dir.display())))?;
    let faces = load_landmark_file(&lm_path, (h, w))?;
    let landmarks = faces.into_iter().map(|(_, l)| l).collect();
    FaceClip::new(
        entry.id(),
        entry.label,
        entry.manipulation.clone(),
        (frames.len(), h, w),
        data,
        landmarks,
    )
}

/// Generate the dataset described by `cfg` and write it under `out`.
pub fn write_dataset(cfg: &DatasetConfig, out: &Path) -> Result<ClipManifest> {
    let clips = generate_clips(cfg)?;
    let clip_root = out.join("clips");
    fs::create_dir_all(&clip_root).map_err(|e| Error::io(&clip_root, e))?;
    clips
        .par_iter()
        .map(|g| save_clip(&clip_root.join(&g.clip.id), &g.clip))
        .collect::<Result<Vec<()>>>()?;
    let manifest = ClipManifest {
        seed: cfg.seed,
        base_dir: out.to_path_buf(),
        entries: clips
            .iter()
            .map(|g| ManifestEntry {
                path: format!("clips/{}", g.clip.id),
                label: g.clip.label,
                manipulation: g.clip.manipulation.clone(),
                landmarks: format!("clips/{}/landmarks.txt", g.clip.id),
                split: g.split,
                source: g.source.clone(),
            })
            .collect(),
    };
    write_manifest(&out.join("manifest.tsv"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            seed: 4,
            image_size: 32,
            frames: 2,
            train_real: 3,
            train_fake: 4,
            test_real: 2,
            test_fake: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_counts_and_pairing() {
        let clips = generate_clips(&small()).unwrap();
        assert_eq!(clips.len(), 11);
        assert_eq!(clips, generate_clips(&small()).unwrap());
        for g in clips.iter().filter(|g| g.clip.label == Label::Fake) {
            let src = g.source.as_ref().unwrap();
            let real = clips.iter().find(|r| &r.clip.id == src).unwrap();
            assert_eq!(real.split, g.split);
            assert_eq!(real.clip.label, Label::Real);
        }
        let types: std::collections::BTreeSet<_> =
            clips.iter().map(|g| g.clip.manipulation.clone()).collect();
        assert_eq!(types.len(), 5);
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&small(), dir.path()).unwrap();
        let back = load_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back, m);
        let mem = generate_clips(&small()).unwrap();
        for (e, g) in back.entries.iter().zip(&mem) {
            assert_eq!(load_clip(&back, e).unwrap(), g.clip);
        }
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let p = Path::new("m.tsv");
        let empty = ClipManifest::parse("", p).unwrap();
        assert!(empty.entries.is_empty());
        let bad = format!("# seed=1\n{HEADER}\nclips/a\treal\tnone\n");
        assert!(matches!(
            ClipManifest::parse(&bad, p),
            Err(Error::Parse { line: 3, .. })
        ));
        let bad = format!("{HEADER}\nclips/a\tmaybe\tnone\tx\ttrain\t-\n");
        assert!(matches!(
            ClipManifest::parse(&bad, p),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(load_manifest(Path::new("/nonexistent/manifest.tsv")).is_err());
    }
}
