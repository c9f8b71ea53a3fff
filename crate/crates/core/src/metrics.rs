//! Score fusion, AUC / EER, and the similarity-distribution analysis.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::Label;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Histogram bins used for the similarity distributions.
pub const DEFAULT_BINS: usize = 20;

pub fn fuse_scores(recovery: f64, mapping: f64) -> f64 {
    (recovery + mapping) / 2.0
}

fn class_counts(scores: &[f64], labels: &[Label]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("score {s} is not finite")));
    }
    let fakes = labels.iter().filter(|&&l| l == Label::Fake).count();
    let reals = labels.len() - fakes;
    if fakes == 0 || reals == 0 {
        return Err(Error::Validation(
            "AUC and EER need both real and fake samples".into(),
        ));
    }
    Ok((reals, fakes))
}

/// Probability that a random fake outscores a random real, ties counting
/// one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (nr, nf) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut rank2_fakes: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] == Label::Fake {
                rank2_fakes += mid2;
            }
        }
        i = j + 1;
    }
    let (nr, nf) = (nr as u128, nf as u128);
    let u2 = rank2_fakes - nf * (nf + 1);
    Ok(u2 as f64 / (2 * nr * nf) as f64)
}

/// Equal error rate. Operating points are taken at every cut between
/// consecutive distinct scores (scores at or above the cut are called fake);
/// the false-positive and false-negative curves are linearly interpolated
/// between adjacent points to find where they cross.
pub fn eer(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (nr, nf) = class_counts(scores, labels)?;
    let mut pairs: Vec<(f64, Label)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut below_real, mut below_fake) = (0usize, 0usize);
    let mut prev = (1.0f64, 0.0f64);
    let mut i = 0;
    loop {
        let point = (
            1.0 - below_real as f64 / nr as f64,
            below_fake as f64 / nf as f64,
        );
        let d = point.0 - point.1;
        if d == 0.0 {
            return Ok(point.0);
        }
        if d < 0.0 {
            let dp = prev.0 - prev.1;
            let lambda = dp / (dp - d);
            return Ok(prev.0 + lambda * (point.0 - prev.0));
        }
        prev = point;
        if i == pairs.len() {
            unreachable!("the last operating point has no false positives");
        }
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            match pairs[i].1 {
                Label::Real => below_real += 1,
                Label::Fake => below_fake += 1,
            }
            i += 1;
        }
    }
}

/// `1 / (1 + RMS)` of the element-wise difference of two equally shaped images.
pub fn similarity_score(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Validation(format!(
            "similarity of shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.len() == 0 {
        return Ok(1.0);
    }
    let ss: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(1.0 / (1.0 + (ss / a.len() as f64).sqrt()))
}

/// Bin counts over `[0, 1]`; values outside are clamped to the end bins.
pub fn histogram(values: &[f64], bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    h
}

/// Shared mass of two normalised histograms over `[0, 1]`.
pub fn histogram_overlap(real: &[f64], fake: &[f64], bins: usize) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Validation(
            "histogram overlap needs two non-empty populations".into(),
        ));
    }
    if bins < 2 {
        return Err(Error::Validation(
            "histogram overlap needs at least two bins".into(),
        ));
    }
    let (hr, hf) = (histogram(real, bins), histogram(fake, bins));
    let (nr, nf) = (real.len() as f64, fake.len() as f64);
    Ok(hr
        .iter()
        .zip(&hf)
        .map(|(&a, &b)| (a as f64 / nr).min(b as f64 / nf))
        .sum())
}

/// Min-max rescale both populations with the range of their union.
pub fn minmax_pooled(real: &[f64], fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let all = real.iter().chain(fake);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let f = |v: &f64| if span > 0.0 { (v - lo) / span } else { 0.0 };
    (real.iter().map(f).collect(), fake.iter().map(f).collect())
}

/// Overlap of the two similarity distributions after pooled min-max
/// normalisation.
pub fn similarity_overlap(real: &[f64], fake: &[f64], bins: usize) -> Result<f64> {
    let (r, f) = minmax_pooled(real, fake);
    histogram_overlap(&r, &f, bins)
}

/// Per-clip evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub label: Label,
    pub recovery: f64,
    pub mapping: f64,
    pub fused: f64,
    /// Mean similarity of recovered frames to the original frames.
    pub sim_recovered: f64,
    /// Mean similarity of maps to the original frames in map space.
    pub sim_mapped: f64,
}

impl ScoreRecord {
    pub fn new(
        id: String,
        label: Label,
        recovery: f64,
        mapping: f64,
        sim_recovered: f64,
        sim_mapped: f64,
    ) -> Self {
        Self {
            id,
            label,
            recovery,
            mapping,
            fused: fuse_scores(recovery, mapping),
            sim_recovered,
            sim_mapped,
        }
    }
}

const SCORE_HEADER: &str =
    "clip_id\tlabel\trecovery_score\tmapping_score\tfused_score\tsim_recovered\tsim_mapped";

pub fn format_scores(records: &[ScoreRecord]) -> String {
    let mut out = String::from(SCORE_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            r.id, r.label, r.recovery, r.mapping, r.fused, r.sim_recovered, r.sim_mapped
        )
        .unwrap();
    }
    out
}

pub fn parse_scores(text: &str, path: &Path) -> Result<Vec<ScoreRecord>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line == SCORE_HEADER {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 7 {
            return Err(err(
                line_no,
                format!("expected 7 columns, found {}", cols.len()),
            ));
        }
        let label: Label = cols[1]
            .parse()
            .map_err(|_| err(line_no, format!("bad label {:?}", cols[1])))?;
        let mut nums = [0.0; 5];
        for (k, c) in cols[2..].iter().enumerate() {
            nums[k] = c
                .parse()
                .map_err(|_| err(line_no, format!("bad number {c:?}")))?;
        }
        out.push(ScoreRecord {
            id: cols[0].to_string(),
            label,
            recovery: nums[0],
            mapping: nums[1],
            fused: nums[2],
            sim_recovered: nums[3],
            sim_mapped: nums[4],
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    crate::checkpoint::write_atomic(path, format_scores(records).as_bytes())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scores(&text, path)
}

/// Similarity distribution of one comparison for both classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistribution {
    pub real_mean: f64,
    pub fake_mean: f64,
    /// Histograms of the pooled min-max normalised similarities.
    pub real_hist: Vec<u64>,
    pub fake_hist: Vec<u64>,
    pub overlap: f64,
}

impl SimilarityDistribution {
    pub fn new(real: &[f64], fake: &[f64], bins: usize) -> Result<Self> {
        let (r, f) = minmax_pooled(real, fake);
        Ok(Self {
            real_mean: mean(real),
            fake_mean: mean(fake),
            real_hist: histogram(&r, bins),
            fake_hist: histogram(&f, bins),
            overlap: histogram_overlap(&r, &f, bins)?,
        })
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_real: usize,
    pub n_fake: usize,
    pub auc_recovery: f64,
    pub auc_mapping: f64,
    pub auc: f64,
    pub eer_recovery: f64,
    pub eer_mapping: f64,
    pub eer: f64,
    pub recovered: SimilarityDistribution,
    pub mapped: SimilarityDistribution,
}

impl EvalReport {
    pub fn from_scores(records: &[ScoreRecord], bins: usize) -> Result<Self> {
        let labels: Vec<Label> = records.iter().map(|r| r.label).collect();
        let col = |f: fn(&ScoreRecord) -> f64| records.iter().map(f).collect::<Vec<f64>>();
        let by_class = |f: fn(&ScoreRecord) -> f64, l: Label| {
            records
                .iter()
                .filter(|r| r.label == l)
                .map(f)
                .collect::<Vec<f64>>()
        };
        let (rec, map, fused) = (col(|r| r.recovery), col(|r| r.mapping), col(|r| r.fused));
        Ok(Self {
            n_real: labels.iter().filter(|&&l| l == Label::Real).count(),
            n_fake: labels.iter().filter(|&&l| l == Label::Fake).count(),
            auc_recovery: auc(&rec, &labels)?,
            auc_mapping: auc(&map, &labels)?,
            auc: auc(&fused, &labels)?,
            eer_recovery: eer(&rec, &labels)?,
            eer_mapping: eer(&map, &labels)?,
            eer: eer(&fused, &labels)?,
            recovered: SimilarityDistribution::new(
                &by_class(|r| r.sim_recovered, Label::Real),
                &by_class(|r| r.sim_recovered, Label::Fake),
                bins,
            )?,
            mapped: SimilarityDistribution::new(
                &by_class(|r| r.sim_mapped, Label::Real),
                &by_class(|r| r.sim_mapped, Label::Fake),
                bins,
            )?,
        })
    }

    /// Human-readable summary followed by a `key=value` block.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "evaluated {} real and {} fake clips",
            self.n_real, self.n_fake
        )
        .unwrap();
        writeln!(
            s,
            "fused     AUC {:6.2}%  EER {:6.2}%",
            100.0 * self.auc,
            100.0 * self.eer
        )
        .unwrap();
        writeln!(
            s,
            "recovery  AUC {:6.2}%  EER {:6.2}%",
            100.0 * self.auc_recovery,
            100.0 * self.eer_recovery
        )
        .unwrap();
        writeln!(
            s,
            "mapping   AUC {:6.2}%  EER {:6.2}%",
            100.0 * self.auc_mapping,
            100.0 * self.eer_mapping
        )
        .unwrap();
        for (name, d) in [("recovered", &self.recovered), ("mapped", &self.mapped)] {
            writeln!(
                s,
                "{name:<9} similarity: real mean {:.4}, fake mean {:.4}, overlap {:.4}",
                d.real_mean, d.fake_mean, d.overlap
            )
            .unwrap();
        }
        s.push_str("\n[metrics]\n");
        for (k, v) in self.key_values() {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }

    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_real", self.n_real.to_string()),
            ("n_fake", self.n_fake.to_string()),
            ("auc", format!("{:?}", self.auc)),
            ("eer", format!("{:?}", self.eer)),
            ("auc_recovery", format!("{:?}", self.auc_recovery)),
            ("eer_recovery", format!("{:?}", self.eer_recovery)),
            ("auc_mapping", format!("{:?}", self.auc_mapping)),
            ("eer_mapping", format!("{:?}", self.eer_mapping)),
            (
                "sim_recovered_real_mean",
                format!("{:?}", self.recovered.real_mean),
            ),
            (
                "sim_recovered_fake_mean",
                format!("{:?}", self.recovered.fake_mean),
            ),
            ("overlap_recovered", format!("{:?}", self.recovered.overlap)),
            (
                "sim_mapped_real_mean",
                format!("{:?}", self.mapped.real_mean),
            ),
            (
                "sim_mapped_fake_mean",
                format!("{:?}", self.mapped.fake_mean),
            ),
            ("overlap_mapped", format!("{:?}", self.mapped.overlap)),
        ]
    }
}

/// Read the `key=value` block of a report.
pub fn parse_report_values(text: &str) -> Vec<(String, String)> {
    text.lines()
        .skip_while(|l| l.trim() != "[metrics]")
        .skip(1)
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect()
}
