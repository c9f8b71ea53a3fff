//! Diagnostic images: mask overlays and similarity histograms.

use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::geometry::{BlockGrid, LandmarkSet, Rect, RoiSet};
use crate::masking::MaskPlan;
use crate::metrics::SimilarityDistribution;

const SHADE: [u8; 3] = [220, 40, 40];
const SIGNED: [u8; 3] = [240, 200, 40];
const ROI: [u8; 3] = [40, 200, 80];
const LANDMARK: [u8; 3] = [30, 90, 230];

fn blend(p: &mut Rgb<u8>, c: [u8; 3], a: u16) {
    for (v, &t) in p.0.iter_mut().zip(&c) {
        *v = ((*v as u16 * (256 - a) + t as u16 * a) >> 8) as u8;
    }
}

fn outline(img: &mut RgbImage, r: &Rect, c: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let r = r.intersect(&Rect::new(0, 0, w, h));
    if r.is_empty() {
        return;
    }
    for x in r.x0..r.x1 {
        img.put_pixel(x as u32, r.y0 as u32, Rgb(c));
        img.put_pixel(x as u32, (r.y1 - 1) as u32, Rgb(c));
    }
    for y in r.y0..r.y1 {
        img.put_pixel(r.x0 as u32, y as u32, Rgb(c));
        img.put_pixel((r.x1 - 1) as u32, y as u32, Rgb(c));
    }
}

/// Neutral backdrop with the landmarks drawn, for previews without a frame.
pub fn landmark_canvas(landmarks: &LandmarkSet) -> RgbImage {
    let (h, w) = landmarks.frame();
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([128, 128, 128]));
    for &(x, y) in landmarks.points() {
        let (x, y) = (
            x.floor().clamp(0.0, w as f64 - 1.0),
            y.floor().clamp(0.0, h as f64 - 1.0),
        );
        img.put_pixel(x as u32, y as u32, Rgb(LANDMARK));
    }
    img
}

/// Shade the masked blocks of `plan` over `base`, tint signed-but-visible
/// blocks, and outline the ROI rectangles.
pub fn mask_overlay(
    base: &RgbImage,
    grid: &BlockGrid,
    plan: &MaskPlan,
    rois: &RoiSet,
) -> Result<RgbImage> {
    if base.width() as usize != grid.image_size || base.height() as usize != grid.image_size {
        return Err(Error::Validation(format!(
            "preview image is {}x{}, grid expects {}",
            base.width(),
            base.height(),
            grid.image_size
        )));
    }
    let mut img = base.clone();
    for b in 0..grid.num_blocks() {
        let (color, alpha) = if plan.masked_blocks.contains(&b) {
            (SHADE, 160)
        } else if plan.signed_blocks.contains(&b) {
            (SIGNED, 64)
        } else {
            continue;
        };
        let r = grid.block_rect(b);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                blend(img.get_pixel_mut(x as u32, y as u32), color, alpha);
            }
        }
    }
    for roi in &rois.rois {
        outline(&mut img, &roi.rect, ROI);
    }
    Ok(img)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8())
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("in-memory PNG encoding");
    out.into_inner()
}

/// Bar chart of the two class histograms (real blue, fake red, shared purple).
pub fn histogram_chart(dist: &SimilarityDistribution) -> RgbImage {
    let bins = dist.real_hist.len();
    let (bar, height) = (12u32, 120u32);
    let mut img = RgbImage::from_pixel(bins as u32 * bar, height, Rgb([255, 255, 255]));
    let nr: u64 = dist.real_hist.iter().sum::<u64>().max(1);
    let nf: u64 = dist.fake_hist.iter().sum::<u64>().max(1);
    let mass: Vec<(f64, f64)> = dist
        .real_hist
        .iter()
        .zip(&dist.fake_hist)
        .map(|(&r, &f)| (r as f64 / nr as f64, f as f64 / nf as f64))
        .collect();
    let top = mass
        .iter()
        .map(|&(r, f)| r.max(f))
        .fold(0.0, f64::max)
        .max(1e-12);
    for (i, &(r, f)) in mass.iter().enumerate() {
        let hr = (r / top * (height - 1) as f64).round() as u32;
        let hf = (f / top * (height - 1) as f64).round() as u32;
        for x in i as u32 * bar + 1..(i as u32 + 1) * bar - 1 {
            for k in 0..hr.max(hf) {
                let c = match (k < hr, k < hf) {
                    (true, true) => [140, 60, 170],
                    (true, false) => [50, 90, 220],
                    _ => [220, 60, 50],
                };
                img.put_pixel(x, height - 1 - k, Rgb(c));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compute_rois;
    use crate::masking::{plan_mask, MaskConfig};

    #[test]
    fn overlay_marks_exactly_the_masked_blocks() {
        let lm = LandmarkSet::fixture();
        let grid = BlockGrid::new(224, 16).unwrap();
        let plan = plan_mask(&lm, &grid, &MaskConfig::default(), 3).unwrap();
        let base = RgbImage::from_pixel(224, 224, Rgb([128, 128, 128]));
        let img = mask_overlay(&base, &grid, &plan, &compute_rois(&lm, 8)).unwrap();
        let mut shaded = Rgb([128, 128, 128]);
        blend(&mut shaded, SHADE, 160);
        for b in 0..grid.num_blocks() {
            let r = grid.block_rect(b);
            let n = (r.y0..r.y1)
                .flat_map(|y| (r.x0..r.x1).map(move |x| (x, y)))
                .filter(|&(x, y)| *img.get_pixel(x as u32, y as u32) == shaded)
                .count();
            assert_eq!(n > 128, plan.masked_blocks.contains(&b), "block {b}");
        }
        assert_eq!(
            png_bytes(&img),
            png_bytes(&mask_overlay(&base, &grid, &plan, &compute_rois(&lm, 8)).unwrap())
        );
    }
}
