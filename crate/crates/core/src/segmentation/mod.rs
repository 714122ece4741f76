//! Prompt-based mark extraction from a ballot page.
//!
//! The segmenter is classical: a global Otsu threshold separates ink from
//! paper, 8-connected components group the ink, and a point or box prompt
//! selects components. Anything that can produce a [`MaskSegment`] from an
//! image and a [`SegmentPrompt`] can replace it; callers only see
//! [`segment`].

pub mod rle;

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::raster::{BBox, BitMask, GrayImage, MarkImage};

/// Default encoder input size for crops.
pub const DEFAULT_CROP_SIZE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SegmentPrompt {
    Point { x: usize, y: usize },
    /// Half-open box `x0..x1` by `y0..y1`.
    Box { x0: usize, y0: usize, x1: usize, y1: usize },
}

impl SegmentPrompt {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        match *self {
            SegmentPrompt::Point { x, y } => {
                if x >= width || y >= height {
                    return Err(Error::arg(format!(
                        "point ({x}, {y}) outside {width}x{height} image"
                    )));
                }
            }
            SegmentPrompt::Box { x0, y0, x1, y1 } => {
                if x0 >= x1 || y0 >= y1 {
                    return Err(Error::arg("box prompt needs x0 < x1 and y0 < y1"));
                }
                if x1 > width || y1 > height {
                    return Err(Error::arg(format!(
                        "box ({x0}, {y0}, {x1}, {y1}) outside {width}x{height} image"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parses `point:x,y` or `box:x0,y0,x1,y1`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| Error::arg(format!("prompt {s:?} must look like point:x,y or box:x0,y0,x1,y1")))?;
        let nums: Vec<usize> = rest
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::arg(format!("bad prompt coordinates in {s:?}")))?;
        match (kind, nums.as_slice()) {
            ("point", &[x, y]) => Ok(SegmentPrompt::Point { x, y }),
            ("box", &[x0, y0, x1, y1]) => Ok(SegmentPrompt::Box { x0, y0, x1, y1 }),
            _ => Err(Error::arg(format!("unrecognised prompt {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSegment {
    /// Full-image coordinates.
    pub mask: BitMask,
    /// Tight box around `mask`.
    pub bbox: BBox,
    pub crop: MarkImage,
    pub source_ballot: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentOptions {
    /// Components with fewer pixels are treated as noise.
    pub noise_floor: usize,
    /// How far a point prompt may snap to reach ink.
    pub snap_radius: f64,
    pub crop_size: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        SegmentOptions {
            noise_floor: 10,
            snap_radius: 5.0,
            crop_size: DEFAULT_CROP_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Binarization {
    pub ink: BitMask,
    /// Highest 8-bit bin classified as ink, `None` for a single-valued
    /// histogram.
    pub threshold_bin: Option<u8>,
}

fn bin_of(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Otsu threshold over a 256-bin histogram; ink is every pixel whose bin is
/// at or below the selected bin.
pub fn binarize(image: &GrayImage) -> Result<Binarization> {
    if image.is_empty() {
        return Err(Error::arg("cannot binarize an empty image"));
    }
    let mut hist = [0u64; 256];
    for &v in image.pixels() {
        hist[bin_of(v)] += 1;
    }
    let total = image.pixels().len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best: Option<(usize, f64)> = None;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for (t, &count) in hist.iter().enumerate() {
        w0 += count as f64;
        sum0 += t as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 {
            continue;
        }
        if w1 == 0.0 {
            break;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t, between));
        }
    }

    let mut ink = BitMask::new(image.width(), image.height());
    let threshold_bin = best.map(|(t, _)| t as u8);
    if let Some(t) = threshold_bin {
        for y in 0..image.height() {
            for x in 0..image.width() {
                if bin_of(image.get(x, y)) <= t as usize {
                    ink.set(x, y, true);
                }
            }
        }
    }
    Ok(Binarization { ink, threshold_bin })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentStats {
    /// 1-based label.
    pub label: u32,
    pub pixel_count: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Components {
    pub width: usize,
    pub height: usize,
    /// Row-major labels; 0 is background.
    pub labels: Vec<u32>,
    /// Indexed by `label - 1`, labels assigned in raster order of each
    /// component's first pixel.
    pub stats: Vec<ComponentStats>,
}

impl Components {
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn stats_for(&self, label: u32) -> &ComponentStats {
        &self.stats[label as usize - 1]
    }
}

/// 8-connected component labeling.
pub fn connected_components(mask: &BitMask) -> Components {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut stats = Vec::new();
    let mut queue = VecDeque::new();
    for sy in 0..h {
        for sx in 0..w {
            if !mask.get(sx, sy) || labels[sy * w + sx] != 0 {
                continue;
            }
            let label = stats.len() as u32 + 1;
            let mut count = 0;
            let mut bb = BBox::new(sx, sy, sx + 1, sy + 1);
            labels[sy * w + sx] = label;
            queue.push_back((sx, sy));
            while let Some((x, y)) = queue.pop_front() {
                count += 1;
                bb = bb.union(&BBox::new(x, y, x + 1, y + 1));
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let i = ny * w + nx;
                        if mask.get(nx, ny) && labels[i] == 0 {
                            labels[i] = label;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            stats.push(ComponentStats {
                label,
                pixel_count: count,
                bbox: bb,
            });
        }
    }
    Components {
        width: w,
        height: h,
        labels,
        stats,
    }
}

/// Extracts the mark selected by `prompt`.
pub fn segment(
    image: &GrayImage,
    prompt: SegmentPrompt,
    source_ballot: &str,
    opts: &SegmentOptions,
) -> Result<MaskSegment> {
    prompt.validate(image.width(), image.height())?;
    let ink = binarize(image)?.ink;
    let comps = connected_components(&ink);
    let qualifies = |label: u32| label != 0 && comps.stats_for(label).pixel_count >= opts.noise_floor;

    let selected: Vec<u32> = match prompt {
        SegmentPrompt::Point { x, y } => {
            let here = comps.label_at(x, y);
            if qualifies(here) {
                vec![here]
            } else {
                nearest_component(&comps, x, y, opts.snap_radius, &qualifies)
                    .into_iter()
                    .collect()
            }
        }
        SegmentPrompt::Box { x0, y0, x1, y1 } => {
            let b = BBox::new(x0, y0, x1, y1);
            let mut inside = vec![0usize; comps.stats.len()];
            for y in y0..y1 {
                for x in x0..x1 {
                    let l = comps.label_at(x, y);
                    if l != 0 {
                        inside[l as usize - 1] += 1;
                    }
                }
            }
            comps
                .stats
                .iter()
                .filter(|s| s.bbox.intersects(&b))
                .filter(|s| qualifies(s.label) && 2 * inside[s.label as usize - 1] > s.pixel_count)
                .map(|s| s.label)
                .collect()
        }
    };
    if selected.is_empty() {
        return Err(Error::NoMarkFound);
    }

    let mut mask = BitMask::new(image.width(), image.height());
    for (i, &l) in comps.labels.iter().enumerate() {
        if l != 0 && selected.contains(&l) {
            mask.set(i % image.width(), i / image.width(), true);
        }
    }
    let bbox = selected
        .iter()
        .map(|&l| comps.stats_for(l).bbox)
        .reduce(|a, b| a.union(&b))
        .expect("non-empty selection");
    let crop = normalize_crop(image, &mask, bbox, opts.crop_size)?;
    Ok(MaskSegment {
        mask,
        bbox,
        crop: MarkImage::new(crop.image, "", source_ballot),
        source_ballot: source_ballot.to_string(),
    })
}

fn nearest_component(
    comps: &Components,
    px: usize,
    py: usize,
    radius: f64,
    qualifies: &dyn Fn(u32) -> bool,
) -> Option<u32> {
    let r = radius.floor() as usize;
    let mut best: Option<(usize, u32)> = None;
    for y in py.saturating_sub(r)..=(py + r).min(comps.height - 1) {
        for x in px.saturating_sub(r)..=(px + r).min(comps.width - 1) {
            let d2 = x.abs_diff(px).pow(2) + y.abs_diff(py).pow(2);
            if d2 as f64 > radius * radius {
                continue;
            }
            let l = comps.label_at(x, y);
            // raster order breaks distance ties
            if qualifies(l) && best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, l));
            }
        }
    }
    best.map(|(_, l)| l)
}

/// Maps full-image coordinates into a normalized crop:
/// `out = (image_coord - origin) * scale`, pixel centres at `+0.5`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub scale: f64,
}

impl CropTransform {
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.origin_x) * self.scale, (y - self.origin_y) * self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCrop {
    pub image: GrayImage,
    pub transform: CropTransform,
}

/// Crops `bbox` plus a 10% margin, whitens pixels outside `mask`, pads to a
/// square with white and resamples bilinearly to `size`x`size`.
pub fn normalize_crop(image: &GrayImage, mask: &BitMask, bbox: BBox, size: usize) -> Result<NormalizedCrop> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(Error::arg("mask and image dimensions differ"));
    }
    if mask.is_empty() {
        return Err(Error::arg("cannot crop an empty mask"));
    }
    if size == 0 {
        return Err(Error::arg("crop size must be positive"));
    }
    if bbox.x0 >= bbox.x1 || bbox.y0 >= bbox.y1 || bbox.x1 > image.width() || bbox.y1 > image.height() {
        return Err(Error::arg("crop box outside image"));
    }
    let mx = (0.1 * bbox.width() as f64).round() as usize;
    let my = (0.1 * bbox.height() as f64).round() as usize;
    let cx0 = bbox.x0.saturating_sub(mx);
    let cy0 = bbox.y0.saturating_sub(my);
    let cx1 = (bbox.x1 + mx).min(image.width());
    let cy1 = (bbox.y1 + my).min(image.height());
    let (cw, ch) = (cx1 - cx0, cy1 - cy0);
    let side = cw.max(ch);
    let pad_x = (side - cw) as f64 / 2.0;
    let pad_y = (side - ch) as f64 / 2.0;

    // sample the padded square at continuous coords with pixel centres on integers
    let sample = |sx: f64, sy: f64| -> f64 {
        let px = |x: i64, y: i64| -> f64 {
            let ix = x as f64 - pad_x;
            let iy = y as f64 - pad_y;
            // padding offsets may be half-integers; round to the covering pixel
            let ix = ix.round();
            let iy = iy.round();
            if ix < 0.0 || iy < 0.0 || ix >= cw as f64 || iy >= ch as f64 {
                return 1.0;
            }
            let (gx, gy) = (cx0 + ix as usize, cy0 + iy as usize);
            if mask.get(gx, gy) {
                image.get(gx, gy)
            } else {
                1.0
            }
        };
        let max = (side - 1) as f64;
        let sx = sx.clamp(0.0, max);
        let sy = sy.clamp(0.0, max);
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let x1 = (x0 + 1).min(side as i64 - 1);
        let y1 = (y0 + 1).min(side as i64 - 1);
        let top = px(x0, y0) * (1.0 - fx) + px(x1, y0) * fx;
        let bottom = px(x0, y1) * (1.0 - fx) + px(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    };

    let ratio = side as f64 / size as f64;
    let mut out = GrayImage::new(size, size, 1.0);
    for oy in 0..size {
        for ox in 0..size {
            let sx = (ox as f64 + 0.5) * ratio - 0.5;
            let sy = (oy as f64 + 0.5) * ratio - 0.5;
            out.set(ox, oy, sample(sx, sy).clamp(0.0, 1.0));
        }
    }
    Ok(NormalizedCrop {
        image: out,
        transform: CropTransform {
            origin_x: cx0 as f64 - pad_x,
            origin_y: cy0 as f64 - pad_y,
            scale: 1.0 / ratio,
        },
    })
}
