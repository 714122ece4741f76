//! Synthetic writers, marks and ballots.
//!
//! A mark is a filled bubble drawn as one continuous back-and-forth scribble.
//! Each writer fixes the pen width, the scribble direction (slant), how
//! tightly the passes are packed (fill density), a sinusoidal hand tremor
//! (wobble), and how far passes run past the printed outline (overshoot).
//! Individual marks perturb all of these slightly.
//!
//! Marks are drawn at ballot scale (bubble radius [`BUBBLE_RADIUS`] px) and
//! then passed through [`normalize_crop`] with the ink mask, exactly the path
//! a mark extracted from a ballot page takes, so training crops and deployed
//! crops share one geometry.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BBox, BitMask, GrayImage, MarkImage};
use crate::rng::{derive_seed, Rng};
use crate::segmentation::{normalize_crop, DEFAULT_CROP_SIZE};

pub const BUBBLE_RADIUS: f64 = 20.0;
/// Ballot grid pitch; each bubble owns the centred `BUBBLE_BOX` square.
pub const CELL_PITCH: usize = 80;
pub const BUBBLE_BOX: usize = 64;
pub const PAGE_MARGIN: usize = 40;
pub const INK_LEVEL: f64 = 0.08;
pub const OUTLINE_LEVEL: f64 = 0.75;
/// Lightest the page background speckle gets.
pub const PAPER_FLOOR: f64 = 0.85;

const MARK_CANVAS: usize = 72;
const TAG_STYLE: u64 = 0x5354_594c;
const TAG_STYLE_SEED: u64 = 0x5345_4544;
const TAG_BALLOT: u64 = 0x4241_4c4c;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WriterStyle {
    pub writer_id: u64,
    pub stroke_width_mean: f64,
    pub stroke_width_jitter: f64,
    /// Scribble direction in radians from horizontal, in `[-0.6, 0.6]`.
    pub slant: f64,
    /// In `[0.3, 1.0]`; 1.0 packs passes tightly enough to cover the bubble.
    pub fill_density: f64,
    pub wobble_amplitude: f64,
    /// Tremor cycles per bubble diameter.
    pub wobble_frequency: f64,
    /// Fraction of the bubble radius passes run past the outline, `[0, 0.3]`.
    pub overshoot: f64,
    pub seed: u64,
}

impl WriterStyle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.stroke_width_mean > 0.0
            && self.stroke_width_jitter >= 0.0
            && (-0.6..=0.6).contains(&self.slant)
            && (0.3..=1.0).contains(&self.fill_density)
            && self.wobble_amplitude >= 0.0
            && self.wobble_frequency > 0.0
            && (0.0..=0.3).contains(&self.overshoot);
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("writer style out of range: {self:?}")))
        }
    }
}

pub fn sample_writer(writer_id: u64, seed: u64) -> WriterStyle {
    let mut rng = Rng::new(derive_seed(derive_seed(seed, TAG_STYLE), writer_id));
    WriterStyle {
        writer_id,
        stroke_width_mean: rng.range(1.5, 4.5),
        stroke_width_jitter: rng.range(0.0, 0.5),
        slant: rng.range(-0.6, 0.6),
        fill_density: rng.range(0.3, 1.0),
        wobble_amplitude: rng.range(0.0, 2.5),
        wobble_frequency: rng.range(0.5, 4.0),
        overshoot: rng.range(0.0, 0.3),
        seed: derive_seed(derive_seed(seed, TAG_STYLE_SEED), writer_id),
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    ax: f64,
    ay: f64,
    bx: f64,
    by: f64,
    width: f64,
}

/// Lays out the scribble for one mark centred on `(cx, cy)`.
fn mark_segments(style: &WriterStyle, cx: f64, cy: f64, rng: &mut Rng) -> Vec<Segment> {
    let r = BUBBLE_RADIUS;
    let cx = cx + rng.gaussian(0.0, 0.8);
    let cy = cy + rng.gaussian(0.0, 0.8);
    let theta = style.slant + rng.gaussian(0.0, 0.04);
    let (dx, dy) = (theta.cos(), theta.sin());
    let (nx, ny) = (-dy, dx);
    // coverage grows with the square of density so dense styles still leave
    // visible gaps (and a readable slant) until fill_density nears 1
    let coverage = style.fill_density * style.fill_density;
    let spacing = style.stroke_width_mean / coverage * rng.range(0.97, 1.03);
    let phase = rng.range(0.0, TAU);
    let amp = style.wobble_amplitude;
    let omega = TAU * style.wobble_frequency / (2.0 * r);

    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let mut u = -r + 0.5 * style.stroke_width_mean + rng.range(0.0, 0.5 * spacing);
    let mut forward = true;
    while u <= r - 0.25 * style.stroke_width_mean {
        let width = style.stroke_width_mean;
        let chord = (r * r - u * u).max(0.0).sqrt();
        let reach_lo = (chord - 0.5 * width).max(0.0) + style.overshoot * r * rng.range(0.5, 1.0);
        let reach_hi = (chord - 0.5 * width).max(0.0) + style.overshoot * r * rng.range(0.5, 1.0);
        let steps = (((reach_lo + reach_hi) / 1.5).ceil() as usize).max(1);
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let f = if forward { f } else { 1.0 - f };
            let t = -reach_lo + f * (reach_lo + reach_hi);
            let wob = amp * (omega * t + phase).sin() + rng.gaussian(0.0, 0.1 * amp + 0.05);
            let off = u + wob;
            // pressure varies along the stroke
            let w = (width + rng.gaussian(0.0, style.stroke_width_jitter)).max(0.8);
            points.push((cx + t * dx + off * nx, cy + t * dy + off * ny, w));
        }
        forward = !forward;
        u += spacing;
    }
    points
        .windows(2)
        .map(|w| Segment {
            ax: w[0].0,
            ay: w[0].1,
            bx: w[1].0,
            by: w[1].1,
            width: w[1].2,
        })
        .collect()
}

/// Pen coverage in `[0, 1]` over `clip`, one value per pixel of `clip`.
fn rasterize(segments: &[Segment], clip: BBox) -> Vec<f64> {
    let (w, h) = (clip.width(), clip.height());
    let mut cov = vec![0.0f64; w * h];
    for s in segments {
        let half = 0.5 * s.width;
        let pad = half + 1.0;
        let lo_x = (s.ax.min(s.bx) - pad).floor().max(clip.x0 as f64) as usize;
        let hi_x = (s.ax.max(s.bx) + pad).ceil().min(clip.x1 as f64).max(lo_x as f64) as usize;
        let lo_y = (s.ay.min(s.by) - pad).floor().max(clip.y0 as f64) as usize;
        let hi_y = (s.ay.max(s.by) + pad).ceil().min(clip.y1 as f64).max(lo_y as f64) as usize;
        let (ex, ey) = (s.bx - s.ax, s.by - s.ay);
        let len2 = ex * ex + ey * ey;
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                let (px, py) = (x as f64 + 0.5 - s.ax, y as f64 + 0.5 - s.ay);
                let t = if len2 > 0.0 { ((px * ex + py * ey) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = ((px - t * ex).powi(2) + (py - t * ey).powi(2)).sqrt();
                let c = (half + 0.5 - d).clamp(0.0, 1.0);
                let i = (y - clip.y0) * w + (x - clip.x0);
                if c > cov[i] {
                    cov[i] = c;
                }
            }
        }
    }
    cov
}

/// Where the printed bubble lands in a rendered mark crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BubbleGeometry {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

/// Renders one mark at the default 64x64 encoder size.
pub fn render_mark(style: &WriterStyle, instance_seed: u64) -> MarkImage {
    render_mark_sized(style, instance_seed, DEFAULT_CROP_SIZE).0
}

pub fn render_mark_sized(style: &WriterStyle, instance_seed: u64, size: usize) -> (MarkImage, BubbleGeometry) {
    let mut rng = Rng::new(derive_seed(style.seed, instance_seed));
    let c = MARK_CANVAS as f64 / 2.0;
    let segments = mark_segments(style, c, c, &mut rng);
    let clip = BBox::new(0, 0, MARK_CANVAS, MARK_CANVAS);
    let cov = rasterize(&segments, clip);
    let mut canvas = GrayImage::new(MARK_CANVAS, MARK_CANVAS, 1.0);
    let mut mask = BitMask::new(MARK_CANVAS, MARK_CANVAS);
    for y in 0..MARK_CANVAS {
        for x in 0..MARK_CANVAS {
            let k = cov[y * MARK_CANVAS + x];
            if k > 0.0 {
                let ink = INK_LEVEL + rng.range(0.0, 0.05);
                let v = (1.0 - k) + k * ink;
                canvas.set(x, y, v);
                mask.set(x, y, v < 0.5);
            }
        }
    }
    let bbox = mask.bbox().unwrap_or(clip);
    if mask.is_empty() {
        mask = BitMask::from_bits(MARK_CANVAS, MARK_CANVAS, vec![true; MARK_CANVAS * MARK_CANVAS])
            .expect("canvas-sized mask");
    }
    let crop = normalize_crop(&canvas, &mask, bbox, size).expect("non-empty mask and valid box");
    let (gx, gy) = crop.transform.apply(c, c);
    let geometry = BubbleGeometry {
        center_x: gx,
        center_y: gy,
        radius: BUBBLE_RADIUS * crop.transform.scale,
    };
    let id = format!("w{}_{}", style.writer_id, instance_seed);
    (MarkImage::new(crop.image, id.clone(), id), geometry)
}

/// All marks of one synthetic writer.
#[derive(Debug, Clone, PartialEq)]
pub struct WriterGroup {
    pub writer_id: u64,
    pub marks: Vec<MarkImage>,
}

pub fn generate_dataset(num_writers: usize, marks_per_writer: usize, seed: u64) -> Result<Vec<WriterGroup>> {
    generate_dataset_sized(num_writers, marks_per_writer, seed, DEFAULT_CROP_SIZE)
}

pub fn generate_dataset_sized(
    num_writers: usize,
    marks_per_writer: usize,
    seed: u64,
    size: usize,
) -> Result<Vec<WriterGroup>> {
    if num_writers < 2 || marks_per_writer < 2 {
        return Err(Error::arg(format!(
            "need at least 2 writers with 2 marks each, got {num_writers}x{marks_per_writer}"
        )));
    }
    Ok((0..num_writers as u64)
        .map(|writer_id| {
            let style = sample_writer(writer_id, seed);
            let marks = (0..marks_per_writer as u64)
                .map(|k| {
                    let (mut m, _) = render_mark_sized(&style, k, size);
                    m.mark_id = format!("w{writer_id:04}_m{k:03}");
                    m.ballot_id = format!("b{writer_id:04}_{k:03}");
                    m
                })
                .collect();
            WriterGroup { writer_id, marks }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallotBubble {
    pub bbox: BBox,
    pub writer_id: u64,
    pub mark_id: String,
    /// Pixels at least half covered by ink, in full-page coordinates; a
    /// subset of `bbox`.
    pub mask: BitMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticBallot {
    pub ballot_id: String,
    pub image: GrayImage,
    pub bubbles: Vec<BallotBubble>,
    /// Every printed bubble square, filled or not, in grid order.
    pub grid: Vec<BBox>,
}

/// Renders a page with a `rows`x`cols` grid of printed bubbles, one bubble
/// filled per style at seeded positions.
pub fn render_ballot(styles: &[WriterStyle], rows: usize, cols: usize, seed: u64) -> Result<SyntheticBallot> {
    if rows == 0 || cols == 0 || rows * cols < styles.len() {
        return Err(Error::arg(format!(
            "{rows}x{cols} grid cannot hold {} marks",
            styles.len()
        )));
    }
    for s in styles {
        s.validate()?;
    }
    let width = cols * CELL_PITCH + 2 * PAGE_MARGIN;
    let height = rows * CELL_PITCH + 2 * PAGE_MARGIN;
    let mut rng = Rng::new(derive_seed(seed, TAG_BALLOT));
    let ballot_id = format!("ballot{seed}");

    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        pixels.push(1.0 - (1.0 - PAPER_FLOOR) * rng.uniform().powi(3));
    }
    let mut image = GrayImage::from_pixels(width, height, pixels)?;

    let centre = |cell: usize| -> (f64, f64) {
        let (r, c) = (cell / cols, cell % cols);
        (
            (PAGE_MARGIN + c * CELL_PITCH + CELL_PITCH / 2) as f64,
            (PAGE_MARGIN + r * CELL_PITCH + CELL_PITCH / 2) as f64,
        )
    };
    let cell_box = |cell: usize| -> BBox {
        let (cx, cy) = centre(cell);
        let half = BUBBLE_BOX / 2;
        let (cx, cy) = (cx as usize, cy as usize);
        BBox::new(cx - half, cy - half, cx + half, cy + half)
    };

    let grid: Vec<BBox> = (0..rows * cols).map(cell_box).collect();
    for cell in 0..rows * cols {
        let (cx, cy) = centre(cell);
        let b = grid[cell];
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if (d - BUBBLE_RADIUS).abs() <= 0.5 {
                    image.set(x, y, image.get(x, y).min(OUTLINE_LEVEL));
                }
            }
        }
    }

    let cells = rng.sample_indices(rows * cols, styles.len());
    let mut bubbles = Vec::with_capacity(styles.len());
    for (i, (style, &cell)) in styles.iter().zip(&cells).enumerate() {
        let (cx, cy) = centre(cell);
        let bbox = grid[cell];
        let mut mark_rng = Rng::new(derive_seed(style.seed, derive_seed(seed, i as u64)));
        let segments = mark_segments(style, cx, cy, &mut mark_rng);
        let cov = rasterize(&segments, bbox);
        let mut mask = BitMask::new(width, height);
        for y in bbox.y0..bbox.y1 {
            for x in bbox.x0..bbox.x1 {
                let k = cov[(y - bbox.y0) * bbox.width() + (x - bbox.x0)];
                if k > 0.0 {
                    let ink = INK_LEVEL + mark_rng.range(0.0, 0.05);
                    let v = image.get(x, y) * (1.0 - k) + k * ink;
                    image.set(x, y, v);
                    // ground truth: ink covers at least half the pixel
                    mask.set(x, y, k >= 0.5);
                }
            }
        }
        bubbles.push(BallotBubble {
            bbox,
            writer_id: style.writer_id,
            mark_id: format!("{ballot_id}_m{i}"),
            mask,
        });
    }
    Ok(SyntheticBallot {
        ballot_id,
        image,
        bubbles,
        grid,
    })
}

/// One line of an annotation sidecar: `mark_id ballot_id x0 y0 x1 y1 writer_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub mark_id: String,
    pub ballot_id: String,
    pub bbox: BBox,
    pub writer_id: u64,
}

impl Annotation {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {} {} {}",
            self.mark_id, self.ballot_id, self.bbox.x0, self.bbox.y0, self.bbox.x1, self.bbox.y1, self.writer_id
        )
    }
}

pub fn parse_annotations(text: &str) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::parse(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| Error::parse(i + 1, format!("bad integer {s:?}")))
        };
        out.push(Annotation {
            mark_id: f[0].to_string(),
            ballot_id: f[1].to_string(),
            bbox: BBox::new(num(f[2])? as usize, num(f[3])? as usize, num(f[4])? as usize, num(f[5])? as usize),
            writer_id: num(f[6])?,
        });
    }
    Ok(out)
}

pub const ANNOTATION_FILE: &str = "annotations.txt";

/// Writes `<mark_id>.pgm` per mark plus an annotation sidecar.
pub fn write_dataset(dir: impl AsRef<Path>, groups: &[WriterGroup]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut sidecar = String::new();
    for g in groups {
        for m in &g.marks {
            m.image.write_pgm(dir.join(format!("{}.pgm", m.mark_id)))?;
            let a = Annotation {
                mark_id: m.mark_id.clone(),
                ballot_id: m.ballot_id.clone(),
                bbox: BBox::new(0, 0, m.width(), m.height()),
                writer_id: g.writer_id,
            };
            sidecar.push_str(&a.to_line());
            sidecar.push('\n');
        }
    }
    fs::write(dir.join(ANNOTATION_FILE), sidecar)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`], grouping marks by writer
/// in order of first appearance.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<WriterGroup>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(ANNOTATION_FILE))?;
    let mut groups: Vec<WriterGroup> = Vec::new();
    for a in parse_annotations(&text)? {
        let image = GrayImage::read_pgm(dir.join(format!("{}.pgm", a.mark_id)))?;
        let mark = MarkImage::new(image, a.mark_id, a.ballot_id);
        match groups.iter_mut().find(|g| g.writer_id == a.writer_id) {
            Some(g) => g.marks.push(mark),
            None => groups.push(WriterGroup {
                writer_id: a.writer_id,
                marks: vec![mark],
            }),
        }
    }
    Ok(groups)
}
