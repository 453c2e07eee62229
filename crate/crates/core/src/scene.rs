//! Synthetic shape scenes with an exact object ledger.
//!
//! Scenes are flat-colour shapes on a white background. Within one image each
//! object kind gets its own palette colour, and no two objects come closer
//! than the sum of their bounding radii plus two pixels, so every object is a
//! separate connected component of a single colour.

use std::io::Cursor;

use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub const PALETTE: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 160, 60],
    [40, 80, 220],
    [240, 150, 20],
    [140, 60, 180],
    [20, 170, 170],
];
pub const PALETTE_NAMES: [&str; 6] = ["red", "green", "blue", "orange", "purple", "teal"];
pub const BACKGROUND: [u8; 3] = [255, 255, 255];

/// Minimum gap between the bounding discs of two objects.
pub const MIN_GAP_PX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Circle,
    Square,
    Triangle,
    Star,
    /// A seven-segment glyph; counted like any other object.
    Digit(u8),
}

impl ObjectKind {
    pub const SHAPES: [ObjectKind; 4] = [
        ObjectKind::Circle,
        ObjectKind::Square,
        ObjectKind::Triangle,
        ObjectKind::Star,
    ];

    pub fn plural(self) -> String {
        match self {
            ObjectKind::Circle => "circles".into(),
            ObjectKind::Square => "squares".into(),
            ObjectKind::Triangle => "triangles".into(),
            ObjectKind::Star => "stars".into(),
            ObjectKind::Digit(d) => format!("digit-{d} glyphs"),
        }
    }

    pub fn name(self) -> String {
        match self {
            ObjectKind::Circle => "circle".into(),
            ObjectKind::Square => "square".into(),
            ObjectKind::Triangle => "triangle".into(),
            ObjectKind::Star => "star".into(),
            ObjectKind::Digit(d) => format!("digit-{d}"),
        }
    }

    /// Radius of a disc around the centre that contains the whole shape.
    pub fn bounding_radius(self, size: u32) -> f64 {
        let s = f64::from(size);
        match self {
            ObjectKind::Circle | ObjectKind::Star => s,
            ObjectKind::Square | ObjectKind::Triangle => s * std::f64::consts::SQRT_2,
            ObjectKind::Digit(_) => s * 1.25f64.sqrt(),
        }
    }

    fn covers(self, size: u32, dx: f64, dy: f64) -> bool {
        let s = f64::from(size);
        match self {
            ObjectKind::Circle => dx * dx + dy * dy <= s * s,
            ObjectKind::Square => dx.abs() <= s && dy.abs() <= s,
            // Apex up, base on the bottom edge of the 2s x 2s box.
            ObjectKind::Triangle => dy <= s && dy >= -s && dx.abs() <= (dy + s) / 2.0,
            ObjectKind::Star => point_in_polygon(dx, dy, &star_vertices(s)),
            ObjectKind::Digit(d) => digit_segments(d, s).iter().any(|r| r.contains(dx, dy)),
        }
    }
}

fn star_vertices(outer: f64) -> Vec<(f64, f64)> {
    let inner = outer * 0.45;
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { outer } else { inner };
            let theta = -std::f64::consts::FRAC_PI_2 + f64::from(i) * std::f64::consts::PI / 5.0;
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

// Segment order: a (top), b (upper right), c (lower right), d (bottom),
// e (lower left), f (upper left), g (middle).
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn digit_segments(digit: u8, s: f64) -> Vec<Rect> {
    let (hw, hh) = (s / 2.0, s);
    let t = (s / 4.0).max(3.0);
    let all = [
        Rect { x0: -hw, x1: hw, y0: -hh, y1: -hh + t },
        Rect { x0: hw - t, x1: hw, y0: -hh, y1: t / 2.0 },
        Rect { x0: hw - t, x1: hw, y0: -t / 2.0, y1: hh },
        Rect { x0: -hw, x1: hw, y0: hh - t, y1: hh },
        Rect { x0: -hw, x1: -hw + t, y0: -t / 2.0, y1: hh },
        Rect { x0: -hw, x1: -hw + t, y0: -hh, y1: t / 2.0 },
        Rect { x0: -hw, x1: hw, y0: -t / 2.0, y1: t / 2.0 },
    ];
    SEGMENTS[usize::from(digit % 10)]
        .iter()
        .zip(all)
        .filter_map(|(on, r)| on.then_some(r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub kind: ObjectKind,
    /// Index into [`PALETTE`].
    pub color: u8,
    pub count: u32,
    pub positions: Vec<(u32, u32)>,
    /// Radius (circle, star) or half-extent (square, triangle, digit height) in pixels.
    pub size: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLedger {
    pub entries: Vec<LedgerEntry>,
}

impl SceneLedger {
    pub fn count_of(&self, kind: ObjectKind) -> u32 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.count).sum()
    }

    pub fn kinds(&self) -> impl Iterator<Item = ObjectKind> + '_ {
        self.entries.iter().map(|e| e.kind)
    }

    pub fn total_objects(&self) -> u32 {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn validate(&self, canvas: (u32, u32)) -> Result<(), String> {
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        for e in &self.entries {
            if e.count as usize != e.positions.len() {
                return Err(format!("{} count {} != {} positions", e.kind.name(), e.count, e.positions.len()));
            }
            if usize::from(e.color) >= PALETTE.len() {
                return Err(format!("palette id {} out of range", e.color));
            }
            if let ObjectKind::Digit(d) = e.kind {
                if d > 9 {
                    return Err(format!("digit {d} out of range"));
                }
            }
            let r = e.kind.bounding_radius(e.size);
            for &(x, y) in &e.positions {
                let (x, y) = (f64::from(x), f64::from(y));
                if x - r < 0.0 || y - r < 0.0 || x + r > f64::from(canvas.0 - 1) || y + r > f64::from(canvas.1 - 1) {
                    return Err(format!("{} at ({x},{y}) leaves the canvas", e.kind.name()));
                }
                for &(px, py, pr) in &placed {
                    if ((x - px).powi(2) + (y - py).powi(2)).sqrt() < r + pr + MIN_GAP_PX {
                        return Err(format!("{} at ({x},{y}) overlaps another object", e.kind.name()));
                    }
                }
                placed.push((x, y, r));
            }
        }
        let mut colors: Vec<u8> = self.entries.iter().map(|e| e.color).collect();
        colors.sort_unstable();
        colors.dedup();
        if colors.len() != self.entries.len() {
            return Err("two entries share a colour".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct L2Config {
    pub canvas: (u32, u32),
    pub num_images: usize,
    /// Inclusive bounds on objects drawn per image.
    pub objects_per_image: (u32, u32),
    /// Inclusive bounds on how many images an arithmetic question spans.
    pub num_question_images: (usize, usize),
    /// Inclusive bounds on object size in pixels.
    pub object_size: (u32, u32),
    pub max_placement_attempts: u32,
}

impl Default for L2Config {
    fn default() -> Self {
        Self {
            canvas: (256, 256),
            num_images: 4,
            objects_per_image: (1, 6),
            num_question_images: (2, 3),
            object_size: (10, 24),
            max_placement_attempts: 200,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("invalid L2 config: {0}")]
    Config(String),
    #[error("could not place object {placed} of {total} after {attempts} attempts")]
    Placement { placed: usize, total: usize, attempts: u32 },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

impl L2Config {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::Config(m));
        if !(2..=crate::types::MAX_IMAGES).contains(&self.num_images) {
            return bad(format!("num_images {} outside 2..=6", self.num_images));
        }
        let (qlo, qhi) = self.num_question_images;
        if qlo < 2 || qlo > qhi || qhi > self.num_images {
            return bad(format!("num_question_images {qlo}..={qhi} must lie in 2..={}", self.num_images));
        }
        let (olo, ohi) = self.objects_per_image;
        if olo > ohi {
            return bad(format!("objects_per_image {olo}..={ohi} is empty"));
        }
        let (slo, shi) = self.object_size;
        if slo == 0 || slo > shi {
            return bad(format!("object_size {slo}..={shi} is empty"));
        }
        if self.max_placement_attempts == 0 {
            return bad("max_placement_attempts must be positive".into());
        }
        // Area bound: the worst-case bounding discs (plus gap) must fill at most
        // half the canvas, and one such disc must fit at all.
        let worst = ObjectKind::Square.bounding_radius(shi) + MIN_GAP_PX / 2.0;
        let (w, h) = (f64::from(self.canvas.0), f64::from(self.canvas.1));
        if 2.0 * worst >= w.min(h) {
            return bad(format!("canvas {}x{} too small for size {shi}", self.canvas.0, self.canvas.1));
        }
        let needed = f64::from(ohi) * std::f64::consts::PI * worst * worst;
        if needed > 0.5 * w * h {
            return bad(format!(
                "{ohi} objects of size {shi} cannot be guaranteed to fit a {}x{} canvas",
                self.canvas.0, self.canvas.1
            ));
        }
        Ok(())
    }
}

/// Draw a random scene; returns the PNG bytes and the exact ledger.
pub fn synth_scene(cfg: &L2Config, rng: &mut Rng) -> Result<(Vec<u8>, SceneLedger), SceneError> {
    cfg.validate()?;
    let n = rng.range_inclusive(cfg.objects_per_image.0, cfg.objects_per_image.1) as usize;
    let mut ledger = SceneLedger::default();
    if n > 0 {
        let kinds_here = rng.range_inclusive(1, n.min(3) as u32) as usize;
        let mut candidates: Vec<ObjectKind> = ObjectKind::SHAPES.to_vec();
        candidates.push(ObjectKind::Digit(rng.below(10) as u8));
        let kinds: Vec<ObjectKind> = rng
            .sample_indices(candidates.len(), kinds_here)
            .into_iter()
            .map(|i| candidates[i])
            .collect();
        let colors = rng.sample_indices(PALETTE.len(), kinds_here);
        let mut counts = vec![1usize; kinds_here];
        for _ in kinds_here..n {
            counts[rng.index(kinds_here)] += 1;
        }
        let mut placed: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
        for ((kind, color), count) in kinds.into_iter().zip(colors).zip(counts) {
            let size = rng.range_inclusive(cfg.object_size.0, cfg.object_size.1);
            let radius = kind.bounding_radius(size);
            let mut positions = Vec::with_capacity(count);
            for _ in 0..count {
                let pos = place(cfg, rng, radius, &placed).ok_or(SceneError::Placement {
                    placed: placed.len(),
                    total: n,
                    attempts: cfg.max_placement_attempts,
                })?;
                placed.push((f64::from(pos.0), f64::from(pos.1), radius));
                positions.push(pos);
            }
            ledger.entries.push(LedgerEntry {
                kind,
                color: color as u8,
                count: count as u32,
                positions,
                size,
            });
        }
    }
    let png = render_png(cfg.canvas, &ledger)?;
    Ok((png, ledger))
}

fn place(cfg: &L2Config, rng: &mut Rng, radius: f64, placed: &[(f64, f64, f64)]) -> Option<(u32, u32)> {
    let lo = radius.ceil() as u32;
    let hi_x = (f64::from(cfg.canvas.0 - 1) - radius).floor() as u32;
    let hi_y = (f64::from(cfg.canvas.1 - 1) - radius).floor() as u32;
    if lo > hi_x || lo > hi_y {
        return None;
    }
    for _ in 0..cfg.max_placement_attempts {
        let x = rng.range_inclusive(lo, hi_x);
        let y = rng.range_inclusive(lo, hi_y);
        let (fx, fy) = (f64::from(x), f64::from(y));
        let clear = placed
            .iter()
            .all(|&(px, py, pr)| ((fx - px).powi(2) + (fy - py).powi(2)).sqrt() >= radius + pr + MIN_GAP_PX);
        if clear {
            return Some((x, y));
        }
    }
    None
}

pub fn render(canvas: (u32, u32), ledger: &SceneLedger) -> RgbImage {
    let mut img = RgbImage::from_pixel(canvas.0, canvas.1, Rgb(BACKGROUND));
    for e in &ledger.entries {
        let color = Rgb(PALETTE[usize::from(e.color)]);
        let r = e.kind.bounding_radius(e.size).ceil() as i64;
        for &(cx, cy) in &e.positions {
            let (cx, cy) = (i64::from(cx), i64::from(cy));
            for y in (cy - r).max(0)..=(cy + r).min(i64::from(canvas.1) - 1) {
                for x in (cx - r).max(0)..=(cx + r).min(i64::from(canvas.0) - 1) {
                    if e.kind.covers(e.size, (x - cx) as f64, (y - cy) as f64) {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    img
}

pub fn render_png(canvas: (u32, u32), ledger: &SceneLedger) -> Result<Vec<u8>, SceneError> {
    encode_png(&render(canvas, ledger))
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>, SceneError> {
    let mut buf = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| SceneError::Encode(e.to_string()))?;
    Ok(buf.into_inner())
}
