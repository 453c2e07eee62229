//! Independent raster oracle for shape scenes.
//!
//! Decodes a PNG, splits every non-white colour into 8-connected components
//! and classifies each component from its bounding box alone: tall glyphs are
//! digits, otherwise the fill ratio separates square (1.0), circle (~pi/4),
//! triangle (~1/2) and star (~0.4). Nothing here calls the renderer.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Star,
    Digit,
}

/// Palette as documented for the scene format (palette id -> RGB).
pub const PALETTE_RGB: [[u8; 3]; 6] = [
    [220, 40, 40],
    [40, 160, 60],
    [40, 80, 220],
    [240, 150, 20],
    [140, 60, 180],
    [20, 170, 170],
];

pub fn classify(width: u32, height: u32, area: u32) -> ShapeClass {
    let aspect = f64::from(width.min(height)) / f64::from(width.max(height));
    if aspect < 0.75 {
        return ShapeClass::Digit;
    }
    let fill = f64::from(area) / f64::from(width * height);
    if fill > 0.95 {
        ShapeClass::Square
    } else if fill >= 0.65 {
        ShapeClass::Circle
    } else if fill >= 0.47 {
        ShapeClass::Triangle
    } else {
        ShapeClass::Star
    }
}

/// Count connected components per (class, colour).
pub fn count_components(png: &[u8]) -> BTreeMap<(ShapeClass, [u8; 3]), u32> {
    let img = image::load_from_memory(png).expect("decodable png").to_rgb8();
    let (w, h) = img.dimensions();
    let mut seen = vec![false; (w * h) as usize];
    let mut out = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) as usize;
            let color = img.get_pixel(x, y).0;
            if seen[idx] || color == [255, 255, 255] {
                continue;
            }
            let (mut x0, mut x1, mut y0, mut y1, mut area) = (x, x, y, y, 0u32);
            let mut queue = VecDeque::from([(x, y)]);
            seen[idx] = true;
            while let Some((cx, cy)) = queue.pop_front() {
                area += 1;
                x0 = x0.min(cx);
                x1 = x1.max(cx);
                y0 = y0.min(cy);
                y1 = y1.max(cy);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (i64::from(cx) + dx, i64::from(cy) + dy);
                        if nx < 0 || ny < 0 || nx >= i64::from(w) || ny >= i64::from(h) {
                            continue;
                        }
                        let (nx, ny) = (nx as u32, ny as u32);
                        let nidx = (ny * w + nx) as usize;
                        if !seen[nidx] && img.get_pixel(nx, ny).0 == color {
                            seen[nidx] = true;
                            queue.push_back((nx, ny));
                        }
                    }
                }
            }
            let class = classify(x1 - x0 + 1, y1 - y0 + 1, area);
            *out.entry((class, color)).or_insert(0) += 1;
        }
    }
    out
}

/// Expected component counts from a ledger in its JSON form.
pub fn ledger_tally(ledger: &serde_json::Value) -> BTreeMap<(ShapeClass, [u8; 3]), u32> {
    let mut out = BTreeMap::new();
    for e in ledger["entries"].as_array().expect("entries array") {
        let class = match &e["kind"] {
            serde_json::Value::String(s) => match s.as_str() {
                "circle" => ShapeClass::Circle,
                "square" => ShapeClass::Square,
                "triangle" => ShapeClass::Triangle,
                "star" => ShapeClass::Star,
                other => panic!("unknown kind {other}"),
            },
            serde_json::Value::Object(m) if m.contains_key("digit") => ShapeClass::Digit,
            other => panic!("unknown kind {other}"),
        };
        let color = PALETTE_RGB[e["color"].as_u64().expect("color id") as usize];
        let count = e["count"].as_u64().expect("count") as u32;
        if count > 0 {
            *out.entry((class, color)).or_insert(0) += count;
        }
    }
    out
}
