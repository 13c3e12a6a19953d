//! Letterbox geometry and ground-truth concept masks drawn from keypoints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Part, PersonAnnotation, Side, SizeEstimate};

/// Stroke width as a fraction of the body height (or of the image side when
/// the body height is unknown).
pub const STROKE_FRACTION: f64 = 0.025;

/// Body-part concepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Concept {
    Leg,
    Arm,
    Foot,
    Hand,
    Eye,
}

impl Concept {
    pub const ALL: [Concept; 5] = [
        Concept::Leg,
        Concept::Arm,
        Concept::Foot,
        Concept::Hand,
        Concept::Eye,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Concept::Leg => "leg",
            Concept::Arm => "arm",
            Concept::Foot => "foot",
            Concept::Hand => "hand",
            Concept::Eye => "eye",
        }
    }

    /// Keypoints whose presence makes the concept drawable.
    fn primitives(self) -> Primitives {
        match self {
            Concept::Leg => Primitives::Chain([Part::Hip, Part::Knee, Part::Ankle]),
            Concept::Arm => Primitives::Chain([Part::Shoulder, Part::Elbow, Part::Wrist]),
            // Feet and hands are approximated by ankles and wrists.
            Concept::Foot => Primitives::Point(Part::Ankle),
            Concept::Hand => Primitives::Point(Part::Wrist),
            Concept::Eye => Primitives::Point(Part::Eye),
        }
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Concept {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Concept::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown concept `{s}`")))
    }
}

enum Primitives {
    Chain([Part; 3]),
    Point(Part),
}

/// Zero-pad to a centered square, then resize to `target_side`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub target_side: usize,
}

pub fn letterbox(orig_w: u32, orig_h: u32, target_side: usize) -> Result<LetterboxTransform> {
    if orig_w == 0 || orig_h == 0 || target_side == 0 {
        return Err(Error::Domain(format!(
            "letterbox of {orig_w}×{orig_h} to {target_side} needs positive sizes"
        )));
    }
    let square = f64::from(orig_w.max(orig_h));
    Ok(LetterboxTransform {
        scale: target_side as f64 / square,
        pad_x: (square - f64::from(orig_w)) / 2.0,
        pad_y: (square - f64::from(orig_h)) / 2.0,
        target_side,
    })
}

impl LetterboxTransform {
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        ((x + self.pad_x) * self.scale, (y + self.pad_y) * self.scale)
    }
}

/// Binary grid, row-major, one byte (0 or 1) per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![0; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}×{height} mask needs {} values, got {}",
                width * height,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Format("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| usize::from(b)).sum()
    }

    /// Pixel-wise OR with a mask of the same size.
    pub fn union_with(&mut self, other: &BinaryMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Shape(format!(
                "cannot merge {}×{} mask into {}×{}",
                other.width, other.height, self.width, self.height
            )));
        }
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Binary PGM (P5, maxval 255; 255 marks the concept).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.bits.iter().map(|&b| if b != 0 { 255 } else { 0 }));
        out
    }

    /// Parses a P5 PGM; any non-zero gray value counts as set.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        if fields[0] != "P5" {
            return Err(Error::Format(format!("unsupported PGM magic `{}`", fields[0])));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
        };
        let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
        }
        let raster = bytes.get(pos..).unwrap_or(&[]);
        if raster.len() != width * height {
            return Err(Error::Format(format!(
                "PGM raster has {} bytes, expected {}",
                raster.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits: raster.iter().map(|&v| u8::from(v != 0)).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pgm(&bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub concept: Concept,
    pub mask: BinaryMask,
}

/// Stroke width in letterboxed pixels.
pub fn stroke_width(size: &SizeEstimate, t: &LetterboxTransform) -> f64 {
    match size.height_px {
        Some(h) => STROKE_FRACTION * h * t.scale,
        None => STROKE_FRACTION * t.target_side as f64,
    }
}

/// Sets every pixel whose center lies within `radius` of segment `a`–`b`.
/// A degenerate segment draws a disk.
pub fn draw_capsule(mask: &mut BinaryMask, a: (f64, f64), b: (f64, f64), radius: f64) {
    if !(radius > 0.0) {
        return;
    }
    let (w, h) = (mask.width as f64, mask.height as f64);
    let clamp = |v: f64, hi: f64| v.max(0.0).min(hi) as usize;
    let x0 = clamp((a.0.min(b.0) - radius - 1.0).floor(), w);
    let x1 = clamp((a.0.max(b.0) + radius + 1.0).ceil(), w);
    let y0 = clamp((a.1.min(b.1) - radius - 1.0).floor(), h);
    let y1 = clamp((a.1.max(b.1) + radius + 1.0).ceil(), h);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let r2 = radius * radius;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            if qx * qx + qy * qy <= r2 {
                mask.set(x, y, true);
            }
        }
    }
}

/// Draws one person's concept into a fresh `target_side`² mask: links as
/// capsules of width `w`, points as disks of diameter `w`, both sides.
pub fn rasterize(
    ann: &PersonAnnotation,
    concept: Concept,
    t: &LetterboxTransform,
    size: &SizeEstimate,
) -> ConceptMask {
    let mut mask = BinaryMask::new(t.target_side, t.target_side);
    draw_concept(&mut mask, ann, concept, t, size);
    ConceptMask { concept, mask }
}

/// Like [`rasterize`] but draws into an existing mask, so several persons of
/// one image can share it.
pub fn draw_concept(
    mask: &mut BinaryMask,
    ann: &PersonAnnotation,
    concept: Concept,
    t: &LetterboxTransform,
    size: &SizeEstimate,
) {
    let radius = stroke_width(size, t) / 2.0;
    let point = |part: Part, side: Side| {
        ann.keypoint(part.index(side)).map(|k| t.map(k.x, k.y))
    };
    for side in Side::BOTH {
        match concept.primitives() {
            Primitives::Chain(parts) => {
                for pair in parts.windows(2) {
                    if let (Some(a), Some(b)) = (point(pair[0], side), point(pair[1], side)) {
                        draw_capsule(mask, a, b, radius);
                    }
                }
            }
            Primitives::Point(part) => {
                if let Some(p) = point(part, side) {
                    draw_capsule(mask, p, p, radius);
                }
            }
        }
    }
}
