//! Person size estimation from 2D keypoint links.
//!
//! Every anthropometric relation has the linear form `h = s·l + c` (slope `s`,
//! offset `c` in meters). For a projected link of `l'` pixels the projected
//! body height is `s·l'·h/(h − c)`, where `h` is an assumed standard height.
//! Several links usually yield several estimates; the largest one wins because
//! 2D projection can only shorten a link.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 17;

/// Default standard body height in meters.
pub const STANDARD_HEIGHT_M: f64 = 1.7;

/// Non-absent keypoints may lie this fraction of the image extent outside it.
pub const BOUNDS_MARGIN: f64 = 0.1;

/// COCO keypoint order.
pub mod kp {
    pub const NOSE: usize = 0;
    pub const LEFT_EYE: usize = 1;
    pub const RIGHT_EYE: usize = 2;
    pub const LEFT_EAR: usize = 3;
    pub const RIGHT_EAR: usize = 4;
    pub const LEFT_SHOULDER: usize = 5;
    pub const RIGHT_SHOULDER: usize = 6;
    pub const LEFT_ELBOW: usize = 7;
    pub const RIGHT_ELBOW: usize = 8;
    pub const LEFT_WRIST: usize = 9;
    pub const RIGHT_WRIST: usize = 10;
    pub const LEFT_HIP: usize = 11;
    pub const RIGHT_HIP: usize = 12;
    pub const LEFT_KNEE: usize = 13;
    pub const RIGHT_KNEE: usize = 14;
    pub const LEFT_ANKLE: usize = 15;
    pub const RIGHT_ANKLE: usize = 16;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Left, Side::Right];

    fn offset(self) -> usize {
        match self {
            Side::Left => 0,
            Side::Right => 1,
        }
    }
}

/// Sided body parts; the left keypoint index is the part's base index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Eye,
    Ear,
    Shoulder,
    Elbow,
    Wrist,
    Hip,
    Knee,
    Ankle,
}

impl Part {
    pub fn index(self, side: Side) -> usize {
        let base = match self {
            Part::Eye => kp::LEFT_EYE,
            Part::Ear => kp::LEFT_EAR,
            Part::Shoulder => kp::LEFT_SHOULDER,
            Part::Elbow => kp::LEFT_ELBOW,
            Part::Wrist => kp::LEFT_WRIST,
            Part::Hip => kp::LEFT_HIP,
            Part::Knee => kp::LEFT_KNEE,
            Part::Ankle => kp::LEFT_ANKLE,
        };
        base + side.offset()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Visibility {
    #[default]
    Absent,
    Occluded,
    Visible,
}

impl Visibility {
    pub fn from_coco(v: f64) -> Result<Self> {
        match v {
            v if v == 0.0 => Ok(Visibility::Absent),
            v if v == 1.0 => Ok(Visibility::Occluded),
            v if v == 2.0 => Ok(Visibility::Visible),
            other => Err(Error::Format(format!("keypoint visibility {other} not in {{0,1,2}}"))),
        }
    }

    pub fn to_coco(self) -> u8 {
        match self {
            Visibility::Absent => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            visibility: Visibility::Visible,
        }
    }

    /// Occluded keypoints count as present.
    pub fn is_present(&self) -> bool {
        self.visibility != Visibility::Absent
    }
}

/// One annotated person with 17 COCO keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonAnnotation {
    pub id: Option<String>,
    pub image_id: String,
    pub image_width: u32,
    pub image_height: u32,
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    /// (x, y, w, h) in pixels.
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum IdValue {
    Int(u64),
    Str(String),
}

impl IdValue {
    fn into_string(self) -> String {
        match self {
            IdValue::Int(i) => i.to_string(),
            IdValue::Str(s) => s,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<IdValue>,
    image_id: IdValue,
    image_width: u32,
    image_height: u32,
    keypoints: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
}

impl PersonAnnotation {
    /// An annotation with every keypoint absent.
    pub fn empty(image_id: &str, image_width: u32, image_height: u32) -> Self {
        Self {
            id: None,
            image_id: image_id.to_string(),
            image_width,
            image_height,
            keypoints: [Keypoint::default(); NUM_KEYPOINTS],
            bbox: None,
        }
    }

    /// Parses one JSON Lines record (`keypoints` as 17 `[x, y, v]` triples).
    pub fn from_json_line(line: &str) -> Result<Self> {
        let record: AnnotationRecord = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("annotation record: {e}")))?;
        if record.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::Format(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                record.keypoints.len()
            )));
        }
        if record.image_width == 0 || record.image_height == 0 {
            return Err(Error::Format("zero image dimension".into()));
        }
        let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
        for (slot, [x, y, v]) in keypoints.iter_mut().zip(record.keypoints) {
            *slot = Keypoint {
                x,
                y,
                visibility: Visibility::from_coco(v)?,
            };
        }
        let ann = Self {
            id: record.id.map(IdValue::into_string),
            image_id: record.image_id.into_string(),
            image_width: record.image_width,
            image_height: record.image_height,
            keypoints,
            bbox: record.bbox,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn to_json_line(&self) -> String {
        let record = AnnotationRecord {
            id: self.id.clone().map(IdValue::Str),
            image_id: IdValue::Str(self.image_id.clone()),
            image_width: self.image_width,
            image_height: self.image_height,
            keypoints: self
                .keypoints
                .iter()
                .map(|k| [k.x, k.y, f64::from(k.visibility.to_coco())])
                .collect(),
            bbox: self.bbox,
        };
        serde_json::to_string(&record).expect("annotation records always serialize")
    }

    /// Checks that present keypoints lie within the image plus a margin.
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (f64::from(self.image_width), f64::from(self.image_height));
        let (mx, my) = (BOUNDS_MARGIN * w, BOUNDS_MARGIN * h);
        for (i, k) in self.keypoints.iter().enumerate() {
            if !k.is_present() {
                continue;
            }
            let inside = k.x.is_finite()
                && k.y.is_finite()
                && (-mx..=w + mx).contains(&k.x)
                && (-my..=h + my).contains(&k.y);
            if !inside {
                return Err(Error::Format(format!(
                    "keypoint {i} at ({}, {}) outside {}×{} image",
                    k.x, k.y, self.image_width, self.image_height
                )));
            }
        }
        if let Some(b) = self.bbox {
            if b.iter().any(|v| !v.is_finite()) || b[2] < 0.0 || b[3] < 0.0 {
                return Err(Error::Format(format!("invalid bbox {b:?}")));
            }
        }
        Ok(())
    }

    pub fn keypoint(&self, index: usize) -> Option<&Keypoint> {
        self.keypoints.get(index).filter(|k| k.is_present())
    }

    pub fn present_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.is_present()).count()
    }

    /// Applies `f` to every keypoint coordinate and the bbox corner, scaling
    /// bbox extents by `scale`. Used for geometric property checks.
    pub fn map_points(&self, f: impl Fn(f64, f64) -> (f64, f64), scale: f64) -> Self {
        let mut out = self.clone();
        for k in out.keypoints.iter_mut() {
            let (x, y) = f(k.x, k.y);
            k.x = x;
            k.y = y;
        }
        out.bbox = self.bbox.map(|[x, y, w, h]| {
            let (x, y) = f(x, y);
            [x, y, w * scale, h * scale]
        });
        out
    }
}

/// A measurable keypoint link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    LowerLeg(Side),
    UpperLeg(Side),
    LowerArm(Side),
    UpperArm(Side),
    HipToShoulder(Side),
    ShoulderToEye(Side),
    ShoulderToEar(Side),
    ShoulderToNose(Side),
    EarToEye(Side),
    EarToNose(Side),
    ShoulderWidth,
    EarToOppositeEar,
    EyeToEye,
}

impl Link {
    pub fn endpoints(self) -> (usize, usize) {
        use Link::*;
        match self {
            LowerLeg(s) => (Part::Knee.index(s), Part::Ankle.index(s)),
            UpperLeg(s) => (Part::Hip.index(s), Part::Knee.index(s)),
            LowerArm(s) => (Part::Elbow.index(s), Part::Wrist.index(s)),
            UpperArm(s) => (Part::Shoulder.index(s), Part::Elbow.index(s)),
            HipToShoulder(s) => (Part::Hip.index(s), Part::Shoulder.index(s)),
            ShoulderToEye(s) => (Part::Shoulder.index(s), Part::Eye.index(s)),
            ShoulderToEar(s) => (Part::Shoulder.index(s), Part::Ear.index(s)),
            ShoulderToNose(s) => (Part::Shoulder.index(s), kp::NOSE),
            EarToEye(s) => (Part::Ear.index(s), Part::Eye.index(s)),
            EarToNose(s) => (Part::Ear.index(s), kp::NOSE),
            ShoulderWidth => (kp::LEFT_SHOULDER, kp::RIGHT_SHOULDER),
            EarToOppositeEar => (kp::LEFT_EAR, kp::RIGHT_EAR),
            EyeToEye => (kp::LEFT_EYE, kp::RIGHT_EYE),
        }
    }
}

impl FromStr for Link {
    type Err = Error;

    /// Sided links take a `left_` or `right_` prefix, e.g. `left_lower_leg`.
    fn from_str(name: &str) -> Result<Self> {
        use Link::*;
        match name {
            "shoulder_width" => return Ok(ShoulderWidth),
            "ear_to_opposite_ear" => return Ok(EarToOppositeEar),
            "eye_to_eye" => return Ok(EyeToEye),
            _ => {}
        }
        let (side, rest) = if let Some(rest) = name.strip_prefix("left_") {
            (Side::Left, rest)
        } else if let Some(rest) = name.strip_prefix("right_") {
            (Side::Right, rest)
        } else {
            return Err(Error::Usage(format!("unknown link kind `{name}`")));
        };
        let ctor: fn(Side) -> Link = match rest {
            "lower_leg" => LowerLeg,
            "upper_leg" => UpperLeg,
            "lower_arm" => LowerArm,
            "upper_arm" => UpperArm,
            "hip_to_shoulder" => HipToShoulder,
            "shoulder_to_eye" => ShoulderToEye,
            "shoulder_to_ear" => ShoulderToEar,
            "shoulder_to_nose" => ShoulderToNose,
            "ear_to_eye" => EarToEye,
            "ear_to_nose" => EarToNose,
            _ => return Err(Error::Usage(format!("unknown link kind `{name}`"))),
        };
        Ok(ctor(side))
    }
}

/// Euclidean length of a link in pixels, or `None` when an endpoint is absent.
pub fn link_length(ann: &PersonAnnotation, link: Link) -> Option<f64> {
    let (a, b) = link.endpoints();
    let (p, q) = (ann.keypoint(a)?, ann.keypoint(b)?);
    Some((p.x - q.x).hypot(p.y - q.y))
}

/// Lengths that relate to body height, measured or derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Bbox,
    BodyHeight,
    HipToShoulder,
    HeadHeight,
    Leg,
    UpperLeg,
    LowerLeg,
    UpperArm,
    LowerArm,
    Arm,
    HeadWidth,
    HeadDepth,
}

impl Measure {
    /// Measures with a direct body-height relation.
    pub const WITH_RELATION: [Measure; 9] = [
        Measure::Bbox,
        Measure::BodyHeight,
        Measure::HipToShoulder,
        Measure::HeadHeight,
        Measure::Leg,
        Measure::UpperLeg,
        Measure::LowerLeg,
        Measure::UpperArm,
        Measure::LowerArm,
    ];

    pub fn relation(self) -> Option<RelationModel> {
        let (slope, offset) = match self {
            Measure::Bbox => (1.0, 0.0),
            Measure::BodyHeight => (1.1, 0.0),
            Measure::HipToShoulder => (2.4, 0.0),
            Measure::HeadHeight => (7.0, 0.0),
            Measure::Leg => (1.485, 0.433),
            Measure::UpperLeg => (2.77, 0.405),
            Measure::LowerLeg => (3.075, 0.501),
            Measure::UpperArm => (3.72, 0.449),
            Measure::LowerArm => (4.46, 0.569),
            Measure::Arm | Measure::HeadWidth | Measure::HeadDepth => return None,
        };
        Some(RelationModel { slope, offset })
    }

    pub fn name(self) -> &'static str {
        match self {
            Measure::Bbox => "bbox",
            Measure::BodyHeight => "body_height",
            Measure::HipToShoulder => "hip_to_shoulder",
            Measure::HeadHeight => "head_height",
            Measure::Leg => "leg",
            Measure::UpperLeg => "upper_leg",
            Measure::LowerLeg => "lower_leg",
            Measure::UpperArm => "upper_arm",
            Measure::LowerArm => "lower_arm",
            Measure::Arm => "arm",
            Measure::HeadWidth => "head_width",
            Measure::HeadDepth => "head_depth",
        }
    }
}

impl fmt::Display for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear relation `h = slope·l + offset` between a true link length and the
/// true body height (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationModel {
    pub slope: f64,
    pub offset: f64,
}

impl RelationModel {
    /// Projected body height for a projected length of `length_px` pixels.
    pub fn height_px(&self, length_px: f64, standard_height: f64) -> Result<f64> {
        if standard_height <= self.offset {
            return Err(Error::Domain(format!(
                "standard height {standard_height} m must exceed offset {} m",
                self.offset
            )));
        }
        if !(length_px > 0.0) || !length_px.is_finite() {
            return Err(Error::Domain(format!("link length {length_px} px must be positive")));
        }
        Ok(self.slope * length_px * standard_height / (standard_height - self.offset))
    }
}

pub fn height_from_link(measure: Measure, length_px: f64, standard_height: f64) -> Result<f64> {
    let relation = measure
        .relation()
        .ok_or_else(|| Error::Usage(format!("`{measure}` has no body-height relation")))?;
    relation.height_px(length_px, standard_height)
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn max_over_sides(f: impl Fn(Side) -> Option<f64>) -> Option<f64> {
    max_opt(f(Side::Left), f(Side::Right))
}

fn sided_sum(ann: &PersonAnnotation, side: Side, links: &[fn(Side) -> Link]) -> Option<f64> {
    links.iter().map(|l| link_length(ann, l(side))).sum()
}

/// Composite lengths (leg, arm, body height, head height/width/depth). When
/// several formulas give the same composite the maximum is kept.
pub fn derived_lengths(ann: &PersonAnnotation) -> BTreeMap<Measure, f64> {
    let mut out = BTreeMap::new();
    let leg_of = |s| sided_sum(ann, s, &[Link::LowerLeg, Link::UpperLeg]);
    let arm_of = |s| sided_sum(ann, s, &[Link::LowerArm, Link::UpperArm]);
    let leg = max_over_sides(leg_of);
    let arm = max_over_sides(arm_of);

    let mut body = None;
    for side in Side::BOTH {
        let trunk = max_opt(
            max_opt(
                link_length(ann, Link::ShoulderToEye(side)),
                link_length(ann, Link::ShoulderToEar(side)),
            ),
            link_length(ann, Link::ShoulderToNose(side)),
        );
        let stacked = [leg_of(side), link_length(ann, Link::HipToShoulder(side)), trunk]
            .into_iter()
            .sum::<Option<f64>>();
        body = max_opt(body, stacked);
    }
    // Written as the relation states it: one arm plus the shoulder width.
    let span = arm.zip(link_length(ann, Link::ShoulderWidth)).map(|(a, s)| a + s);
    body = max_opt(body, span);

    let head_width = max_opt(
        link_length(ann, Link::EarToOppositeEar),
        link_length(ann, Link::EyeToEye).map(|l| 2.5 * l),
    );
    let head_depth = max_opt(
        max_over_sides(|s| link_length(ann, Link::EarToEye(s)).map(|l| 2.0 * l)),
        max_over_sides(|s| link_length(ann, Link::EarToNose(s)).map(|l| 7.0 / 4.0 * l)),
    );
    let head_height = max_opt(
        head_width.map(|w| 1.1 * w),
        head_depth.map(|d| 8.0 / 7.0 * d),
    );

    for (measure, value) in [
        (Measure::Leg, leg),
        (Measure::Arm, arm),
        (Measure::BodyHeight, body),
        (Measure::HeadHeight, head_height),
        (Measure::HeadWidth, head_width),
        (Measure::HeadDepth, head_depth),
    ] {
        if let Some(v) = value {
            out.insert(measure, v);
        }
    }
    out
}

/// Directly measured lengths with a height relation (max over sides), plus
/// the bbox's larger side.
pub fn measured_lengths(ann: &PersonAnnotation) -> BTreeMap<Measure, f64> {
    let mut out = BTreeMap::new();
    let sided: [(Measure, fn(Side) -> Link); 5] = [
        (Measure::HipToShoulder, Link::HipToShoulder),
        (Measure::UpperLeg, Link::UpperLeg),
        (Measure::LowerLeg, Link::LowerLeg),
        (Measure::UpperArm, Link::UpperArm),
        (Measure::LowerArm, Link::LowerArm),
    ];
    for (measure, link) in sided {
        if let Some(v) = max_over_sides(|s| link_length(ann, link(s))) {
            out.insert(measure, v);
        }
    }
    if let Some([_, _, w, h]) = ann.bbox {
        out.insert(Measure::Bbox, w.max(h));
    }
    out
}

/// Every available body-height estimate in pixels, keyed by source measure.
pub fn height_candidates(
    ann: &PersonAnnotation,
    standard_height: f64,
) -> Result<BTreeMap<Measure, f64>> {
    let mut lengths = measured_lengths(ann);
    lengths.extend(derived_lengths(ann));
    let mut out = BTreeMap::new();
    for (measure, length) in lengths {
        if measure.relation().is_none() || length <= 0.0 {
            continue;
        }
        out.insert(measure, height_from_link(measure, length, standard_height)?);
    }
    Ok(out)
}

/// Maximum over all candidate estimates; `None` when nothing is estimable.
pub fn estimate_body_height(ann: &PersonAnnotation, standard_height: f64) -> Result<Option<f64>> {
    Ok(height_candidates(ann, standard_height)?
        .into_values()
        .reduce(f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeCategory {
    Far,
    Middle,
    Close,
    VeryClose,
    OutOfRange,
    Unknown,
}

impl SizeCategory {
    /// Binned categories with their half-open relative-size ranges.
    pub const BINS: [(SizeCategory, f64, f64); 4] = [
        (SizeCategory::Far, 0.2, 0.38),
        (SizeCategory::Middle, 0.38, 0.71),
        (SizeCategory::Close, 0.71, 1.33),
        (SizeCategory::VeryClose, 1.33, 2.5),
    ];

    pub fn from_relative(relative: f64) -> Self {
        Self::BINS
            .iter()
            .find(|(_, lo, hi)| (*lo..*hi).contains(&relative))
            .map_or(SizeCategory::OutOfRange, |(c, _, _)| *c)
    }

    pub fn name(self) -> &'static str {
        match self {
            SizeCategory::Far => "far",
            SizeCategory::Middle => "middle",
            SizeCategory::Close => "close",
            SizeCategory::VeryClose => "very_close",
            SizeCategory::OutOfRange => "out_of_range",
            SizeCategory::Unknown => "unknown",
        }
    }
}

impl fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SizeCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SizeCategory::Far,
            SizeCategory::Middle,
            SizeCategory::Close,
            SizeCategory::VeryClose,
            SizeCategory::OutOfRange,
            SizeCategory::Unknown,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| Error::Usage(format!("unknown size category `{s}`")))
    }
}

/// Estimated person size. `height_px` is in the same pixel units as the
/// annotation it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub height_px: Option<f64>,
    pub relative: Option<f64>,
    pub category: SizeCategory,
}

impl SizeEstimate {
    pub fn unknown() -> Self {
        Self {
            height_px: None,
            relative: None,
            category: SizeCategory::Unknown,
        }
    }
}

/// Bins `height_px / reference_side_px` into a size category.
pub fn categorize(height_px: Option<f64>, reference_side_px: f64) -> Result<SizeEstimate> {
    if !(reference_side_px > 0.0) {
        return Err(Error::Domain(format!(
            "reference side {reference_side_px} px must be positive"
        )));
    }
    Ok(match height_px {
        None => SizeEstimate::unknown(),
        Some(h) => {
            let relative = h / reference_side_px;
            SizeEstimate {
                height_px: Some(h),
                relative: Some(relative),
                category: SizeCategory::from_relative(relative),
            }
        }
    })
}

/// Estimates the body height and categorizes it relative to the square side
/// `max(image_width, image_height)` the image is letterboxed into.
pub fn estimate_size(ann: &PersonAnnotation, standard_height: f64) -> Result<SizeEstimate> {
    let side = f64::from(ann.image_width.max(ann.image_height));
    categorize(estimate_body_height(ann, standard_height)?, side)
}
