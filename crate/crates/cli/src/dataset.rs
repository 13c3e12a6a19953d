//! Annotation loading, size estimation and concept-mask rasterization.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use concept_embed::maskgen::{draw_concept, letterbox, BinaryMask, Concept};
use concept_embed::skeleton::{
    estimate_size, PersonAnnotation, SizeCategory, SizeEstimate, STANDARD_HEIGHT_M,
};
use log::{info, warn};
use serde::Serialize;

use crate::config::{slug, CategoryFilter};
use crate::error::{CliError, CliResult};
use crate::report::{fmt_opt, write_csv, write_json};

/// Reads a JSON Lines annotation file, skipping blank lines. Malformed
/// records are logged and counted, never fatal.
pub fn read_annotations(path: &Path) -> CliResult<(Vec<PersonAnnotation>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut annotations = Vec::new();
    let mut skipped = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match PersonAnnotation::from_json_line(line) {
            Ok(a) => annotations.push(a),
            Err(e) => {
                skipped += 1;
                warn!("{}:{}: skipping record: {e}", path.display(), n + 1);
            }
        }
    }
    if skipped > 0 {
        warn!("{}: skipped {skipped} malformed record(s)", path.display());
    }
    Ok((annotations, skipped))
}

/// Size estimate of one annotated person.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonRecord {
    pub annotation_id: String,
    pub image_id: String,
    pub size: SizeEstimate,
    /// Estimated height in letterboxed pixels.
    pub letterboxed_height: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskEntry {
    pub path: PathBuf,
    pub positive: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEntry {
    pub image_id: String,
    /// The size category shared by every known-size person in the image;
    /// `None` when there is no known-size person or they disagree.
    pub membership: Option<SizeCategory>,
    pub masks: BTreeMap<Concept, MaskEntry>,
    /// Known person heights in letterboxed pixels.
    pub person_heights: Vec<f64>,
}

impl ImageEntry {
    pub fn in_category(&self, filter: CategoryFilter) -> bool {
        filter.admits(self.membership)
    }

    pub fn has_concept(&self, concept: Concept) -> bool {
        self.masks.get(&concept).is_some_and(|m| m.positive > 0)
    }
}

/// Everything derived from the annotation file.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub target_side: usize,
    pub persons: Vec<PersonRecord>,
    /// Sorted by image id.
    pub images: Vec<ImageEntry>,
    pub skipped: usize,
}

fn membership(sizes: &[SizeEstimate]) -> Option<SizeCategory> {
    let mut known = sizes
        .iter()
        .map(|s| s.category)
        .filter(|c| *c != SizeCategory::Unknown);
    let first = known.next()?;
    known.all(|c| c == first).then_some(first)
}

/// Estimates person sizes without drawing masks.
pub fn estimate_sizes(
    annotations: &[PersonAnnotation],
    target_side: usize,
) -> CliResult<Vec<PersonRecord>> {
    annotations
        .iter()
        .enumerate()
        .map(|(i, ann)| {
            let size = estimate_size(ann, STANDARD_HEIGHT_M)?;
            let t = letterbox(ann.image_width, ann.image_height, target_side)?;
            Ok(PersonRecord {
                annotation_id: ann
                    .id
                    .clone()
                    .unwrap_or_else(|| format!("{}#{i}", ann.image_id)),
                image_id: ann.image_id.clone(),
                size,
                letterboxed_height: size.height_px.map(|h| h * t.scale),
            })
        })
        .collect()
}

pub fn mask_file_name(image_id: &str, concept: Concept) -> String {
    format!("{}_{}.pgm", slug(image_id), concept.name())
}

/// Builds the dataset index and writes per-image concept masks plus size
/// tables under `out_dir`.
pub fn build_dataset(
    annotations_path: &Path,
    concepts: &[Concept],
    target_side: usize,
    out_dir: &Path,
) -> CliResult<DatasetIndex> {
    let (mut annotations, mut skipped) = read_annotations(annotations_path)?;

    let mut dims: BTreeMap<String, (u32, u32)> = BTreeMap::new();
    annotations.retain(|a| {
        let d = *dims
            .entry(a.image_id.clone())
            .or_insert((a.image_width, a.image_height));
        let consistent = d == (a.image_width, a.image_height);
        if !consistent {
            warn!("image `{}`: annotation with conflicting image size skipped", a.image_id);
            skipped += 1;
        }
        consistent
    });

    let persons = estimate_sizes(&annotations, target_side)?;
    let mask_dir = out_dir.join("masks");
    fs::create_dir_all(&mask_dir).map_err(|e| CliError::io(&mask_dir, e))?;

    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, a) in annotations.iter().enumerate() {
        by_image.entry(a.image_id.as_str()).or_default().push(i);
    }
    let mut images = Vec::with_capacity(by_image.len());
    for (image_id, members) in by_image {
        let (w, h) = dims[image_id];
        let t = letterbox(w, h, target_side)?;
        let sizes: Vec<SizeEstimate> = members.iter().map(|&i| persons[i].size).collect();
        let mut masks = BTreeMap::new();
        for &concept in concepts {
            let mut mask = BinaryMask::new(target_side, target_side);
            for &i in &members {
                draw_concept(&mut mask, &annotations[i], concept, &t, &persons[i].size);
            }
            let path = mask_dir.join(mask_file_name(image_id, concept));
            mask.write_pgm(&path)?;
            masks.insert(
                concept,
                MaskEntry {
                    path,
                    positive: mask.count(),
                },
            );
        }
        images.push(ImageEntry {
            image_id: image_id.to_string(),
            membership: membership(&sizes),
            masks,
            person_heights: members
                .iter()
                .filter_map(|&i| persons[i].letterboxed_height)
                .collect(),
        });
    }

    let index = DatasetIndex {
        target_side,
        persons,
        images,
        skipped,
    };
    write_size_tables(&index, out_dir)?;
    write_dataset_summary(&index, concepts, out_dir)?;
    info!(
        "dataset: {} persons in {} images, {} skipped",
        index.persons.len(),
        index.images.len(),
        index.skipped
    );
    Ok(index)
}

const ALL_SIZE_CATEGORIES: [SizeCategory; 6] = [
    SizeCategory::Far,
    SizeCategory::Middle,
    SizeCategory::Close,
    SizeCategory::VeryClose,
    SizeCategory::OutOfRange,
    SizeCategory::Unknown,
];

/// Relative-size histogram bin width and upper end.
const HIST_BIN: f64 = 0.05;
const HIST_BINS: usize = 50;

pub fn write_sizes_csv(persons: &[PersonRecord], path: &Path) -> CliResult<()> {
    let rows = persons.iter().map(|p| {
        vec![
            p.annotation_id.clone(),
            p.image_id.clone(),
            fmt_opt(p.size.height_px),
            fmt_opt(p.size.relative),
            p.size.category.name().to_string(),
        ]
    });
    write_csv(
        path,
        &["annotation_id", "image_id", "height_px", "relative", "category"],
        rows,
    )
}

pub fn category_counts(persons: &[PersonRecord]) -> BTreeMap<SizeCategory, usize> {
    let mut counts: BTreeMap<SizeCategory, usize> =
        ALL_SIZE_CATEGORIES.iter().map(|&c| (c, 0)).collect();
    for p in persons {
        *counts.entry(p.size.category).or_default() += 1;
    }
    counts
}

fn write_size_tables(index: &DatasetIndex, out_dir: &Path) -> CliResult<()> {
    write_sizes_csv(&index.persons, &out_dir.join("sizes.csv"))?;

    let counts = category_counts(&index.persons);
    write_csv(
        &out_dir.join("size_histogram.csv"),
        &["category", "count"],
        counts
            .iter()
            .map(|(c, n)| vec![c.name().to_string(), n.to_string()]),
    )?;

    let mut bins = vec![0usize; HIST_BINS + 1];
    for r in index.persons.iter().filter_map(|p| p.size.relative) {
        let b = ((r / HIST_BIN).floor().max(0.0) as usize).min(HIST_BINS);
        bins[b] += 1;
    }
    write_csv(
        &out_dir.join("relative_size_histogram.csv"),
        &["bin_lo", "bin_hi", "count"],
        bins.iter().enumerate().map(|(i, n)| {
            let lo = i as f64 * HIST_BIN;
            let hi = if i == HIST_BINS { "inf".to_string() } else { format!("{}", (i + 1) as f64 * HIST_BIN) };
            vec![format!("{lo}"), hi, n.to_string()]
        }),
    )
}

#[derive(Serialize)]
struct DatasetSummary {
    annotations: usize,
    skipped: usize,
    images: usize,
    person_categories: BTreeMap<&'static str, usize>,
    image_categories: BTreeMap<&'static str, usize>,
    images_with_concept: BTreeMap<&'static str, usize>,
}

fn write_dataset_summary(index: &DatasetIndex, concepts: &[Concept], out_dir: &Path) -> CliResult<()> {
    let summary = DatasetSummary {
        annotations: index.persons.len(),
        skipped: index.skipped,
        images: index.images.len(),
        person_categories: category_counts(&index.persons)
            .into_iter()
            .map(|(c, n)| (c.name(), n))
            .collect(),
        image_categories: CategoryFilter::EVERY
            .iter()
            .map(|f| (f.name(), index.images.iter().filter(|i| i.in_category(*f)).count()))
            .collect(),
        images_with_concept: concepts
            .iter()
            .map(|&c| (c.name(), index.images.iter().filter(|i| i.has_concept(c)).count()))
            .collect(),
    };
    write_json(&out_dir.join("summary.json"), &summary)
}
