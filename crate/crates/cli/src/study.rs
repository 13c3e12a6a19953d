//! Cross-validated training, evaluation, similarity and size-bias studies.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use concept_embed::maskgen::Concept;
use concept_embed::metrics::{
    cosine_similarity, evaluate, least_squares_fit, mean_std, similarity_matrix, EvalReport,
};
use concept_embed::model::{adaptive_kernel, mean_model, ConceptModel};
use concept_embed::tensors::ActivationCache;
use concept_embed::train::{cross_validate, GroundTruth, LabeledSample, TrainConfig};
use concept_embed::Error as CoreError;
use log::{info, warn};
use serde::Serialize;

use crate::config::{CategoryFilter, ExperimentSpec, KernelMode, LayerSpec};
use crate::dataset::{build_dataset, DatasetIndex, ImageEntry};
use crate::error::{CliError, CliResult};
use crate::report::{fmt_f64, write_csv, write_json, Table};

pub const MODELS_DIR: &str = "models";
pub const DATASET_DIR: &str = "dataset";
pub const FOLDS_FILE: &str = "folds.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const SIMILARITY_DIR: &str = "similarity";
pub const SIZE_SIMILARITY_FILE: &str = "size_similarity.csv";
pub const LEAST_SQUARES_FILE: &str = "least_squares.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// A layer with its opened activation cache.
pub struct OpenLayer {
    pub spec: LayerSpec,
    pub cache: ActivationCache,
}

/// Opens every configured cache, failing with the full list of layers whose
/// cache is absent or unreadable.
pub fn open_layers(spec: &ExperimentSpec) -> CliResult<Vec<OpenLayer>> {
    if spec.layers.is_empty() {
        return Err(CliError::Usage("the config lists no layers".into()));
    }
    let mut open = Vec::new();
    let mut missing = Vec::new();
    for l in &spec.layers {
        match ActivationCache::open(&l.cache) {
            Ok(cache) => open.push(OpenLayer {
                spec: l.clone(),
                cache,
            }),
            Err(e) => missing.push(format!("{}/{} ({e})", l.net, l.layer)),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::report(
            &spec.layers[0].cache,
            format!("missing activation caches for: {}", missing.join("; ")),
        ));
    }
    Ok(open)
}

pub fn prepare_dataset(spec: &ExperimentSpec) -> CliResult<DatasetIndex> {
    build_dataset(
        &spec.annotations,
        &spec.concepts,
        spec.target_side,
        &spec.output_dir.join(DATASET_DIR),
    )
}

/// Images of `filter` showing `concept` that are present in the cache.
pub fn select_images<'a>(
    index: &'a DatasetIndex,
    concept: Concept,
    filter: CategoryFilter,
    cache: &ActivationCache,
) -> Vec<&'a ImageEntry> {
    let mut absent = 0usize;
    let chosen = index
        .images
        .iter()
        .filter(|img| img.in_category(filter) && img.has_concept(concept))
        .filter(|img| {
            let present = cache.contains(&img.image_id);
            absent += usize::from(!present);
            present
        })
        .collect();
    if absent > 0 {
        warn!(
            "{concept}/{filter}: {absent} image(s) missing from cache `{}`",
            cache.manifest().layer
        );
    }
    chosen
}

fn labeled(images: &[&ImageEntry], concept: Concept) -> Vec<LabeledSample> {
    images
        .iter()
        .map(|img| LabeledSample {
            id: img.image_id.clone(),
            truth: GroundTruth::Pgm(img.masks[&concept].path.clone()),
        })
        .collect()
}

/// Kernel extents for a training set: 1×1, or sized from the mean person
/// height at the layer's stride.
pub fn kernel_for(
    mode: KernelMode,
    concept: Concept,
    images: &[&ImageEntry],
    target_side: usize,
    cache: &ActivationCache,
) -> CliResult<Option<(usize, usize)>> {
    match mode {
        KernelMode::Fixed1x1 => Ok(Some((1, 1))),
        KernelMode::Adaptive => {
            let heights: Vec<f64> = images
                .iter()
                .flat_map(|i| i.person_heights.iter().copied())
                .collect();
            if heights.is_empty() {
                return Ok(None);
            }
            let (mean, _) = mean_std(&heights);
            let (_, h, _) = cache.dims();
            let stride = target_side as f64 / h as f64;
            Ok(Some(adaptive_kernel(mean, concept, stride)?))
        }
    }
}

/// One cross-validation fold.
#[derive(Debug, Clone)]
pub struct TrainedFold {
    pub model: ConceptModel,
    pub history: Vec<f64>,
    pub validation: Vec<String>,
}

/// All folds trained for one (layer, concept, train category, kernel mode).
#[derive(Debug, Clone)]
pub struct TrainedGroup {
    pub layer: usize,
    pub concept: Concept,
    pub category: CategoryFilter,
    pub mode: KernelMode,
    pub folds: Vec<TrainedFold>,
}

impl TrainedGroup {
    fn model_dir(&self, out: &Path, layers: &[OpenLayer]) -> PathBuf {
        model_dir(out, &layers[self.layer].spec, self.concept)
    }

    fn models(&self) -> Vec<ConceptModel> {
        self.folds.iter().map(|f| f.model.clone()).collect()
    }
}

fn model_dir(out: &Path, layer: &LayerSpec, concept: Concept) -> PathBuf {
    out.join(MODELS_DIR).join(layer.slug()).join(concept.name())
}

fn model_name(category: CategoryFilter, mode: KernelMode, fold: usize) -> String {
    format!("{category}_{mode}_fold{fold}")
}

fn combos(spec: &ExperimentSpec, layers: usize) -> Vec<(usize, Concept, CategoryFilter, KernelMode)> {
    let mut out = Vec::new();
    for layer in 0..layers {
        for &concept in &spec.concepts {
            for &category in &spec.categories {
                for &mode in &spec.kernel_modes {
                    out.push((layer, concept, category, mode));
                }
            }
        }
    }
    out
}

/// k-fold cross-validation for every configured combination. Models, fold
/// assignments and loss histories are written under the output directory.
pub fn train_groups(
    spec: &ExperimentSpec,
    index: &DatasetIndex,
    layers: &[OpenLayer],
) -> CliResult<Vec<TrainedGroup>> {
    let out = &spec.output_dir;
    let mut groups = Vec::new();
    for (li, concept, category, mode) in combos(spec, layers.len()) {
        let layer = &layers[li];
        let images = select_images(index, concept, category, &layer.cache);
        let tag = format!("{}/{} {concept} {category} {mode}", layer.spec.net, layer.spec.layer);
        if images.len() < spec.folds {
            warn!("{tag}: {} image(s) for {} folds, skipped", images.len(), spec.folds);
            continue;
        }
        let Some(kernel) = kernel_for(mode, concept, &images, spec.target_side, &layer.cache)? else {
            warn!("{tag}: no known person size for an adaptive kernel, skipped");
            continue;
        };
        let cfg = TrainConfig {
            kernel: [kernel.0, kernel.1],
            ..spec.train.clone()
        };
        info!("{tag}: {} images, kernel {}×{}", images.len(), kernel.0, kernel.1);
        let samples = labeled(&images, concept);
        let cv = cross_validate(concept.name(), &samples, &layer.cache, &cfg, spec.folds)?;
        let group = TrainedGroup {
            layer: li,
            concept,
            category,
            mode,
            folds: cv
                .folds
                .into_iter()
                .map(|f| TrainedFold {
                    model: f.model,
                    history: f.history,
                    validation: f.validation.iter().map(|&i| samples[i].id.clone()).collect(),
                })
                .collect(),
        };
        let dir = group.model_dir(out, layers);
        for (i, f) in group.folds.iter().enumerate() {
            f.model.save(&dir, &model_name(category, mode, i))?;
        }
        groups.push(group);
    }

    let key = |g: &TrainedGroup| {
        let l = &layers[g.layer].spec;
        vec![
            l.net.clone(),
            l.layer.clone(),
            g.concept.name().to_string(),
            g.category.name().to_string(),
            g.mode.name().to_string(),
        ]
    };
    let mut fold_rows = Vec::new();
    let mut history_rows = Vec::new();
    for g in &groups {
        for (i, f) in g.folds.iter().enumerate() {
            for id in &f.validation {
                let mut row = key(g);
                row.extend([i.to_string(), id.clone()]);
                fold_rows.push(row);
            }
            for (epoch, loss) in f.history.iter().enumerate() {
                let mut row = key(g);
                row.extend([i.to_string(), epoch.to_string(), fmt_f64(*loss)]);
                history_rows.push(row);
            }
        }
    }
    const KEY: [&str; 5] = ["net", "layer", "concept", "train_category", "kernel"];
    let header = |extra: &[&'static str]| -> Vec<&'static str> {
        KEY.iter().copied().chain(extra.iter().copied()).collect()
    };
    write_csv(&out.join(FOLDS_FILE), &header(&["fold", "image_id"]), fold_rows)?;
    write_csv(&out.join(HISTORY_FILE), &header(&["fold", "epoch", "loss"]), history_rows)?;
    Ok(groups)
}

/// Reloads the groups written by [`train_groups`].
pub fn load_groups(spec: &ExperimentSpec, layers: &[OpenLayer]) -> CliResult<Vec<TrainedGroup>> {
    let out = &spec.output_dir;
    let folds_path = out.join(FOLDS_FILE);
    if !folds_path.exists() {
        return Err(CliError::report(&folds_path, "no trained models; run `train` first"));
    }
    let table = Table::read(&folds_path)?;
    let cols = table.columns(
        &folds_path,
        &["net", "layer", "concept", "train_category", "kernel", "fold", "image_id"],
    )?;
    let mut groups = Vec::new();
    for (li, concept, category, mode) in combos(spec, layers.len()) {
        let l = &layers[li].spec;
        let key = [l.net.as_str(), l.layer.as_str(), concept.name(), category.name(), mode.name()];
        let mut validation: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for row in &table.rows {
            if (0..5).all(|k| row[cols[k]] == key[k]) {
                let fold: usize = row[cols[5]]
                    .parse()
                    .map_err(|_| CliError::report(&folds_path, format!("bad fold `{}`", row[cols[5]])))?;
                validation.entry(fold).or_default().push(row[cols[6]].clone());
            }
        }
        if validation.is_empty() {
            continue;
        }
        let dir = model_dir(out, l, concept);
        let folds = validation
            .into_iter()
            .map(|(i, ids)| {
                Ok(TrainedFold {
                    model: ConceptModel::load(&dir, &model_name(category, mode, i))?,
                    history: Vec::new(),
                    validation: ids,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        groups.push(TrainedGroup {
            layer: li,
            concept,
            category,
            mode,
            folds,
        });
    }
    Ok(groups)
}

/// Per-fold evaluation on one test-category restriction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub net: String,
    pub train_category: String,
    pub kernel: String,
    pub test_category: String,
    pub report: EvalReport,
}

/// Fold-aggregated evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummaryRow {
    pub net: String,
    pub layer: String,
    pub concept: String,
    pub train_category: String,
    pub kernel: String,
    pub kh: usize,
    pub kw: usize,
    pub test_category: String,
    pub folds: usize,
    /// Mean over folds of the batch-mean set IoU.
    pub mean_batch_iou: f64,
    /// Standard deviation over folds of the batch-mean set IoU.
    pub std_batch_iou: f64,
    pub mean_pooled_iou: f64,
}

fn test_categories(spec: &ExperimentSpec, train: CategoryFilter) -> Vec<CategoryFilter> {
    match train {
        CategoryFilter::All => spec.categories.clone(),
        c => vec![c],
    }
}

/// Evaluates each fold model on its validation images restricted to every
/// applicable test category; models trained on one size category are tested
/// on that category only, models trained on all images on every category.
pub fn evaluate_groups(
    spec: &ExperimentSpec,
    index: &DatasetIndex,
    layers: &[OpenLayer],
    groups: &[TrainedGroup],
) -> CliResult<(Vec<EvalRow>, Vec<EvalSummaryRow>)> {
    let by_id: BTreeMap<&str, &ImageEntry> =
        index.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for g in groups {
        let layer = &layers[g.layer];
        for test in test_categories(spec, g.category) {
            let mut reports = Vec::new();
            for (i, fold) in g.folds.iter().enumerate() {
                let images: Vec<&ImageEntry> = fold
                    .validation
                    .iter()
                    .filter_map(|id| by_id.get(id.as_str()).copied())
                    .filter(|img| img.in_category(test))
                    .collect();
                if images.is_empty() {
                    continue;
                }
                let samples = labeled(&images, g.concept);
                let mut report = evaluate(&fold.model, &samples, &layer.cache, spec.train.batch_size)?;
                report.net = layer.spec.net.clone();
                report.size_category = test.name().to_string();
                report.fold = Some(i);
                reports.push(report.clone());
                rows.push(EvalRow {
                    net: layer.spec.net.clone(),
                    train_category: g.category.name().to_string(),
                    kernel: g.mode.name().to_string(),
                    test_category: test.name().to_string(),
                    report,
                });
            }
            if reports.is_empty() {
                warn!(
                    "{}/{} {} {} {}: no validation images in `{test}`",
                    layer.spec.net, layer.spec.layer, g.concept, g.category, g.mode
                );
                continue;
            }
            let means: Vec<f64> = reports.iter().map(|r| r.mean).collect();
            let (mean, std) = mean_std(&means);
            let pooled: Vec<f64> = reports.iter().map(|r| r.pooled).collect();
            summary.push(EvalSummaryRow {
                net: layer.spec.net.clone(),
                layer: layer.spec.layer.clone(),
                concept: g.concept.name().to_string(),
                train_category: g.category.name().to_string(),
                kernel: g.mode.name().to_string(),
                kh: reports[0].kh,
                kw: reports[0].kw,
                test_category: test.name().to_string(),
                folds: reports.len(),
                mean_batch_iou: mean,
                std_batch_iou: std,
                mean_pooled_iou: mean_std(&pooled).0,
            });
        }
    }
    write_eval_tables(&spec.output_dir, &rows, &summary)?;
    Ok((rows, summary))
}

pub const EVAL_HEADER: [&str; 13] = [
    "net",
    "layer",
    "concept",
    "train_category",
    "kernel",
    "kh",
    "kw",
    "fold",
    "test_category",
    "n",
    "batch_mean",
    "std",
    "pooled",
];

pub const EVAL_SUMMARY_HEADER: [&str; 12] = [
    "net",
    "layer",
    "concept",
    "train_category",
    "kernel",
    "kh",
    "kw",
    "test_category",
    "folds",
    "mean_batch_iou",
    "std_batch_iou",
    "mean_pooled_iou",
];

fn write_eval_tables(out: &Path, rows: &[EvalRow], summary: &[EvalSummaryRow]) -> CliResult<()> {
    write_csv(
        &out.join(EVAL_FILE),
        &EVAL_HEADER,
        rows.iter().map(|r| {
            vec![
                r.net.clone(),
                r.report.layer.clone(),
                r.report.concept.clone(),
                r.train_category.clone(),
                r.kernel.clone(),
                r.report.kh.to_string(),
                r.report.kw.to_string(),
                r.report.fold.map(|f| f.to_string()).unwrap_or_default(),
                r.test_category.clone(),
                r.report.samples.to_string(),
                fmt_f64(r.report.mean),
                fmt_f64(r.report.std),
                fmt_f64(r.report.pooled),
            ]
        }),
    )?;
    write_csv(
        &out.join(EVAL_SUMMARY_FILE),
        &EVAL_SUMMARY_HEADER,
        summary.iter().map(|s| {
            vec![
                s.net.clone(),
                s.layer.clone(),
                s.concept.clone(),
                s.train_category.clone(),
                s.kernel.clone(),
                s.kh.to_string(),
                s.kw.to_string(),
                s.test_category.clone(),
                s.folds.to_string(),
                fmt_f64(s.mean_batch_iou),
                fmt_f64(s.std_batch_iou),
                fmt_f64(s.mean_pooled_iou),
            ]
        }),
    )
}

/// Cosine of one size category's mean model to the all-images mean model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeSimilarityRow {
    pub net: String,
    pub layer: String,
    pub concept: String,
    pub kernel: String,
    pub category: String,
    pub cosine_to_all: f64,
}

/// The all-images mean embedding written as a combination of size-category
/// mean embeddings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeastSquaresRow {
    pub net: String,
    pub layer: String,
    pub concept: String,
    pub kernel: String,
    pub basis: Vec<String>,
    pub coefficients: Vec<f64>,
    pub fit_cosine: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimilarityOutcome {
    pub matrices: Vec<PathBuf>,
    pub size_similarity: Vec<SizeSimilarityRow>,
    pub least_squares: Vec<LeastSquaresRow>,
}

/// Concept similarity matrices per (layer, train category, kernel mode) and
/// the size-bias comparison of mean models per (layer, concept, kernel mode).
pub fn similarity_study(
    spec: &ExperimentSpec,
    layers: &[OpenLayer],
    groups: &[TrainedGroup],
) -> CliResult<SimilarityOutcome> {
    let out = &spec.output_dir;
    let mut outcome = SimilarityOutcome::default();
    for (li, layer) in layers.iter().enumerate() {
        for &category in &spec.categories {
            for &mode in &spec.kernel_modes {
                let members: Vec<(String, Vec<ConceptModel>)> = groups
                    .iter()
                    .filter(|g| g.layer == li && g.category == category && g.mode == mode)
                    .map(|g| (g.concept.name().to_string(), g.models()))
                    .collect();
                if members.is_empty() {
                    continue;
                }
                match similarity_matrix(&members) {
                    Ok(m) => {
                        let path = out
                            .join(SIMILARITY_DIR)
                            .join(format!("{}__{category}__{mode}.csv", layer.spec.slug()));
                        let mut header = vec!["concept"];
                        header.extend(m.concepts.iter().map(String::as_str));
                        write_csv(
                            &path,
                            &header,
                            m.concepts.iter().zip(&m.values).map(|(c, row)| {
                                std::iter::once(c.clone())
                                    .chain(row.iter().map(|v| fmt_f64(*v)))
                                    .collect::<Vec<_>>()
                            }),
                        )?;
                        outcome.matrices.push(path);
                    }
                    Err(CoreError::Incomparable(msg)) => warn!(
                        "{}/{} {category} {mode}: similarity skipped: {msg}",
                        layer.spec.net, layer.spec.layer
                    ),
                    Err(e) => return Err(e.into()),
                }
            }
        }

        for &concept in &spec.concepts {
            for &mode in &spec.kernel_modes {
                size_bias_for(spec, layer, li, concept, mode, groups, &mut outcome)?;
            }
        }
    }
    write_csv(
        &out.join(SIZE_SIMILARITY_FILE),
        &["net", "layer", "concept", "kernel", "category", "cosine_to_all"],
        outcome.size_similarity.iter().map(|r| {
            vec![
                r.net.clone(),
                r.layer.clone(),
                r.concept.clone(),
                r.kernel.clone(),
                r.category.clone(),
                fmt_f64(r.cosine_to_all),
            ]
        }),
    )?;
    write_csv(
        &out.join(LEAST_SQUARES_FILE),
        &["net", "layer", "concept", "kernel", "basis", "coefficients", "fit_cosine", "degenerate"],
        outcome.least_squares.iter().map(|r| {
            vec![
                r.net.clone(),
                r.layer.clone(),
                r.concept.clone(),
                r.kernel.clone(),
                r.basis.join(";"),
                r.coefficients.iter().map(|c| fmt_f64(*c)).collect::<Vec<_>>().join(";"),
                fmt_f64(r.fit_cosine),
                r.degenerate.to_string(),
            ]
        }),
    )?;
    Ok(outcome)
}

fn size_bias_for(
    spec: &ExperimentSpec,
    layer: &OpenLayer,
    li: usize,
    concept: Concept,
    mode: KernelMode,
    groups: &[TrainedGroup],
    outcome: &mut SimilarityOutcome,
) -> CliResult<()> {
    let mean_of = |category: CategoryFilter| -> CliResult<Option<ConceptModel>> {
        groups
            .iter()
            .find(|g| g.layer == li && g.concept == concept && g.category == category && g.mode == mode)
            .map(|g| mean_model(&g.models()))
            .transpose()
            .map_err(Into::into)
    };
    let Some(all) = mean_of(CategoryFilter::All)? else {
        return Ok(());
    };
    let tag = format!("{}/{} {concept} {mode}", layer.spec.net, layer.spec.layer);
    let mut basis: Vec<(CategoryFilter, ConceptModel)> = Vec::new();
    for &category in spec.categories.iter().filter(|c| **c != CategoryFilter::All) {
        let Some(m) = mean_of(category)? else { continue };
        match cosine_similarity(all.embedding(), m.embedding()) {
            Ok(cos) => {
                outcome.size_similarity.push(SizeSimilarityRow {
                    net: layer.spec.net.clone(),
                    layer: layer.spec.layer.clone(),
                    concept: concept.name().to_string(),
                    kernel: mode.name().to_string(),
                    category: category.name().to_string(),
                    cosine_to_all: cos,
                });
                basis.push((category, m));
            }
            Err(CoreError::Incomparable(msg)) | Err(CoreError::Degenerate(msg)) => {
                warn!("{tag} {category}: size comparison skipped: {msg}")
            }
            Err(e) => return Err(e.into()),
        }
    }
    if basis.is_empty() {
        return Ok(());
    }
    let vectors: Vec<&[f32]> = basis.iter().map(|(_, m)| m.embedding()).collect();
    match least_squares_fit(all.embedding(), &vectors) {
        Ok(fit) => outcome.least_squares.push(LeastSquaresRow {
            net: layer.spec.net.clone(),
            layer: layer.spec.layer.clone(),
            concept: concept.name().to_string(),
            kernel: mode.name().to_string(),
            basis: basis.iter().map(|(c, _)| c.name().to_string()).collect(),
            coefficients: fit.coefficients,
            fit_cosine: fit.fit_cosine,
            degenerate: fit.degenerate,
        }),
        Err(CoreError::Degenerate(msg)) => warn!("{tag}: least-squares fit skipped: {msg}"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub layers: Vec<String>,
    pub concepts: Vec<String>,
    pub trained_groups: usize,
    pub evaluations: Vec<EvalSummaryRow>,
    pub size_similarity: Vec<SizeSimilarityRow>,
    pub least_squares: Vec<LeastSquaresRow>,
}

/// The full study: dataset, cross-validated training, evaluation, similarity
/// and size-bias reports.
pub fn cmd_run(spec: &ExperimentSpec) -> CliResult<RunSummary> {
    let layers = open_layers(spec)?;
    let index = prepare_dataset(spec)?;
    let groups = train_groups(spec, &index, &layers)?;
    let (_, evaluations) = evaluate_groups(spec, &index, &layers, &groups)?;
    let sim = similarity_study(spec, &layers, &groups)?;
    let summary = RunSummary {
        layers: layers
            .iter()
            .map(|l| format!("{}/{}", l.spec.net, l.spec.layer))
            .collect(),
        concepts: spec.concepts.iter().map(|c| c.name().to_string()).collect(),
        trained_groups: groups.len(),
        evaluations,
        size_similarity: sim.size_similarity,
        least_squares: sim.least_squares,
    };
    write_json(&spec.output_dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
