//! Set IoU, evaluation reports, embedding similarity and least-squares
//! concept decomposition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::model::{binarize, ConceptModel};
use crate::tensors::{ActivationCache, Tensor};
use crate::train::LabeledSample;

/// Pooled intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn add(&mut self, gt: &BinaryMask, pred: &[u8]) -> Result<()> {
        if gt.bits().len() != pred.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, mask has {}",
                pred.len(),
                gt.bits().len()
            )));
        }
        for (&g, &p) in gt.bits().iter().zip(pred) {
            let (g, p) = (g != 0, p != 0);
            self.intersection += u64::from(g && p);
            self.union += u64::from(g || p);
        }
        Ok(())
    }

    /// Σ intersections / Σ unions, 0 when the union is empty.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Pooled IoU of binarized probability maps (threshold strictly above 0.5)
/// against ground-truth masks.
pub fn set_iou(gts: &[BinaryMask], probs: &[Tensor]) -> Result<f64> {
    if gts.len() != probs.len() {
        return Err(Error::Shape(format!(
            "{} masks but {} predictions",
            gts.len(),
            probs.len()
        )));
    }
    let mut counts = IouCounts::default();
    for (g, p) in gts.iter().zip(probs) {
        counts.add(g, &binarize(p.data()))?;
    }
    Ok(counts.iou())
}

/// Mean and population standard deviation; (0, 0) for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluation of one model on one sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub net: String,
    pub layer: String,
    pub concept: String,
    pub size_category: String,
    pub kh: usize,
    pub kw: usize,
    pub fold: Option<usize>,
    pub samples: usize,
    pub batch_ious: Vec<f64>,
    /// Mean of the per-batch set IoUs.
    pub mean: f64,
    pub std: f64,
    /// Set IoU pooled over every sample.
    pub pooled: f64,
}

/// Evaluates `model` on `dataset` in consecutive batches of `batch_size`.
pub fn evaluate(
    model: &ConceptModel,
    dataset: &[LabeledSample],
    cache: &ActivationCache,
    batch_size: usize,
) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::Usage("batch_size must be at least 1".into()));
    }
    let mut pooled = IouCounts::default();
    let mut batch_ious = Vec::new();
    for chunk in dataset.chunks(batch_size) {
        let mut counts = IouCounts::default();
        for sample in chunk {
            let act = cache.read_sample(&sample.id)?;
            let gt = sample.truth.load()?;
            let prob = model.forward(&act, gt.height(), gt.width())?;
            let pred = binarize(prob.data());
            counts.add(&gt, &pred)?;
            pooled.add(&gt, &pred)?;
        }
        batch_ious.push(counts.iou());
    }
    let (mean, std) = mean_std(&batch_ious);
    Ok(EvalReport {
        net: String::new(),
        layer: model.layer.clone(),
        concept: model.concept.clone(),
        size_category: "all".into(),
        kh: model.kh,
        kw: model.kw,
        fold: None,
        samples: dataset.len(),
        batch_ious,
        mean,
        std,
        pooled: pooled.iou(),
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Cosine similarity, clamped to [−1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Incomparable(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (a, b) = (widen(a), widen(b));
    let (na, nb) = (norm(&a), norm(&b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero vector".into()));
    }
    Ok((dot(&a, &b) / (na * nb)).clamp(-1.0, 1.0))
}

fn check_comparable(a: &ConceptModel, b: &ConceptModel) -> Result<()> {
    if (a.channels, a.kh, a.kw) != (b.channels, b.kh, b.kw) {
        return Err(Error::Incomparable(format!(
            "`{}` is {}×{}×{}, `{}` is {}×{}×{}",
            a.concept, a.channels, a.kh, a.kw, b.concept, b.channels, b.kh, b.kw
        )));
    }
    Ok(())
}

/// Square matrix of mean pairwise cosine similarities between concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub concepts: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Entry (a, b) is the mean cosine similarity over all pairs of fold models
/// of concepts a and b. On the diagonal the pairs (i, i) are excluded; a
/// concept with a single fold model has self-similarity 1.
pub fn similarity_matrix(models: &[(String, Vec<ConceptModel>)]) -> Result<SimilarityMatrix> {
    let first = models
        .iter()
        .flat_map(|(_, ms)| ms.first())
        .next()
        .ok_or_else(|| Error::Usage("no models to compare".into()))?;
    for (name, ms) in models {
        if ms.is_empty() {
            return Err(Error::Usage(format!("concept `{name}` has no models")));
        }
        for m in ms {
            check_comparable(first, m)?;
        }
    }
    let n = models.len();
    let mut values = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in a..n {
            let (ma, mb) = (&models[a].1, &models[b].1);
            let (mut sum, mut count) = (0.0, 0usize);
            for (i, x) in ma.iter().enumerate() {
                for (j, y) in mb.iter().enumerate() {
                    if a == b && i == j {
                        continue;
                    }
                    sum += cosine_similarity(x.embedding(), y.embedding())?;
                    count += 1;
                }
            }
            let v = if count == 0 { 1.0 } else { sum / count as f64 };
            values[a][b] = v;
            values[b][a] = v;
        }
    }
    Ok(SimilarityMatrix {
        concepts: models.iter().map(|(n, _)| n.clone()).collect(),
        values,
    })
}

/// Ridge term added to the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Target embedding expressed as a linear combination of basis embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    /// Cosine between target and reconstruction; 0 when degenerate.
    pub fit_cosine: f64,
    /// Set when the reconstruction is the zero vector.
    pub degenerate: bool,
}

/// Solves `(BᵀB + λI) c = Bᵀt` for the coefficients `c`.
pub fn least_squares_fit(target: &[f32], basis: &[&[f32]]) -> Result<LeastSquaresFit> {
    if basis.is_empty() {
        return Err(Error::Usage("least-squares fit needs at least one basis vector".into()));
    }
    for b in basis {
        if b.len() != target.len() {
            return Err(Error::Incomparable(format!(
                "basis vector of length {} against target of length {}",
                b.len(),
                target.len()
            )));
        }
    }
    let t = widen(target);
    let bs: Vec<Vec<f64>> = basis.iter().map(|b| widen(b)).collect();
    if bs.iter().all(|b| norm(b) == 0.0) {
        return Err(Error::Degenerate("every basis vector is zero".into()));
    }
    let k = bs.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            a[i][j] = dot(&bs[i], &bs[j]);
        }
        a[i][i] += RIDGE;
        a[i][k] = dot(&bs[i], &t);
    }
    let coefficients = solve(a)?;
    let mut recon = vec![0.0; t.len()];
    for (c, b) in coefficients.iter().zip(&bs) {
        for (r, v) in recon.iter_mut().zip(b) {
            *r += c * v;
        }
    }
    let (nr, nt) = (norm(&recon), norm(&t));
    let degenerate = nr == 0.0 || nt == 0.0;
    let fit_cosine = if degenerate {
        0.0
    } else {
        (dot(&recon, &t) / (nr * nt)).clamp(-1.0, 1.0)
    };
    Ok(LeastSquaresFit {
        coefficients,
        fit_cosine,
        degenerate,
    })
}

/// Gaussian elimination with partial pivoting on an augmented k×(k+1) matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let k = a.len();
    for col in 0..k {
        let pivot = (col..k)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() == 0.0 || !a[pivot][col].is_finite() {
            return Err(Error::Numeric("singular normal equations".into()));
        }
        a.swap(col, pivot);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            for c in col..=k {
                a[row][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let s: f64 = (row + 1..k).map(|c| a[row][c] * x[c]).sum();
        x[row] = (a[row][k] - s) / a[row][row];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(bits.len(), 1, bits.to_vec()).unwrap()
    }

    fn prob(values: &[f32]) -> Tensor {
        Tensor::new(vec![1, values.len()], values.to_vec()).unwrap()
    }

    fn model(concept: &str, kernel: Vec<f32>) -> ConceptModel {
        let c = kernel.len();
        ConceptModel::new(concept, "l", c, (1, 1), kernel, 0.0).unwrap()
    }

    #[test]
    fn iou_examples() {
        let iou = set_iou(&[mask(&[1, 1, 0, 0])], &[prob(&[0.9, 0.2, 0.7, 0.1])]).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(set_iou(&[mask(&[0, 0])], &[prob(&[0.1, 0.5])]).unwrap(), 0.0);
        // Pooled, not averaged: 1/1 and 1/3 pool to 2/4.
        let iou = set_iou(
            &[mask(&[1, 0]), mask(&[1, 1, 1])],
            &[prob(&[0.9, 0.1]), prob(&[0.9, 0.1, 0.0])],
        )
        .unwrap();
        assert!((iou - 0.5).abs() < 1e-12);
        assert!(set_iou(&[mask(&[1])], &[]).is_err());
    }

    #[test]
    fn mean_std_example() {
        let (m, s) = mean_std(&[0.2, 0.4]);
        assert!((m - 0.3).abs() < 1e-12 && (s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap()).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Degenerate(_))));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 0.0]), Err(Error::Incomparable(_))));
    }

    #[test]
    fn similarity_matrix_examples() {
        let m = similarity_matrix(&[
            ("leg".into(), vec![model("leg", vec![1.0, 0.0])]),
            ("arm".into(), vec![model("arm", vec![0.0, 1.0])]),
        ])
        .unwrap();
        assert_eq!(m.values[0][0], 1.0);
        assert!(m.values[0][1].abs() < 1e-12);

        let m = similarity_matrix(&[(
            "leg".into(),
            vec![model("leg", vec![1.0, 0.0]), model("leg", vec![1.0, 1.0])],
        )])
        .unwrap();
        assert!((m.values[0][0] - 0.5f64.sqrt()).abs() < 1e-12);

        let err = similarity_matrix(&[
            ("leg".into(), vec![model("leg", vec![1.0, 0.0])]),
            ("arm".into(), vec![model("arm", vec![1.0, 0.0, 0.0])]),
        ]);
        assert!(matches!(err, Err(Error::Incomparable(_))));
    }

    #[test]
    fn least_squares_examples() {
        let fit = least_squares_fit(&[2.0, 3.0, 0.0], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-6);
        assert!((fit.coefficients[1] - 3.0).abs() < 1e-6);
        assert!((fit.fit_cosine - 1.0).abs() < 1e-9);

        let fit = least_squares_fit(&[0.0, 0.0, 1.0], &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]).unwrap();
        assert!(fit.degenerate && fit.fit_cosine == 0.0);

        assert!(matches!(
            least_squares_fit(&[1.0, 0.0], &[&[0.0, 0.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(least_squares_fit(&[1.0, 0.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_bounded_and_symmetric(
            pair in (1usize..12).prop_flat_map(|n| (
                proptest::collection::vec(-5.0f32..5.0, n),
                proptest::collection::vec(-5.0f32..5.0, n),
            ))
        ) {
            let (a, b) = pair;
            if let (Ok(ab), Ok(ba)) = (cosine_similarity(&a, &b), cosine_similarity(&b, &a)) {
                prop_assert!((-1.0..=1.0).contains(&ab));
                prop_assert!((ab - ba).abs() < 1e-12);
            }
        }

        #[test]
        fn residual_is_orthogonal_to_basis(
            data in proptest::collection::vec(-3.0f32..3.0, 24)
        ) {
            let target = &data[..8];
            let basis = [&data[8..16], &data[16..24]];
            let fit = least_squares_fit(target, &basis).unwrap_or_else(|_| LeastSquaresFit {
                coefficients: vec![0.0, 0.0], fit_cosine: 0.0, degenerate: true,
            });
            if fit.degenerate { return Ok(()); }
            let scale: f64 = target.iter().map(|v| f64::from(*v).abs()).sum::<f64>() + 1.0;
            for b in basis {
                let resid: f64 = (0..8).map(|i| {
                    let r = f64::from(target[i])
                        - fit.coefficients[0] * f64::from(basis[0][i])
                        - fit.coefficients[1] * f64::from(basis[1][i]);
                    r * f64::from(b[i])
                }).sum();
                prop_assert!(resid.abs() <= 1e-5 * scale * scale, "{resid}");
            }
        }
    }
}
