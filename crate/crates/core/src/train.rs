//! Losses with analytic gradients, Adam, the training loop and k-fold
//! cross-validation.

use std::borrow::Cow;
use std::path::PathBuf;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::BinaryMask;
use crate::metrics::{evaluate, EvalReport};
use crate::model::{
    bilinear_adjoint, bilinear_upscale, correlate_same, correlate_same_grad, sigmoid,
    ConceptModel, Geometry,
};
use crate::tensors::{ActivationCache, Tensor};

/// Additive smoothing of the Dice ratio (numerator and denominator).
pub const DICE_SMOOTHING: f64 = 1e-6;
/// Lower clamp for log arguments in the weighted BCE.
pub const LOG_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dice,
    BceBatchWeighted,
    BceGlobalWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BceMode {
    Batch,
    Global,
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("constant is representable")
}

/// Per-image Dice loss `1 − (2Σ gt·p + ε)/(Σ gt + Σ p + ε)` and its gradient
/// with respect to `pred`.
pub fn dice_loss<T: Float>(pred: &[T], gt: &[T]) -> (T, Vec<T>) {
    let eps = cast::<T>(DICE_SMOOTHING);
    let two = cast::<T>(2.0);
    let (mut inter, mut sum_gt, mut sum_p) = (T::zero(), T::zero(), T::zero());
    for (&p, &g) in pred.iter().zip(gt) {
        inter = inter + g * p;
        sum_gt = sum_gt + g;
        sum_p = sum_p + p;
    }
    let num = two * inter + eps;
    let den = sum_gt + sum_p + eps;
    let loss = T::one() - num / den;
    let den2 = den * den;
    let grad = gt.iter().map(|&g| (num - two * g * den) / den2).collect();
    (loss, grad)
}

/// Class-weighted BCE over all pixels: positives weighted by `1 − p`,
/// negatives by `p`, where `p` is the positive fraction of this batch
/// (`Batch`) or of the whole dataset (`Global`).
pub fn weighted_bce_loss<T: Float>(
    pred: &[T],
    gt: &[T],
    mode: BceMode,
    global_pos_frac: Option<f64>,
) -> Result<(T, Vec<T>)> {
    let pos_frac = match (mode, global_pos_frac) {
        (BceMode::Global, Some(p)) if p > 0.0 && p < 1.0 => p,
        (BceMode::Global, _) => {
            return Err(Error::Usage(
                "global BCE weighting needs a positive fraction in (0, 1)".into(),
            ))
        }
        (BceMode::Batch, _) => {
            let pos: f64 = gt.iter().map(|g| g.to_f64().unwrap_or(0.0)).sum();
            if gt.is_empty() {
                0.0
            } else {
                pos / gt.len() as f64
            }
        }
    };
    let (alpha, beta) = (cast::<T>(1.0 - pos_frac), cast::<T>(pos_frac));
    let clamp = cast::<T>(LOG_CLAMP);
    let n = cast::<T>(pred.len().max(1) as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(gt) {
        let q = T::one() - p;
        let (lp, dlp) = if p > clamp { (p.ln(), T::one() / p) } else { (clamp.ln(), T::zero()) };
        let (lq, dlq) = if q > clamp { (q.ln(), T::one() / q) } else { (clamp.ln(), T::zero()) };
        let neg_g = T::one() - g;
        total = total - (alpha * g * lp + beta * neg_g * lq);
        grad.push(-(alpha * g * dlp - beta * neg_g * dlq) / n);
    }
    Ok((total / n, grad))
}

/// Loss selection resolved against the dataset (global weighting needs the
/// dataset-wide positive fraction).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossSpec {
    Dice,
    BceBatch,
    BceGlobal(f64),
}

/// One batch element in a generic float type.
pub struct Example<T> {
    pub activation: Vec<T>,
    pub truth: Vec<T>,
    pub out_h: usize,
    pub out_w: usize,
}

/// Batch-mean loss and its gradient w.r.t. (kernel, bias), chained through
/// sigmoid, bilinear upscaling and the same-padded correlation.
pub fn batch_loss_grad<T: Float>(
    kernel: &[T],
    bias: T,
    g: &Geometry,
    batch: &[Example<T>],
    loss: LossSpec,
) -> Result<(T, Vec<T>, T)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut preds = Vec::with_capacity(batch.len());
    for ex in batch {
        if ex.activation.len() != g.channels * g.map_len() || ex.truth.len() != ex.out_h * ex.out_w
        {
            return Err(Error::Shape(format!(
                "batch element does not match geometry {g:?} / {}×{} mask",
                ex.out_h, ex.out_w
            )));
        }
        let logits = correlate_same(&ex.activation, kernel, bias, g);
        let up = bilinear_upscale(&logits, g.height, g.width, ex.out_h, ex.out_w);
        preds.push(up.into_iter().map(sigmoid).collect::<Vec<T>>());
    }

    let b = cast::<T>(batch.len() as f64);
    let (loss_value, dpred): (T, Vec<Vec<T>>) = match loss {
        LossSpec::Dice => {
            let mut total = T::zero();
            let mut grads = Vec::with_capacity(batch.len());
            for (p, ex) in preds.iter().zip(batch) {
                let (l, d) = dice_loss(p, &ex.truth);
                total = total + l;
                grads.push(d.into_iter().map(|v| v / b).collect());
            }
            (total / b, grads)
        }
        LossSpec::BceBatch | LossSpec::BceGlobal(_) => {
            let flat_p: Vec<T> = preds.iter().flatten().copied().collect();
            let flat_g: Vec<T> = batch.iter().flat_map(|ex| ex.truth.iter().copied()).collect();
            let (mode, frac) = match loss {
                LossSpec::BceGlobal(p) => (BceMode::Global, Some(p)),
                _ => (BceMode::Batch, None),
            };
            let (l, d) = weighted_bce_loss(&flat_p, &flat_g, mode, frac)?;
            let mut grads = Vec::with_capacity(batch.len());
            let mut offset = 0;
            for ex in batch {
                let n = ex.out_h * ex.out_w;
                grads.push(d[offset..offset + n].to_vec());
                offset += n;
            }
            (l, grads)
        }
    };

    let mut dk = vec![T::zero(); g.kernel_len()];
    let mut db = T::zero();
    for ((ex, p), dp) in batch.iter().zip(&preds).zip(dpred) {
        let dz_up: Vec<T> = dp
            .iter()
            .zip(p)
            .map(|(&d, &s)| d * s * (T::one() - s))
            .collect();
        let dz = bilinear_adjoint(&dz_up, g.height, g.width, ex.out_h, ex.out_w);
        let (k, bb) = correlate_same_grad(&ex.activation, &dz, g);
        for (acc, v) in dk.iter_mut().zip(k) {
            *acc = *acc + v;
        }
        db = db + bb;
    }
    Ok((loss_value, dk, db))
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// (kh, kw).
    pub kernel: [usize; 2],
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Dataset positive fraction for `bce_global_weighted`; computed from the
    /// training masks when absent.
    pub global_pos_frac: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Dice,
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 5,
            seed: 0,
            kernel: [1, 1],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            global_pos_frac: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Usage(msg.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("kernel extents must be odd and positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if let Some(p) = self.global_pos_frac {
            if !(p > 0.0 && p < 1.0) {
                return bad("global_pos_frac must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

/// Adam moments over the flattened parameters (kernel followed by bias).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut AdamState, params: &mut [f32], grads: &[f32], cfg: &TrainConfig) {
    debug_assert_eq!(params.len(), grads.len());
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let c1 = 1.0 - (cfg.beta1).powi(t);
    let c2 = 1.0 - (cfg.beta2).powi(t);
    let (lr, eps) = (cfg.learning_rate, cfg.epsilon);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = f64::from(state.m[i]) / c1;
        let v_hat = f64::from(state.v[i]) / c2;
        params[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
}

/// Where a sample's ground-truth mask lives.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Mask(BinaryMask),
    Pgm(PathBuf),
}

impl GroundTruth {
    pub fn load(&self) -> Result<Cow<'_, BinaryMask>> {
        match self {
            GroundTruth::Mask(m) => Ok(Cow::Borrowed(m)),
            GroundTruth::Pgm(path) => BinaryMask::read_pgm(path).map(Cow::Owned),
        }
    }
}

/// A cache sample id paired with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: String,
    pub truth: GroundTruth,
}

impl LabeledSample {
    pub fn in_memory(id: &str, mask: BinaryMask) -> Self {
        Self {
            id: id.to_string(),
            truth: GroundTruth::Mask(mask),
        }
    }
}

fn mask_as<T: Float>(mask: &BinaryMask) -> Vec<T> {
    mask.bits()
        .iter()
        .map(|&b| if b != 0 { T::one() } else { T::zero() })
        .collect()
}

fn load_example(cache: &ActivationCache, sample: &LabeledSample) -> Result<Example<f32>> {
    let act = cache.read_sample(&sample.id)?;
    let mask = sample.truth.load()?;
    Ok(Example {
        activation: act.into_data(),
        truth: mask_as(&mask),
        out_h: mask.height(),
        out_w: mask.width(),
    })
}

/// Positive-pixel fraction over a dataset, streaming one mask at a time.
pub fn positive_fraction(dataset: &[LabeledSample]) -> Result<f64> {
    let (mut pos, mut total) = (0usize, 0usize);
    for s in dataset {
        let m = s.truth.load()?;
        pos += m.count();
        total += m.bits().len();
    }
    Ok(if total == 0 { 0.0 } else { pos as f64 / total as f64 })
}

fn resolve_loss(cfg: &TrainConfig, dataset: &[LabeledSample]) -> Result<LossSpec> {
    Ok(match cfg.loss {
        LossKind::Dice => LossSpec::Dice,
        LossKind::BceBatchWeighted => LossSpec::BceBatch,
        LossKind::BceGlobalWeighted => {
            let p = match cfg.global_pos_frac {
                Some(p) => p,
                None => positive_fraction(dataset)?,
            };
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Usage(format!(
                    "dataset positive fraction {p} leaves global BCE weights undefined"
                )));
            }
            LossSpec::BceGlobal(p)
        }
    })
}

/// Gradients of the batch-mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    pub kernel: Vec<f32>,
    pub bias: f32,
}

/// Loss and analytic gradients for `model` on in-memory samples (f32).
pub fn loss_and_grads(
    model: &ConceptModel,
    batch: &[(&Tensor, &BinaryMask)],
    loss: LossSpec,
) -> Result<Gradients> {
    let (examples, g) = examples_for(model, batch, |v: f32| v)?;
    let (l, dk, db) = batch_loss_grad(&model.kernel, model.bias, &g, &examples, loss)?;
    Ok(Gradients {
        loss: f64::from(l),
        kernel: dk,
        bias: db,
    })
}

/// f64 verification variant of [`loss_and_grads`]; also returns the f64 loss
/// function so callers can probe it with finite differences.
pub fn loss_and_grads_f64(
    kernel: &[f64],
    bias: f64,
    model: &ConceptModel,
    batch: &[(&Tensor, &BinaryMask)],
    loss: LossSpec,
) -> Result<(f64, Vec<f64>, f64)> {
    let (examples, g) = examples_for(model, batch, f64::from)?;
    batch_loss_grad(kernel, bias, &g, &examples, loss)
}

fn examples_for<T: Float>(
    model: &ConceptModel,
    batch: &[(&Tensor, &BinaryMask)],
    conv: impl Fn(f32) -> T,
) -> Result<(Vec<Example<T>>, Geometry)> {
    let mut geometry = None;
    let mut examples = Vec::with_capacity(batch.len());
    for (act, mask) in batch {
        let g = model.geometry(act)?;
        if geometry.is_some_and(|prev| prev != g) {
            return Err(Error::Shape("activations in one batch differ in shape".into()));
        }
        geometry = Some(g);
        examples.push(Example {
            activation: act.data().iter().map(|&v| conv(v)).collect(),
            truth: mask_as(mask),
            out_h: mask.height(),
            out_w: mask.width(),
        });
    }
    let g = geometry.ok_or_else(|| Error::Shape("empty batch".into()))?;
    Ok((examples, g))
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ConceptModel,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
}

/// Seeded uniform(±1/√fan_in) kernel, zero bias.
pub fn init_model(
    concept: &str,
    layer: &str,
    channels: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ConceptModel> {
    let [kh, kw] = cfg.kernel;
    let n = channels * kh * kw;
    let bound = 1.0 / (n as f32).sqrt();
    let kernel = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    ConceptModel::new(concept, layer, channels, (kh, kw), kernel, 0.0)
}

/// Trains a concept model with Adam, reading one batch of activations at a
/// time from `cache`. Samples are reshuffled every epoch; the last partial
/// batch is kept.
pub fn train(
    concept: &str,
    dataset: &[LabeledSample],
    cache: &ActivationCache,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    let (channels, height, width) = cache.dims();
    let loss = resolve_loss(cfg, dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = init_model(concept, &cache.manifest().layer, channels, cfg, &mut rng)?;
    let g = Geometry {
        channels,
        height,
        width,
        kh: model.kh,
        kw: model.kw,
    };

    let mut params: Vec<f32> = model.kernel.iter().copied().chain([model.bias]).collect();
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.max_epochs);
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| load_example(cache, &dataset[i]))
                .collect::<Result<Vec<_>>>()?;
            let (kernel, bias) = params.split_at(g.kernel_len());
            let (l, dk, db) = batch_loss_grad(kernel, bias[0], &g, &batch, loss)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("loss became {l} in epoch {epoch}")));
            }
            let grads: Vec<f32> = dk.into_iter().chain([db]).collect();
            adam_step(&mut adam, &mut params, &grads, cfg);
            sum += f64::from(l);
            batches += 1;
        }
        history.push(sum / batches as f64);
    }
    let bias = params.pop().expect("bias is the last parameter");
    let model = ConceptModel::new(concept, &model.layer, channels, (g.kh, g.kw), params, bias)?;
    Ok(TrainOutcome { model, history })
}

/// Seeded shuffle of `0..n` split into `k` contiguous folds whose sizes
/// differ by at most one (larger folds first).
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || n < k {
        return Err(Error::Usage(format!(
            "{k}-fold cross-validation needs at least {k} samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        folds.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(folds)
}

/// One fold of a cross-validation run.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub model: ConceptModel,
    pub history: Vec<f64>,
    pub validation: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub folds: Vec<FoldResult>,
    /// Mean and population stddev of the per-fold validation set IoU.
    pub mean_iou: f64,
    pub std_iou: f64,
}

/// k-fold cross-validation: fold `i` trains on every other fold and is
/// evaluated on fold `i`.
pub fn cross_validate(
    concept: &str,
    dataset: &[LabeledSample],
    cache: &ActivationCache,
    cfg: &TrainConfig,
    k: usize,
) -> Result<CrossValidation> {
    cfg.validate()?;
    let folds = fold_assignment(dataset.len(), k, cfg.seed)?;
    let mut results = Vec::with_capacity(k);
    for (i, held_out) in folds.iter().enumerate() {
        let train_set: Vec<LabeledSample> = folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().map(|&s| dataset[s].clone()))
            .collect();
        let val_set: Vec<LabeledSample> = held_out.iter().map(|&s| dataset[s].clone()).collect();
        let outcome = train(concept, &train_set, cache, cfg)?;
        let mut report = evaluate(&outcome.model, &val_set, cache, cfg.batch_size)?;
        report.fold = Some(i);
        results.push(FoldResult {
            fold: i,
            model: outcome.model,
            history: outcome.history,
            validation: held_out.clone(),
            report,
        });
    }
    let ious: Vec<f64> = results.iter().map(|r| r.report.mean).collect();
    let (mean_iou, std_iou) = crate::metrics::mean_std(&ious);
    Ok(CrossValidation {
        folds: results,
        mean_iou,
        std_iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::{CacheWriter, DType};
    use proptest::prelude::*;
    use rand_distr::{Distribution, Uniform};

    fn mask(w: usize, h: usize, bits: &[u8]) -> BinaryMask {
        BinaryMask::from_bits(w, h, bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let (l, _) = dice_loss(&[1.0f64, 0.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0]);
        assert!(l.abs() < 1e-9);
        let (l, _) = dice_loss(&[0.5f64; 4], &[1.0; 4]);
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
        let (l, g) = dice_loss(&[0.0f64; 4], &[0.0; 4]);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn dice_gradient_matches_quotient_rule_numerically() {
        let p = [0.2f64, 0.7, 0.4, 0.9, 0.05];
        let gt = [1.0f64, 1.0, 0.0, 0.0, 1.0];
        let (_, g) = dice_loss(&p, &gt);
        for i in 0..p.len() {
            let mut hi = p;
            let mut lo = p;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd = (dice_loss(&hi, &gt).0 - dice_loss(&lo, &gt).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn bce_examples() {
        let (l, _) = weighted_bce_loss(&[0.5f64, 0.5], &[1.0, 0.0], BceMode::Batch, None).unwrap();
        assert!((l - 0.5 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l - 0.3466).abs() < 1e-4);
        let (l, _) = weighted_bce_loss(&[1.0f64], &[1.0], BceMode::Global, Some(0.3)).unwrap();
        assert_eq!(l, 0.0);
        // Symmetric weights halve the plain BCE.
        let p = [0.3f64, 0.8, 0.6, 0.1];
        let gt = [1.0, 0.0, 1.0, 0.0];
        let plain: f64 = -p
            .iter()
            .zip(&gt)
            .map(|(p, g)| g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            .sum::<f64>()
            / 4.0;
        let (l, _) = weighted_bce_loss(&p, &gt, BceMode::Batch, None).unwrap();
        assert!((l - 0.5 * plain).abs() < 1e-12);
        assert!(matches!(
            weighted_bce_loss(&p, &gt, BceMode::Global, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        // A saturated model on a matching mask: Dice gradient vanishes only in
        // the limit, so use a fully certain prediction via huge logits.
        let act = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let gt = mask(2, 1, &[1, 0]);
        let model = ConceptModel::new("c", "l", 1, (1, 1), vec![200.0], 0.0).unwrap();
        let g = loss_and_grads(&model, &[(&act, &gt)], LossSpec::Dice).unwrap();
        assert!(g.loss.abs() < 1e-5);
        assert!(g.kernel.iter().all(|&v| v == 0.0) && g.bias == 0.0);
    }

    #[test]
    fn one_pixel_gradient_is_logistic() {
        // 1×1 activation, 1×1 mask, k = 1, batch BCE with p = 1 (α = 0, β = 1)
        // would be degenerate; use global weighting with p = 0.5 instead:
        // d/dz of 0.5·BCE(σ(z), y) = 0.5·(σ(z) − y).
        let x = [0.7f32, -1.3];
        let act = Tensor::new(vec![2, 1, 1], x.to_vec()).unwrap();
        let model = ConceptModel::new("c", "l", 2, (1, 1), vec![0.4, 0.9], -0.2).unwrap();
        for y in [0u8, 1] {
            let gt = mask(1, 1, &[y]);
            let g = loss_and_grads(&model, &[(&act, &gt)], LossSpec::BceGlobal(0.5)).unwrap();
            let z = 0.4 * x[0] + 0.9 * x[1] - 0.2;
            let resid = 0.5 * (sigmoid(z) - f32::from(y));
            assert!((g.bias - resid).abs() < 1e-6);
            for c in 0..2 {
                assert!((g.kernel[c] - resid * x[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(3);
        let mut params = vec![1.0f32, 1.0, 1.0];
        adam_step(&mut state, &mut params, &[0.3, -20.0, 1e-4], &cfg);
        for (p, sign) in params.iter().zip([1.0f32, -1.0, 1.0]) {
            assert!(((1.0 - p) - sign * 1e-3).abs() < 1e-5, "{p}");
        }

        let mut state = AdamState::new(2);
        let mut params = vec![0.5f32, -0.5];
        for _ in 0..3 {
            adam_step(&mut state, &mut params, &[0.0, 0.0], &cfg);
        }
        assert_eq!(params, vec![0.5, -0.5]);

        let mut state = AdamState::new(1);
        let mut p = [0.0f32];
        adam_step(&mut state, &mut p, &[0.7], &cfg);
        let first = p[0].abs();
        let before = p[0];
        adam_step(&mut state, &mut p, &[0.7], &cfg);
        assert!((p[0] - before).abs() <= first + 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.max_epochs = 0;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        let cfg = TrainConfig { kernel: [2, 1], ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"loss":"bce_batch_weighted","batch_size":4}"#).unwrap();
        assert_eq!(cfg.loss, LossKind::BceBatchWeighted);
        assert_eq!(cfg.learning_rate, 1e-3);
    }

    #[test]
    fn fold_examples() {
        let folds = fold_assignment(10, 5, 3).unwrap();
        assert!(folds.iter().all(|f| f.len() == 2));
        let mut all: Vec<usize> = folds.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let sizes: Vec<usize> = fold_assignment(11, 5, 3).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        assert_eq!(fold_assignment(11, 5, 9).unwrap(), fold_assignment(11, 5, 9).unwrap());
        assert!(fold_assignment(4, 5, 0).is_err());
    }

    fn tiny_cache(dir: &std::path::Path) -> (ActivationCache, Vec<LabeledSample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = Uniform::new(-1.0f32, 1.0).unwrap();
        let mut w = CacheWriter::create(dir, "toy", (2, 3, 3), DType::F32).unwrap();
        let mut samples = Vec::new();
        for i in 0..6 {
            let data: Vec<f32> = (0..18).map(|_| u.sample(&mut rng)).collect();
            let bits: Vec<u8> = data[..9]
                .iter()
                .flat_map(|&v| {
                    let b = u8::from(v > 0.0);
                    [b, b]
                })
                .collect();
            let id = format!("s{i}");
            w.write_sample(&id, &Tensor::new(vec![2, 3, 3], data).unwrap()).unwrap();
            // 6×3 mask: each activation column doubled horizontally.
            samples.push(LabeledSample::in_memory(&id, mask(6, 3, &bits)));
        }
        (w.finish().unwrap(), samples)
    }

    #[test]
    fn training_is_deterministic_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        let (cache, samples) = tiny_cache(dir.path());
        let cfg = TrainConfig { batch_size: 4, seed: 5, ..TrainConfig::default() };
        let a = train("c", &samples, &cache, &cfg).unwrap();
        let b = train("c", &samples, &cache, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.len(), 5);
        assert!(matches!(train("c", &[], &cache, &cfg), Err(Error::Usage(_))));
        let bad = TrainConfig { max_epochs: 0, ..cfg };
        assert!(train("c", &samples, &cache, &bad).is_err());
    }

    #[test]
    fn cross_validation_covers_every_sample() {
        let dir = tempfile::tempdir().unwrap();
        let (cache, samples) = tiny_cache(dir.path());
        let cfg = TrainConfig { batch_size: 2, max_epochs: 1, ..TrainConfig::default() };
        let cv = cross_validate("c", &samples, &cache, &cfg, 3).unwrap();
        assert_eq!(cv.folds.len(), 3);
        let mut seen: Vec<usize> = cv.folds.iter().flat_map(|f| f.validation.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        assert!((0.0..=1.0).contains(&cv.mean_iou) && cv.std_iou >= 0.0);
    }

    proptest! {
        #[test]
        fn dice_is_bounded(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let g: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let (l, _) = dice_loss(&p, &g);
            prop_assert!((0.0..=1.0).contains(&l));
            let (same, _) = dice_loss(&g, &g);
            prop_assert!(same <= 1e-5);
        }

        #[test]
        fn weighted_bce_is_nonnegative(
            pairs in proptest::collection::vec((0.0f64..=1.0, any::<bool>()), 1..40)
        ) {
            let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
            let g: Vec<f64> = pairs.iter().map(|x| f64::from(u8::from(x.1))).collect();
            let (l, _) = weighted_bce_loss(&p, &g, BceMode::Batch, None).unwrap();
            prop_assert!(l >= 0.0);
        }
    }
}
