//! Linear concept models: same-padded k×k cross-correlation with one output
//! filter, bilinear upscaling to mask resolution, then a sigmoid.
//!
//! The numeric kernels are generic over the float type so the gradient code
//! can be checked in f64 against finite differences.

use std::fs;
use std::path::{Path, PathBuf};

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maskgen::{BinaryMask, Concept};
use crate::tensors::Tensor;

/// Sizes shared by a model and the activations it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Geometry {
    pub fn kernel_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn map_len(&self) -> usize {
        self.height * self.width
    }
}

/// Cross-correlation (no kernel flip) with zero padding so the output is H×W.
pub fn correlate_same<T: Float>(act: &[T], kernel: &[T], bias: T, g: &Geometry) -> Vec<T> {
    let (ry, rx) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let mut out = vec![bias; g.map_len()];
    for c in 0..g.channels {
        let plane = &act[c * g.map_len()..(c + 1) * g.map_len()];
        let taps = &kernel[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let wgt = taps[(ky * g.kw as isize + kx) as usize];
                let (dy, dx) = (ky - ry, kx - rx);
                for y in (-dy).max(0)..(h - dy).min(h) {
                    let src = ((y + dy) * w) as usize;
                    let dst = (y * w) as usize;
                    for x in (-dx).max(0)..(w - dx).min(w) {
                        out[dst + x as usize] =
                            out[dst + x as usize] + wgt * plane[src + (x + dx) as usize];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`correlate_same`] w.r.t. kernel and bias given the upstream
/// gradient on its H×W output.
pub fn correlate_same_grad<T: Float>(act: &[T], upstream: &[T], g: &Geometry) -> (Vec<T>, T) {
    let (ry, rx) = ((g.kh / 2) as isize, (g.kw / 2) as isize);
    let (h, w) = (g.height as isize, g.width as isize);
    let mut dk = vec![T::zero(); g.kernel_len()];
    for c in 0..g.channels {
        let plane = &act[c * g.map_len()..(c + 1) * g.map_len()];
        for ky in 0..g.kh as isize {
            for kx in 0..g.kw as isize {
                let (dy, dx) = (ky - ry, kx - rx);
                let mut acc = T::zero();
                for y in (-dy).max(0)..(h - dy).min(h) {
                    let src = ((y + dy) * w) as usize;
                    let dst = (y * w) as usize;
                    for x in (-dx).max(0)..(w - dx).min(w) {
                        acc = acc + upstream[dst + x as usize] * plane[src + (x + dx) as usize];
                    }
                }
                dk[c * g.kh * g.kw + (ky * g.kw as isize + kx) as usize] = acc;
            }
        }
    }
    let db = upstream.iter().fold(T::zero(), |a, &v| a + v);
    (dk, db)
}

/// Per-axis bilinear sampling taps with half-pixel centers.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        let ratio = src as f64 / dst as f64;
        for j in 0..dst {
            let pos = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            taps.lo.push(lo);
            taps.hi.push((lo + 1).min(src - 1));
            taps.frac.push(pos - lo as f64);
        }
        taps
    }
}

/// Bilinear resize of an H×W map, sampling output pixel (i, j) at source
/// ((i + 0.5)·H/out_h − 0.5, (j + 0.5)·W/out_w − 0.5) clamped to the border.
pub fn bilinear_upscale<T: Float>(
    map: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (ty, tx) = (AxisTaps::new(h, out_h), AxisTaps::new(w, out_w));
    let cast = |v: f64| T::from(v).expect("taps are representable");
    // Rows first: h × out_w.
    let mut rows = vec![T::zero(); h * out_w];
    for y in 0..h {
        for j in 0..out_w {
            let f = cast(tx.frac[j]);
            let (a, b) = (map[y * w + tx.lo[j]], map[y * w + tx.hi[j]]);
            rows[y * out_w + j] = a + f * (b - a);
        }
    }
    let mut out = vec![T::zero(); out_h * out_w];
    for i in 0..out_h {
        let f = cast(ty.frac[i]);
        for j in 0..out_w {
            let (a, b) = (rows[ty.lo[i] * out_w + j], rows[ty.hi[i] * out_w + j]);
            out[i * out_w + j] = a + f * (b - a);
        }
    }
    out
}

/// Adjoint of [`bilinear_upscale`]: splats an out_h×out_w gradient back onto
/// the H×W source with the same weights.
pub fn bilinear_adjoint<T: Float>(
    grad: &[T],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let (ty, tx) = (AxisTaps::new(h, out_h), AxisTaps::new(w, out_w));
    let cast = |v: f64| T::from(v).expect("taps are representable");
    let mut rows = vec![T::zero(); h * out_w];
    for i in 0..out_h {
        let f = cast(ty.frac[i]);
        for j in 0..out_w {
            let g = grad[i * out_w + j];
            rows[ty.lo[i] * out_w + j] = rows[ty.lo[i] * out_w + j] + (T::one() - f) * g;
            rows[ty.hi[i] * out_w + j] = rows[ty.hi[i] * out_w + j] + f * g;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for j in 0..out_w {
            let f = cast(tx.frac[j]);
            let g = rows[y * out_w + j];
            out[y * w + tx.lo[j]] = out[y * w + tx.lo[j]] + (T::one() - f) * g;
            out[y * w + tx.hi[j]] = out[y * w + tx.hi[j]] + f * g;
        }
    }
    out
}

pub fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Pixel is set iff its probability is strictly above 0.5.
pub fn binarize(prob: &[f32]) -> Vec<u8> {
    prob.iter().map(|&p| u8::from(p > 0.5)).collect()
}

/// Binarizes an out_w×out_h probability map into a mask.
pub fn binarize_mask(prob: &Tensor) -> Result<BinaryMask> {
    match prob.shape() {
        [h, w] => BinaryMask::from_bits(*w, *h, binarize(prob.data())),
        other => Err(Error::Shape(format!("expected a 2D map, got {other:?}"))),
    }
}

/// A one-filter concept model attached to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub concept: String,
    pub layer: String,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    /// C×kh×kw, C-major.
    pub kernel: Vec<f32>,
    pub bias: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelSidecar {
    concept: String,
    layer: String,
    channels: usize,
    kh: usize,
    kw: usize,
    bias: f32,
}

impl ConceptModel {
    pub fn zeros(concept: &str, layer: &str, channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(
            concept,
            layer,
            channels,
            (kh, kw),
            vec![0.0; channels * kh * kw],
            0.0,
        )
    }

    pub fn new(
        concept: &str,
        layer: &str,
        channels: usize,
        (kh, kw): (usize, usize),
        kernel: Vec<f32>,
        bias: f32,
    ) -> Result<Self> {
        if channels == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!(
                "kernel {channels}×{kh}×{kw} needs C ≥ 1 and odd extents"
            )));
        }
        if kernel.len() != channels * kh * kw {
            return Err(Error::Shape(format!(
                "kernel {channels}×{kh}×{kw} needs {} weights, got {}",
                channels * kh * kw,
                kernel.len()
            )));
        }
        if kernel.iter().chain([&bias]).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        Ok(Self {
            concept: concept.to_string(),
            layer: layer.to_string(),
            channels,
            kh,
            kw,
            kernel,
            bias,
        })
    }

    /// The concept embedding vector.
    pub fn embedding(&self) -> &[f32] {
        &self.kernel
    }

    pub fn geometry(&self, act: &Tensor) -> Result<Geometry> {
        let (c, h, w) = act.dims3()?;
        if c != self.channels {
            return Err(Error::Shape(format!(
                "activation has {c} channels, model `{}` expects {}",
                self.concept, self.channels
            )));
        }
        Ok(Geometry {
            channels: c,
            height: h,
            width: w,
            kh: self.kh,
            kw: self.kw,
        })
    }

    /// Pre-sigmoid H×W map at activation resolution.
    pub fn logits(&self, act: &Tensor) -> Result<Vec<f32>> {
        let g = self.geometry(act)?;
        Ok(correlate_same(act.data(), &self.kernel, self.bias, &g))
    }

    /// Probability map of shape (out_h, out_w).
    pub fn forward(&self, act: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
        let g = self.geometry(act)?;
        let logits = correlate_same(act.data(), &self.kernel, self.bias, &g);
        let up = bilinear_upscale(&logits, g.height, g.width, out_h, out_w);
        Tensor::new(vec![out_h, out_w], up.into_iter().map(sigmoid).collect())
    }

    fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
        (dir.join(format!("{name}.json")), dir.join(format!("{name}.wts")))
    }

    /// Writes `<name>.json` and the raw little-endian f32 kernel `<name>.wts`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (meta, wts) = Self::paths(dir, name);
        let sidecar = ModelSidecar {
            concept: self.concept.clone(),
            layer: self.layer.clone(),
            channels: self.channels,
            kh: self.kh,
            kw: self.kw,
            bias: self.bias,
        };
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&meta, e))?;
        fs::write(&meta, text + "\n").map_err(|e| Error::io(&meta, e))?;
        let bytes: Vec<u8> = self.kernel.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&wts, bytes).map_err(|e| Error::io(&wts, e))
    }

    pub fn load(dir: &Path, name: &str) -> Result<Self> {
        let (meta, wts) = Self::paths(dir, name);
        let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let s: ModelSidecar = serde_json::from_str(&text).map_err(|e| Error::json(&meta, e))?;
        let bytes = fs::read(&wts).map_err(|e| Error::io(&wts, e))?;
        if bytes.len() != 4 * s.channels * s.kh * s.kw {
            return Err(Error::Format(format!(
                "{}: {} bytes for a {}×{}×{} kernel",
                wts.display(),
                bytes.len(),
                s.channels,
                s.kh,
                s.kw
            )));
        }
        let kernel = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(&s.concept, &s.layer, s.channels, (s.kh, s.kw), kernel, s.bias)
    }
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
}

/// Average of L2-normalized models; biases are divided by the same norms.
pub fn mean_model(models: &[ConceptModel]) -> Result<ConceptModel> {
    let first = models
        .first()
        .ok_or_else(|| Error::Degenerate("mean of zero models".into()))?;
    let mut kernel = vec![0.0f64; first.kernel.len()];
    let mut bias = 0.0f64;
    for m in models {
        if (m.channels, m.kh, m.kw) != (first.channels, first.kh, first.kw) {
            return Err(Error::Incomparable(format!(
                "kernel {}×{}×{} vs {}×{}×{}",
                m.channels, m.kh, m.kw, first.channels, first.kh, first.kw
            )));
        }
        let norm = l2_norm(&m.kernel);
        if norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "model `{}` has a zero kernel",
                m.concept
            )));
        }
        for (acc, &w) in kernel.iter_mut().zip(&m.kernel) {
            *acc += f64::from(w) / norm;
        }
        bias += f64::from(m.bias) / norm;
    }
    let n = models.len() as f64;
    ConceptModel::new(
        &first.concept,
        &first.layer,
        first.channels,
        (first.kh, first.kw),
        kernel.into_iter().map(|v| (v / n) as f32).collect(),
        (bias / n) as f32,
    )
}

/// Concept extent as (height, width) fractions of the person height.
pub fn concept_extent(concept: Concept) -> (f64, f64) {
    match concept {
        Concept::Leg => (0.3, 0.1),
        Concept::Arm => (0.2, 0.15),
        Concept::Foot | Concept::Hand => (0.1, 0.1),
        Concept::Eye => (0.04, 0.04),
    }
}

fn odd_ceil(v: f64) -> usize {
    let n = v.ceil().max(1.0) as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Kernel (kh, kw) covering the concept's expected extent at a layer with the
/// given downsampling stride; each side is rounded up to an odd size.
pub fn adaptive_kernel(mean_person_px: f64, concept: Concept, stride: f64) -> Result<(usize, usize)> {
    if !(stride >= 1.0) || !(mean_person_px > 0.0) || !mean_person_px.is_finite() {
        return Err(Error::Domain(format!(
            "adaptive kernel needs stride ≥ 1 and a positive person size (got {stride}, {mean_person_px})"
        )));
    }
    let (rh, rw) = concept_extent(concept);
    Ok((
        odd_ceil(rh * mean_person_px / stride),
        odd_ceil(rw * mean_person_px / stride),
    ))
}
