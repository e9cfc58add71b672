//! Forward computation of the training objective: cross-entropy,
//! auxiliary-head loss, KL self-distillation, their weighted total, and a
//! closed-form softmax-CE gradient used for finite-difference checks.
//!
//! Probabilities are clamped to [1e-12, 1] inside logarithms; pixels
//! whose ground-truth label equals the ignore sentinel are excluded from
//! every mean.

use crate::error::{Error, Result};
use crate::heads::ProbMap;
use crate::tensor::bilinear_upsample;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_CLAMP_MIN: f64 = 1e-12;

/// Default weight of the auxiliary-head loss.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Default weight of the self-distillation loss.
pub const DEFAULT_BETA: f64 = 0.4;

/// Conventional ignore sentinel for label maps.
pub const DEFAULT_IGNORE: u32 = 255;

/// Ground-truth (or predicted) label raster with an ignore sentinel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    ignore_value: u32,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>, ignore_value: u32) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map length {} does not match {height}x{width}",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
            ignore_value,
        })
    }

    /// Label map with the conventional 255 ignore sentinel.
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        LabelMap::new(height, width, labels, DEFAULT_IGNORE)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn ignore_value(&self) -> u32 {
        self.ignore_value
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn is_ignored(&self, y: usize, x: usize) -> bool {
        self.get(y, x) == self.ignore_value
    }
}

/// Cross-entropy value plus a flag marking the degenerate all-ignored
/// case (defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CeLoss {
    pub value: f64,
    pub all_ignored: bool,
}

/// Weighted combination of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub aux: f64,
    pub sd: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// Mean over non-ignored pixels of `-ln p(true class)`.
pub fn cross_entropy(p: &ProbMap, y: &LabelMap) -> Result<CeLoss> {
    if p.height() != y.height() || p.width() != y.width() {
        return Err(Error::shape(format!(
            "probability map {}x{} does not match label map {}x{}",
            p.height(),
            p.width(),
            y.height(),
            y.width()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for py in 0..y.height() {
        for px in 0..y.width() {
            let label = y.get(py, px);
            if label == y.ignore_value() {
                continue;
            }
            if label as usize >= p.classes() {
                return Err(Error::validation(format!(
                    "label {label} at ({py},{px}) outside {} classes",
                    p.classes()
                )));
            }
            let prob = p.get(label as usize, py, px).clamp(PROB_CLAMP_MIN, 1.0);
            sum -= prob.ln();
            count += 1;
        }
    }
    if count == 0 {
        return Ok(CeLoss {
            value: 0.0,
            all_ignored: true,
        });
    }
    Ok(CeLoss {
        value: sum / count as f64,
        all_ignored: false,
    })
}

/// Bilinearly upsample a probability map to `(out_h, out_w)` and
/// renormalize each pixel to sum 1 (interpolation preserves the sum up to
/// rounding; renormalization removes that rounding).
pub fn upsample_probs(p: &ProbMap, out_h: usize, out_w: usize) -> Result<ProbMap> {
    let c = p.classes();
    let mut data = bilinear_upsample(p.data(), c, p.height(), p.width(), out_h, out_w)?;
    let n = out_h * out_w;
    for pixel in 0..n {
        let mut sum = 0.0;
        for class in 0..c {
            sum += data[class * n + pixel];
        }
        if sum > 0.0 {
            let inv = 1.0 / sum;
            for class in 0..c {
                data[class * n + pixel] *= inv;
            }
        }
    }
    ProbMap::new(c, out_h, out_w, data)
}

/// Sum over the D auxiliary heads of the cross-entropy between each
/// head's upsampled probability map and the ground truth.
pub fn aux_loss(aux_probs: &[ProbMap], y: &LabelMap, full_h: usize, full_w: usize) -> Result<f64> {
    if aux_probs.is_empty() {
        return Err(Error::config(
            "auxiliary loss needs at least one head".to_string(),
        ));
    }
    let mut total = 0.0;
    for p in aux_probs {
        let up = upsample_probs(p, full_h, full_w)?;
        total += cross_entropy(&up, y)?.value;
    }
    Ok(total)
}

/// Mean over pixels of `KL(p_s || p_t) = sum_c p_s ln(p_s / p_t)`,
/// with `0 ln 0 := 0`.
pub fn kl_self_distill(p_s: &ProbMap, p_t: &ProbMap) -> Result<f64> {
    if p_s.classes() != p_t.classes()
        || p_s.height() != p_t.height()
        || p_s.width() != p_t.width()
    {
        return Err(Error::shape(format!(
            "student map {}x{}x{} does not match teacher {}x{}x{}",
            p_s.classes(),
            p_s.height(),
            p_s.width(),
            p_t.classes(),
            p_t.height(),
            p_t.width()
        )));
    }
    let n = p_s.height() * p_s.width();
    let mut sum = 0.0;
    for (s, t) in p_s.data().iter().zip(p_t.data()) {
        if *s <= 0.0 {
            continue; // 0 ln 0 := 0
        }
        let s_c = s.clamp(PROB_CLAMP_MIN, 1.0);
        let t_c = t.clamp(PROB_CLAMP_MIN, 1.0);
        sum += s_c * (s_c.ln() - t_c.ln());
    }
    Ok(sum / n as f64)
}

/// Weighted total `ce + alpha * aux + beta * sd`; both weights must be
/// strictly positive.
pub fn total_loss(ce: f64, aux: f64, sd: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    if alpha <= 0.0 || beta <= 0.0 {
        return Err(Error::config(format!(
            "loss weights must be strictly positive, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(LossBreakdown {
        ce,
        aux,
        sd,
        alpha,
        beta,
        total: ce + alpha * aux + beta * sd,
    })
}

/// Gradient of `CE(softmax(logits), true_class)` with respect to the
/// logits: `softmax(logits) - onehot(true_class)`.
pub fn softmax_ce_gradient(logits: &[f64], true_class: usize) -> Result<Vec<f64>> {
    if true_class >= logits.len() {
        return Err(Error::validation(format!(
            "true class {true_class} outside {} logits",
            logits.len()
        )));
    }
    let mut grad = crate::tensor::softmax(logits)?;
    grad[true_class] -= 1.0;
    Ok(grad)
}
