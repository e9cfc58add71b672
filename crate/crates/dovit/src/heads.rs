//! Auxiliary probe heads and the segmentation decoder.
//!
//! Both heads are per-pixel linear classifiers (1x1 convolutions) over a
//! reconstructed feature map; the decoder additionally upsamples its
//! logits to image resolution before the softmax.

use crate::error::{Error, Result};
use crate::model::{HeadParams, TokenSequence};
use crate::tensor::{bilinear_upsample, softmax_in_place, Matrix};

/// Channel-major feature volume `E x h x w` reshaped from a full token
/// sequence (class token dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    /// Index `c*h*w + y*w + x`.
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "feature map data length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// Pixel-major `(h*w) x E` matrix: row k holds the feature vector of
    /// raster pixel k.
    pub fn to_pixel_rows(&self) -> Matrix {
        let n = self.height * self.width;
        Matrix::from_fn(n, self.channels, |pixel, c| self.data[c * n + pixel])
    }

    /// Inverse of [`tokens_to_feature_map`]: tokens in raster order,
    /// without a class token. Roundtrips bit-exactly.
    pub fn to_tokens(&self) -> Result<TokenSequence> {
        TokenSequence::new(self.to_pixel_rows(), false)
    }
}

/// Channel-major probability volume `C x h x w`; every pixel's class
/// probabilities sum to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    /// Index `c*h*w + y*w + x`.
    data: Vec<f64>,
}

/// Tolerance on per-pixel probability normalization.
const PIXEL_SUM_TOL: f64 = 1e-6;

impl ProbMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != classes * height * width {
            return Err(Error::shape(format!(
                "probability map data length {} does not match {classes}x{height}x{width}",
                data.len()
            )));
        }
        let n = height * width;
        for pixel in 0..n {
            let mut sum = 0.0;
            for c in 0..classes {
                let p = data[c * n + pixel];
                if !(0.0..=1.0 + PIXEL_SUM_TOL).contains(&p) {
                    return Err(Error::validation(format!(
                        "probability {p} at pixel {pixel}, class {c} outside [0,1]"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > PIXEL_SUM_TOL {
                return Err(Error::validation(format!(
                    "pixel {pixel} probabilities sum to {sum}, expected 1"
                )));
            }
        }
        Ok(ProbMap {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[c * self.height * self.width + y * self.width + x]
    }

    /// One pixel's class distribution.
    pub fn pixel_probs(&self, y: usize, x: usize) -> Vec<f64> {
        let n = self.height * self.width;
        let pixel = y * self.width + x;
        (0..self.classes).map(|c| self.data[c * n + pixel]).collect()
    }

    /// `C x N` matrix with one row per class and one column per raster
    /// pixel — the layout consumed by confidence scoring.
    pub fn class_rows(&self) -> Matrix {
        Matrix::from_vec(self.classes, self.height * self.width, self.data.clone())
            .expect("probability data is finite and sized C*h*w")
    }

    /// Per-pixel arg-max labels in raster order; ties resolve to the
    /// lowest class index.
    pub fn argmax_labels(&self) -> Vec<usize> {
        let n = self.height * self.width;
        (0..n)
            .map(|pixel| {
                let mut best = f64::NEG_INFINITY;
                let mut best_class = 0;
                for c in 0..self.classes {
                    let p = self.data[c * n + pixel];
                    if p > best {
                        best = p;
                        best_class = c;
                    }
                }
                best_class
            })
            .collect()
    }

    /// Maximum absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &ProbMap) -> f64 {
        assert_eq!(self.classes, other.classes);
        assert_eq!(self.height, other.height);
        assert_eq!(self.width, other.width);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Reshape a full token sequence to its `E x h x w` feature map. Token k
/// lands at raster position (k / w, k mod w); the class token, when
/// present, is dropped.
pub fn tokens_to_feature_map(seq: &TokenSequence, h: usize, w: usize) -> Result<FeatureMap> {
    if seq.spatial_len() != h * w {
        return Err(Error::shape(format!(
            "{} spatial tokens cannot fill a {h}x{w} map",
            seq.spatial_len()
        )));
    }
    let e = seq.embed_dim();
    let n = h * w;
    let mut data = vec![0.0; e * n];
    for k in 0..n {
        let row = seq.spatial_row(k);
        for c in 0..e {
            data[c * n + k] = row[c];
        }
    }
    FeatureMap::new(e, h, w, data)
}

/// Per-pixel linear projection followed by a per-pixel softmax
/// (the auxiliary probe head of each decision layer).
pub fn aux_head(f: &FeatureMap, head: &HeadParams) -> Result<ProbMap> {
    let logits = head_logits(f, head)?;
    softmax_pixels(logits, f.height(), f.width())
}

/// Decoder: per-pixel linear classifier, bilinear upsample of the logits
/// to `(out_h, out_w)`, then per-pixel softmax.
pub fn decoder_head(
    f: &FeatureMap,
    dec: &HeadParams,
    out_h: usize,
    out_w: usize,
) -> Result<ProbMap> {
    let logits = head_logits(f, dec)?;
    let c = logits.cols();
    let n = f.height() * f.width();
    // Re-pack pixel-major logits into channel-major planes for upsampling.
    let mut planes = vec![0.0; c * n];
    for pixel in 0..n {
        let row = logits.row(pixel);
        for (class, &v) in row.iter().enumerate() {
            planes[class * n + pixel] = v;
        }
    }
    let upsampled = bilinear_upsample(&planes, c, f.height(), f.width(), out_h, out_w)?;
    let out_n = out_h * out_w;
    let logits_up = Matrix::from_fn(out_n, c, |pixel, class| upsampled[class * out_n + pixel]);
    softmax_pixels(logits_up, out_h, out_w)
}

/// Pixel-major logits: `(h*w) x C`.
fn head_logits(f: &FeatureMap, head: &HeadParams) -> Result<Matrix> {
    if head.weight.rows() != f.channels() {
        return Err(Error::shape(format!(
            "head expects {} feature channels, map has {}",
            head.weight.rows(),
            f.channels()
        )));
    }
    let mut logits = f.to_pixel_rows().matmul(&head.weight)?;
    logits.add_row_bias(&head.bias);
    Ok(logits)
}

/// Softmax each row of pixel-major logits and pack the result
/// channel-major.
fn softmax_pixels(mut logits: Matrix, h: usize, w: usize) -> Result<ProbMap> {
    let n = h * w;
    let c = logits.cols();
    for pixel in 0..n {
        softmax_in_place(logits.row_mut(pixel));
    }
    let mut data = vec![0.0; c * n];
    for pixel in 0..n {
        let row = logits.row(pixel);
        for (class, &p) in row.iter().enumerate() {
            data[class * n + pixel] = p;
        }
    }
    ProbMap::new(c, h, w, data)
}
