//! The dynamic token-pass mechanism: per-token confidence scoring,
//! keep/stop decision masks, gather of the kept subset, reconstruction of
//! the full sequence, and merging of stopped tokens into the class token.
//!
//! Masks cover spatial tokens only; the class token is always kept and is
//! excluded from masks, confidence maps and feature maps.

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::tensor::Matrix;

/// Binary keep(true)/stop(false) indicator per spatial token.
///
/// A raw mask comes from one threshold decision; cumulative masks are
/// formed by [`update_mask`] and never re-admit a stopped token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionMask {
    bits: Vec<bool>,
    block_index: usize,
}

impl DecisionMask {
    pub fn new(bits: Vec<bool>, block_index: usize) -> Self {
        DecisionMask { bits, block_index }
    }

    /// The all-ones mask M^0: every token keeps.
    pub fn all_ones(len: usize) -> Self {
        DecisionMask {
            bits: vec![true; len],
            block_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Which block produced this mask (0 for the initial all-ones mask).
    pub fn block_index(&self) -> usize {
        self.block_index
    }

    /// True when token `i` keeps flowing through self-attention.
    pub fn keeps(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of keeping tokens (popcount).
    pub fn kept_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Number of stopped tokens.
    pub fn stopped_count(&self) -> usize {
        self.len() - self.kept_count()
    }

    /// Indices of keeping tokens, ascending.
    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.bits[i]).collect()
    }

    /// The complement mask 1 - M (used to address the stopped set).
    pub fn complement(&self) -> DecisionMask {
        DecisionMask {
            bits: self.bits.iter().map(|b| !b).collect(),
            block_index: self.block_index,
        }
    }
}

/// Original positions of a gathered token subset, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatherIndex {
    positions: Vec<usize>,
}

impl GatherIndex {
    pub fn new(positions: Vec<usize>) -> Result<Self> {
        for pair in positions.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::validation(format!(
                    "gather index not strictly increasing: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        Ok(GatherIndex { positions })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Per-token maximum class probability plus the arg-max labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap {
    scores: Vec<f64>,
    labels: Vec<usize>,
}

impl ConfidenceMap {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Tolerance on per-token probability normalization.
const PROB_SUM_TOL: f64 = 1e-6;

/// Score every token with its maximum class probability.
///
/// `class_rows` holds one row per class and one column per token; each
/// column must be a probability distribution (sum 1 within 1e-6).
/// Ties in the maximum resolve to the lowest class index.
pub fn confidence_map(class_rows: &Matrix) -> Result<ConfidenceMap> {
    let c = class_rows.rows();
    let n = class_rows.cols();
    if c == 0 || n == 0 {
        return Err(Error::shape(format!(
            "confidence map needs nonempty class rows, got {c}x{n}"
        )));
    }
    let mut scores = vec![0.0; n];
    let mut labels = vec![0usize; n];
    for token in 0..n {
        let mut sum = 0.0;
        let mut best = f64::NEG_INFINITY;
        let mut best_class = 0;
        for class in 0..c {
            let p = class_rows.get(class, token);
            if !(-PROB_SUM_TOL..=1.0 + PROB_SUM_TOL).contains(&p) {
                return Err(Error::validation(format!(
                    "probability {p} for class {class}, token {token} outside [0,1]"
                )));
            }
            sum += p;
            if p > best {
                best = p;
                best_class = class;
            }
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::validation(format!(
                "token {token} probabilities sum to {sum}, expected 1"
            )));
        }
        scores[token] = best;
        labels[token] = best_class;
    }
    Ok(ConfidenceMap { scores, labels })
}

/// Threshold confidences into a raw decision mask: a token stops (bit
/// false) iff its confidence strictly exceeds `xi`. Equality keeps, so
/// `xi = 1.0` keeps every token and reproduces the dense model.
pub fn decision_mask(q: &ConfidenceMap, xi: f64, block_index: usize) -> Result<DecisionMask> {
    if !(0.0..=1.0).contains(&xi) {
        return Err(Error::config(format!("threshold xi={xi} outside [0,1]")));
    }
    let bits = q.scores().iter().map(|&s| !(s > xi)).collect();
    Ok(DecisionMask::new(bits, block_index))
}

/// Combine a raw mask with the previous cumulative mask (elementwise
/// AND): once a token stops it stays stopped.
pub fn update_mask(raw: &DecisionMask, prev: &DecisionMask) -> Result<DecisionMask> {
    if raw.len() != prev.len() {
        return Err(Error::shape(format!(
            "mask length mismatch: raw {} vs prev {}",
            raw.len(),
            prev.len()
        )));
    }
    let bits = raw
        .bits()
        .iter()
        .zip(prev.bits())
        .map(|(&a, &b)| a && b)
        .collect();
    Ok(DecisionMask::new(bits, raw.block_index()))
}

/// Select the keeping tokens into a new sequence, preserving relative
/// order. The class token, when present, is always carried into the kept
/// sequence; the returned index covers spatial tokens only.
pub fn gather(seq: &TokenSequence, mask: &DecisionMask) -> Result<(TokenSequence, GatherIndex)> {
    if mask.len() != seq.spatial_len() {
        return Err(Error::shape(format!(
            "mask length {} does not match {} spatial tokens",
            mask.len(),
            seq.spatial_len()
        )));
    }
    let e = seq.embed_dim();
    let positions = mask.kept_indices();
    let extra = usize::from(seq.has_class_token());
    let mut out = Matrix::zeros(positions.len() + extra, e);
    if let Some(ct) = seq.class_token() {
        out.row_mut(0).copy_from_slice(ct);
    }
    for (row, &pos) in positions.iter().enumerate() {
        out.row_mut(row + extra).copy_from_slice(seq.spatial_row(pos));
    }
    Ok((
        TokenSequence::new(out, seq.has_class_token())?,
        GatherIndex::new(positions)?,
    ))
}

/// Split a sequence into (kept, kept index, stopped, stopped index) in
/// one pass. The kept half carries the class token; the stopped half
/// never does.
pub fn split(
    seq: &TokenSequence,
    mask: &DecisionMask,
) -> Result<(TokenSequence, GatherIndex, TokenSequence, GatherIndex)> {
    let (kept, kept_idx) = gather(seq, mask)?;
    let e = seq.embed_dim();
    let stopped_positions: Vec<usize> = (0..mask.len()).filter(|&i| !mask.keeps(i)).collect();
    let mut stopped = Matrix::zeros(stopped_positions.len(), e);
    for (row, &pos) in stopped_positions.iter().enumerate() {
        stopped.row_mut(row).copy_from_slice(seq.spatial_row(pos));
    }
    Ok((
        kept,
        kept_idx,
        TokenSequence::new(stopped, false)?,
        GatherIndex::new(stopped_positions)?,
    ))
}

/// Scatter kept and stopped tokens back to their original positions,
/// restoring the full N-token sequence (class token back at row 0).
///
/// The two index sets must partition `0..N` exactly; any overlap or gap
/// is an integrity error.
pub fn reconstruct(
    kept: &TokenSequence,
    kept_idx: &GatherIndex,
    stopped: &TokenSequence,
    stopped_idx: &GatherIndex,
) -> Result<TokenSequence> {
    if stopped.has_class_token() {
        return Err(Error::integrity(
            "stopped set must not carry a class token".to_string(),
        ));
    }
    if kept.spatial_len() != kept_idx.len() {
        return Err(Error::integrity(format!(
            "kept sequence has {} spatial tokens but index lists {}",
            kept.spatial_len(),
            kept_idx.len()
        )));
    }
    if stopped.total_len() != stopped_idx.len() {
        return Err(Error::integrity(format!(
            "stopped sequence has {} tokens but index lists {}",
            stopped.total_len(),
            stopped_idx.len()
        )));
    }
    let n = kept_idx.len() + stopped_idx.len();
    let mut seen = vec![false; n];
    let mut place = |pos: usize| -> Result<()> {
        if pos >= n {
            return Err(Error::integrity(format!(
                "index {pos} outside the {n}-token sequence"
            )));
        }
        if seen[pos] {
            return Err(Error::integrity(format!("index {pos} covered twice")));
        }
        seen[pos] = true;
        Ok(())
    };
    for &p in kept_idx.positions() {
        place(p)?;
    }
    for &p in stopped_idx.positions() {
        place(p)?;
    }
    // seen is now all-true: n indices were placed without duplicates.

    let e = if kept.total_len() > 0 {
        kept.embed_dim()
    } else {
        stopped.embed_dim()
    };
    let extra = usize::from(kept.has_class_token());
    let mut out = Matrix::zeros(n + extra, e);
    if let Some(ct) = kept.class_token() {
        out.row_mut(0).copy_from_slice(ct);
    }
    for (row, &pos) in kept_idx.positions().iter().enumerate() {
        out.row_mut(pos + extra).copy_from_slice(kept.spatial_row(row));
    }
    for (row, &pos) in stopped_idx.positions().iter().enumerate() {
        out.row_mut(pos + extra)
            .copy_from_slice(stopped.spatial_row(row));
    }
    TokenSequence::new(out, kept.has_class_token())
}

/// Merge the stopped tokens into the class token: the new class token is
/// the average of the old one and the per-dimension mean of the stopped
/// token vectors. An empty stopped set leaves the class token unchanged.
pub fn merge_stopped_into_class(class_token: &[f64], stopped: &TokenSequence) -> Vec<f64> {
    let k = stopped.total_len();
    if k == 0 {
        return class_token.to_vec();
    }
    let e = class_token.len();
    let mut mean = vec![0.0; e];
    for row in 0..k {
        for (m, v) in mean.iter_mut().zip(stopped.spatial_row(row)) {
            *m += v;
        }
    }
    let inv = 1.0 / k as f64;
    class_token
        .iter()
        .zip(&mean)
        .map(|(&c, &m)| 0.5 * (c + m * inv))
        .collect()
}
