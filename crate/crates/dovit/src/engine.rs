//! End-to-end forward pass with dynamic token-pass.
//!
//! The pipeline: patch embedding, then block 1 runs dense (no reduction
//! before the first probe). After each block that ends at a decision
//! layer the engine reconstructs the full token map, probes it with that
//! layer's auxiliary head, thresholds the confidences into the
//! cumulative mask, re-splits the sequence into kept/stopped halves,
//! optionally merges the stopped set into the class token, and runs the
//! next block's layers on the kept subset only. A final reconstruction
//! feeds the decoder, so every pixel is labeled no matter how early its
//! token stopped.
//!
//! Dense mode runs the identical code path with halting disabled (probes
//! still execute and are reported). Because the stop rule is a strict
//! `q > xi` comparison, `xi = 1.0` never halts anything either, making it
//! an exact dense-equivalence switch.

use std::borrow::Cow;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::flops::{self, FlopsConvention};
use crate::heads::{aux_head, decoder_head, tokens_to_feature_map, ProbMap};
use crate::losses::LabelMap;
use crate::model::{patch_embed, transformer_layer, ModelSpec, ModelWeights, TokenSequence};
use crate::tensor::Matrix;
use crate::token_pass::{
    confidence_map, decision_mask, merge_stopped_into_class, reconstruct, split, update_mask,
    ConfidenceMap, DecisionMask, GatherIndex,
};

/// Dynamic token-pass or the dense baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineMode {
    Dynamic,
    Dense,
}

impl std::str::FromStr for EngineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(EngineMode::Dynamic),
            "dense" => Ok(EngineMode::Dense),
            other => Err(Error::config(format!(
                "unknown mode '{other}' (expected dynamic or dense)"
            ))),
        }
    }
}

impl std::fmt::Display for EngineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EngineMode::Dynamic => write!(f, "dynamic"),
            EngineMode::Dense => write!(f, "dense"),
        }
    }
}

/// Arithmetic storage mode. `F32` rounds parameters, the input image and
/// token activations between layers through 32-bit precision; kernel
/// accumulation stays in f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f32" => Ok(Precision::F32),
            other => Err(Error::config(format!(
                "unknown precision '{other}' (expected f64 or f32)"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F64 => write!(f, "f64"),
            Precision::F32 => write!(f, "f32"),
        }
    }
}

/// Engine configuration. Defaults follow the published recipe:
/// threshold 0.985, halting at every decision layer of the model,
/// merging on, f64, paper-compatible FLOPs counting.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    /// Confidence threshold: a token stops iff its confidence > xi.
    pub xi: f64,
    /// Halt only at these decision layers (must be a subset of the
    /// model's); `None` halts at every decision layer the model defines.
    /// Probes run and are reported at every model decision layer either
    /// way.
    pub decision_layers: Option<Vec<usize>>,
    pub mode: EngineMode,
    /// Merge stopped tokens into the class token after each decision.
    /// A no-op for models without a class token.
    pub enable_merging: bool,
    pub precision: Precision,
    pub flops_convention: FlopsConvention,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            xi: 0.985,
            decision_layers: None,
            mode: EngineMode::Dynamic,
            enable_merging: true,
            precision: Precision::F64,
            flops_convention: FlopsConvention::PaperCompat,
        }
    }
}

impl EngineConfig {
    /// Check the configuration against a model spec.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        if !(0.0..=1.0).contains(&self.xi) {
            return Err(Error::config(format!(
                "threshold xi={} outside [0,1]",
                self.xi
            )));
        }
        if let Some(layers) = &self.decision_layers {
            for pair in layers.windows(2) {
                if pair[1] <= pair[0] {
                    return Err(Error::config(format!(
                        "engine decision layers must be strictly increasing: {} then {}",
                        pair[0], pair[1]
                    )));
                }
            }
            for &layer in layers {
                if !spec.decision_layers.contains(&layer) {
                    return Err(Error::config(format!(
                        "engine decision layer {layer} is not one of the model's {:?}",
                        spec.decision_layers
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether halting applies at the given model decision layer.
    fn halts_at(&self, decision_layer: usize) -> bool {
        if self.mode == EngineMode::Dense {
            return false;
        }
        match &self.decision_layers {
            None => true,
            Some(layers) => layers.contains(&decision_layer),
        }
    }
}

/// Per-block execution record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockStats {
    /// 1-based block index.
    pub block_index: usize,
    /// Spatial tokens attended during this block.
    pub kept_count: usize,
    /// Spatial tokens frozen before this block.
    pub stopped_count: usize,
    /// FLOPs spent in this block's transformer layers.
    pub flops: u64,
}

/// One auxiliary probe's output.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxProbe {
    /// The model decision layer this probe follows.
    pub decision_layer: usize,
    /// Confidence scores and arg-max labels over the full token map.
    pub confidence: ConfidenceMap,
}

/// Complete record of one forward pass.
#[derive(Debug, Clone)]
pub struct SegReport {
    /// Arg-max label per image pixel (always total: every pixel labeled).
    pub pred_labels: LabelMap,
    /// Decoder probabilities at image resolution.
    pub final_probs: ProbMap,
    /// One entry per backbone block, in order.
    pub per_block: Vec<BlockStats>,
    /// One entry per model decision layer, in order.
    pub aux: Vec<AuxProbe>,
    /// Op-by-op metered FLOPs of the whole forward.
    pub total_flops: u64,
    pub flops_convention: FlopsConvention,
    pub wall_time: Duration,
}

impl SegReport {
    /// Per-block attended token counts (the trajectory the FLOPs model
    /// consumes).
    pub fn kept_counts(&self) -> Vec<usize> {
        self.per_block.iter().map(|b| b.kept_count).collect()
    }
}

/// Run the engine in its configured mode.
pub fn forward(
    image: &[f64],
    spec: &ModelSpec,
    weights: &ModelWeights,
    cfg: &EngineConfig,
) -> Result<SegReport> {
    cfg.validate(spec)?;
    weights.validate(spec)?;

    let started = Instant::now();
    let f32_mode = cfg.precision == Precision::F32;

    let image: Cow<'_, [f64]> = if f32_mode {
        Cow::Owned(image.iter().map(|&v| v as f32 as f64).collect())
    } else {
        Cow::Borrowed(image)
    };
    let weights: Cow<'_, ModelWeights> = if f32_mode {
        let mut w = weights.clone();
        w.round_to_f32();
        Cow::Owned(w)
    } else {
        Cow::Borrowed(weights)
    };

    let n = spec.num_tokens();
    let (grid_h, grid_w) = (spec.grid_h(), spec.grid_w());
    let conv = cfg.flops_convention;
    let mac_scale: u64 = match conv {
        FlopsConvention::PaperCompat => 1,
        FlopsConvention::Full => 2,
    };
    let head_macs = (n * spec.embed_dim * spec.num_classes) as u64;
    let mut total_flops: u64 = 0;

    // Embedding.
    let mut kept = patch_embed(&image, spec, &weights)?;
    if f32_mode {
        kept.tokens_mut().round_to_f32();
    }
    total_flops += mac_scale * (n * 3 * spec.patch_size * spec.patch_size * spec.embed_dim) as u64;

    // Keep/stop state. Initially everything keeps.
    let mut kept_idx = GatherIndex::new((0..n).collect())?;
    let mut stopped = TokenSequence::new(Matrix::zeros(0, spec.embed_dim), false)?;
    let mut stopped_idx = GatherIndex::new(Vec::new())?;
    let mut mask = DecisionMask::all_ones(n);

    let blocks = flops::block_sizes(spec);
    let mut per_block = Vec::with_capacity(blocks.len());
    let mut aux = Vec::with_capacity(spec.decision_layers.len());
    let mut layer_cursor = 0usize;

    for (bi, &block_len) in blocks.iter().enumerate() {
        let n_attended = kept.spatial_len();
        let mut block_flops = 0u64;
        for _ in 0..block_len {
            layer_cursor += 1;
            if kept.total_len() > 0 {
                kept = transformer_layer(&kept, &weights.layers[layer_cursor - 1], spec.num_heads)?;
                if f32_mode {
                    kept.tokens_mut().round_to_f32();
                }
            }
            block_flops += flops::layer_flops(
                n_attended,
                spec.embed_dim,
                spec.num_heads,
                spec.mlp_ratio,
                conv,
            );
        }
        per_block.push(BlockStats {
            block_index: bi + 1,
            kept_count: n_attended,
            stopped_count: n - n_attended,
            flops: block_flops,
        });
        total_flops += block_flops;

        // Probe + decide at every decision layer (all blocks except the
        // last end at one).
        if bi < spec.decision_layers.len() {
            let decision_layer = spec.decision_layers[bi];
            let full = reconstruct(&kept, &kept_idx, &stopped, &stopped_idx)?;
            let fm = tokens_to_feature_map(&full, grid_h, grid_w)?;
            let probs = aux_head(&fm, &weights.aux_heads[bi])?;
            total_flops += mac_scale * head_macs;
            let q = confidence_map(&probs.class_rows())?;

            if cfg.halts_at(decision_layer) {
                let raw = decision_mask(&q, cfg.xi, bi + 1)?;
                mask = update_mask(&raw, &mask)?;
            }
            aux.push(AuxProbe {
                decision_layer,
                confidence: q,
            });

            let (k, ki, s, si) = split(&full, &mask)?;
            kept = k;
            kept_idx = ki;
            stopped = s;
            stopped_idx = si;

            if cfg.enable_merging && spec.use_class_token && stopped.total_len() > 0 {
                let merged = merge_stopped_into_class(
                    kept.class_token().expect("class token present"),
                    &stopped,
                );
                kept.tokens_mut().row_mut(0).copy_from_slice(&merged);
                if f32_mode {
                    for v in kept.tokens_mut().row_mut(0) {
                        *v = *v as f32 as f64;
                    }
                }
            }
        }
    }

    // Final reconstruction and decoding.
    let full = reconstruct(&kept, &kept_idx, &stopped, &stopped_idx)?;
    let fm = tokens_to_feature_map(&full, grid_h, grid_w)?;
    let final_probs = decoder_head(&fm, &weights.decoder, spec.image_h, spec.image_w)?;
    total_flops += mac_scale * head_macs;

    let labels: Vec<u32> = final_probs
        .argmax_labels()
        .iter()
        .map(|&l| l as u32)
        .collect();
    let pred_labels = LabelMap::from_labels(spec.image_h, spec.image_w, labels)?;

    Ok(SegReport {
        pred_labels,
        final_probs,
        per_block,
        aux,
        total_flops,
        flops_convention: conv,
        wall_time: started.elapsed(),
    })
}

/// The dense baseline: the same pipeline with halting disabled.
pub fn forward_dense(
    image: &[f64],
    spec: &ModelSpec,
    weights: &ModelWeights,
    cfg: &EngineConfig,
) -> Result<SegReport> {
    let dense_cfg = EngineConfig {
        mode: EngineMode::Dense,
        ..cfg.clone()
    };
    forward(image, spec, weights, &dense_cfg)
}
