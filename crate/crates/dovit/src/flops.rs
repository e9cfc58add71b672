//! Analytic FLOP model for dense and token-reduced forwards.
//!
//! Counts are exact integer multiply-accumulate (MAC) tallies over the
//! spatial tokens; the class token, layer norms, softmax, GELU, residual
//! adds and upsampling are excluded under both conventions (sub-percent
//! contributors; exclusion keeps per-block costs exactly linear or
//! quadratic in the token count). Every report names its convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// What arithmetic is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsConvention {
    /// Linear-layer MACs only, one MAC counted as one FLOP. Matches the
    /// published dense totals for ViT-B/L within 2%.
    PaperCompat,
    /// Adds the attention score/value matmuls and counts two FLOPs per
    /// MAC (multiply + add).
    Full,
}

impl FlopsConvention {
    /// Human-readable statement of the counting rule, embedded in
    /// reports.
    pub fn note(&self) -> &'static str {
        match self {
            FlopsConvention::PaperCompat => {
                "linear-layer MACs only (QKV/output/MLP projections, patch embed, heads), \
                 1 MAC = 1 FLOP; attention matmuls, norms, softmax, GELU, residuals, \
                 upsampling and the class token excluded"
            }
            FlopsConvention::Full => {
                "linear layers plus attention score/value matmuls, 2 FLOPs per MAC; \
                 norms, softmax, GELU, residuals, upsampling and the class token excluded"
            }
        }
    }
}

impl std::str::FromStr for FlopsConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_compat" | "paper-compat" => Ok(FlopsConvention::PaperCompat),
            "full" => Ok(FlopsConvention::Full),
            other => Err(Error::config(format!(
                "unknown flops convention '{other}' (expected paper_compat or full)"
            ))),
        }
    }
}

impl std::fmt::Display for FlopsConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlopsConvention::PaperCompat => write!(f, "paper_compat"),
            FlopsConvention::Full => write!(f, "full"),
        }
    }
}

/// One backbone block's share of the count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockFlops {
    /// 1-based block index.
    pub block_index: usize,
    /// Spatial tokens attended in this block.
    pub token_count: usize,
    pub flops: u64,
}

/// Full cost decomposition of one forward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub convention: FlopsConvention,
    pub per_block: Vec<BlockFlops>,
    pub patch_embed_flops: u64,
    pub heads_flops: u64,
    pub decoder_flops: u64,
    pub total: u64,
}

/// FLOPs of one transformer layer run over `n_tokens` tokens.
///
/// Linear projections cost `(4 + 2*mlp_ratio) * n * E^2` MACs (QKV 3nE^2,
/// output nE^2, MLP 2*ratio*nE^2). The attention matmuls cost `2 * n^2 * E`
/// MACs in total: per head `n^2 * d` each for QK^T and attention*V, and
/// `heads * d = E` makes the sum independent of the head count.
pub fn layer_flops(
    n_tokens: usize,
    embed_dim: usize,
    heads: usize,
    mlp_ratio: usize,
    conv: FlopsConvention,
) -> u64 {
    let n = n_tokens as u64;
    let e = embed_dim as u64;
    let _ = heads; // cancels out of the arithmetic; kept for the record
    let linear_macs = (4 + 2 * mlp_ratio as u64) * n * e * e;
    match conv {
        FlopsConvention::PaperCompat => linear_macs,
        FlopsConvention::Full => 2 * (linear_macs + 2 * n * n * e),
    }
}

/// Number of layers in each of the D+1 blocks that `spec.decision_layers`
/// cut the backbone into.
pub fn block_sizes(spec: &ModelSpec) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(spec.decision_layers.len() + 1);
    let mut prev = 0;
    for &layer in &spec.decision_layers {
        sizes.push(layer - prev);
        prev = layer;
    }
    sizes.push(spec.num_layers - prev);
    sizes
}

/// Analytic cost of a forward pass whose i-th block attended over
/// `kept_counts[i]` spatial tokens.
///
/// Fixed overheads: patch embedding (`N * 3P^2 * E`), the D auxiliary
/// heads (`N * E * C` each — probes always see the full reconstructed
/// map) and the decoder classifier (`N * E * C`).
pub fn model_flops(
    spec: &ModelSpec,
    kept_counts: &[usize],
    conv: FlopsConvention,
) -> Result<FlopsBreakdown> {
    spec.validate()?;
    let blocks = block_sizes(spec);
    if kept_counts.len() != blocks.len() {
        return Err(Error::config(format!(
            "expected {} per-block token counts, got {}",
            blocks.len(),
            kept_counts.len()
        )));
    }
    let n = spec.num_tokens();
    for pair in kept_counts.windows(2) {
        if pair[1] > pair[0] {
            return Err(Error::integrity(format!(
                "kept counts must be non-increasing: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if let Some(&first) = kept_counts.first() {
        if first > n {
            return Err(Error::integrity(format!(
                "kept count {first} exceeds the {n} spatial tokens"
            )));
        }
    }

    let mac_scale = match conv {
        FlopsConvention::PaperCompat => 1,
        FlopsConvention::Full => 2,
    };
    let e = spec.embed_dim as u64;
    let c = spec.num_classes as u64;
    let n64 = n as u64;

    let per_block: Vec<BlockFlops> = blocks
        .iter()
        .zip(kept_counts)
        .enumerate()
        .map(|(i, (&layers, &tokens))| BlockFlops {
            block_index: i + 1,
            token_count: tokens,
            flops: layers as u64
                * layer_flops(tokens, spec.embed_dim, spec.num_heads, spec.mlp_ratio, conv),
        })
        .collect();

    let patch_macs = n64 * 3 * (spec.patch_size as u64).pow(2) * e;
    let head_macs = spec.decision_layers.len() as u64 * n64 * e * c;
    let decoder_macs = n64 * e * c;

    let patch_embed_flops = mac_scale * patch_macs;
    let heads_flops = mac_scale * head_macs;
    let decoder_flops = mac_scale * decoder_macs;
    let total = per_block.iter().map(|b| b.flops).sum::<u64>()
        + patch_embed_flops
        + heads_flops
        + decoder_flops;

    Ok(FlopsBreakdown {
        convention: conv,
        per_block,
        patch_embed_flops,
        heads_flops,
        decoder_flops,
        total,
    })
}

/// Cost of the dense forward (every block at N tokens).
pub fn dense_flops(spec: &ModelSpec, conv: FlopsConvention) -> Result<FlopsBreakdown> {
    let counts = vec![spec.num_tokens(); spec.decision_layers.len() + 1];
    model_flops(spec, &counts, conv)
}

/// Percentage saved by the dynamic forward: `100 * (1 - dynamic/dense)`.
/// Both breakdowns must use the same convention.
pub fn reduction_ratio(dynamic: &FlopsBreakdown, dense: &FlopsBreakdown) -> Result<f64> {
    if dynamic.convention != dense.convention {
        return Err(Error::config(format!(
            "cannot compare {} flops against {}",
            dynamic.convention, dense.convention
        )));
    }
    Ok(reduction_ratio_totals(dynamic.total as f64, dense.total as f64))
}

/// Reduction percentage from raw totals (any consistent unit).
pub fn reduction_ratio_totals(dynamic_total: f64, dense_total: f64) -> f64 {
    100.0 * (1.0 - dynamic_total / dense_total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const GIGA: f64 = 1e9;

    #[test]
    fn zero_tokens_cost_nothing() {
        for conv in [FlopsConvention::PaperCompat, FlopsConvention::Full] {
            assert_eq!(layer_flops(0, 768, 12, 4, conv), 0);
        }
    }

    #[test]
    fn vit_b_dense_layers_match_published_total_within_2_percent() {
        // 12 layers at N=8192, E=768: 12 * 12nE^2 = 695.78 G, against the
        // published 703.28 G dense total (gap = embeddings + decoder + norms).
        let per_layer = layer_flops(8192, 768, 12, 4, FlopsConvention::PaperCompat);
        let layers_total = 12 * per_layer;
        assert_eq!(per_layer, 12 * 8192 * 768 * 768);
        let published = 703.28 * GIGA;
        let rel = (published - layers_total as f64).abs() / published;
        assert!(rel < 0.02, "relative gap {rel}");
    }

    #[test]
    fn vit_l_dense_layers_match_published_total_within_1_percent() {
        let layers_total = 24 * layer_flops(8192, 1024, 16, 4, FlopsConvention::PaperCompat);
        let published = 2484.27 * GIGA;
        let rel = (published - layers_total as f64).abs() / published;
        assert!(rel < 0.01, "relative gap {rel}");
    }

    #[test]
    fn attention_flops_independent_of_head_count() {
        for heads in [1, 2, 4, 8] {
            assert_eq!(
                layer_flops(64, 32, heads, 4, FlopsConvention::Full),
                layer_flops(64, 32, 1, 4, FlopsConvention::Full)
            );
        }
    }

    #[test]
    fn block_sizes_split_the_backbone() {
        assert_eq!(block_sizes(&ModelSpec::vit_s()), vec![3, 3, 3, 3]);
        assert_eq!(block_sizes(&ModelSpec::vit_l()), vec![6, 6, 6, 6]);
        assert_eq!(block_sizes(&ModelSpec::toy()), vec![2, 2]);
    }

    #[test]
    fn halving_counts_halves_block_flops_exactly() {
        // paper_compat costs are exactly linear in n, so counts
        // [N, N/2, N/4, N/8] over equal-size blocks give flops ratios
        // 1 : 1/2 : 1/4 : 1/8 exactly.
        let spec = ModelSpec::vit_s();
        let n = spec.num_tokens();
        let breakdown =
            model_flops(&spec, &[n, n / 2, n / 4, n / 8], FlopsConvention::PaperCompat).unwrap();
        let first = breakdown.per_block[0].flops;
        assert_eq!(breakdown.per_block[1].flops * 2, first);
        assert_eq!(breakdown.per_block[2].flops * 4, first);
        assert_eq!(breakdown.per_block[3].flops * 8, first);
    }

    #[test]
    fn all_blocks_at_n_equals_dense() {
        let spec = ModelSpec::toy();
        let n = spec.num_tokens();
        let full = model_flops(&spec, &[n, n], FlopsConvention::PaperCompat).unwrap();
        let dense = dense_flops(&spec, FlopsConvention::PaperCompat).unwrap();
        assert_eq!(full, dense);
    }

    #[test]
    fn all_zero_after_first_block_is_block_one_plus_overheads() {
        let spec = ModelSpec::vit_s();
        let n = spec.num_tokens();
        let b = model_flops(&spec, &[n, 0, 0, 0], FlopsConvention::PaperCompat).unwrap();
        assert_eq!(
            b.total,
            b.per_block[0].flops + b.patch_embed_flops + b.heads_flops + b.decoder_flops
        );
        assert_eq!(b.per_block[1].flops, 0);
    }

    #[test]
    fn breakdown_total_is_sum_of_parts() {
        let spec = ModelSpec::vit_s();
        let n = spec.num_tokens();
        for conv in [FlopsConvention::PaperCompat, FlopsConvention::Full] {
            let b = model_flops(&spec, &[n, n / 3, n / 7, 0], conv).unwrap();
            let sum: u64 = b.per_block.iter().map(|blk| blk.flops).sum::<u64>()
                + b.patch_embed_flops
                + b.heads_flops
                + b.decoder_flops;
            assert_eq!(b.total, sum);
        }
    }

    #[test]
    fn increasing_counts_rejected() {
        let spec = ModelSpec::toy();
        assert!(matches!(
            model_flops(&spec, &[4, 9], FlopsConvention::PaperCompat),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            model_flops(&spec, &[999, 4], FlopsConvention::PaperCompat),
            Err(Error::Integrity(_))
        ));
        assert!(matches!(
            model_flops(&spec, &[4, 4, 4], FlopsConvention::PaperCompat),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn removing_tokens_never_increases_total() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let spec = ModelSpec::vit_s();
        let n = spec.num_tokens();
        for conv in [FlopsConvention::PaperCompat, FlopsConvention::Full] {
            for _ in 0..50 {
                // Draw a non-increasing trajectory and a pointwise-lower one.
                let mut high = vec![0usize; 4];
                let mut low = vec![0usize; 4];
                let mut cap = n;
                for i in 0..4 {
                    high[i] = rng.random_range(0..=cap);
                    cap = high[i];
                }
                let mut cap_low = high[0];
                for i in 0..4 {
                    low[i] = rng.random_range(0..=cap_low.min(high[i]));
                    cap_low = low[i];
                }
                let t_high = model_flops(&spec, &high, conv).unwrap().total;
                let t_low = model_flops(&spec, &low, conv).unwrap().total;
                assert!(t_low <= t_high, "{low:?} vs {high:?}");
            }
        }
    }

    #[test]
    fn full_mode_attention_term_is_quadratic() {
        // attention flops = full(n) - 2*linear_macs(n) = 4n^2E; halving n
        // divides it by exactly 4.
        let (e, ratio) = (32, 4);
        let attn = |n: usize| {
            layer_flops(n, e, 2, ratio, FlopsConvention::Full)
                - 2 * layer_flops(n, e, 2, ratio, FlopsConvention::PaperCompat)
        };
        for n in [8usize, 64, 256] {
            assert_eq!(attn(n), 4 * attn(n / 2));
            assert_eq!(attn(n), 4 * (n as u64).pow(2) * e as u64);
        }
    }

    #[test]
    fn reduction_ratio_identical_is_zero() {
        let spec = ModelSpec::toy();
        let dense = dense_flops(&spec, FlopsConvention::Full).unwrap();
        assert_eq!(reduction_ratio(&dense, &dense).unwrap(), 0.0);
    }

    #[test]
    fn reduction_ratio_reproduces_published_percentages() {
        // Published dynamic/dense totals in GFLOPs round to the printed
        // -53% and -56%.
        let b = reduction_ratio_totals(330.09, 703.28);
        assert_eq!(b.round(), 53.0);
        let l = reduction_ratio_totals(1088.80, 2484.27);
        assert_eq!(l.round(), 56.0);
    }

    #[test]
    fn reduction_ratio_rejects_mixed_conventions() {
        let spec = ModelSpec::toy();
        let a = dense_flops(&spec, FlopsConvention::PaperCompat).unwrap();
        let b = dense_flops(&spec, FlopsConvention::Full).unwrap();
        assert!(matches!(reduction_ratio(&a, &b), Err(Error::Config(_))));
    }

    #[test]
    fn convention_parses_and_prints() {
        use std::str::FromStr;
        assert_eq!(
            FlopsConvention::from_str("paper_compat").unwrap(),
            FlopsConvention::PaperCompat
        );
        assert_eq!(FlopsConvention::from_str("full").unwrap(), FlopsConvention::Full);
        assert!(FlopsConvention::from_str("half").is_err());
        assert_eq!(FlopsConvention::PaperCompat.to_string(), "paper_compat");
    }
}
