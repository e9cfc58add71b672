//! ViT backbone: architecture description, parameter containers, patch
//! embedding and transformer layers.
//!
//! The same attention/layer kernels serve both the dense path (all N
//! tokens) and the sparse path (a gathered kept subset): they are
//! permutation-equivariant over rows, so running them on a subset is
//! numerically identical to masking.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gelu, layer_norm, softmax_in_place, Matrix};

/// Epsilon used by every layer norm in the backbone.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Architecture hyperparameters. `decision_layers` lists the 1-based
/// layer indices after which an auxiliary head probes confidence; they
/// split the `num_layers` backbone into `decision_layers.len() + 1`
/// blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub decision_layers: Vec<usize>,
    pub use_class_token: bool,
}

impl ModelSpec {
    /// Number of spatial tokens N = (H/P) * (W/P).
    pub fn num_tokens(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Token-grid height h = H / P.
    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch_size
    }

    /// Token-grid width w = W / P.
    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch_size
    }

    /// Sequence length including the class token when enabled.
    pub fn seq_len(&self) -> usize {
        self.num_tokens() + usize::from(self.use_class_token)
    }

    /// Per-head dimension d = E / num_heads.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Number of decision layers D.
    pub fn num_decision_layers(&self) -> usize {
        self.decision_layers.len()
    }

    /// Validate all architectural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be positive".to_string()));
        }
        if self.image_h == 0
            || self.image_w == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "image {}x{} must be a positive multiple of patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 {
            return Err(Error::config("num_layers must be at least 1".to_string()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be at least 1".to_string()));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1".to_string()));
        }
        for (i, &layer) in self.decision_layers.iter().enumerate() {
            if layer < 1 || layer > self.num_layers.saturating_sub(1) {
                return Err(Error::config(format!(
                    "decision layer {layer} outside [1, {}]",
                    self.num_layers.saturating_sub(1)
                )));
            }
            if i > 0 {
                let prev = self.decision_layers[i - 1];
                if layer <= prev {
                    return Err(Error::config(format!(
                        "decision layers must be strictly increasing: {prev} then {layer}"
                    )));
                }
                if layer == prev + 1 {
                    return Err(Error::config(format!(
                        "decision layers {prev} and {layer} are adjacent; layers must be nonadjacent"
                    )));
                }
            }
        }
        Ok(())
    }

    /// ViT-Small at 1024x2048, patch 16: E=384, L=12, 6 heads, decision
    /// layers (3, 6, 9), 19 classes.
    pub fn vit_s() -> Self {
        ModelSpec {
            image_h: 1024,
            image_w: 2048,
            patch_size: 16,
            embed_dim: 384,
            num_layers: 12,
            num_heads: 6,
            mlp_ratio: 4,
            num_classes: 19,
            decision_layers: vec![3, 6, 9],
            use_class_token: true,
        }
    }

    /// ViT-Base at 1024x2048, patch 16: E=768, L=12, 12 heads, decision
    /// layers (3, 6, 9), 19 classes.
    pub fn vit_b() -> Self {
        ModelSpec {
            embed_dim: 768,
            num_heads: 12,
            ..ModelSpec::vit_s()
        }
    }

    /// ViT-Large at 1024x2048, patch 16: E=1024, L=24, 16 heads, decision
    /// layers (6, 12, 18), 19 classes.
    pub fn vit_l() -> Self {
        ModelSpec {
            embed_dim: 1024,
            num_layers: 24,
            num_heads: 16,
            decision_layers: vec![6, 12, 18],
            ..ModelSpec::vit_s()
        }
    }

    /// Small configuration for tests and examples: 32x32 image, patch 8
    /// (16 tokens), E=16, L=4, 2 heads, one decision layer after layer 2.
    pub fn toy() -> Self {
        ModelSpec {
            image_h: 32,
            image_w: 32,
            patch_size: 8,
            embed_dim: 16,
            num_layers: 4,
            num_heads: 2,
            mlp_ratio: 4,
            num_classes: 4,
            decision_layers: vec![2],
            use_class_token: true,
        }
    }
}

/// Per-layer learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub w_q: Matrix,
    pub b_q: Vec<f64>,
    pub w_k: Matrix,
    pub b_k: Vec<f64>,
    pub w_v: Matrix,
    pub b_v: Vec<f64>,
    pub w_o: Matrix,
    pub b_o: Vec<f64>,
    pub w_mlp1: Matrix,
    pub b_mlp1: Vec<f64>,
    pub w_mlp2: Matrix,
    pub b_mlp2: Vec<f64>,
}

impl LayerParams {
    /// All-zero parameters for the given dimensions.
    pub fn zeros(embed_dim: usize, mlp_ratio: usize) -> Self {
        let hidden = embed_dim * mlp_ratio;
        LayerParams {
            ln1_gamma: vec![0.0; embed_dim],
            ln1_beta: vec![0.0; embed_dim],
            ln2_gamma: vec![0.0; embed_dim],
            ln2_beta: vec![0.0; embed_dim],
            w_q: Matrix::zeros(embed_dim, embed_dim),
            b_q: vec![0.0; embed_dim],
            w_k: Matrix::zeros(embed_dim, embed_dim),
            b_k: vec![0.0; embed_dim],
            w_v: Matrix::zeros(embed_dim, embed_dim),
            b_v: vec![0.0; embed_dim],
            w_o: Matrix::zeros(embed_dim, embed_dim),
            b_o: vec![0.0; embed_dim],
            w_mlp1: Matrix::zeros(embed_dim, hidden),
            b_mlp1: vec![0.0; hidden],
            w_mlp2: Matrix::zeros(hidden, embed_dim),
            b_mlp2: vec![0.0; embed_dim],
        }
    }

    fn validate(&self, embed_dim: usize, mlp_ratio: usize, layer_index: usize) -> Result<()> {
        let hidden = embed_dim * mlp_ratio;
        let check_vec = |name: &str, v: &[f64], want: usize| -> Result<()> {
            if v.len() != want {
                return Err(Error::ArrayShape {
                    name: format!("layers[{layer_index}].{name}"),
                    expected: format!("[{want}]"),
                    found: format!("[{}]", v.len()),
                });
            }
            Ok(())
        };
        let check_mat = |name: &str, m: &Matrix, rows: usize, cols: usize| -> Result<()> {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::ArrayShape {
                    name: format!("layers[{layer_index}].{name}"),
                    expected: format!("[{rows}, {cols}]"),
                    found: format!("[{}, {}]", m.rows(), m.cols()),
                });
            }
            Ok(())
        };
        check_vec("ln1_gamma", &self.ln1_gamma, embed_dim)?;
        check_vec("ln1_beta", &self.ln1_beta, embed_dim)?;
        check_vec("ln2_gamma", &self.ln2_gamma, embed_dim)?;
        check_vec("ln2_beta", &self.ln2_beta, embed_dim)?;
        check_mat("w_q", &self.w_q, embed_dim, embed_dim)?;
        check_vec("b_q", &self.b_q, embed_dim)?;
        check_mat("w_k", &self.w_k, embed_dim, embed_dim)?;
        check_vec("b_k", &self.b_k, embed_dim)?;
        check_mat("w_v", &self.w_v, embed_dim, embed_dim)?;
        check_vec("b_v", &self.b_v, embed_dim)?;
        check_mat("w_o", &self.w_o, embed_dim, embed_dim)?;
        check_vec("b_o", &self.b_o, embed_dim)?;
        check_mat("w_mlp1", &self.w_mlp1, embed_dim, hidden)?;
        check_vec("b_mlp1", &self.b_mlp1, hidden)?;
        check_mat("w_mlp2", &self.w_mlp2, hidden, embed_dim)?;
        check_vec("b_mlp2", &self.b_mlp2, embed_dim)?;
        Ok(())
    }

    fn round_to_f32(&mut self) {
        let round_vec = |v: &mut Vec<f64>| {
            for x in v.iter_mut() {
                *x = *x as f32 as f64;
            }
        };
        round_vec(&mut self.ln1_gamma);
        round_vec(&mut self.ln1_beta);
        round_vec(&mut self.ln2_gamma);
        round_vec(&mut self.ln2_beta);
        self.w_q.round_to_f32();
        round_vec(&mut self.b_q);
        self.w_k.round_to_f32();
        round_vec(&mut self.b_k);
        self.w_v.round_to_f32();
        round_vec(&mut self.b_v);
        self.w_o.round_to_f32();
        round_vec(&mut self.b_o);
        self.w_mlp1.round_to_f32();
        round_vec(&mut self.b_mlp1);
        self.w_mlp2.round_to_f32();
        round_vec(&mut self.b_mlp2);
    }
}

/// One linear classifier head: auxiliary probe heads and the decoder
/// classifier both use this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// E x C projection.
    pub weight: Matrix,
    /// C biases.
    pub bias: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(embed_dim: usize, num_classes: usize) -> Self {
        HeadParams {
            weight: Matrix::zeros(embed_dim, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    fn validate(&self, name: &str, embed_dim: usize, num_classes: usize) -> Result<()> {
        if self.weight.rows() != embed_dim || self.weight.cols() != num_classes {
            return Err(Error::ArrayShape {
                name: format!("{name}.weight"),
                expected: format!("[{embed_dim}, {num_classes}]"),
                found: format!("[{}, {}]", self.weight.rows(), self.weight.cols()),
            });
        }
        if self.bias.len() != num_classes {
            return Err(Error::ArrayShape {
                name: format!("{name}.bias"),
                expected: format!("[{num_classes}]"),
                found: format!("[{}]", self.bias.len()),
            });
        }
        Ok(())
    }

    fn round_to_f32(&mut self) {
        self.weight.round_to_f32();
        for b in &mut self.bias {
            *b = *b as f32 as f64;
        }
    }
}

/// Every learned parameter array of one model, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// (3 * P^2) x E patch projection. Patch pixels are flattened
    /// channel-major: index c*P^2 + dy*P + dx.
    pub patch_proj: Matrix,
    /// E patch-projection biases.
    pub patch_bias: Vec<f64>,
    /// N x E learned position embeddings, added once at embedding time.
    pub pos_embed: Matrix,
    /// Learned class-token embedding; present iff the spec enables it.
    pub class_token: Option<Vec<f64>>,
    /// L transformer layers.
    pub layers: Vec<LayerParams>,
    /// One probe head per decision layer, in decision-layer order.
    pub aux_heads: Vec<HeadParams>,
    /// Decoder classifier.
    pub decoder: HeadParams,
}

impl ModelWeights {
    /// All-zero weights matching `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let e = spec.embed_dim;
        ModelWeights {
            patch_proj: Matrix::zeros(3 * spec.patch_size * spec.patch_size, e),
            patch_bias: vec![0.0; e],
            pos_embed: Matrix::zeros(spec.num_tokens(), e),
            class_token: spec.use_class_token.then(|| vec![0.0; e]),
            layers: (0..spec.num_layers)
                .map(|_| LayerParams::zeros(e, spec.mlp_ratio))
                .collect(),
            aux_heads: (0..spec.decision_layers.len())
                .map(|_| HeadParams::zeros(e, spec.num_classes))
                .collect(),
            decoder: HeadParams::zeros(e, spec.num_classes),
        }
    }

    /// Check every array's shape against `spec`.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let e = spec.embed_dim;
        let patch_rows = 3 * spec.patch_size * spec.patch_size;
        if self.patch_proj.rows() != patch_rows || self.patch_proj.cols() != e {
            return Err(Error::ArrayShape {
                name: "patch_proj".to_string(),
                expected: format!("[{patch_rows}, {e}]"),
                found: format!("[{}, {}]", self.patch_proj.rows(), self.patch_proj.cols()),
            });
        }
        if self.patch_bias.len() != e {
            return Err(Error::ArrayShape {
                name: "patch_bias".to_string(),
                expected: format!("[{e}]"),
                found: format!("[{}]", self.patch_bias.len()),
            });
        }
        let n = spec.num_tokens();
        if self.pos_embed.rows() != n || self.pos_embed.cols() != e {
            return Err(Error::ArrayShape {
                name: "pos_embed".to_string(),
                expected: format!("[{n}, {e}]"),
                found: format!("[{}, {}]", self.pos_embed.rows(), self.pos_embed.cols()),
            });
        }
        match (&self.class_token, spec.use_class_token) {
            (Some(ct), true) => {
                if ct.len() != e {
                    return Err(Error::ArrayShape {
                        name: "class_token".to_string(),
                        expected: format!("[{e}]"),
                        found: format!("[{}]", ct.len()),
                    });
                }
            }
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::validation(
                    "class_token present but spec disables it".to_string(),
                ))
            }
            (None, true) => return Err(Error::MissingArray("class_token".to_string())),
        }
        if self.layers.len() != spec.num_layers {
            return Err(Error::validation(format!(
                "expected {} layers, found {}",
                spec.num_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(e, spec.mlp_ratio, i)?;
        }
        if self.aux_heads.len() != spec.decision_layers.len() {
            return Err(Error::validation(format!(
                "expected {} aux heads, found {}",
                spec.decision_layers.len(),
                self.aux_heads.len()
            )));
        }
        for (i, head) in self.aux_heads.iter().enumerate() {
            head.validate(&format!("aux_heads[{i}]"), e, spec.num_classes)?;
        }
        self.decoder.validate("decoder", e, spec.num_classes)?;
        Ok(())
    }

    /// Round every parameter through 32-bit precision (the engine's f32
    /// storage mode).
    pub fn round_to_f32(&mut self) {
        self.patch_proj.round_to_f32();
        for b in &mut self.patch_bias {
            *b = *b as f32 as f64;
        }
        self.pos_embed.round_to_f32();
        if let Some(ct) = &mut self.class_token {
            for v in ct.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        for layer in &mut self.layers {
            layer.round_to_f32();
        }
        for head in &mut self.aux_heads {
            head.round_to_f32();
        }
        self.decoder.round_to_f32();
    }
}

/// Ordered token sequence; the class token, when present, is row 0.
///
/// A sequence is ordinarily nonempty. The one empty case arises
/// transiently when every spatial token has stopped and no class token is
/// configured; such a sequence is never fed to attention (the engine
/// skips those blocks entirely).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    tokens: Matrix,
    has_class_token: bool,
}

impl TokenSequence {
    pub fn new(tokens: Matrix, has_class_token: bool) -> Result<Self> {
        if has_class_token && tokens.rows() == 0 {
            return Err(Error::shape(
                "sequence flagged as holding a class token has no rows".to_string(),
            ));
        }
        Ok(TokenSequence {
            tokens,
            has_class_token,
        })
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub(crate) fn tokens_mut(&mut self) -> &mut Matrix {
        &mut self.tokens
    }

    pub fn has_class_token(&self) -> bool {
        self.has_class_token
    }

    /// Total rows including the class token.
    pub fn total_len(&self) -> usize {
        self.tokens.rows()
    }

    /// Spatial tokens only.
    pub fn spatial_len(&self) -> usize {
        self.tokens.rows() - usize::from(self.has_class_token)
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn class_token(&self) -> Option<&[f64]> {
        self.has_class_token.then(|| self.tokens.row(0))
    }

    /// The i-th spatial token (class token excluded from indexing).
    pub fn spatial_row(&self, i: usize) -> &[f64] {
        self.tokens.row(i + usize::from(self.has_class_token))
    }

    /// Copy of the spatial rows as an n x E matrix (class token dropped).
    pub fn spatial_matrix(&self) -> Matrix {
        let offset = usize::from(self.has_class_token);
        let n = self.spatial_len();
        Matrix::from_fn(n, self.tokens.cols(), |r, c| self.tokens.get(r + offset, c))
    }
}

/// Embed an image (channel-major `3 x H x W`, values in [0,1] by
/// convention) into N position-encoded tokens; prepends the class token
/// when the spec enables it.
pub fn patch_embed(image: &[f64], spec: &ModelSpec, weights: &ModelWeights) -> Result<TokenSequence> {
    spec.validate()?;
    let (h, w, p) = (spec.image_h, spec.image_w, spec.patch_size);
    if image.len() != 3 * h * w {
        return Err(Error::shape(format!(
            "image length {} does not match 3x{h}x{w}",
            image.len()
        )));
    }
    let n = spec.num_tokens();
    let (grid_h, grid_w) = (spec.grid_h(), spec.grid_w());
    let patch_len = 3 * p * p;

    // Flatten every patch channel-major (c*P^2 + dy*P + dx) into one row.
    let mut patches = Matrix::zeros(n, patch_len);
    for ty in 0..grid_h {
        for tx in 0..grid_w {
            let row = patches.row_mut(ty * grid_w + tx);
            for c in 0..3 {
                for dy in 0..p {
                    let src = c * h * w + (ty * p + dy) * w + tx * p;
                    let dst = c * p * p + dy * p;
                    row[dst..dst + p].copy_from_slice(&image[src..src + p]);
                }
            }
        }
    }

    let mut tokens = patches.matmul(&weights.patch_proj)?;
    tokens.add_row_bias(&weights.patch_bias);
    tokens.add_assign(&weights.pos_embed);

    if spec.use_class_token {
        let ct = weights
            .class_token
            .as_ref()
            .ok_or_else(|| Error::MissingArray("class_token".to_string()))?;
        let mut full = Matrix::zeros(n + 1, spec.embed_dim);
        full.row_mut(0).copy_from_slice(ct);
        for i in 0..n {
            full.row_mut(i + 1).copy_from_slice(tokens.row(i));
        }
        TokenSequence::new(full, true)
    } else {
        TokenSequence::new(tokens, false)
    }
}

/// Core attention on a raw n x E matrix. When `probs_out` is given it
/// receives one post-softmax n x n attention matrix per head.
fn attention_core(
    x: &Matrix,
    params: &LayerParams,
    heads: usize,
    mut probs_out: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    let n = x.rows();
    if n == 0 {
        return Err(Error::shape("attention over an empty sequence".to_string()));
    }
    let e = x.cols();
    if params.w_q.rows() != e {
        return Err(Error::shape(format!(
            "attention weights expect embed dim {}, sequence has {e}",
            params.w_q.rows()
        )));
    }
    if heads == 0 || e % heads != 0 {
        return Err(Error::config(format!(
            "embed dim {e} not divisible into {heads} heads"
        )));
    }
    let d = e / heads;
    let scale = 1.0 / (d as f64).sqrt();

    let mut q = x.matmul(&params.w_q)?;
    q.add_row_bias(&params.b_q);
    let mut k = x.matmul(&params.w_k)?;
    k.add_row_bias(&params.b_k);
    let mut v = x.matmul(&params.w_v)?;
    v.add_row_bias(&params.b_v);

    let mut concat = Matrix::zeros(n, e);
    for head in 0..heads {
        let cols = head * d..(head + 1) * d;
        let qh = q.view();
        let qh = qh.slice(s![.., cols.clone()]);
        let kh = k.view();
        let kh = kh.slice(s![.., cols.clone()]);
        let vh = v.view();
        let vh = vh.slice(s![.., cols.clone()]);

        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        for mut row in scores.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("score rows are contiguous"));
        }
        if let Some(out) = probs_out.as_deref_mut() {
            out.push(Matrix::from_array(scores.clone()));
        }
        let head_out = scores.dot(&vh);
        concat.view_mut().slice_mut(s![.., cols]).assign(&head_out);
    }

    let mut out = concat.matmul(&params.w_o)?;
    out.add_row_bias(&params.b_o);
    Ok(out)
}

/// Multi-head self-attention: softmax(QK^T / sqrt(d)) V per head, heads
/// concatenated, then output-projected. Shape-preserving.
pub fn multi_head_attention(
    seq: &TokenSequence,
    params: &LayerParams,
    heads: usize,
) -> Result<TokenSequence> {
    let out = attention_core(seq.tokens(), params, heads, None)?;
    TokenSequence::new(out, seq.has_class_token())
}

/// As [`multi_head_attention`], additionally returning each head's
/// post-softmax attention matrix for inspection.
pub fn multi_head_attention_with_probs(
    seq: &TokenSequence,
    params: &LayerParams,
    heads: usize,
) -> Result<(TokenSequence, Vec<Matrix>)> {
    let mut probs = Vec::with_capacity(heads);
    let out = attention_core(seq.tokens(), params, heads, Some(&mut probs))?;
    Ok((TokenSequence::new(out, seq.has_class_token())?, probs))
}

/// One pre-norm transformer layer:
/// `x + MSA(LN1(x))`, then `+ MLP(LN2(.))` with a GELU MLP.
pub fn transformer_layer(
    seq: &TokenSequence,
    params: &LayerParams,
    heads: usize,
) -> Result<TokenSequence> {
    let x = seq.tokens();
    let normed = layer_norm(x, &params.ln1_gamma, &params.ln1_beta, LAYER_NORM_EPS)?;
    let attn = attention_core(&normed, params, heads, None)?;
    let mut y = x.clone();
    y.add_assign(&attn);

    let normed2 = layer_norm(&y, &params.ln2_gamma, &params.ln2_beta, LAYER_NORM_EPS)?;
    let mut hidden = normed2.matmul(&params.w_mlp1)?;
    hidden.add_row_bias(&params.b_mlp1);
    hidden.map_in_place(gelu);
    let mut mlp = hidden.matmul(&params.w_mlp2)?;
    mlp.add_row_bias(&params.b_mlp2);
    y.add_assign(&mlp);

    TokenSequence::new(y, seq.has_class_token())
}
