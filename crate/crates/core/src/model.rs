//! Decoder-only transformer classifier with hand-written backward passes.
//!
//! Block layout (pre-norm), repeated `n_layers` times over the residual
//! stream `x`:
//!
//! ```text
//! x = x + Dropout(MultiHead(LN1(x)))      causal
//! x = x + Dropout(GELU(LN2(x) · W1) · W2)
//! ```
//!
//! followed by a final layer norm. The classification head reads the final
//! hidden state at the last non-PAD position; the language-model head reuses
//! the token embedding matrix (weight tying).

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::numerics::{
    gelu, gelu_derivative, layer_norm_backward, layer_norm_with_cache, logistic, softmax_in_place,
    softmax_rows_backward, LayerNormCache, Matrix, NumericsError, LAYER_NORM_EPS,
};
use crate::tokenizer::TokenSequence;

/// Additive score for masked (future) positions.
pub const MASK_SENTINEL: f64 = -1e30;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab_size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("parameters do not match config: {0}")]
    ParamShape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, d_model 64, 4 heads, d_ff 256,
    /// sequences up to 256 tokens, dropout 0.1.
    pub fn desk_scale(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 2,
            max_seq_len: 256,
            dropout_rate: 0.1,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Query/key/value projections of one attention head, each `d_model × d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub heads: Vec<HeadParams>,
    /// Output projection, `d_model × d_model`.
    pub w_o: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ff1: Matrix,
    pub ff2: Matrix,
}

/// Every learnable weight. Also used as the gradient and optimizer-moment
/// container, since those share its shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub token_embedding: Matrix,
    pub position_embedding: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_ln_gain: Matrix,
    pub final_ln_bias: Matrix,
    /// Classification head, `d_model × 1`.
    pub head_weights: Matrix,
    /// Classification bias, stored `1 × 1`.
    pub head_bias: Matrix,
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Trunk,
    Head,
}

impl ParameterSet {
    /// Random initialization: weights from N(0, 0.02²), layer-norm gains 1,
    /// biases 0.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_k();
        let mut normal = |r, c| Matrix::random_normal(r, c, INIT_STD, rng);
        let token_embedding = normal(config.vocab_size, d);
        let position_embedding = normal(config.max_seq_len, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|_| HeadParams {
                    w_q: normal(d, dk),
                    w_k: normal(d, dk),
                    w_v: normal(d, dk),
                })
                .collect();
            layers.push(LayerParams {
                heads,
                w_o: normal(d, d),
                ln1_gain: Matrix::filled(1, d, 1.0),
                ln1_bias: Matrix::zeros(1, d),
                ln2_gain: Matrix::filled(1, d, 1.0),
                ln2_bias: Matrix::zeros(1, d),
                ff1: normal(d, config.d_ff),
                ff2: normal(config.d_ff, d),
            });
        }
        let head_weights = normal(d, 1);
        Ok(ParameterSet {
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: Matrix::filled(1, d, 1.0),
            final_ln_bias: Matrix::zeros(1, d),
            head_weights,
            head_bias: Matrix::zeros(1, 1),
        })
    }

    /// Fresh classification head, leaving the trunk untouched.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let d = self.head_weights.rows();
        self.head_weights = Matrix::random_normal(d, 1, INIT_STD, rng);
        self.head_bias = Matrix::zeros(1, 1);
    }

    pub fn bias(&self) -> f64 {
        self.head_bias[(0, 0)]
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ParameterSet {
            token_embedding: z(&self.token_embedding),
            position_embedding: z(&self.position_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            w_q: z(&h.w_q),
                            w_k: z(&h.w_k),
                            w_v: z(&h.w_v),
                        })
                        .collect(),
                    w_o: z(&l.w_o),
                    ln1_gain: z(&l.ln1_gain),
                    ln1_bias: z(&l.ln1_bias),
                    ln2_gain: z(&l.ln2_gain),
                    ln2_bias: z(&l.ln2_bias),
                    ff1: z(&l.ff1),
                    ff2: z(&l.ff2),
                })
                .collect(),
            final_ln_gain: z(&self.final_ln_gain),
            final_ln_bias: z(&self.final_ln_bias),
            head_weights: z(&self.head_weights),
            head_bias: z(&self.head_bias),
        }
    }

    /// Tensors in canonical order with their names and groups. The
    /// classification head always comes last.
    pub fn named_tensors(&self) -> Vec<(String, ParamGroup, &Matrix)> {
        let mut out = vec![
            ("token_embedding".to_string(), ParamGroup::Trunk, &self.token_embedding),
            ("position_embedding".to_string(), ParamGroup::Trunk, &self.position_embedding),
        ];
        for (li, l) in self.layers.iter().enumerate() {
            for (hi, h) in l.heads.iter().enumerate() {
                out.push((format!("layers.{li}.heads.{hi}.w_q"), ParamGroup::Trunk, &h.w_q));
                out.push((format!("layers.{li}.heads.{hi}.w_k"), ParamGroup::Trunk, &h.w_k));
                out.push((format!("layers.{li}.heads.{hi}.w_v"), ParamGroup::Trunk, &h.w_v));
            }
            out.push((format!("layers.{li}.w_o"), ParamGroup::Trunk, &l.w_o));
            out.push((format!("layers.{li}.ln1_gain"), ParamGroup::Trunk, &l.ln1_gain));
            out.push((format!("layers.{li}.ln1_bias"), ParamGroup::Trunk, &l.ln1_bias));
            out.push((format!("layers.{li}.ln2_gain"), ParamGroup::Trunk, &l.ln2_gain));
            out.push((format!("layers.{li}.ln2_bias"), ParamGroup::Trunk, &l.ln2_bias));
            out.push((format!("layers.{li}.ff1"), ParamGroup::Trunk, &l.ff1));
            out.push((format!("layers.{li}.ff2"), ParamGroup::Trunk, &l.ff2));
        }
        out.push(("final_ln_gain".into(), ParamGroup::Trunk, &self.final_ln_gain));
        out.push(("final_ln_bias".into(), ParamGroup::Trunk, &self.final_ln_bias));
        out.push(("head_weights".into(), ParamGroup::Head, &self.head_weights));
        out.push(("head_bias".into(), ParamGroup::Head, &self.head_bias));
        out
    }

    /// Mutable tensors in the same canonical order as [`named_tensors`].
    ///
    /// [`named_tensors`]: ParameterSet::named_tensors
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for l in &mut self.layers {
            for h in &mut l.heads {
                out.push(&mut h.w_q);
                out.push(&mut h.w_k);
                out.push(&mut h.w_v);
            }
            out.push(&mut l.w_o);
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.ff1);
            out.push(&mut l.ff2);
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out.push(&mut self.head_weights);
        out.push(&mut self.head_bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, m)| m.len()).sum()
    }

    /// All coordinates concatenated in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, m) in self.named_tensors() {
            out.extend_from_slice(m.data());
        }
        out
    }

    /// Overwrite every coordinate from a flat vector in canonical order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for m in self.tensors_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        assert_eq!(at, flat.len(), "flat vector length mismatch");
    }

    /// Accumulate `other * k` into `self`.
    pub fn add_scaled(&mut self, other: &ParameterSet, k: f64) {
        let others: Vec<&Matrix> = other.named_tensors().into_iter().map(|(_, _, m)| m).collect();
        for (mine, theirs) in self.tensors_mut().into_iter().zip(others) {
            for (a, b) in mine.data_mut().iter_mut().zip(theirs.data()) {
                *a += b * k;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.named_tensors()
            .iter()
            .map(|(_, _, m)| m.sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    /// Check every shape against `config`.
    pub fn check_config(&self, config: &ModelConfig) -> Result<(), ModelError> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.d_k();
        let mut expect = vec![
            (config.vocab_size, d),
            (config.max_seq_len, d),
        ];
        if self.layers.len() != config.n_layers {
            return Err(ModelError::ParamShape(format!(
                "{} layers, config says {}",
                self.layers.len(),
                config.n_layers
            )));
        }
        for l in &self.layers {
            if l.heads.len() != config.n_heads {
                return Err(ModelError::ParamShape(format!(
                    "{} heads, config says {}",
                    l.heads.len(),
                    config.n_heads
                )));
            }
            for _ in 0..config.n_heads {
                expect.extend([(d, dk), (d, dk), (d, dk)]);
            }
            expect.extend([(d, d), (1, d), (1, d), (1, d), (1, d), (d, config.d_ff), (config.d_ff, d)]);
        }
        expect.extend([(1, d), (1, d), (d, 1), (1, 1)]);
        for ((name, _, m), want) in self.named_tensors().into_iter().zip(expect) {
            if m.shape() != want {
                return Err(ModelError::ParamShape(format!(
                    "{name} is {:?}, expected {want:?}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Whether dropout is active. Training mode carries the RNG that draws masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    fn dropout_mask(&mut self, rows: usize, cols: usize, rate: f64) -> Option<Matrix> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let keep = 1.0 / (1.0 - rate);
                let mut m = Matrix::zeros(rows, cols);
                for v in m.data_mut() {
                    *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
                }
                Some(m)
            }
            _ => None,
        }
    }
}

/// Attention weights `softmax(Q Kᵀ / sqrt(d_k))`, future positions masked
/// when `causal`.
pub fn attention_weights(q: &Matrix, k: &Matrix, causal: bool) -> Result<Matrix, ModelError> {
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(NumericsError::Shape {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        }
        .into());
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = q.matmul_t(k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s *= scale;
            if causal && j > i {
                *s += MASK_SENTINEL;
            }
        }
        softmax_in_place(row);
    }
    Ok(scores)
}

/// Scaled dot-product attention.
pub fn attention(q: &Matrix, k: &Matrix, v: &Matrix, causal: bool) -> Result<Matrix, ModelError> {
    if k.rows() != v.rows() {
        return Err(NumericsError::Shape {
            op: "attention",
            left: k.shape(),
            right: v.shape(),
        }
        .into());
    }
    Ok(attention_weights(q, k, causal)?.matmul(v)?)
}

/// Multi-head attention: per-head attention on projected inputs,
/// concatenated and projected by `W_O`.
pub fn multi_head(x: &Matrix, layer: &LayerParams, config: &ModelConfig, causal: bool) -> Result<Matrix, ModelError> {
    Ok(multi_head_traced(x, layer, config, causal)?.0)
}

struct HeadTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    weights: Matrix,
}

fn multi_head_traced(
    x: &Matrix,
    layer: &LayerParams,
    config: &ModelConfig,
    causal: bool,
) -> Result<(Matrix, Matrix, Vec<HeadTrace>), ModelError> {
    let dk = config.d_k();
    let mut concat = Matrix::zeros(x.rows(), config.d_model);
    let mut traces = Vec::with_capacity(layer.heads.len());
    for (i, head) in layer.heads.iter().enumerate() {
        let q = x.matmul(&head.w_q)?;
        let k = x.matmul(&head.w_k)?;
        let v = x.matmul(&head.w_v)?;
        let weights = attention_weights(&q, &k, causal)?;
        let out = weights.matmul(&v)?;
        concat.set_column_block(i * dk, &out);
        traces.push(HeadTrace { q, k, v, weights });
    }
    let projected = concat.matmul(&layer.w_o)?;
    Ok((projected, concat, traces))
}

struct LayerTrace {
    ln1: LayerNormCache,
    normed1: Matrix,
    heads: Vec<HeadTrace>,
    concat: Matrix,
    attn_mask: Option<Matrix>,
    ln2: LayerNormCache,
    normed2: Matrix,
    pre_act: Matrix,
    act: Matrix,
    ff_mask: Option<Matrix>,
}

/// Activations cached by a forward pass, consumed by the matching backward.
pub struct ForwardTrace {
    ids: Vec<u32>,
    embed_mask: Option<Matrix>,
    layers: Vec<LayerTrace>,
    final_ln: LayerNormCache,
    hidden: Matrix,
}

impl ForwardTrace {
    /// Final-layer representation, `seq_len × d_model`.
    pub fn hidden(&self) -> &Matrix {
        &self.hidden
    }
}

fn apply_mask(m: &mut Matrix, mask: &Option<Matrix>) {
    if let Some(mask) = mask {
        for (v, k) in m.data_mut().iter_mut().zip(mask.data()) {
            *v *= k;
        }
    }
}

fn row_vec(m: &Matrix) -> &[f64] {
    m.data()
}

fn check_sequence(seq: &TokenSequence, config: &ModelConfig) -> Result<(), ModelError> {
    if seq.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if seq.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = seq.ids().iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Run embeddings and every block; returns the cached trace whose `hidden`
/// is the final layer-normed representation.
pub fn forward_trunk(
    seq: &TokenSequence,
    params: &ParameterSet,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<ForwardTrace, ModelError> {
    check_sequence(seq, config)?;
    params.check_config(config)?;
    let n = seq.len();
    let d = config.d_model;
    let mut x = Matrix::zeros(n, d);
    for (p, &id) in seq.ids().iter().enumerate() {
        let tok = params.token_embedding.row(id as usize);
        let pos = params.position_embedding.row(p);
        for (c, v) in x.row_mut(p).iter_mut().enumerate() {
            *v = tok[c] + pos[c];
        }
    }
    let embed_mask = mode.dropout_mask(n, d, config.dropout_rate);
    apply_mask(&mut x, &embed_mask);

    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (normed1, ln1) =
            layer_norm_with_cache(&x, row_vec(&layer.ln1_gain), row_vec(&layer.ln1_bias), LAYER_NORM_EPS)?;
        let (mut attn, concat, heads) = multi_head_traced(&normed1, layer, config, true)?;
        let attn_mask = mode.dropout_mask(n, d, config.dropout_rate);
        apply_mask(&mut attn, &attn_mask);
        x.add_assign(&attn)?;

        let (normed2, ln2) =
            layer_norm_with_cache(&x, row_vec(&layer.ln2_gain), row_vec(&layer.ln2_bias), LAYER_NORM_EPS)?;
        let pre_act = normed2.matmul(&layer.ff1)?;
        let act = pre_act.map(gelu);
        let mut ff = act.matmul(&layer.ff2)?;
        let ff_mask = mode.dropout_mask(n, d, config.dropout_rate);
        apply_mask(&mut ff, &ff_mask);
        x.add_assign(&ff)?;

        layers.push(LayerTrace {
            ln1,
            normed1,
            heads,
            concat,
            attn_mask,
            ln2,
            normed2,
            pre_act,
            act,
            ff_mask,
        });
    }
    let (hidden, final_ln) = layer_norm_with_cache(
        &x,
        row_vec(&params.final_ln_gain),
        row_vec(&params.final_ln_bias),
        LAYER_NORM_EPS,
    )?;
    Ok(ForwardTrace {
        ids: seq.ids().to_vec(),
        embed_mask,
        layers,
        final_ln,
        hidden,
    })
}

/// Reverse-mode pass through the trunk given `dL/d hidden`.
fn backward_trunk(trace: &ForwardTrace, params: &ParameterSet, d_hidden: &Matrix) -> Result<ParameterSet, ModelError> {
    let mut grads = params.zeros_like();
    let (mut dx, dg, db) = layer_norm_backward(&trace.final_ln, row_vec(&params.final_ln_gain), d_hidden);
    grads.final_ln_gain.data_mut().copy_from_slice(&dg);
    grads.final_ln_bias.data_mut().copy_from_slice(&db);

    for (li, (layer, lt)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        let g = &mut grads.layers[li];

        // Feed-forward sublayer.
        let mut d_ff = dx.clone();
        apply_mask(&mut d_ff, &lt.ff_mask);
        g.ff2 = lt.act.t_matmul(&d_ff)?;
        let d_act = d_ff.matmul_t(&layer.ff2)?;
        let mut d_pre = d_act;
        for (d, &u) in d_pre.data_mut().iter_mut().zip(lt.pre_act.data()) {
            *d *= gelu_derivative(u);
        }
        g.ff1 = lt.normed2.t_matmul(&d_pre)?;
        let d_normed2 = d_pre.matmul_t(&layer.ff1)?;
        let (d_x_ln2, dg2, db2) = layer_norm_backward(&lt.ln2, row_vec(&layer.ln2_gain), &d_normed2);
        g.ln2_gain.data_mut().copy_from_slice(&dg2);
        g.ln2_bias.data_mut().copy_from_slice(&db2);
        dx.add_assign(&d_x_ln2)?;

        // Attention sublayer.
        let mut d_attn = dx.clone();
        apply_mask(&mut d_attn, &lt.attn_mask);
        g.w_o = lt.concat.t_matmul(&d_attn)?;
        let d_concat = d_attn.matmul_t(&layer.w_o)?;
        let dk = layer.heads[0].w_q.cols();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut d_normed1 = Matrix::zeros(lt.normed1.rows(), lt.normed1.cols());
        for (hi, (head, ht)) in layer.heads.iter().zip(&lt.heads).enumerate() {
            let d_out = d_concat.column_block(hi * dk, dk);
            let d_weights = d_out.matmul_t(&ht.v)?;
            let d_v = ht.weights.t_matmul(&d_out)?;
            let mut d_scores = softmax_rows_backward(&ht.weights, &d_weights);
            d_scores.scale_assign(scale);
            let d_q = d_scores.matmul(&ht.k)?;
            let d_k = d_scores.t_matmul(&ht.q)?;
            let gh = &mut g.heads[hi];
            gh.w_q = lt.normed1.t_matmul(&d_q)?;
            gh.w_k = lt.normed1.t_matmul(&d_k)?;
            gh.w_v = lt.normed1.t_matmul(&d_v)?;
            d_normed1.add_assign(&d_q.matmul_t(&head.w_q)?)?;
            d_normed1.add_assign(&d_k.matmul_t(&head.w_k)?)?;
            d_normed1.add_assign(&d_v.matmul_t(&head.w_v)?)?;
        }
        let (d_x_ln1, dg1, db1) = layer_norm_backward(&lt.ln1, row_vec(&layer.ln1_gain), &d_normed1);
        g.ln1_gain.data_mut().copy_from_slice(&dg1);
        g.ln1_bias.data_mut().copy_from_slice(&db1);
        dx.add_assign(&d_x_ln1)?;
    }

    apply_mask(&mut dx, &trace.embed_mask);
    for (p, &id) in trace.ids.iter().enumerate() {
        let row = dx.row(p);
        for (t, v) in grads.token_embedding.row_mut(id as usize).iter_mut().zip(row) {
            *t += v;
        }
        for (t, v) in grads.position_embedding.row_mut(p).iter_mut().zip(row) {
            *t += v;
        }
    }
    Ok(grads)
}

/// Output of [`forward_classify`].
pub struct ClassifierOutput {
    pub probability: f64,
    pub logit: f64,
    /// Position whose hidden state fed the head.
    pub position: usize,
    pub trace: ForwardTrace,
}

impl ClassifierOutput {
    /// Final-layer representation, `seq_len × d_model`.
    pub fn hidden(&self) -> &Matrix {
        self.trace.hidden()
    }
}

/// Classify a sequence: logistic of the head applied to the final hidden
/// state at the last non-PAD position.
pub fn forward_classify(
    seq: &TokenSequence,
    params: &ParameterSet,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<ClassifierOutput, ModelError> {
    let trace = forward_trunk(seq, params, config, mode)?;
    let position = seq.last_content_position();
    let h = trace.hidden.row(position);
    let logit = crate::numerics::dot(h, params.head_weights.data()) + params.bias();
    Ok(ClassifierOutput {
        probability: logistic(logit),
        logit,
        position,
        trace,
    })
}

/// Gradients of every parameter given `dL/d logit`.
pub fn backward_classify(out: &ClassifierOutput, params: &ParameterSet, d_logit: f64) -> Result<ParameterSet, ModelError> {
    let hidden = out.trace.hidden();
    let mut d_hidden = Matrix::zeros(hidden.rows(), hidden.cols());
    for (d, &w) in d_hidden.row_mut(out.position).iter_mut().zip(params.head_weights.data()) {
        *d = d_logit * w;
    }
    let mut grads = backward_trunk(&out.trace, params, &d_hidden)?;
    for (g, &h) in grads
        .head_weights
        .data_mut()
        .iter_mut()
        .zip(hidden.row(out.position))
    {
        *g = d_logit * h;
    }
    grads.head_bias[(0, 0)] = d_logit;
    Ok(grads)
}

/// Output of [`forward_lm`].
pub struct LmOutput {
    /// Row `i` is the next-token distribution after position `i`.
    pub distributions: Matrix,
    pub trace: ForwardTrace,
}

/// Next-token distributions through the weight-tied output head.
pub fn forward_lm(
    seq: &TokenSequence,
    params: &ParameterSet,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<LmOutput, ModelError> {
    let trace = forward_trunk(seq, params, config, mode)?;
    let mut distributions = trace.hidden.matmul_t(&params.token_embedding)?;
    for r in 0..distributions.rows() {
        softmax_in_place(distributions.row_mut(r));
    }
    Ok(LmOutput {
        distributions,
        trace,
    })
}

/// Gradients of every parameter given `dL/d logits` of the LM head
/// (`seq_len × vocab_size`, pre-softmax).
pub fn backward_lm(out: &LmOutput, params: &ParameterSet, d_logits: &Matrix) -> Result<ParameterSet, ModelError> {
    let hidden = out.trace.hidden();
    let d_hidden = d_logits.matmul(&params.token_embedding)?;
    let mut grads = backward_trunk(&out.trace, params, &d_hidden)?;
    grads.token_embedding.add_assign(&d_logits.t_matmul(hidden)?)?;
    Ok(grads)
}
