//! Transformer decoder block: token embedding with sinusoidal positions,
//! masked self-attention, cross-attention over the encoder memory, FFN,
//! output distribution, and the caption cross-entropy loss. Every forward
//! has a matching hand-written backward.

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::encoder::Mode;
use crate::error::{Result, RsfdError};

pub const LN_EPS: f64 = 1e-5;

/// Trainable token embeddings plus the fixed sinusoidal positional table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub table: Array2<f64>, // d_e x d_h
    pub positional: Array2<f64>, // t_max x d_h, fixed
}

pub fn sinusoidal_positions(t_max: usize, d_h: usize) -> Array2<f64> {
    Array2::from_shape_fn((t_max, d_h), |(t, i)| {
        let exponent = (2 * (i / 2)) as f64 / d_h as f64;
        let angle = t as f64 / 10000f64.powf(exponent);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl EmbeddingTable {
    pub fn init<R: Rng>(d_e: usize, d_h: usize, t_max: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        EmbeddingTable {
            table: Array2::from_shape_fn((d_e, d_h), |_| rng.gen_range(-bound..bound)),
            positional: sinusoidal_positions(t_max, d_h),
        }
    }
}

/// Embedding lookup plus positional term. `overrides[t]`, when present,
/// replaces the table row at that position (used by FAD during training).
pub fn embed_tokens(
    ids: &[usize],
    emb: &EmbeddingTable,
    overrides: Option<&[Option<Array1<f64>>]>,
) -> Result<Array2<f64>> {
    let d_e = emb.table.nrows();
    let d_h = emb.table.ncols();
    if ids.len() > emb.positional.nrows() {
        return Err(RsfdError::ShapeMismatch(format!(
            "sequence length {} exceeds positional table {}",
            ids.len(),
            emb.positional.nrows()
        )));
    }
    let mut out = Array2::zeros((ids.len(), d_h));
    for (t, &id) in ids.iter().enumerate() {
        if id >= d_e {
            return Err(RsfdError::IdOutOfRange { id, size: d_e });
        }
        let row = overrides
            .and_then(|ov| ov[t].as_ref())
            .map(|v| v.view())
            .unwrap_or_else(|| emb.table.row(id));
        let pos = emb.positional.row(t);
        out.row_mut(t).assign(&(&row + &pos));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            scale: Array1::ones(d),
            shift: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            scale: Array1::zeros(self.scale.dim()),
            shift: Array1::zeros(self.shift.dim()),
        }
    }
}

pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>, // per row
}

pub fn layer_norm_forward(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.mean_axis(Axis(1)).unwrap();
    let var = x.mapv(|v| v * v).mean_axis(Axis(1)).unwrap() - mean.mapv(|m| m * m);
    let inv_std = var.mapv(|v| 1.0 / (v.max(0.0) + LN_EPS).sqrt());
    let mut xhat = x.clone();
    for (mut row, (&m, &is)) in xhat.rows_mut().into_iter().zip(mean.iter().zip(inv_std.iter())) {
        row.mapv_inplace(|v| (v - m) * is);
    }
    let out = &xhat * &ln.scale + &ln.shift;
    let _ = d;
    (out, LnCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    ln: &LayerNorm,
    grads: &mut LayerNorm,
) -> Array2<f64> {
    let d = d_out.ncols() as f64;
    grads.scale = &grads.scale + &(d_out * &cache.xhat).sum_axis(Axis(0));
    grads.shift = &grads.shift + &d_out.sum_axis(Axis(0));
    let d_xhat = d_out * &ln.scale;
    let sum_dxhat = d_xhat.sum_axis(Axis(1));
    let sum_dxhat_xhat = (&d_xhat * &cache.xhat).sum_axis(Axis(1));
    let mut d_x = Array2::zeros(d_out.raw_dim());
    for (i, mut row) in d_x.rows_mut().into_iter().enumerate() {
        let is = cache.inv_std[i];
        for j in 0..row.len() {
            row[j] = is / d
                * (d * d_xhat[[i, j]]
                    - sum_dxhat[i]
                    - cache.xhat[[i, j]] * sum_dxhat_xhat[i]);
        }
    }
    d_x
}

/// Projection weights for one multi-head attention, query side `d_h x d_h`
/// each, output projection `W_h` included.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl AttentionWeights {
    pub fn init<R: Rng>(d_h: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        let mut mk = || Array2::from_shape_fn((d_h, d_h), |_| rng.gen_range(-bound..bound));
        AttentionWeights {
            w_q: mk(),
            w_k: mk(),
            w_v: mk(),
            w_o: mk(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = Array2::zeros(self.w_q.dim());
        AttentionWeights {
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_o: z,
        }
    }
}

pub struct AttentionCache {
    pub q_in: Array2<f64>,
    pub kv_in: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Per head: softmax weights after dropout scaling (what actually
    /// multiplied V).
    pub attn: Vec<Array2<f64>>,
    /// Per head: pre-dropout softmax weights.
    pub attn_raw: Vec<Array2<f64>>,
    /// Per head: dropout keep mask scaled by 1/(1-p); all-ones when inactive.
    pub drop_mask: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
    pub heads: usize,
}

fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        softmax_row_inplace(row.as_slice_mut().expect("contiguous"));
    }
    out
}

/// Multi-head attention. `causal` restricts position `i` to keys `j <= i`.
/// Dropout (train mode, p > 0) applies to the attention weights.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward<R: Rng>(
    q_in: &Array2<f64>,
    kv_in: &Array2<f64>,
    w: &AttentionWeights,
    heads: usize,
    causal: bool,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> (Array2<f64>, AttentionCache) {
    let d_h = w.w_q.ncols();
    assert_eq!(d_h % heads, 0, "head count must divide d_h");
    let d_k = d_h / heads;
    let tq = q_in.nrows();
    let tk = kv_in.nrows();

    let q = q_in.dot(&w.w_q);
    let k = kv_in.dot(&w.w_k);
    let v = kv_in.dot(&w.w_v);

    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = Array2::zeros((tq, d_h));
    let mut attn = Vec::with_capacity(heads);
    let mut attn_raw = Vec::with_capacity(heads);
    let mut drop_masks = Vec::with_capacity(heads);

    for h in 0..heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t()) * scale;
        if causal {
            for i in 0..tq {
                for j in (i + 1)..tk {
                    scores[[i, j]] = f64::NEG_INFINITY;
                }
            }
        }
        let a_raw = softmax_rows(&scores);
        let (a, mask) = if mode == Mode::Train && dropout > 0.0 {
            let keep = 1.0 - dropout;
            let mask = Array2::from_shape_fn((tq, tk), |_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            (&a_raw * &mask, mask)
        } else {
            (a_raw.clone(), Array2::ones((tq, tk)))
        };
        concat.slice_mut(cols).assign(&a.dot(&vh));
        attn.push(a);
        attn_raw.push(a_raw);
        drop_masks.push(mask);
    }

    let out = concat.dot(&w.w_o);
    (
        out,
        AttentionCache {
            q_in: q_in.clone(),
            kv_in: kv_in.clone(),
            q,
            k,
            v,
            attn,
            attn_raw,
            drop_mask: drop_masks,
            concat,
            heads,
        },
    )
}

/// Backward through attention. Returns `(d_q_in, d_kv_in)`.
pub fn attention_backward(
    d_out: &Array2<f64>,
    cache: &AttentionCache,
    w: &AttentionWeights,
    grads: &mut AttentionWeights,
) -> (Array2<f64>, Array2<f64>) {
    let heads = cache.heads;
    let d_h = w.w_q.ncols();
    let d_k = d_h / heads;
    let scale = 1.0 / (d_k as f64).sqrt();

    grads.w_o = &grads.w_o + &cache.concat.t().dot(d_out);
    let d_concat = d_out.dot(&w.w_o.t());

    let mut d_q = Array2::zeros(cache.q.raw_dim());
    let mut d_k_mat = Array2::zeros(cache.k.raw_dim());
    let mut d_v_mat = Array2::zeros(cache.v.raw_dim());

    for h in 0..heads {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let d_oh = d_concat.slice(cols);
        let a = &cache.attn[h];
        let a_raw = &cache.attn_raw[h];
        let mask = &cache.drop_mask[h];
        let vh = cache.v.slice(cols);
        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);

        let d_a_dropped = d_oh.dot(&vh.t());
        d_v_mat.slice_mut(cols).assign(&a.t().dot(&d_oh));

        let d_a = &d_a_dropped * mask;
        // softmax backward per row: a_raw ∘ (d_a - Σ_j d_a ∘ a_raw)
        let row_dot = (&d_a * a_raw).sum_axis(Axis(1));
        let mut d_scores = &d_a * a_raw;
        for (i, mut row) in d_scores.rows_mut().into_iter().enumerate() {
            let rd = row_dot[i];
            for (j, x) in row.iter_mut().enumerate() {
                *x -= a_raw[[i, j]] * rd;
            }
        }
        d_q.slice_mut(cols).assign(&(d_scores.dot(&kh) * scale));
        d_k_mat
            .slice_mut(cols)
            .assign(&(d_scores.t().dot(&qh) * scale));
    }

    grads.w_q = &grads.w_q + &cache.q_in.t().dot(&d_q);
    grads.w_k = &grads.w_k + &cache.kv_in.t().dot(&d_k_mat);
    grads.w_v = &grads.w_v + &cache.kv_in.t().dot(&d_v_mat);

    let d_q_in = d_q.dot(&w.w_q.t());
    let d_kv_in = d_k_mat.dot(&w.w_k.t()) + d_v_mat.dot(&w.w_v.t());
    (d_q_in, d_kv_in)
}

/// One decoder block: masked self-attention, cross-attention over the
/// encoder memory, position-wise FFN, each with residual + layer norm.
#[derive(Debug, Clone)]
pub struct DecoderBlockWeights {
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub ffn_w1: Array2<f64>, // d_h x 4 d_h
    pub ffn_b1: Array1<f64>,
    pub ffn_w2: Array2<f64>, // 4 d_h x d_h
    pub ffn_b2: Array1<f64>,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

impl DecoderBlockWeights {
    pub fn init<R: Rng>(d_h: usize, rng: &mut R) -> Self {
        let inner = 4 * d_h;
        let b1 = 1.0 / (d_h as f64).sqrt();
        let b2 = 1.0 / (inner as f64).sqrt();
        DecoderBlockWeights {
            self_attn: AttentionWeights::init(d_h, rng),
            cross_attn: AttentionWeights::init(d_h, rng),
            ffn_w1: Array2::from_shape_fn((d_h, inner), |_| rng.gen_range(-b1..b1)),
            ffn_b1: Array1::zeros(inner),
            ffn_w2: Array2::from_shape_fn((inner, d_h), |_| rng.gen_range(-b2..b2)),
            ffn_b2: Array1::zeros(d_h),
            ln1: LayerNorm::new(d_h),
            ln2: LayerNorm::new(d_h),
            ln3: LayerNorm::new(d_h),
        }
    }

    pub fn zeros_like(&self) -> Self {
        DecoderBlockWeights {
            self_attn: self.self_attn.zeros_like(),
            cross_attn: self.cross_attn.zeros_like(),
            ffn_w1: Array2::zeros(self.ffn_w1.dim()),
            ffn_b1: Array1::zeros(self.ffn_b1.dim()),
            ffn_w2: Array2::zeros(self.ffn_w2.dim()),
            ffn_b2: Array1::zeros(self.ffn_b2.dim()),
            ln1: self.ln1.zeros_like(),
            ln2: self.ln2.zeros_like(),
            ln3: self.ln3.zeros_like(),
        }
    }
}

pub struct BlockCache {
    pub e_in: Array2<f64>,
    pub self_cache: AttentionCache,
    pub ln1_cache: LnCache,
    pub e1: Array2<f64>,
    pub cross_cache: AttentionCache,
    pub ln2_cache: LnCache,
    pub e2: Array2<f64>,
    pub ffn_pre: Array2<f64>,
    pub ffn_act: Array2<f64>,
    pub ffn_drop: Array2<f64>,
    pub ln3_cache: LnCache,
}

#[allow(clippy::too_many_arguments)]
pub fn decoder_block_forward<R: Rng>(
    e_in: &Array2<f64>,
    memory: &Array2<f64>,
    w: &DecoderBlockWeights,
    heads: usize,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Array2<f64>, BlockCache)> {
    let (sa, self_cache) =
        attention_forward(e_in, e_in, &w.self_attn, heads, true, dropout, mode, rng);
    let (e1, ln1_cache) = layer_norm_forward(&(e_in + &sa), &w.ln1);

    let (ca, cross_cache) =
        attention_forward(&e1, memory, &w.cross_attn, heads, false, dropout, mode, rng);
    let (e2, ln2_cache) = layer_norm_forward(&(&e1 + &ca), &w.ln2);

    let ffn_pre = e2.dot(&w.ffn_w1) + &w.ffn_b1;
    let ffn_act = ffn_pre.mapv(|x| x.max(0.0));
    let ffn_drop = if mode == Mode::Train && dropout > 0.0 {
        let keep = 1.0 - dropout;
        let mask = Array2::from_shape_fn(ffn_act.raw_dim(), |_| {
            if rng.gen_range(0.0..1.0) < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        &ffn_act * &mask
    } else {
        ffn_act.clone()
    };
    let ffn_out = ffn_drop.dot(&w.ffn_w2) + &w.ffn_b2;
    let (d_t, ln3_cache) = layer_norm_forward(&(&e2 + &ffn_out), &w.ln3);

    if d_t.iter().any(|x| !x.is_finite()) {
        return Err(RsfdError::NonFinite("decoder block output".into()));
    }
    Ok((
        d_t,
        BlockCache {
            e_in: e_in.clone(),
            self_cache,
            ln1_cache,
            e1,
            cross_cache,
            ln2_cache,
            e2,
            ffn_pre,
            ffn_act,
            ffn_drop,
            ln3_cache,
        },
    ))
}

/// Backward through one block. Returns `(d_e_in, d_memory)`.
pub fn decoder_block_backward(
    d_out: &Array2<f64>,
    cache: &BlockCache,
    w: &DecoderBlockWeights,
    grads: &mut DecoderBlockWeights,
) -> (Array2<f64>, Array2<f64>) {
    // ln3 and FFN
    let d_res3 = layer_norm_backward(d_out, &cache.ln3_cache, &w.ln3, &mut grads.ln3);
    grads.ffn_b2 = &grads.ffn_b2 + &d_res3.sum_axis(Axis(0));
    grads.ffn_w2 = &grads.ffn_w2 + &cache.ffn_drop.t().dot(&d_res3);
    let d_drop = d_res3.dot(&w.ffn_w2.t());
    // dropout mask recoverable: ffn_drop = ffn_act * mask; where act == 0 grad dies anyway
    let mask_ratio = ndarray::Zip::from(&cache.ffn_drop)
        .and(&cache.ffn_act)
        .map_collect(|&d, &a| if a != 0.0 { d / a } else { 0.0 });
    let d_act = &d_drop * &mask_ratio;
    let d_pre = ndarray::Zip::from(&d_act)
        .and(&cache.ffn_pre)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
    grads.ffn_b1 = &grads.ffn_b1 + &d_pre.sum_axis(Axis(0));
    grads.ffn_w1 = &grads.ffn_w1 + &cache.e2.t().dot(&d_pre);
    let d_e2 = &d_res3 + &d_pre.dot(&w.ffn_w1.t());

    // ln2 and cross-attention
    let d_res2 = layer_norm_backward(&d_e2, &cache.ln2_cache, &w.ln2, &mut grads.ln2);
    let (d_e1_attn, d_memory) =
        attention_backward(&d_res2, &cache.cross_cache, &w.cross_attn, &mut grads.cross_attn);
    let d_e1 = &d_res2 + &d_e1_attn;

    // ln1 and self-attention
    let d_res1 = layer_norm_backward(&d_e1, &cache.ln1_cache, &w.ln1, &mut grads.ln1);
    let (d_e_attn, d_e_kv) =
        attention_backward(&d_res1, &cache.self_cache, &w.self_attn, &mut grads.self_attn);
    let d_e_in = &d_res1 + &d_e_attn + &d_e_kv;

    (d_e_in, d_memory)
}

/// Output head `W_p: d_h x d_e`, shared with the divergent supervisor.
#[derive(Debug, Clone)]
pub struct OutputHead {
    pub w_p: Array2<f64>,
}

impl OutputHead {
    pub fn init<R: Rng>(d_h: usize, d_e: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_h as f64).sqrt();
        OutputHead {
            w_p: Array2::from_shape_fn((d_h, d_e), |_| rng.gen_range(-bound..bound)),
        }
    }
}

/// Row-wise softmax of `D_t W_p`.
pub fn output_distribution(d_t: &Array2<f64>, head: &OutputHead) -> Array2<f64> {
    softmax_rows(&d_t.dot(&head.w_p))
}

/// Cross-entropy `-Σ_t log P_t(y*_t)` over unmasked positions.
pub fn caption_loss(probs: &Array2<f64>, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if !mask.iter().any(|&m| m) {
        return Err(RsfdError::AllPositionsMasked);
    }
    let mut loss = 0.0;
    for (t, (&y, &m)) in targets.iter().zip(mask.iter()).enumerate() {
        if m {
            loss -= probs[[t, y]].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(loss)
}

/// Gradient of `caption_loss` w.r.t. the logits `D_t W_p`: `P - onehot`
/// on unmasked rows, zero elsewhere.
pub fn caption_loss_dlogits(
    probs: &Array2<f64>,
    targets: &[usize],
    mask: &[bool],
) -> Array2<f64> {
    let mut d = Array2::zeros(probs.raw_dim());
    for (t, (&y, &m)) in targets.iter().zip(mask.iter()).enumerate() {
        if m {
            let mut row = d.row_mut(t);
            row.assign(&probs.row(t));
            row[y] -= 1.0;
        }
    }
    d
}
