//! Teacher-forced training loop, Adam optimizer, beam-search generation,
//! and checkpoint round-tripping.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{FrequencyLabels, Vocabulary, BOS_ID, EOS_ID};
use crate::decoder::{
    caption_loss, caption_loss_dlogits, decoder_block_backward, decoder_block_forward,
    embed_tokens, softmax_rows, BlockCache,
};
use crate::dss::{
    divergent_distributions, divergent_loss, divergent_loss_dlogits, dss_backward,
};
use crate::encoder::{encode_video, encode_video_backward, Mode, VideoFeatures};
use crate::error::{Result, RsfdError};
use crate::fad::{build_plan, diffuse_from_plan, DiffusedEmbeddings, DiffusionPlan};
use crate::model::{ModelDims, ModelState};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FadSettings {
    pub enabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DssSettings {
    pub enabled: bool,
    pub window_size: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub beam_size: usize,
    pub t_max: usize,
    pub k: usize,
    pub d_v: usize,
    pub d_h: usize,
    pub heads: usize,
    pub n_layers: usize,
    pub gamma: f64,
    pub delta: f64,
    pub min_count: usize,
    pub seed: u64,
    pub fad: FadSettings,
    pub dss: DssSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.005,
            batch_size: 64,
            epochs: 50,
            weight_decay: 0.0005,
            dropout: 0.5,
            beam_size: 5,
            t_max: 30,
            k: 8,
            d_v: 2048,
            d_h: 512,
            heads: 8,
            n_layers: 1,
            gamma: 0.015,
            delta: 0.0015,
            min_count: 1,
            seed: 0,
            fad: FadSettings { enabled: true },
            dss: DssSettings {
                enabled: true,
                window_size: 5,
                lambda: 0.07,
            },
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration for tests and synthetic experiments.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 16,
            epochs: 10,
            dropout: 0.1,
            t_max: 16,
            k: 4,
            d_v: 32,
            d_h: 64,
            heads: 4,
            ..TrainConfig::default()
        }
    }

    pub fn dims(&self, d_e: usize) -> ModelDims {
        ModelDims {
            d_v: self.d_v,
            d_h: self.d_h,
            heads: self.heads,
            d_e,
            t_max: self.t_max,
            n_layers: self.n_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h % self.heads != 0 {
            return Err(RsfdError::InvalidConfig(format!(
                "heads {} must divide d_h {}",
                self.heads, self.d_h
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(RsfdError::InvalidConfig("dropout must be in [0,1)".into()));
        }
        if self.dss.window_size % 2 == 0 || self.dss.window_size < 3 {
            return Err(RsfdError::InvalidConfig(
                "dss.window_size must be odd and >= 3".into(),
            ));
        }
        if self.t_max < 3 {
            return Err(RsfdError::InvalidConfig("t_max must be >= 3".into()));
        }
        if self.dss.lambda < 0.0 {
            return Err(RsfdError::InvalidConfig("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// One teacher-forcing example: decoder input ids and left-shifted targets,
/// both truncated at EOS (no PAD inside).
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub video_idx: usize,
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

impl TrainExample {
    /// Build from an encoded caption (`encode_caption` output).
    pub fn from_encoded(video_idx: usize, encoded: &[usize]) -> Self {
        let eos = encoded
            .iter()
            .position(|&id| id == EOS_ID)
            .expect("encoded caption always contains EOS");
        TrainExample {
            video_idx,
            input: encoded[..eos].to_vec(),
            target: encoded[1..=eos].to_vec(),
        }
    }
}

pub struct ForwardArtifacts {
    pub memory: Array2<f64>,
    pub block_caches: Vec<BlockCache>,
    pub hidden: Array2<f64>,
    pub probs: Array2<f64>,
}

/// Eval-mode forward over a full prefix; no dropout, running BN stats.
pub fn forward_eval(
    state: &mut ModelState,
    features: &VideoFeatures,
    ids: &[usize],
) -> Result<ForwardArtifacts> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let (memory, _) = encode_video(
        features,
        &mut state.hel_image,
        &mut state.hel_motion,
        Mode::Eval,
    )?;
    let mut x = embed_tokens(ids, &state.embedding, None)?;
    let mut caches = Vec::new();
    for block in &state.blocks {
        let (next, cache) = decoder_block_forward(
            &x,
            &memory,
            block,
            state.dims.heads,
            0.0,
            Mode::Eval,
            &mut rng,
        )?;
        caches.push(cache);
        x = next;
    }
    let probs = softmax_rows(&x.dot(&state.head.w_p));
    Ok(ForwardArtifacts {
        memory,
        block_caches: caches,
        hidden: x,
        probs,
    })
}

/// Per-example losses returned by a training forward/backward.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExampleLoss {
    pub caption: f64,
    pub divergent: f64,
    pub tokens: usize,
}

/// Forward + backward for one example in train mode. Gradients are scaled
/// by `scale` and accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn train_forward_backward(
    state: &mut ModelState,
    grads: &mut ModelState,
    features: &VideoFeatures,
    example: &TrainExample,
    diffused: Option<&DiffusedEmbeddings>,
    cfg: &TrainConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ExampleLoss> {
    let heads = state.dims.heads;
    let (memory, enc_cache) = encode_video(
        features,
        &mut state.hel_image,
        &mut state.hel_motion,
        Mode::Train,
    )?;

    // FAD overrides on HFT occurrences of the teacher-forced input
    let overrides: Option<Vec<Option<Array1<f64>>>> = diffused.map(|d| {
        example
            .input
            .iter()
            .map(|id| d.rows.get(id).cloned())
            .collect()
    });

    let x0 = embed_tokens(&example.input, &state.embedding, overrides.as_deref())?;
    let mut x = x0;
    let mut caches = Vec::new();
    for block in &state.blocks {
        let (next, cache) =
            decoder_block_forward(&x, &memory, block, heads, cfg.dropout, Mode::Train, rng)?;
        caches.push(cache);
        x = next;
    }
    let hidden = x;
    let probs = softmax_rows(&hidden.dot(&state.head.w_p));
    let mask = vec![true; example.target.len()];
    let loss_t = caption_loss(&probs, &example.target, &mask)?;

    // caption-loss gradient into logits
    let mut d_logits = caption_loss_dlogits(&probs, &example.target, &mask);
    d_logits *= scale;
    grads.head.w_p = &grads.head.w_p + &hidden.t().dot(&d_logits);
    let mut d_hidden = d_logits.dot(&state.head.w_p.t());

    // divergent supervisor (skipped entirely when disabled or weightless so
    // the λ=0 path is bitwise identical to dss-off)
    let mut loss_div = 0.0;
    if cfg.dss.enabled && cfg.dss.lambda > 0.0 {
        let (p_div, dss_cache) = divergent_distributions(&hidden, &state.dss, &state.head);
        loss_div = divergent_loss(&p_div, &example.target, &mask, cfg.dss.window_size);
        let mut d_div_logits =
            divergent_loss_dlogits(&p_div, &example.target, &mask, cfg.dss.window_size);
        d_div_logits *= cfg.dss.lambda * scale;
        d_hidden = d_hidden
            + dss_backward(
                &d_div_logits,
                &dss_cache,
                &state.dss,
                &state.head,
                &mut grads.dss.w_a,
                &mut grads.head.w_p,
            );
    }

    // back through the decoder stack
    let mut d_x = d_hidden;
    let mut d_memory = Array2::zeros(memory.raw_dim());
    for idx in (0..state.blocks.len()).rev() {
        let (d_in, d_mem) = decoder_block_backward(
            &d_x,
            &caches[idx],
            &state.blocks[idx],
            &mut grads.blocks[idx],
        );
        d_x = d_in;
        d_memory = d_memory + d_mem;
    }

    // embedding gradients, routing overridden rows through the diffusion
    // composition so both the HFT row and its LFT contributors learn
    for (t, &id) in example.input.iter().enumerate() {
        let g = d_x.row(t);
        let composed = diffused.and_then(|d| {
            d.rows.contains_key(&id).then(|| &d.composition[&id])
        });
        match composed {
            Some(combo) => {
                let mut row = grads.embedding.table.row_mut(id);
                row += &g;
                for &(lft_id, alpha) in combo {
                    let mut lrow = grads.embedding.table.row_mut(lft_id);
                    lrow.scaled_add(alpha, &g);
                }
            }
            None => {
                let mut row = grads.embedding.table.row_mut(id);
                row += &g;
            }
        }
    }

    encode_video_backward(
        &d_memory,
        &enc_cache,
        &state.hel_image,
        &state.hel_motion,
        &mut grads.hel_image,
        &mut grads.hel_motion,
    );

    Ok(ExampleLoss {
        caption: loss_t,
        divergent: loss_div,
        tokens: example.target.len(),
    })
}

pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_t: f64,
    pub loss_div: f64,
    pub loss_per_token: f64,
    pub lr: f64,
    pub fad_pairs: usize,
}

/// One epoch of teacher-forced training. The FAD plan is recomputed from
/// the current embedding table at the start of the epoch when enabled.
pub fn train_epoch(
    state: &mut ModelState,
    data: &[TrainExample],
    features: &[VideoFeatures],
    labels: Option<&FrequencyLabels>,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    adam: &mut Adam,
    epoch: usize,
) -> Result<EpochMetrics> {
    let (diffused, fad_pairs): (Option<DiffusedEmbeddings>, usize) =
        if cfg.fad.enabled {
            let labels = labels.ok_or_else(|| {
                RsfdError::InvalidConfig("FAD enabled but no frequency labels".into())
            })?;
            let plan: DiffusionPlan = build_plan(&state.embedding, labels, vocab)?;
            let pairs = plan.loh.len();
            (Some(diffuse_from_plan(&state.embedding, &plan, epoch)), pairs)
        } else {
            (None, 0)
        };

    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed
            .wrapping_mul(0x9e3779b97f4a7c15)
            .wrapping_add(epoch as u64),
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    // Fisher-Yates with the epoch rng
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut sum_t = 0.0;
    let mut sum_div = 0.0;
    let mut sum_tokens = 0usize;
    for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
        let mut grads = state.zeros_like();
        let scale = 1.0 / batch.len() as f64;
        for &ex_idx in batch {
            let ex = &data[ex_idx];
            let loss = train_forward_backward(
                state,
                &mut grads,
                &features[ex.video_idx],
                ex,
                diffused.as_ref(),
                cfg,
                scale,
                &mut rng,
            )?;
            if !loss.caption.is_finite() || !loss.divergent.is_finite() {
                return Err(RsfdError::NonFiniteLoss(batch_idx));
            }
            sum_t += loss.caption;
            sum_div += loss.divergent;
            sum_tokens += loss.tokens;
        }

        let mut g = grads.flatten();
        let p = state.flatten();
        let decay = state.decay_mask();
        if cfg.weight_decay > 0.0 {
            for i in 0..g.len() {
                if decay[i] {
                    g[i] += cfg.weight_decay * p[i];
                }
            }
        }
        let norm: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > GRAD_CLIP_NORM {
            let s = GRAD_CLIP_NORM / norm;
            for x in &mut g {
                *x *= s;
            }
        }
        let mut flat = p;
        adam.update(&mut flat, &g, cfg.learning_rate);
        state.unflatten(&flat);
    }

    let n = data.len() as f64;
    Ok(EpochMetrics {
        epoch,
        loss_t: sum_t / n,
        loss_div: sum_div / n,
        loss_per_token: sum_t / sum_tokens.max(1) as f64,
        lr: cfg.learning_rate,
        fad_pairs,
    })
}

/// Mean per-token cross-entropy over `data` in eval mode.
pub fn eval_loss_per_token(
    state: &mut ModelState,
    data: &[TrainExample],
    features: &[VideoFeatures],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for ex in data {
        let art = forward_eval(state, &features[ex.video_idx], &ex.input)?;
        let mask = vec![true; ex.target.len()];
        sum += caption_loss(&art.probs, &ex.target, &mask)?;
        tokens += ex.target.len();
    }
    Ok(sum / tokens.max(1) as f64)
}

/// A finished generation: ids exclude BOS, include EOS when one was
/// produced before the length cap.
#[derive(Debug, Clone)]
pub struct Generated {
    pub ids: Vec<usize>,
    /// Length-normalized sum of log probabilities.
    pub score: f64,
    /// Next-token distribution at each generation step.
    pub step_distributions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Hyp {
    ids: Vec<usize>, // includes BOS
    logp: f64,
    finished: bool,
}

fn hyp_better(a: (f64, &[usize]), b: (f64, &[usize])) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.cmp(b.1))
}

/// Next-token distribution for a prefix (eval mode).
pub fn next_token_probs(
    state: &mut ModelState,
    memory: &Array2<f64>,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = embed_tokens(prefix, &state.embedding, None)?;
    let heads = state.dims.heads;
    let blocks = state.blocks.clone();
    for block in &blocks {
        let (next, _) =
            decoder_block_forward(&x, memory, block, heads, 0.0, Mode::Eval, &mut rng)?;
        x = next;
    }
    let probs = softmax_rows(&x.dot(&state.head.w_p));
    Ok(probs.row(probs.nrows() - 1).to_vec())
}

/// Beam search with length-normalized final scoring. `beam_size = 1`
/// reduces to greedy argmax (ties to the lowest token id).
pub fn beam_search(
    state: &mut ModelState,
    features: &VideoFeatures,
    beam_size: usize,
    t_max: usize,
) -> Result<Generated> {
    assert!(beam_size >= 1);
    let (memory, _) = encode_video(
        features,
        &mut state.hel_image,
        &mut state.hel_motion,
        Mode::Eval,
    )?;
    let d_e = state.dims.d_e;
    let max_gen = t_max.min(state.dims.t_max) - 1;

    let mut beams = vec![Hyp {
        ids: vec![BOS_ID],
        logp: 0.0,
        finished: false,
    }];

    for _ in 0..max_gen {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hyp> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let probs = next_token_probs(state, &memory, &hyp.ids)?;
            for (id, &p) in probs.iter().enumerate().take(d_e) {
                let mut ids = hyp.ids.clone();
                ids.push(id);
                let logp = hyp.logp + p.max(f64::MIN_POSITIVE).ln();
                let finished = id == EOS_ID || ids.len() >= t_max.min(state.dims.t_max);
                candidates.push(Hyp {
                    ids,
                    logp,
                    finished,
                });
            }
        }
        candidates.sort_by(|a, b| hyp_better((a.logp, &a.ids), (b.logp, &b.ids)));
        candidates.truncate(beam_size);
        beams = candidates;
    }

    let best = beams
        .iter()
        .min_by(|a, b| {
            let na = a.logp / (a.ids.len() - 1) as f64;
            let nb = b.logp / (b.ids.len() - 1) as f64;
            hyp_better((na, &a.ids), (nb, &b.ids))
        })
        .expect("beam never empty")
        .clone();

    // retain the per-step distributions of the winning hypothesis
    let mut step_distributions = Vec::with_capacity(best.ids.len() - 1);
    for end in 1..best.ids.len() {
        step_distributions.push(next_token_probs(state, &memory, &best.ids[..end])?);
    }

    Ok(Generated {
        ids: best.ids[1..].to_vec(),
        score: best.logp / (best.ids.len() - 1) as f64,
        step_distributions,
    })
}

/// Length-normalized log probability of a fixed generated sequence
/// (ids exclude BOS). Used by exhaustive-search oracles.
pub fn sequence_score(
    state: &mut ModelState,
    features: &VideoFeatures,
    gen_ids: &[usize],
) -> Result<f64> {
    let (memory, _) = encode_video(
        features,
        &mut state.hel_image,
        &mut state.hel_motion,
        Mode::Eval,
    )?;
    let mut prefix = vec![BOS_ID];
    let mut logp = 0.0;
    for &id in gen_ids {
        let probs = next_token_probs(state, &memory, &prefix)?;
        logp += probs[id].max(f64::MIN_POSITIVE).ln();
        prefix.push(id);
    }
    Ok(logp / gen_ids.len() as f64)
}

// --- checkpointing ---

const CKPT_MAGIC: &[u8; 4] = b"RSFD";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    dims: ModelDims,
    epoch: usize,
    config: TrainConfig,
    config_hash: String,
    vocab: Vocabulary,
    labels: Option<FrequencyLabels>,
    adam_step: u64,
    param_names: Vec<String>,
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    format!("{:016x}", fnv1a64(serde_json::to_string(cfg).unwrap().as_bytes()))
}

pub struct Checkpoint {
    pub state: ModelState,
    pub adam: Adam,
    pub epoch: usize,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub labels: Option<FrequencyLabels>,
}

fn write_blob<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    for &x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<f64>> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| RsfdError::CorruptCheckpoint("truncated blob header".into()))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut out = vec![0.0; len];
    for x in &mut out {
        r.read_exact(&mut b8)
            .map_err(|_| RsfdError::CorruptCheckpoint("truncated blob data".into()))?;
        *x = f64::from_le_bytes(b8);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    state: &ModelState,
    adam: &Adam,
    epoch: usize,
    cfg: &TrainConfig,
    vocab: &Vocabulary,
    labels: Option<&FrequencyLabels>,
) -> Result<()> {
    let meta = CheckpointMeta {
        version: CKPT_VERSION,
        dims: state.dims,
        epoch,
        config: cfg.clone(),
        config_hash: config_hash(cfg),
        vocab: vocab.clone(),
        labels: labels.cloned(),
        adam_step: adam.step,
        param_names: state.param_list().into_iter().map(|(n, _, _)| n).collect(),
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    w.write_all(&meta_json)?;
    write_blob(&mut w, &state.flatten())?;
    write_blob(&mut w, &adam.m)?;
    write_blob(&mut w, &adam.v)?;
    write_blob(&mut w, &state.bn_state())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| RsfdError::CorruptCheckpoint("missing magic".into()))?;
    if &magic != CKPT_MAGIC {
        return Err(RsfdError::CorruptCheckpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)
        .map_err(|_| RsfdError::CorruptCheckpoint("missing version".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != CKPT_VERSION {
        return Err(RsfdError::CheckpointVersion {
            found: version.to_string(),
            expected: CKPT_VERSION.to_string(),
        });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)
        .map_err(|_| RsfdError::CorruptCheckpoint("missing meta length".into()))?;
    let meta_len = u64::from_le_bytes(b8) as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)
        .map_err(|_| RsfdError::CorruptCheckpoint("truncated metadata".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| RsfdError::CorruptCheckpoint(format!("bad metadata: {e}")))?;

    let params = read_blob(&mut r)?;
    let adam_m = read_blob(&mut r)?;
    let adam_v = read_blob(&mut r)?;
    let bn = read_blob(&mut r)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = ModelState::init(meta.dims, &mut rng);
    if params.len() != state.num_params() {
        return Err(RsfdError::CorruptCheckpoint(format!(
            "parameter blob has {} values, model needs {}",
            params.len(),
            state.num_params()
        )));
    }
    state.unflatten(&params);
    state.set_bn_state(&bn);
    let mut adam = Adam::new(params.len());
    adam.m = adam_m;
    adam.v = adam_v;
    adam.step = meta.adam_step;
    Ok(Checkpoint {
        state,
        adam,
        epoch: meta.epoch,
        config: meta.config,
        vocab: meta.vocab,
        labels: meta.labels,
    })
}
