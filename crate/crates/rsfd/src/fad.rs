//! Frequency-Aware Diffusion: map each low-frequency token to its most
//! similar high-frequency token by cosine similarity, softmax-normalize
//! per-group noise weights, and build the diffused embedding overrides
//! used on decoder inputs during training.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::Serialize;

use crate::corpus::{FreqLabel, FrequencyLabels, Vocabulary};
use crate::decoder::{softmax_rows, EmbeddingTable};
use crate::error::{Result, RsfdError};

/// LFT→HFT assignment plus per-LFT noise weights.
#[derive(Debug, Clone)]
pub struct DiffusionPlan {
    pub lft_ids: Vec<usize>,
    pub hft_ids: Vec<usize>,
    /// Row-stochastic similarity softmax, m x n.
    pub similarity: Array2<f64>,
    /// Per LFT index: index into `hft_ids` of the diffusion target.
    pub loh: Vec<usize>,
    /// Per LFT index: noise weight within its group.
    pub alpha: Vec<f64>,
    /// hft index -> LFT indices assigned to it.
    pub groups: BTreeMap<usize, Vec<usize>>,
}

/// Diffused rows, keyed by HFT token id. Transient per recomputation; the
/// trainable table is never mutated.
#[derive(Debug, Clone)]
pub struct DiffusedEmbeddings {
    pub rows: BTreeMap<usize, Array1<f64>>,
    pub epoch_tag: usize,
    /// hft id -> [(lft id, alpha)]; the linear combination behind each row,
    /// kept so gradients can be routed back to the contributing tokens.
    pub composition: BTreeMap<usize, Vec<(usize, f64)>>,
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let dot = a.dot(&b);
    dot / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
}

/// Row softmax over cosine similarities: `S_ij = exp(s_ij) / Σ_j exp(s_ij)`.
pub fn build_similarity(lft_embs: &Array2<f64>, hft_embs: &Array2<f64>) -> Array2<f64> {
    let m = lft_embs.nrows();
    let n = hft_embs.nrows();
    let mut scores = Array2::zeros((m, n));
    for i in 0..m {
        for j in 0..n {
            scores[[i, j]] = cosine(lft_embs.row(i), hft_embs.row(j));
        }
    }
    softmax_rows(&scores)
}

/// Row-wise argmax, ties to the lowest index.
pub fn assign_targets(similarity: &Array2<f64>) -> Vec<usize> {
    similarity
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Softmax of cosine similarity within each group sharing one HFT target.
pub fn noise_weights(
    lft_embs: &Array2<f64>,
    hft_embs: &Array2<f64>,
    loh: &[usize],
) -> (Vec<f64>, BTreeMap<usize, Vec<usize>>) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &j) in loh.iter().enumerate() {
        groups.entry(j).or_default().push(i);
    }
    let mut alpha = vec![0.0; loh.len()];
    for (&j, members) in &groups {
        let sims: Vec<f64> = members
            .iter()
            .map(|&i| cosine(lft_embs.row(i), hft_embs.row(j)))
            .collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (&i, e) in members.iter().zip(exps.iter()) {
            alpha[i] = e / z;
        }
    }
    (alpha, groups)
}

fn gather_rows(table: &Array2<f64>, ids: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((ids.len(), table.ncols()));
    for (row, &id) in ids.iter().enumerate() {
        out.row_mut(row).assign(&table.row(id));
    }
    out
}

/// Build the full diffusion plan from the current embedding table.
pub fn build_plan(
    table: &EmbeddingTable,
    labels: &FrequencyLabels,
    vocab: &Vocabulary,
) -> Result<DiffusionPlan> {
    let lft_ids = labels.ids_with(FreqLabel::Lft);
    let hft_ids = labels.ids_with(FreqLabel::Hft);
    if hft_ids.is_empty() {
        return Err(RsfdError::NoHighFrequencyTokens);
    }
    for &id in lft_ids.iter().chain(hft_ids.iter()) {
        let row = table.table.row(id);
        if row.dot(&row) == 0.0 {
            return Err(RsfdError::ZeroNormEmbedding(
                vocab.id_to_token.get(id).cloned().unwrap_or_else(|| id.to_string()),
            ));
        }
    }
    let lft_embs = gather_rows(&table.table, &lft_ids);
    let hft_embs = gather_rows(&table.table, &hft_ids);
    if lft_ids.is_empty() {
        return Ok(DiffusionPlan {
            lft_ids,
            hft_ids,
            similarity: Array2::zeros((0, 0)),
            loh: Vec::new(),
            alpha: Vec::new(),
            groups: BTreeMap::new(),
        });
    }
    let similarity = build_similarity(&lft_embs, &hft_embs);
    let loh = assign_targets(&similarity);
    let (alpha, groups) = noise_weights(&lft_embs, &hft_embs, &loh);
    Ok(DiffusionPlan {
        lft_ids,
        hft_ids,
        similarity,
        loh,
        alpha,
        groups,
    })
}

/// Diffused HFT rows: `emb_H + Σ_{i ∈ N(H)} α_i · emb_Li`. Only HFTs with a
/// non-empty group get a row; the table itself is untouched.
pub fn apply_diffusion(
    table: &EmbeddingTable,
    labels: &FrequencyLabels,
    vocab: &Vocabulary,
    epoch_tag: usize,
) -> Result<DiffusedEmbeddings> {
    let plan = build_plan(table, labels, vocab)?;
    Ok(diffuse_from_plan(table, &plan, epoch_tag))
}

pub fn diffuse_from_plan(
    table: &EmbeddingTable,
    plan: &DiffusionPlan,
    epoch_tag: usize,
) -> DiffusedEmbeddings {
    let mut rows = BTreeMap::new();
    let mut composition = BTreeMap::new();
    for (&hft_idx, members) in &plan.groups {
        let hft_id = plan.hft_ids[hft_idx];
        let mut row = table.table.row(hft_id).to_owned();
        let mut combo = Vec::with_capacity(members.len());
        for &i in members {
            let lft_id = plan.lft_ids[i];
            let a = plan.alpha[i];
            row = row + a * &table.table.row(lft_id);
            combo.push((lft_id, a));
        }
        rows.insert(hft_id, row);
        composition.insert(hft_id, combo);
    }
    DiffusedEmbeddings {
        rows,
        epoch_tag,
        composition,
    }
}

/// One LFT→HFT pair for the `inspect-fad` report.
#[derive(Debug, Serialize)]
pub struct PairReport {
    pub lft: String,
    pub hft: String,
    pub alpha: f64,
    pub cosine: f64,
}

pub fn pair_reports(
    plan: &DiffusionPlan,
    table: &EmbeddingTable,
    vocab: &Vocabulary,
) -> Vec<PairReport> {
    plan.loh
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let lft_id = plan.lft_ids[i];
            let hft_id = plan.hft_ids[j];
            PairReport {
                lft: vocab.id_to_token[lft_id].clone(),
                hft: vocab.id_to_token[hft_id].clone(),
                alpha: plan.alpha[i],
                cosine: cosine(table.table.row(lft_id), table.table.row(hft_id)),
            }
        })
        .collect()
}
