//! Corpus caption metrics: BLEU-4, ROUGE_L, CIDEr and low-frequency-token
//! recall. All functions are pure; hypotheses and references are aligned
//! per video and pre-tokenized.

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::corpus::{FreqLabel, FrequencyLabels, Vocabulary};
use crate::error::{Result, RsfdError};

pub type Tokens = Vec<String>;

fn validate(hypotheses: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(RsfdError::EmptyHypotheses);
    }
    if hypotheses.len() != references.len() {
        return Err(RsfdError::ShapeMismatch(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(RsfdError::EmptyCaptions {
                video_id: format!("video {i}"),
            });
        }
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-4: geometric mean of clipped 1-4-gram precisions times the
/// brevity penalty (closest reference length, ties to the shorter). Any
/// zero clipped count gives 0.
pub fn bleu4(hypotheses: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    validate(hypotheses, references)?;
    let mut clipped = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=4 {
            let hc = ngram_counts(hyp, n);
            for (gram, &c) in &hc {
                total[n - 1] += c;
                let max_ref = refs
                    .iter()
                    .map(|r| *ngram_counts(r, n).get(gram).unwrap_or(&0))
                    .max()
                    .unwrap_or(0);
                clipped[n - 1] += c.min(max_ref);
            }
        }
    }
    if clipped.iter().any(|&c| c == 0) || hyp_len == 0 {
        return Ok(0.0);
    }
    let log_prec_mean: f64 = (0..4)
        .map(|n| (clipped[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_prec_mean.exp() * 100.0)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_single(hyp: &[String], refs: &[Tokens]) -> f64 {
    refs.iter()
        .map(|r| {
            let lcs = lcs_len(hyp, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let recall = lcs / r.len() as f64;
            let precision = lcs / hyp.len() as f64;
            let b2 = ROUGE_BETA * ROUGE_BETA;
            (1.0 + b2) * recall * precision / (recall + b2 * precision)
        })
        .fold(0.0, f64::max)
}

/// ROUGE_L: LCS F-measure (β = 1.2), max over references, mean over the
/// corpus.
pub fn rouge_l(hypotheses: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    validate(hypotheses, references)?;
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| rouge_l_single(h, r))
        .sum();
    Ok(sum / hypotheses.len() as f64 * 100.0)
}

/// TF-IDF vector over n-grams of one order. TF normalization cancels in
/// cosine similarity, so raw counts are used.
fn tfidf(
    tokens: &[String],
    n: usize,
    idf: &HashMap<Vec<String>, f64>,
) -> HashMap<Vec<String>, f64> {
    ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let w = idf.get(&g).copied().unwrap_or(0.0);
            (g, c as f64 * w)
        })
        .collect()
}

fn cosine(a: &HashMap<Vec<String>, f64>, b: &HashMap<Vec<String>, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(g, &x)| b.get(g).map(|&y| x * y))
        .sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Plain CIDEr: mean over n = 1..4 of the average cosine similarity between
/// hypothesis and reference TF-IDF vectors, ×10. Document frequency counts
/// videos whose reference set contains the n-gram; needs ≥ 2 videos.
pub fn cider(hypotheses: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    validate(hypotheses, references)?;
    let n_videos = references.len();
    if n_videos < 2 {
        return Err(RsfdError::IdfUndefined);
    }
    let log_n = (n_videos as f64).ln();
    let mut per_video_total = 0.0;
    for n in 1..=4 {
        // document frequency over videos (union of that video's references)
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for refs in references {
            let mut seen: BTreeSet<Vec<String>> = BTreeSet::new();
            for r in refs {
                seen.extend(ngram_counts(r, n).into_keys());
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf: HashMap<Vec<String>, f64> = df
            .into_iter()
            .map(|(g, d)| (g, log_n - (d.max(1) as f64).ln()))
            .collect();
        for (hyp, refs) in hypotheses.iter().zip(references) {
            let hv = tfidf(hyp, n, &idf);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&hv, &tfidf(r, n, &idf)))
                .sum::<f64>()
                / refs.len() as f64;
            per_video_total += sim;
        }
    }
    Ok(per_video_total / (4.0 * n_videos as f64) * 10.0)
}

/// Token types labeled LFT, as strings.
pub fn lft_token_set(labels: &FrequencyLabels, vocab: &Vocabulary) -> BTreeSet<String> {
    labels
        .ids_with(FreqLabel::Lft)
        .into_iter()
        .map(|id| vocab.token(id).unwrap().to_string())
        .collect()
}

/// Fraction of LFT token types appearing in a video's references that the
/// hypothesis reproduces, averaged over videos with at least one such type.
pub fn lft_recall(
    hypotheses: &[Tokens],
    references: &[Vec<Tokens>],
    lft_tokens: &BTreeSet<String>,
) -> Result<f64> {
    validate(hypotheses, references)?;
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (hyp, refs) in hypotheses.iter().zip(references) {
        let in_refs: BTreeSet<&String> = refs
            .iter()
            .flatten()
            .filter(|t| lft_tokens.contains(*t))
            .collect();
        if in_refs.is_empty() {
            continue;
        }
        let hyp_set: BTreeSet<&String> = hyp.iter().collect();
        let hit = in_refs.iter().filter(|t| hyp_set.contains(**t)).count();
        sum += hit as f64 / in_refs.len() as f64;
        counted += 1;
    }
    Ok(if counted == 0 {
        0.0
    } else {
        sum / counted as f64
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PerVideoScores {
    pub video_id: String,
    pub rouge_l: f64,
    pub lft_in_refs: usize,
    pub lft_reproduced: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub lft_recall: f64,
    pub per_video: Vec<PerVideoScores>,
}

pub fn evaluate(
    hypotheses: &[Tokens],
    references: &[Vec<Tokens>],
    video_ids: &[String],
    lft_tokens: &BTreeSet<String>,
) -> Result<EvalReport> {
    validate(hypotheses, references)?;
    let per_video = hypotheses
        .iter()
        .zip(references)
        .zip(video_ids)
        .map(|((hyp, refs), id)| {
            let in_refs: BTreeSet<&String> = refs
                .iter()
                .flatten()
                .filter(|t| lft_tokens.contains(*t))
                .collect();
            let hyp_set: BTreeSet<&String> = hyp.iter().collect();
            PerVideoScores {
                video_id: id.clone(),
                rouge_l: rouge_l_single(hyp, refs) * 100.0,
                lft_in_refs: in_refs.len(),
                lft_reproduced: in_refs.iter().filter(|t| hyp_set.contains(**t)).count(),
            }
        })
        .collect();
    Ok(EvalReport {
        bleu4: bleu4(hypotheses, references)?,
        rouge_l: rouge_l(hypotheses, references)?,
        cider: cider(hypotheses, references)?,
        lft_recall: lft_recall(hypotheses, references, lft_tokens)?,
        per_video,
    })
}

impl EvalReport {
    /// Aligned plain-text table: B-4, M (not computed), R, C, plus the LFT
    /// recall diagnostic.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:>8} {:>8} {:>8} {:>8} {:>10}\n",
            "B-4", "M", "R", "C", "LFT-rec"
        ));
        s.push_str(&format!(
            "{:>8.2} {:>8} {:>8.2} {:>8.2} {:>10.3}\n",
            self.bleu4, "-", self.rouge_l, self.cider, self.lft_recall
        ));
        s
    }
}
