//! Desk-scale experiment harness: trains the four ablation arms
//! (baseline / +diffusion / +supervisor / full) over several seeds on a
//! synthetic corpus and reports median metrics, plus single-parameter
//! sweeps.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{
    build_vocabulary, classify_tokens, compute_frequency_stats, encode_caption, CaptionRecord,
    FrequencyLabels, Vocabulary, EOS_ID, NUM_RESERVED,
};
use crate::encoder::VideoFeatures;
use crate::error::{Result, RsfdError};
use crate::metrics::{evaluate, lft_token_set, EvalReport, Tokens};
use crate::model::ModelState;
use crate::training::{
    beam_search, train_epoch, Adam, EpochMetrics, TrainConfig, TrainExample,
};

/// Corpus prepared for training: vocabulary, frequency labels, encoded
/// teacher-forcing examples for the training split, and the held-out split.
pub struct PreparedCorpus {
    pub vocab: Vocabulary,
    pub labels: FrequencyLabels,
    pub features: Vec<VideoFeatures>,
    pub train_examples: Vec<TrainExample>,
    pub test_videos: Vec<usize>,
    pub records: Vec<CaptionRecord>,
}

/// Split off the last `test_fraction` of videos, encode the rest.
/// `captions_per_video` caps how many captions each training video
/// contributes (0 = all).
pub fn prepare_corpus(
    records: &[CaptionRecord],
    features: Vec<VideoFeatures>,
    cfg: &TrainConfig,
    test_fraction: f64,
    captions_per_video: usize,
) -> Result<PreparedCorpus> {
    if records.is_empty() {
        return Err(RsfdError::EmptyCorpus);
    }
    let vocab = build_vocabulary(records, cfg.min_count)?;
    let stats = compute_frequency_stats(records, &vocab);
    let labels = classify_tokens(&stats, cfg.gamma, cfg.delta);

    let n_test = ((records.len() as f64 * test_fraction).round() as usize)
        .min(records.len().saturating_sub(1));
    let n_train = records.len() - n_test;
    let mut train_examples = Vec::new();
    for (v, rec) in records.iter().take(n_train).enumerate() {
        let take = if captions_per_video == 0 {
            rec.captions.len()
        } else {
            captions_per_video.min(rec.captions.len())
        };
        for caption in rec.captions.iter().take(take) {
            let enc = encode_caption(caption, &vocab, cfg.t_max);
            train_examples.push(TrainExample::from_encoded(v, &enc));
        }
    }
    Ok(PreparedCorpus {
        vocab,
        labels,
        features,
        train_examples,
        test_videos: (n_train..records.len()).collect(),
        records: records.to_vec(),
    })
}

pub fn ids_to_tokens(ids: &[usize], vocab: &Vocabulary) -> Tokens {
    ids.iter()
        .take_while(|&&id| id != EOS_ID)
        .filter(|&&id| id >= NUM_RESERVED)
        .map(|&id| vocab.token(id).unwrap().to_string())
        .collect()
}

pub struct RunOutcome {
    pub report: EvalReport,
    pub epochs: Vec<EpochMetrics>,
    pub state: ModelState,
    pub adam: Adam,
}

/// Train one configuration from scratch and evaluate greedy captions on the
/// held-out videos.
pub fn train_and_eval(prepared: &PreparedCorpus, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = ModelState::init(cfg.dims(prepared.vocab.size()), &mut rng);
    let mut adam = Adam::new(state.num_params());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        epochs.push(train_epoch(
            &mut state,
            &prepared.train_examples,
            &prepared.features,
            Some(&prepared.labels),
            &prepared.vocab,
            cfg,
            &mut adam,
            epoch,
        )?);
    }

    let mut hypotheses = Vec::new();
    let mut references = Vec::new();
    let mut video_ids = Vec::new();
    for &v in &prepared.test_videos {
        let gen = beam_search(&mut state, &prepared.features[v], cfg.beam_size, cfg.t_max)?;
        hypotheses.push(ids_to_tokens(&gen.ids, &prepared.vocab));
        references.push(prepared.records[v].captions.clone());
        video_ids.push(prepared.records[v].video_id.clone());
    }
    let lft = lft_token_set(&prepared.labels, &prepared.vocab);
    let report = evaluate(&hypotheses, &references, &video_ids, &lft)?;
    Ok(RunOutcome {
        report,
        epochs,
        state,
        adam,
    })
}

pub const ABLATION_ARMS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("+diffusion", true, false),
    ("+supervisor", false, true),
    ("full", true, true),
];

#[derive(Debug, Clone, Serialize)]
pub struct ArmRow {
    pub name: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub lft_recall: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<ArmRow>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Four-arm ablation, median over seeds per arm.
pub fn run_ablation(
    prepared: &PreparedCorpus,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (name, fad_on, dss_on) in ABLATION_ARMS {
        let mut reports = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.fad.enabled = fad_on;
            cfg.dss.enabled = dss_on;
            reports.push(train_and_eval(prepared, &cfg)?.report);
        }
        rows.push(ArmRow {
            name: name.to_string(),
            bleu4: median(reports.iter().map(|r| r.bleu4).collect()),
            rouge_l: median(reports.iter().map(|r| r.rouge_l).collect()),
            cider: median(reports.iter().map(|r| r.cider).collect()),
            lft_recall: median(reports.iter().map(|r| r.lft_recall).collect()),
            seeds: seeds.len(),
        });
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>10} {:>6}\n",
            "arm", "B-4", "R", "C", "LFT-rec", "seeds"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>10.3} {:>6}\n",
                r.name, r.bleu4, r.rouge_l, r.cider, r.lft_recall, r.seeds
            ));
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Delta,
    Lambda,
    Window,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "delta" => Ok(SweepParam::Delta),
            "lambda" => Ok(SweepParam::Lambda),
            "window" | "window_size" => Ok(SweepParam::Window),
            other => Err(RsfdError::InvalidConfig(format!(
                "unknown sweep parameter '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Debug, Serialize)]
pub struct SweepReport {
    pub param: String,
    pub rows: Vec<SweepRow>,
}

/// One run per grid point with a shared seed. Failures are recorded
/// per point without aborting the sweep. Gamma/delta points re-derive the
/// frequency labels.
pub fn run_sweep(
    records: &[CaptionRecord],
    features: &[VideoFeatures],
    base: &TrainConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(RsfdError::InvalidConfig("empty sweep grid".into()));
    }
    let mut rows = Vec::new();
    for &value in grid {
        let mut cfg = base.clone();
        match param {
            SweepParam::Gamma => cfg.gamma = value,
            SweepParam::Delta => cfg.delta = value,
            SweepParam::Lambda => cfg.dss.lambda = value,
            SweepParam::Window => cfg.dss.window_size = value as usize,
        }
        let outcome = prepare_corpus(records, features.to_vec(), &cfg, 0.2, 0)
            .and_then(|prep| train_and_eval(&prep, &cfg))
            .map(|run| run.report)
            .map_err(|e| e.to_string());
        rows.push(SweepRow { value, outcome });
    }
    Ok(SweepReport {
        param: format!("{param:?}").to_lowercase(),
        rows,
    })
}

impl SweepReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<10} {:>8} {:>8} {:>8} {:>10}\n",
            self.param, "B-4", "R", "C", "LFT-rec"
        );
        for r in &self.rows {
            match &r.outcome {
                Ok(rep) => s.push_str(&format!(
                    "{:<10} {:>8.2} {:>8.2} {:>8.2} {:>10.3}\n",
                    r.value, rep.bleu4, rep.rouge_l, rep.cider, rep.lft_recall
                )),
                Err(e) => s.push_str(&format!("{:<10} failed: {e}\n", r.value)),
            }
        }
        s
    }
}

/// LFT token strings for diagnostics.
pub fn lft_types(prepared: &PreparedCorpus) -> BTreeSet<String> {
    lft_token_set(&prepared.labels, &prepared.vocab)
}
