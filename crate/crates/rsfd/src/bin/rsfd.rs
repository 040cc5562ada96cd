use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rsfd::corpus::{
    build_vocabulary, classify_tokens, compute_frequency_stats, ingest_dataset, CaptionRecord,
};
use rsfd::encoder::VideoFeatures;
use rsfd::error::RsfdError;
use rsfd::experiment::{
    ids_to_tokens, prepare_corpus, run_ablation, run_sweep, train_and_eval, SweepParam,
};
use rsfd::fad::{build_plan, pair_reports};
use rsfd::features::read_features;
use rsfd::metrics::{evaluate, lft_token_set};
use rsfd::synth::{gen_synthetic, write_corpus, SynthSpec};
use rsfd::training::{beam_search, load_checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "rsfd", version, about = "Frequency-aware video captioner", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML or JSON config file; CLI flags override file values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Divergent-supervisor window size (odd)
    #[arg(long)]
    window: Option<usize>,
    /// Disable frequency-aware diffusion
    #[arg(long)]
    no_fad: bool,
    /// Disable the divergent semantic supervisor
    #[arg(long)]
    no_dss: bool,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Use the small desk-scale defaults instead of the paper-scale ones
    #[arg(long)]
    desk: bool,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, RsfdError> {
        let mut cfg = if self.desk {
            TrainConfig::desk()
        } else {
            TrainConfig::default()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            cfg = match path.extension().and_then(|e| e.to_str()) {
                Some("json") => serde_json::from_str(&text)
                    .map_err(|e| RsfdError::InvalidConfig(format!("{}: {e}", path.display())))?,
                _ => toml::from_str(&text)
                    .map_err(|e| RsfdError::InvalidConfig(format!("{}: {e}", path.display())))?,
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.delta {
            cfg.delta = v;
        }
        if let Some(v) = self.lambda {
            cfg.dss.lambda = v;
        }
        if let Some(v) = self.window {
            cfg.dss.window_size = v;
        }
        if self.no_fad {
            cfg.fad.enabled = false;
        }
        if self.no_dss {
            cfg.dss.enabled = false;
        }
        if let Some(v) = self.beam {
            cfg.beam_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.d_h {
            cfg.d_h = v;
        }
        if let Some(v) = self.heads {
            cfg.heads = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Frequency analysis: classify tokens and write the report
    AnalyzeCorpus {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.015)]
        gamma: f64,
        #[arg(long, default_value_t = 0.0015)]
        delta: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate a deterministic long-tailed corpus with feature files
    GenSynthetic {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        videos: usize,
        #[arg(long, default_value_t = 60)]
        vocab_size: usize,
        #[arg(long, default_value_t = 10)]
        captions_per_video: usize,
        #[arg(long, default_value_t = 12)]
        tokens_per_caption: usize,
        #[arg(long, default_value_t = 1.1)]
        zipf_exponent: f64,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        d_v: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a JSON-lines log
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Fraction of videos held out for evaluation
        #[arg(long, default_value_t = 0.1)]
        test_fraction: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Caption every video in a dataset with a trained checkpoint
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate captions and score them against the dataset references
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Report the current LFT->HFT diffusion pairs of a checkpoint
    InspectFad {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train the four ablation arms over several seeds and tabulate medians
    Ablation {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Cap captions per training video (0 = all)
        #[arg(long, default_value_t = 0)]
        captions_per_video: usize,
        #[arg(long, default_value_t = 0.2)]
        test_fraction: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train one run per grid point of a single hyper-parameter
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        /// gamma | delta | lambda | window
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_dataset(path: &Path) -> Result<(Vec<CaptionRecord>, Vec<VideoFeatures>), RsfdError> {
    let records = ingest_dataset(path)?;
    if records.is_empty() {
        return Err(RsfdError::EmptyCorpus);
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut features = Vec::with_capacity(records.len());
    for rec in &records {
        let file = rec.feature_file.as_ref().ok_or_else(|| {
            RsfdError::InvalidConfig(format!("video {} has no feature_file", rec.video_id))
        })?;
        features.push(read_features(&base.join(file))?);
    }
    Ok((records, features))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), RsfdError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), RsfdError> {
    match cli.command {
        Command::AnalyzeCorpus {
            dataset,
            gamma,
            delta,
            out,
        } => {
            let records = ingest_dataset(&dataset)?;
            if records.is_empty() {
                return Err(RsfdError::EmptyCorpus);
            }
            let vocab = build_vocabulary(&records, 1)?;
            let stats = compute_frequency_stats(&records, &vocab);
            let labels = classify_tokens(&stats, gamma, delta);
            let report = serde_json::json!({
                "gamma": gamma,
                "delta": delta,
                "labels": labels.label_map(&vocab),
                "stats": {
                    "vocab_size": vocab.size(),
                    "captions": stats.caption_count,
                    "videos": stats.video_ids.len(),
                    "token_count": stats.token_count,
                },
            });
            write_json(&out.join("frequency_report.json"), &report)?;
            // head/tail summary on stdout
            let mut by_count: Vec<(usize, usize)> = stats
                .token_count
                .iter()
                .enumerate()
                .skip(rsfd::corpus::NUM_RESERVED)
                .map(|(id, &c)| (id, c))
                .collect();
            by_count.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            println!("{:<16} {:>8}  label", "token", "count");
            for &(id, c) in by_count.iter().take(5).chain(by_count.iter().rev().take(5)) {
                let label = labels.labels[id]
                    .map(|l| l.to_string())
                    .unwrap_or_else(|| "-".into());
                println!("{:<16} {:>8}  {label}", vocab.token(id)?, c);
            }
            Ok(())
        }
        Command::GenSynthetic {
            seed,
            videos,
            vocab_size,
            captions_per_video,
            tokens_per_caption,
            zipf_exponent,
            frames,
            d_v,
            out,
        } => {
            let spec = SynthSpec {
                vocab_size,
                zipf_exponent,
                videos,
                captions_per_video,
                tokens_per_caption,
                frames,
                d_v,
                seed,
                ..SynthSpec::default()
            };
            let corpus = gen_synthetic(&spec)?;
            write_corpus(&corpus, &out)?;
            write_json(&out.join("spec.json"), &spec)?;
            println!(
                "wrote {} videos, {} captions to {}",
                corpus.records.len(),
                corpus.records.iter().map(|r| r.captions.len()).sum::<usize>(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            dataset,
            config,
            test_fraction,
            out,
        } => {
            let cfg = config.build()?;
            let (records, features) = load_dataset(&dataset)?;
            let prepared = prepare_corpus(&records, features, &cfg, test_fraction, 0)?;
            let run = train_and_eval(&prepared, &cfg)?;
            fs::create_dir_all(&out)?;
            let mut log = File::create(out.join("train_log.jsonl"))?;
            for epoch in &run.epochs {
                writeln!(log, "{}", serde_json::to_string(epoch)?)?;
            }
            rsfd::training::save_checkpoint(
                &out.join("model.ckpt"),
                &run.state,
                &run.adam,
                cfg.epochs,
                &cfg,
                &prepared.vocab,
                Some(&prepared.labels),
            )?;
            write_json(&out.join("eval_report.json"), &run.report)?;
            print!("{}", run.report.table());
            Ok(())
        }
        Command::Generate {
            checkpoint,
            dataset,
            beam,
            out,
        } => {
            let mut ckpt = load_checkpoint(&checkpoint)?;
            let (records, features) = load_dataset(&dataset)?;
            let beam = beam.unwrap_or(ckpt.config.beam_size);
            fs::create_dir_all(&out)?;
            let mut f = File::create(out.join("captions.jsonl"))?;
            for (rec, feat) in records.iter().zip(&features) {
                let gen = beam_search(&mut ckpt.state, feat, beam, ckpt.config.t_max)?;
                let tokens = ids_to_tokens(&gen.ids, &ckpt.vocab);
                writeln!(
                    f,
                    "{}",
                    serde_json::json!({
                        "video_id": rec.video_id,
                        "caption": tokens.join(" "),
                        "score": gen.score,
                    })
                )?;
            }
            println!("wrote {} captions", records.len());
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            beam,
            out,
        } => {
            let mut ckpt = load_checkpoint(&checkpoint)?;
            let (records, features) = load_dataset(&dataset)?;
            let beam = beam.unwrap_or(ckpt.config.beam_size);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            let mut ids = Vec::new();
            for (rec, feat) in records.iter().zip(&features) {
                let gen = beam_search(&mut ckpt.state, feat, beam, ckpt.config.t_max)?;
                hyps.push(ids_to_tokens(&gen.ids, &ckpt.vocab));
                refs.push(rec.captions.clone());
                ids.push(rec.video_id.clone());
            }
            let lft = ckpt
                .labels
                .as_ref()
                .map(|l| lft_token_set(l, &ckpt.vocab))
                .unwrap_or_default();
            let report = evaluate(&hyps, &refs, &ids, &lft)?;
            write_json(&out.join("eval_report.json"), &report)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::InspectFad { checkpoint, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let labels = ckpt.labels.as_ref().ok_or_else(|| {
                RsfdError::InvalidConfig("checkpoint has no frequency labels".into())
            })?;
            let plan = build_plan(&ckpt.state.embedding, labels, &ckpt.vocab)?;
            let pairs = pair_reports(&plan, &ckpt.state.embedding, &ckpt.vocab);
            let report = serde_json::json!({ "epoch": ckpt.epoch, "pairs": pairs });
            write_json(&out.join("fad_report.json"), &report)?;
            println!(
                "epoch {}: {} diffusion pairs -> {}",
                ckpt.epoch,
                pairs.len(),
                out.join("fad_report.json").display()
            );
            Ok(())
        }
        Command::Ablation {
            dataset,
            config,
            seeds,
            captions_per_video,
            test_fraction,
            out,
        } => {
            let cfg = config.build()?;
            let (records, features) = load_dataset(&dataset)?;
            let prepared =
                prepare_corpus(&records, features, &cfg, test_fraction, captions_per_video)?;
            let report = run_ablation(&prepared, &cfg, &seeds)?;
            write_json(&out.join("ablation_report.json"), &report)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Sweep {
            dataset,
            param,
            grid,
            config,
            out,
        } => {
            let cfg = config.build()?;
            let param = SweepParam::parse(&param)?;
            let (records, features) = load_dataset(&dataset)?;
            let report = run_sweep(&records, &features, &cfg, param, &grid)?;
            write_json(&out.join("sweep_report.json"), &report)?;
            print!("{}", report.table());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
