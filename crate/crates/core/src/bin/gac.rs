//! Command-line entry point: data generation, training, coding, evaluation,
//! and the scaling experiment. Exit codes: 0 success, 2 config error,
//! 3 data/format error, 4 training divergence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;

use gac_core::codec::{decode_clip, encode_clip};
use gac_core::config::RunConfig;
use gac_core::evalkit::{holdout_split, judge_accuracy, train_judge, JudgeTrainConfig};
use gac_core::ic1::{
    records_to_csv, run_scaling_experiment, scaling_report, tradeoff_table, BitratePoint,
    CapacityRecord, ScalingGrid,
};
use gac_core::signal::{extract_features, make_corpus, read_corpus, write_corpus, FeatureConfig};
use gac_core::stage1::{
    encode_frames, final_perplexity, train_stage1, vq_quantize, Stage1Config, Stage1Model,
};
use gac_core::stage2::{train_stage2, Tier, VelocityModel};
use gac_core::{Error, Result};

const CONFIG_DEFAULTS: &str = "\
Run configuration defaults (JSON sections; flags override fields):
  seed 0
  corpus:  num_clips 2000, stratified false
  stage1:  latent_dim 16, codebook_size 64, downsample 1, beta 0.25,
           gamma 0.25, tau 1.0, enc_hidden [64], head_hidden [32],
           ema_decay 0.99, revive_frac 0.1, steps 20000, batch_size 8,
           lr 0.001, feat_dim 32, num_frames 31
  stage2:  tier medium, cond_window 3, ode_steps 32, steps 20000,
           batch_clips 4, lr 0.001, seed 0, feat_dim 32, latent_dim 16
  codec:   ode_steps 32, cond_window 3
  eval:    holdout_seed 17, judge_steps 4000, judge_batch 32,
           judge_lr 0.001, mmd_frame_cap 400
  scaling: tiers [small, medium, large], bitrate_points [[128,2], [128,1]],
           seeds [1,2,3], steps 20000, batch_clips 4, lr 0.0003,
           ode_steps 32, plateau_window 2000, plateau_threshold 0.01,
           mmd_frame_cap 400, mmd_train_clips 100";

#[derive(Parser)]
#[command(name = "gac", version, about = "Generative audio codec toolkit", long_about = None)]
#[command(after_help = CONFIG_DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled clip corpus and write it to a corpus file.
    GenData {
        /// Run configuration JSON; missing sections use defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output corpus path.
        #[arg(long)]
        corpus_out: PathBuf,
        /// Override config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override corpus.num_clips (default 2000).
        #[arg(long)]
        num_clips: Option<usize>,
        /// Force exact class balance (requires num_clips % 24 == 0).
        #[arg(long)]
        stratified: bool,
    },
    /// Train the frame tokenizer (encoder + vector quantizer + class head).
    TrainStage1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Output checkpoint path (a JSON config sidecar is written next to it).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override stage1.codebook_size (default 64).
        #[arg(long)]
        codebook_size: Option<usize>,
        /// Override stage1.downsample (default 1; one of 1,2,4).
        #[arg(long)]
        downsample: Option<usize>,
        /// Override stage1.steps (default 20000).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the conditional flow-matching decoder against a frozen stage-1.
    TrainStage2 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        /// Decoder size tier: small | medium | large (default medium).
        #[arg(long)]
        tier: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override stage2.steps (default 20000).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Encode one corpus clip to a packed bitstream file.
    Encode {
        #[arg(long)]
        stage1: PathBuf,
        /// Clip index within the corpus file.
        #[arg(long, value_name = "clip_index")]
        r#in: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream file to a feature-sequence CSV.
    Decode {
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        r#in: PathBuf,
        /// Euler integration steps (default 32).
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// Sampling seed (default 7).
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        features_out: PathBuf,
    },
    /// Decode the held-out split and report LSD/MMD/judge-accuracy/perplexity.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        stage2: PathBuf,
        #[arg(long)]
        csv_out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the tier-by-bitrate scaling grid and emit records.csv + report.md.
    Scaling {
        /// Scaling job JSON (corpus path, grid, stage-1 settings).
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Parallel worker threads for grid cells (default 1).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fit the capacity law to a records.csv and print the eta table.
    Ic1Fit {
        #[arg(long)]
        records: PathBuf,
    },
}

/// Top-level document for the `scaling` subcommand.
#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ScalingJob {
    /// Corpus file to train and evaluate on.
    corpus: PathBuf,
    grid: ScalingGrid,
    /// Pre-trained stage-1 checkpoints keyed "K,s" (e.g. "128,2"). Points
    /// without an entry are trained here and saved under the output dir.
    stage1: BTreeMap<String, PathBuf>,
    /// Settings for stage-1 models trained on the fly.
    stage1_config: Stage1Config,
    seed: u64,
}

impl Default for ScalingJob {
    fn default() -> Self {
        ScalingJob {
            corpus: PathBuf::from("corpus.bin"),
            grid: ScalingGrid::default(),
            stage1: BTreeMap::new(),
            stage1_config: Stage1Config::default(),
            seed: 0,
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            config,
            corpus_out,
            seed,
            num_clips,
            stratified,
        } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seed);
            let n = num_clips.unwrap_or(cfg.corpus.num_clips);
            let stratified = stratified || cfg.corpus.stratified;
            let corpus = make_corpus(n, seed, stratified);
            write_corpus(&corpus_out, &corpus, seed)?;
            eprintln!("wrote {} clips to {}", corpus.len(), corpus_out.display());
        }
        Command::TrainStage1 {
            config,
            corpus,
            out,
            seed,
            codebook_size,
            downsample,
            steps,
        } => {
            let cfg = load_config(&config)?;
            let mut s1_cfg = cfg.stage1.clone();
            if let Some(k) = codebook_size {
                s1_cfg.codebook_size = k;
            }
            if let Some(s) = downsample {
                s1_cfg.downsample = s;
            }
            if let Some(n) = steps {
                s1_cfg.steps = n;
            }
            s1_cfg.validate()?;
            let seed = seed.unwrap_or(cfg.seed);
            let (items, _) = read_corpus(&corpus)?;
            let (model, log) = train_stage1(&items, &s1_cfg, seed)?;
            eprintln!(
                "stage1 done: final loss {:.4}, perplexity {:.1}/{}",
                log.loss.last().copied().unwrap_or(f64::NAN),
                final_perplexity(&log, 200),
                s1_cfg.codebook_size
            );
            model.save(&out)?;
            eprintln!("saved {}", out.display());
        }
        Command::TrainStage2 {
            config,
            corpus,
            stage1,
            tier,
            out,
            seed,
            steps,
        } => {
            let cfg = load_config(&config)?;
            let mut s2_cfg = cfg.stage2.clone();
            if let Some(t) = tier {
                s2_cfg.tier = Tier::parse(&t)?;
            }
            if let Some(n) = steps {
                s2_cfg.steps = n;
            }
            if let Some(s) = seed {
                s2_cfg.seed = s;
            }
            let (items, _) = read_corpus(&corpus)?;
            let s1 = Stage1Model::load(&stage1)?;
            s2_cfg.latent_dim = s1.cfg.latent_dim;
            s2_cfg.feat_dim = s1.cfg.feat_dim;
            let (model, log) = train_stage2(&items, &s1, &s2_cfg)?;
            eprintln!(
                "stage2 done: final loss {:.4} nats/frame ({:.2} bits/frame)",
                log.final_loss_nats, log.final_bits_per_frame
            );
            model.save(&out, &s2_cfg)?;
            eprintln!("saved {}", out.display());
        }
        Command::Encode {
            stage1,
            r#in,
            corpus,
            out,
        } => {
            let s1 = Stage1Model::load(&stage1)?;
            let (items, _) = read_corpus(&corpus)?;
            let item = items.get(r#in).ok_or_else(|| {
                Error::Config(format!(
                    "clip index {} out of range (corpus has {} clips)",
                    r#in,
                    items.len()
                ))
            })?;
            let bytes = encode_clip(&s1, &item.waveform)?;
            std::fs::write(&out, &bytes)?;
            eprintln!("wrote {} bytes to {}", bytes.len(), out.display());
        }
        Command::Decode {
            stage1,
            stage2,
            r#in,
            steps,
            seed,
            features_out,
        } => {
            let s1 = Stage1Model::load(&stage1)?;
            let (vel, s2_cfg) = VelocityModel::load(&stage2)?;
            let bytes = std::fs::read(&r#in)?;
            let features = decode_clip(&s1, &vel, &bytes, steps, seed, s2_cfg.cond_window)?;
            let mut buf = Vec::new();
            gac_core::signal::features_to_csv(&features, &mut buf)?;
            std::fs::write(&features_out, &buf)?;
            eprintln!(
                "decoded {} frames to {}",
                features.rows,
                features_out.display()
            );
        }
        Command::Eval {
            config,
            corpus,
            stage1,
            stage2,
            csv_out,
            seed,
        } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.eval.holdout_seed);
            let (items, _) = read_corpus(&corpus)?;
            let s1 = Stage1Model::load(&stage1)?;
            let (vel, s2_cfg) = VelocityModel::load(&stage2)?;
            let judge = train_judge(
                &items,
                seed,
                &JudgeTrainConfig {
                    steps: cfg.eval.judge_steps,
                    batch_size: cfg.eval.judge_batch,
                    lr: cfg.eval.judge_lr,
                    ..Default::default()
                },
            )?;
            let (_, held) = holdout_split(items.len(), seed);
            let feat_cfg = FeatureConfig::default();
            let mut lsd_total = 0.0;
            let mut judged = Vec::new();
            let mut real_frames = Vec::new();
            let mut dec_frames = Vec::new();
            let mut hist = vec![0.0; s1.codebook.k()];
            for (ci, &i) in held.iter().enumerate() {
                let features = extract_features(&items[i].waveform, &feat_cfg)?;
                let latents = encode_frames(&s1, &features)?;
                let (tokens, _, _) = vq_quantize(
                    &s1.codebook,
                    &latents,
                    s1.cfg.tau,
                    s1.cfg.downsample as u8,
                );
                for &t in &tokens.tokens {
                    hist[t as usize] += 1.0;
                }
                let conds =
                    gac_core::stage2::cond_vectors(&s1, &tokens, features.rows, s2_cfg.cond_window);
                let decoded = gac_core::stage2::euler_sample(
                    &vel,
                    &conds,
                    s2_cfg.ode_steps,
                    seed ^ (ci as u64).wrapping_mul(0x9E37_79B9),
                )?;
                lsd_total += gac_core::evalkit::lsd(&features, &decoded)?;
                for r in 0..features.rows {
                    real_frames.push(features.row(r).to_vec());
                    dec_frames.push(decoded.row(r).to_vec());
                }
                judged.push((decoded, items[i].label));
            }
            let stride = real_frames.len().div_ceil(cfg.eval.mmd_frame_cap).max(1);
            let real_sub: Vec<Vec<f64>> = real_frames.iter().step_by(stride).cloned().collect();
            let dec_sub: Vec<Vec<f64>> = dec_frames.iter().step_by(stride).cloned().collect();
            let mmd = gac_core::evalkit::mmd_frames(&real_sub, &dec_sub, None)?;
            let acc = judge_accuracy(&judge, &judged)?;
            let perplexity = gac_core::evalkit::codebook_perplexity(&hist)?;
            let lsd = lsd_total / held.len() as f64;
            let csv = format!(
                "lsd,mmd,judge_acc,perplexity\n{lsd:.6},{mmd:.6e},{acc:.6},{perplexity:.6}\n"
            );
            std::fs::write(&csv_out, csv)?;
            eprintln!(
                "eval: lsd={lsd:.3} dB, mmd={mmd:.4e}, judge_acc={acc:.3}, perplexity={perplexity:.1}"
            );
        }
        Command::Scaling { grid, out_dir, jobs } => {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build_global()
                .map_err(|e| Error::Config(format!("--jobs: {e}")))?;
            let text = std::fs::read_to_string(&grid)?;
            let job: ScalingJob = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", grid.display())))?;
            std::fs::create_dir_all(&out_dir)?;
            let (items, _) = read_corpus(&job.corpus)?;

            let mut models: BTreeMap<BitratePoint, Stage1Model> = BTreeMap::new();
            for &(k, s) in &job.grid.bitrate_points {
                let key = format!("{k},{s}");
                let model = if let Some(path) = job.stage1.get(&key) {
                    Stage1Model::load(path)?
                } else {
                    let mut s1_cfg = job.stage1_config.clone();
                    s1_cfg.codebook_size = k;
                    s1_cfg.downsample = s;
                    s1_cfg.validate()?;
                    eprintln!("training stage1 for (K={k}, s={s})...");
                    let (model, _) = train_stage1(&items, &s1_cfg, job.seed)?;
                    let path = out_dir.join(format!("s1_k{k}_s{s}.gacp"));
                    model.save(&path)?;
                    model
                };
                models.insert((k, s), model);
            }
            let judge = train_judge(&items, job.seed, &JudgeTrainConfig::default())?;
            eprintln!(
                "running {} cells...",
                job.grid.tiers.len() * job.grid.bitrate_points.len() * job.grid.seeds.len()
            );
            let cells = run_scaling_experiment(&items, &models, &job.grid, &judge, job.seed)?;
            std::fs::write(out_dir.join("records.csv"), records_to_csv(&cells))?;
            std::fs::write(out_dir.join("report.md"), scaling_report(&cells, &job.grid))?;
            eprintln!("wrote {}/records.csv and report.md", out_dir.display());
        }
        Command::Ic1Fit { records } => {
            let recs = read_records_csv(&records)?;
            let table = tradeoff_table(&recs)?;
            println!("R_bits\tN_params\tL_bits\teta\tresidual");
            for row in &table.rows {
                println!(
                    "{:.1}\t{}\t{:.3}\t{:.4e}\t{:.4e}",
                    row.r_bits, row.n_params, row.l_bits, row.eta, row.residual
                );
            }
            println!("pooled median eta: {:.4e}", table.pooled_eta);
        }
    }
    Ok(())
}

fn read_records_csv(path: &Path) -> Result<Vec<CapacityRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("records csv: missing column {name:?}")))
    };
    let (ck, cn, cd, ch, cl) = (
        col("K")?,
        col("N_params")?,
        col("D_tokens")?,
        col("H_bits")?,
        col("L_bits")?,
    );
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| -> Result<&str> {
            row.get(i)
                .ok_or_else(|| Error::Format("records csv: short row".into()))
        };
        let k: f64 = parse_num(field(ck)?)?;
        out.push(CapacityRecord {
            n_params: parse_num(field(cn)?)? as u64,
            d_tokens: parse_num(field(cd)?)? as u64,
            h_bits: parse_num(field(ch)?)?,
            l_bits: parse_num(field(cl)?)?,
            r_bits: (k.max(2.0)).log2().ceil(),
        });
    }
    Ok(out)
}

fn parse_num(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("records csv: bad number {s:?}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
