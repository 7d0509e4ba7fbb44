//! Scratch harness mirroring one scaling-grid cell. Usage:
//! cell <K> <s> <tier> <seed> [stage2_steps] [n_clips]

use std::collections::BTreeMap;

use gac_core::evalkit::{holdout_split, judge_accuracy, train_judge, JudgeTrainConfig};
use gac_core::ic1::{run_scaling_experiment, ScalingGrid};
use gac_core::signal::{extract_features, make_corpus, FeatureConfig};
use gac_core::stage1::{train_stage1, Stage1Config};
use gac_core::stage2::Tier;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args[1].parse().unwrap();
    let s: usize = args[2].parse().unwrap();
    let tier = Tier::parse(&args[3]).unwrap_or(Tier::Small);
    let seed: u64 = args[4].parse().unwrap();
    let steps: usize = args.get(5).map(|v| v.parse().unwrap()).unwrap_or(20_000);
    let n_clips: usize = args.get(6).map(|v| v.parse().unwrap()).unwrap_or(500);

    let split_seed = 7u64;
    let corpus = make_corpus(n_clips, split_seed, false);
    let (train_idx, held) = holdout_split(corpus.len(), split_seed);
    let train: Vec<_> = train_idx.iter().map(|&i| corpus[i].clone()).collect();

    let t0 = std::time::Instant::now();
    let s1_cfg = Stage1Config {
        codebook_size: k,
        downsample: s,
        steps: 8_000,
        ..Default::default()
    };
    let (s1, _) = train_stage1(&train, &s1_cfg, split_seed).unwrap();
    eprintln!("stage1 trained in {:.0}s", t0.elapsed().as_secs_f64());

    let judge = train_judge(&corpus, split_seed, &JudgeTrainConfig::default()).unwrap();
    let feat_cfg = FeatureConfig::default();
    let gt: Vec<_> = held
        .iter()
        .map(|&i| {
            (
                extract_features(&corpus[i].waveform, &feat_cfg).unwrap(),
                corpus[i].label,
            )
        })
        .collect();
    let gt_acc = judge_accuracy(&judge, &gt).unwrap();

    let tiers = if args[3] == "all" {
        vec![Tier::Small, Tier::Medium, Tier::Large]
    } else {
        vec![tier]
    };
    let cap: usize = std::env::var("MMD_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(400);
    let ode_steps: usize = std::env::var("ODE_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(32);
    let lr: f64 = std::env::var("LR")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1e-3);
    let batch_clips: usize = std::env::var("BATCH")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(4);
    let grid = ScalingGrid {
        tiers,
        bitrate_points: vec![(k, s)],
        seeds: vec![seed],
        steps,
        mmd_frame_cap: cap,
        ode_steps,
        lr,
        batch_clips,
        ..Default::default()
    };
    let mut models = BTreeMap::new();
    models.insert((k, s), s1);
    let t1 = std::time::Instant::now();
    let cells = run_scaling_experiment(&corpus, &models, &grid, &judge, split_seed).unwrap();
    for c in &cells {
        println!(
            "K={k} s={s} tier={} seed={seed} steps={steps} cap={cap}: gt_acc={gt_acc:.3} judge_acc={:.3} mmd={:.4e} lsd={:.2} L_bits={:.2} eta={:.3e} ppl={:.1} plateau_flag={} t={:.0}s",
            c.tier.name(),
            c.judge_acc,
            c.mmd,
            c.lsd,
            c.l_bits,
            c.eta,
            c.perplexity,
            c.plateau_flagged,
            t1.elapsed().as_secs_f64()
        );
    }
}
