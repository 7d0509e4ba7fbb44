//! Scratch harness for inspecting tokenizer utilization under different
//! hyperparameters. Usage: tune <corpus> <steps> <revive_frac> <beta> <seed> [K] [s]

use gac_core::evalkit::codebook_perplexity;
use gac_core::signal::{extract_features, read_corpus, FeatureConfig};
use gac_core::stage1::{encode_frames, final_perplexity, train_stage1, vq_quantize, Stage1Config};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let (items, _) = read_corpus(std::path::Path::new(&args[1])).unwrap();
    let cfg = Stage1Config {
        steps: args[2].parse().unwrap(),
        revive_frac: args[3].parse().unwrap(),
        beta: args[4].parse().unwrap(),
        codebook_size: args.get(6).map(|s| s.parse().unwrap()).unwrap_or(64),
        downsample: args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1),
        ..Default::default()
    };
    let seed: u64 = args[5].parse().unwrap();
    let t0 = std::time::Instant::now();
    let (model, log) = train_stage1(&items, &cfg, seed).unwrap();
    let feat_cfg = FeatureConfig::default();
    let mut hist = vec![0.0; cfg.codebook_size];
    for item in &items {
        let f = extract_features(&item.waveform, &feat_cfg).unwrap();
        let latents = encode_frames(&model, &f).unwrap();
        let (tokens, _, _) = vq_quantize(&model.codebook, &latents, cfg.tau, cfg.downsample as u8);
        for &t in &tokens.tokens {
            hist[t as usize] += 1.0;
        }
    }
    println!(
        "steps={} revive={} beta={} seed={} K={} s={}: corpus_ppl={:.1} batch_ppl={:.1} ce={:.3} info={:.3} commit={:.4} t={:.0}s",
        cfg.steps,
        cfg.revive_frac,
        cfg.beta,
        seed,
        cfg.codebook_size,
        cfg.downsample,
        codebook_perplexity(&hist).unwrap(),
        final_perplexity(&log, 200),
        log.ce.last().unwrap(),
        log.info.last().unwrap(),
        log.commit.last().unwrap(),
        t0.elapsed().as_secs_f64()
    );
}
