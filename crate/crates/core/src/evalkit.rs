//! Self-contained quality metrics: log-spectral distance on feature frames,
//! unbiased Gaussian-kernel MMD between frame sets, codebook perplexity, and
//! a frozen label classifier ("judge") standing in for ASR-style semantic
//! checks.

use crate::signal::{CorpusItem, FeatureSequence, Label, NUM_CLASSES};
use crate::stage1::{cross_entropy, cross_entropy_grad, mean_pool};
use crate::tensorkit::{
    adam_step, mlp_backward, mlp_forward, AdamState, Activation, MlpParams, Rng,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub lsd: f64,
    pub mmd: f64,
    pub judge_accuracy: f64,
    pub perplexity: f64,
}

const DB_PER_NAT: f64 = 10.0 / std::f64::consts::LN_10;

/// Log-spectral distance in dB: mean over frames of the RMS band error,
/// with natural-log features converted through 10/ln 10.
pub fn lsd(reference: &FeatureSequence, reconstruction: &FeatureSequence) -> Result<f64> {
    if reference.rows != reconstruction.rows || reference.cols != reconstruction.cols {
        return Err(Error::Shape("lsd: shape mismatch".into()));
    }
    let mut total = 0.0;
    for r in 0..reference.rows {
        let mut acc = 0.0;
        for (a, b) in reference.row(r).iter().zip(reconstruction.row(r)) {
            let d = DB_PER_NAT * (a - b);
            acc += d * d;
        }
        total += (acc / reference.cols as f64).sqrt();
    }
    Ok(total / reference.rows as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise distance of the pooled sample, the standard bandwidth
/// heuristic.
pub fn median_heuristic(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let all: Vec<&Vec<f64>> = a.iter().chain(b.iter()).collect();
    let mut dists = Vec::with_capacity(all.len() * (all.len() - 1) / 2);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            dists.push(sq_dist(all[i], all[j]).sqrt());
        }
    }
    dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let m = dists[dists.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Unbiased squared MMD with Gaussian kernel exp(-||a-b||^2 / (2 sigma^2)).
/// `bandwidth = None` uses the median heuristic over A union B.
pub fn mmd_frames(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Option<f64>) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Shape(format!("mmd_frames: need >= 2 samples per set, got {m} and {n}")));
    }
    let sigma = bandwidth.unwrap_or_else(|| median_heuristic(a, b));
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) / (2.0 * sigma * sigma)).exp();
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += k(&a[i], &a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += k(&b[i], &b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += k(x, y);
        }
    }
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64)
}

/// exp of the Shannon entropy (nats) of the normalized histogram.
pub fn codebook_perplexity(histogram: &[f64]) -> Result<f64> {
    let total: f64 = histogram.iter().sum();
    if total <= 0.0 {
        return Err(Error::Numeric("codebook_perplexity: empty histogram".into()));
    }
    let mut h = 0.0;
    for &c in histogram {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    Ok(h.exp())
}

/// Frozen label classifier over mean-pooled feature frames.
#[derive(Debug, Clone)]
pub struct JudgeModel {
    pub net: MlpParams,
    pub feat_dim: usize,
}

impl JudgeModel {
    pub fn classify(&self, features: &FeatureSequence) -> Result<usize> {
        let pooled = mean_pool(features);
        let (logits, _) = mlp_forward(&self.net, &pooled)?;
        Ok(argmax(&logits))
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

/// Deterministic stratified 80/20 split by index hash of the seeded shuffle.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed).split("holdout");
    for i in (1..idx.len()).rev() {
        let j = rng.index(i + 1);
        idx.swap(i, j);
    }
    let cut = (n * 4) / 5;
    let train = idx[..cut].to_vec();
    let held = idx[cut..].to_vec();
    (train, held)
}

pub struct JudgeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
}

impl Default for JudgeTrainConfig {
    fn default() -> Self {
        JudgeTrainConfig {
            steps: 4000,
            batch_size: 32,
            lr: 1e-3,
            hidden: vec![64],
        }
    }
}

/// Train the judge on ground-truth features of the training split only.
pub fn train_judge(corpus: &[CorpusItem], seed: u64, cfg: &JudgeTrainConfig) -> Result<JudgeModel> {
    let feat_cfg = crate::signal::FeatureConfig::default();
    let pooled: Vec<Vec<f64>> = corpus
        .iter()
        .map(|item| {
            Ok(mean_pool(&crate::signal::extract_features(
                &item.waveform,
                &feat_cfg,
            )?))
        })
        .collect::<Result<_>>()?;
    let feat_dim = pooled[0].len();
    let (train_idx, _) = holdout_split(corpus.len(), seed);

    let mut rng = Rng::new(seed).split("judge-init");
    let mut dims = vec![feat_dim];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(NUM_CLASSES);
    let mut acts = vec![Activation::Tanh; cfg.hidden.len()];
    acts.push(Activation::Identity);
    let mut net = MlpParams::init(&dims, &acts, &mut rng);
    let mut adam = AdamState::new(&net, cfg.lr);
    let root = Rng::new(seed);

    for step in 0..cfg.steps {
        let mut batch_rng = root.split(&format!("judge-batch/{step}"));
        let mut grads = crate::tensorkit::GradBundle::zeros_like(&net);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let i = train_idx[batch_rng.index(train_idx.len())];
            let (logits, cache) = mlp_forward(&net, &pooled[i])?;
            loss += cross_entropy(&logits, corpus[i].label.class_id());
            let mut dlogits = cross_entropy_grad(&logits, corpus[i].label.class_id());
            for v in dlogits.iter_mut() {
                *v /= cfg.batch_size as f64;
            }
            let (g, _) = mlp_backward(&net, &cache, &dlogits)?;
            grads.add_assign(&g);
        }
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("judge step {step}: non-finite loss")));
        }
        adam_step(&mut adam, &mut net, &grads)?;
    }
    Ok(JudgeModel { net, feat_dim })
}

/// Fraction of correct argmax classifications over (features, label) pairs.
pub fn judge_accuracy(j: &JudgeModel, items: &[(FeatureSequence, Label)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Shape("judge_accuracy: empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for (f, label) in items {
        if j.classify(f)? == label.class_id() {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
