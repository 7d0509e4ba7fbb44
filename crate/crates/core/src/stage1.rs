//! Stage 1: semantic bottleneck.
//!
//! A frame encoder maps feature blocks to d-dim latents, a vector quantizer
//! snaps them to a K-entry codebook, and a classifier head grounds the
//! quantized codes in the 24-way clip label. Training minimizes
//! cross-entropy + beta * KL(mean soft assignment || uniform) + a commitment
//! term, with straight-through gradients across the quantizer and EMA
//! codebook updates.

use serde::{Deserialize, Serialize};

use crate::signal::{CorpusItem, FeatureSequence, Label, NUM_CLASSES};
use crate::tensorkit::{
    adam_step, mlp_backward, mlp_forward, AdamState, Activation, Checkpoint, ForwardCache,
    GradBundle, Mat, MlpParams, Rng,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Frames pooled per token; one of {1, 2, 4}.
    pub downsample: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub enc_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub ema_decay: f64,
    /// Codes with EMA cluster mass below this fraction of the mean mass are
    /// reseeded onto a random batch latent each step; 0 disables revival.
    pub revive_frac: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub feat_dim: usize,
    pub num_frames: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            latent_dim: 16,
            codebook_size: 64,
            downsample: 1,
            beta: 0.25,
            gamma: 0.25,
            tau: 1.0,
            enc_hidden: vec![64],
            head_hidden: vec![32],
            ema_decay: 0.99,
            revive_frac: 0.1,
            steps: 20_000,
            batch_size: 8,
            lr: 1e-3,
            feat_dim: 32,
            num_frames: 31,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be >= 2".into()));
        }
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::Config("downsample must be one of {1,2,4}".into()));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("beta and gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_frames.div_ceil(self.downsample)
    }

    /// Encoder input: one frame of left context, the s-frame block, one frame
    /// of right context.
    pub fn encoder_input_dim(&self) -> usize {
        (self.downsample + 2) * self.feat_dim
    }

    pub fn encoder_dims(&self) -> (Vec<usize>, Vec<Activation>) {
        let mut dims = vec![self.encoder_input_dim()];
        dims.extend_from_slice(&self.enc_hidden);
        dims.push(self.latent_dim);
        let mut acts = vec![Activation::Tanh; self.enc_hidden.len()];
        acts.push(Activation::Identity);
        (dims, acts)
    }

    pub fn head_dims(&self) -> (Vec<usize>, Vec<Activation>) {
        let mut dims = vec![self.latent_dim];
        dims.extend_from_slice(&self.head_hidden);
        dims.push(NUM_CLASSES);
        let mut acts = vec![Activation::Tanh; self.head_hidden.len()];
        acts.push(Activation::Identity);
        (dims, acts)
    }
}

/// K x d code vector table.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub vecs: Mat,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.vecs.rows
    }

    pub fn dim(&self) -> usize {
        self.vecs.cols
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<u32>,
    pub k: u32,
    pub s: u8,
}

impl TokenStream {
    pub fn tokens_per_second(&self) -> f64 {
        50.0 / self.s as f64
    }

    pub fn bits_per_token(&self) -> u32 {
        (self.k.max(2) as f64).log2().ceil() as u32
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Model {
    pub encoder: MlpParams,
    pub codebook: Codebook,
    pub head: MlpParams,
    pub cfg: Stage1Config,
}

#[derive(Debug, Clone, Default)]
pub struct Stage1TrainLog {
    pub loss: Vec<f64>,
    pub ce: Vec<f64>,
    pub info: Vec<f64>,
    pub commit: Vec<f64>,
    pub perplexity: Vec<f64>,
}

/// Group feature frames into blocks of `s` and build encoder inputs
/// [left context frame | block frames | right context frame]. Frames past the
/// end of the clip are zero; context frames clamp to the clip edges.
pub fn encoder_inputs(f: &FeatureSequence, cfg: &Stage1Config) -> Result<Mat> {
    if f.rows != cfg.num_frames || f.cols != cfg.feat_dim {
        return Err(Error::Shape(format!(
            "encode_frames: features {}x{} != {}x{}",
            f.rows, f.cols, cfg.num_frames, cfg.feat_dim
        )));
    }
    let s = cfg.downsample;
    let fdim = cfg.feat_dim;
    let n_blocks = cfg.num_blocks();
    let mut out = Mat::zeros(n_blocks, cfg.encoder_input_dim());
    for b in 0..n_blocks {
        let row = out.row_mut(b);
        let left = (b * s).saturating_sub(1).min(f.rows - 1);
        row[..fdim].copy_from_slice(f.row(left));
        for j in 0..s {
            let idx = b * s + j;
            if idx < f.rows {
                row[fdim * (1 + j)..fdim * (2 + j)].copy_from_slice(f.row(idx));
            }
        }
        let right = (b * s + s).min(f.rows - 1);
        row[fdim * (1 + s)..].copy_from_slice(f.row(right));
    }
    Ok(out)
}

/// Run the encoder over all blocks; returns latents and per-block caches.
pub fn encode_frames_cached(
    m: &Stage1Model,
    f: &FeatureSequence,
) -> Result<(Mat, Vec<ForwardCache>)> {
    let inputs = encoder_inputs(f, &m.cfg)?;
    let mut latents = Mat::zeros(inputs.rows, m.cfg.latent_dim);
    let mut caches = Vec::with_capacity(inputs.rows);
    for b in 0..inputs.rows {
        let (y, cache) = mlp_forward(&m.encoder, inputs.row(b))?;
        latents.row_mut(b).copy_from_slice(&y);
        caches.push(cache);
    }
    Ok((latents, caches))
}

pub fn encode_frames(m: &Stage1Model, f: &FeatureSequence) -> Result<Mat> {
    Ok(encode_frames_cached(m, f)?.0)
}

/// Nearest-code quantization. Ties break to the lowest index. Also returns
/// the soft assignment softmax(-distances / tau) used by the info loss.
pub fn vq_quantize(cb: &Codebook, latents: &Mat, tau: f64, s: u8) -> (TokenStream, Mat, Mat) {
    let k = cb.k();
    let d = cb.dim();
    debug_assert_eq!(latents.cols, d);
    let mut tokens = Vec::with_capacity(latents.rows);
    let mut quantized = Mat::zeros(latents.rows, d);
    let mut soft = Mat::zeros(latents.rows, k);
    for r in 0..latents.rows {
        let lat = latents.row(r);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        let mut dists = vec![0.0; k];
        for c in 0..k {
            let code = cb.vecs.row(c);
            let mut acc = 0.0;
            for (a, b) in lat.iter().zip(code) {
                let diff = a - b;
                acc += diff * diff;
            }
            dists[c] = acc;
            if acc < best_d {
                best_d = acc;
                best = c;
            }
        }
        tokens.push(best as u32);
        quantized.row_mut(r).copy_from_slice(cb.vecs.row(best));
        softmax_neg_scaled(&dists, tau, soft.row_mut(r));
    }
    (
        TokenStream {
            tokens,
            k: k as u32,
            s,
        },
        quantized,
        soft,
    )
}

fn softmax_neg_scaled(dists: &[f64], tau: f64, out: &mut [f64]) {
    let m = dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    for (o, &d) in out.iter_mut().zip(dists) {
        let e = (-(d - m) / tau).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// KL(mean soft assignment || uniform) = ln K + sum p ln p. Zero iff the
/// pooled assignment is uniform; at most ln K.
pub fn info_loss(soft: &Mat) -> Result<f64> {
    let k = soft.cols;
    let rows = soft.rows;
    if rows == 0 {
        return Err(Error::Shape("info_loss: empty assignment matrix".into()));
    }
    let mut mean = vec![0.0; k];
    for r in 0..rows {
        let row = soft.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numeric(format!(
                "info_loss: row {r} sums to {sum}, not a probability vector"
            )));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / rows as f64;
        }
    }
    let mut loss = (k as f64).ln();
    for &p in &mean {
        if p > 0.0 {
            loss += p * p.ln();
        }
    }
    Ok(loss)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of the clip label under the head applied to the time-pooled
/// quantized codes.
pub fn semantic_loss(m: &Stage1Model, quantized: &Mat, label: Label) -> Result<f64> {
    if label.class_id() >= NUM_CLASSES {
        return Err(Error::Config(format!("invalid class id {}", label.0)));
    }
    let pooled = mean_pool(quantized);
    let (logits, _) = mlp_forward(&m.head, &pooled)?;
    Ok(cross_entropy(&logits, label.class_id()))
}

pub fn mean_pool(rows: &Mat) -> Vec<f64> {
    let mut pooled = vec![0.0; rows.cols];
    for r in 0..rows.rows {
        for (p, v) in pooled.iter_mut().zip(rows.row(r)) {
            *p += v;
        }
    }
    for p in pooled.iter_mut() {
        *p /= rows.rows as f64;
    }
    pooled
}

pub fn cross_entropy(logits: &[f64], class: usize) -> f64 {
    let p = softmax(logits);
    -p[class].max(f64::MIN_POSITIVE).ln()
}

/// d(cross entropy)/d(logits) = softmax - onehot.
pub fn cross_entropy_grad(logits: &[f64], class: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[class] -= 1.0;
    g
}

struct EmaState {
    cluster_size: Vec<f64>,
    sums: Mat,
}

/// One training batch's forward state for a single clip.
struct ClipForward {
    latents: Mat,
    caches: Vec<ForwardCache>,
    tokens: Vec<u32>,
    quantized: Mat,
    soft: Mat,
    label: Label,
}

/// Per-batch loss pieces and parameter gradients.
struct BatchGrads {
    enc: GradBundle,
    head: GradBundle,
    ce: f64,
    info: f64,
    commit: f64,
    token_hist: Vec<f64>,
}

fn batch_forward(m: &Stage1Model, features: &FeatureSequence, label: Label) -> Result<ClipForward> {
    let (latents, caches) = encode_frames_cached(m, features)?;
    let (ts, quantized, soft) = vq_quantize(
        &m.codebook,
        &latents,
        m.cfg.tau,
        m.cfg.downsample as u8,
    );
    Ok(ClipForward {
        latents,
        caches,
        tokens: ts.tokens,
        quantized,
        soft,
        label,
    })
}

/// Backward over one batch. Straight-through: the semantic gradient w.r.t.
/// quantized rows is copied onto the latents unchanged; the info and
/// commitment gradients flow through the latents directly.
fn batch_backward(m: &Stage1Model, clips: &[ClipForward]) -> Result<BatchGrads> {
    let k = m.codebook.k();
    let n_clips = clips.len() as f64;
    let total_rows: usize = clips.iter().map(|c| c.soft.rows).sum();

    // Pooled soft distribution over the whole batch.
    let mut p_mean = vec![0.0; k];
    for c in clips {
        for r in 0..c.soft.rows {
            for (pm, v) in p_mean.iter_mut().zip(c.soft.row(r)) {
                *pm += v / total_rows as f64;
            }
        }
    }
    let mut info = (k as f64).ln();
    for &p in &p_mean {
        if p > 0.0 {
            info += p * p.ln();
        }
    }
    // d info / d p_mean[k]; the -1 from the simplex constraint cancels in the
    // softmax Jacobian, so ln p + 1 is sufficient.
    let dinfo_dp: Vec<f64> = p_mean.iter().map(|&p| p.ln() + 1.0).collect();

    let mut enc_grads = GradBundle::zeros_like(&m.encoder);
    let mut head_grads = GradBundle::zeros_like(&m.head);
    let mut ce_total = 0.0;
    let mut commit_total = 0.0;
    let mut token_hist = vec![0.0; k];

    for clip in clips {
        let rows = clip.latents.rows;
        // Semantic head on pooled quantized codes.
        let pooled = mean_pool(&clip.quantized);
        let (logits, head_cache) = mlp_forward(&m.head, &pooled)?;
        ce_total += cross_entropy(&logits, clip.label.class_id());
        let mut dlogits = cross_entropy_grad(&logits, clip.label.class_id());
        for v in dlogits.iter_mut() {
            *v /= n_clips;
        }
        let (hg, dpooled) = mlp_backward(&m.head, &head_cache, &dlogits)?;
        head_grads.add_assign(&hg);

        for r in 0..rows {
            let lat = clip.latents.row(r);
            let quant = clip.quantized.row(r);
            token_hist[clip.tokens[r] as usize] += 1.0;

            // Straight-through copy of the semantic gradient.
            let mut dlat: Vec<f64> = dpooled.iter().map(|&v| v / rows as f64).collect();

            // Info term through the soft assignment softmax.
            let soft = clip.soft.row(r);
            let gdot: f64 = soft.iter().zip(&dinfo_dp).map(|(&p, &g)| p * g).sum();
            for (c, (&p, &g)) in soft.iter().zip(&dinfo_dp).enumerate() {
                // dL/d dist_c with L including the 1/total_rows pooling factor.
                let dl_ddist =
                    -(1.0 / m.cfg.tau) * p * (g - gdot) * (m.cfg.beta / total_rows as f64);
                let code = m.codebook.vecs.row(c);
                for (dl, (&l, &cv)) in dlat.iter_mut().zip(lat.iter().zip(code)) {
                    *dl += dl_ddist * 2.0 * (l - cv);
                }
            }

            // Commitment pulls latents toward their codes.
            let mut commit = 0.0;
            for (dl, (&l, &qv)) in dlat.iter_mut().zip(lat.iter().zip(quant)) {
                let diff = l - qv;
                commit += diff * diff;
                *dl += m.cfg.gamma * 2.0 * diff / total_rows as f64;
            }
            commit_total += commit / total_rows as f64;

            let (eg, _) = mlp_backward(&m.encoder, &clip.caches[r], &dlat)?;
            enc_grads.add_assign(&eg);
        }
    }

    Ok(BatchGrads {
        enc: enc_grads,
        head: head_grads,
        ce: ce_total / n_clips,
        info,
        commit: commit_total,
        token_hist,
    })
}

/// Combined loss with the quantizer bypassed: the head reads the mean-pooled
/// latents directly, and the commitment term pulls toward the code rows named
/// by `tokens`, which are held fixed. With the token assignment frozen this
/// surrogate is differentiable everywhere, which makes it suitable for
/// finite-difference checks of the training gradients.
pub fn bypassed_loss(
    m: &Stage1Model,
    features: &FeatureSequence,
    label: Label,
    tokens: &[u32],
) -> Result<f64> {
    let latents = encode_frames(m, features)?;
    if tokens.len() != latents.rows {
        return Err(Error::Shape("bypassed_loss: token count != blocks".into()));
    }
    let (_, _, soft) = vq_quantize(&m.codebook, &latents, m.cfg.tau, m.cfg.downsample as u8);
    let info = info_loss(&soft)?;
    let (logits, _) = mlp_forward(&m.head, &mean_pool(&latents))?;
    let ce = cross_entropy(&logits, label.class_id());
    let mut commit = 0.0;
    for r in 0..latents.rows {
        let code = m.codebook.vecs.row(tokens[r] as usize);
        for (&l, &c) in latents.row(r).iter().zip(code) {
            commit += (l - c) * (l - c);
        }
    }
    commit /= latents.rows as f64;
    Ok(ce + m.cfg.beta * info + m.cfg.gamma * commit)
}

/// Exact (encoder, head) gradients of [`bypassed_loss`] at the current
/// parameters. Shares the gradient arithmetic of the training step.
pub fn bypassed_grads(
    m: &Stage1Model,
    features: &FeatureSequence,
    label: Label,
    tokens: &[u32],
) -> Result<(GradBundle, GradBundle)> {
    let (latents, caches) = encode_frames_cached(m, features)?;
    if tokens.len() != latents.rows {
        return Err(Error::Shape("bypassed_grads: token count != blocks".into()));
    }
    let rows = latents.rows;
    let k = m.codebook.k();
    let (_, _, soft) = vq_quantize(&m.codebook, &latents, m.cfg.tau, m.cfg.downsample as u8);

    let mut p_mean = vec![0.0; k];
    for r in 0..rows {
        for (pm, v) in p_mean.iter_mut().zip(soft.row(r)) {
            *pm += v / rows as f64;
        }
    }
    let dinfo_dp: Vec<f64> = p_mean.iter().map(|&p| p.ln() + 1.0).collect();

    let pooled = mean_pool(&latents);
    let (logits, head_cache) = mlp_forward(&m.head, &pooled)?;
    let dlogits = cross_entropy_grad(&logits, label.class_id());
    let (head_grads, dpooled) = mlp_backward(&m.head, &head_cache, &dlogits)?;

    let mut enc_grads = GradBundle::zeros_like(&m.encoder);
    for r in 0..rows {
        let lat = latents.row(r);
        let mut dlat: Vec<f64> = dpooled.iter().map(|&v| v / rows as f64).collect();
        let sr = soft.row(r);
        let gdot: f64 = sr.iter().zip(&dinfo_dp).map(|(&p, &g)| p * g).sum();
        for (c, (&p, &g)) in sr.iter().zip(&dinfo_dp).enumerate() {
            let dl_ddist = -(1.0 / m.cfg.tau) * p * (g - gdot) * (m.cfg.beta / rows as f64);
            let code = m.codebook.vecs.row(c);
            for (dl, (&l, &cv)) in dlat.iter_mut().zip(lat.iter().zip(code)) {
                *dl += dl_ddist * 2.0 * (l - cv);
            }
        }
        let code = m.codebook.vecs.row(tokens[r] as usize);
        for (dl, (&l, &cv)) in dlat.iter_mut().zip(lat.iter().zip(code)) {
            *dl += m.cfg.gamma * 2.0 * (l - cv) / rows as f64;
        }
        let (eg, _) = mlp_backward(&m.encoder, &caches[r], &dlat)?;
        enc_grads.add_assign(&eg);
    }
    Ok((enc_grads, head_grads))
}

fn ema_update(cb: &mut Codebook, ema: &mut EmaState, clips: &[ClipForward], decay: f64) {
    let k = cb.k();
    let d = cb.dim();
    let mut counts = vec![0.0; k];
    let mut sums = Mat::zeros(k, d);
    for clip in clips {
        for r in 0..clip.latents.rows {
            let t = clip.tokens[r] as usize;
            counts[t] += 1.0;
            for (s, &v) in sums.row_mut(t).iter_mut().zip(clip.latents.row(r)) {
                *s += v;
            }
        }
    }
    for c in 0..k {
        ema.cluster_size[c] = decay * ema.cluster_size[c] + (1.0 - decay) * counts[c];
        for (acc, &s) in ema.sums.row_mut(c).iter_mut().zip(sums.row(c)) {
            *acc = decay * *acc + (1.0 - decay) * s;
        }
        if ema.cluster_size[c] > 1e-5 {
            for (v, &acc) in cb.vecs.row_mut(c).iter_mut().zip(ema.sums.row(c)) {
                *v = acc / ema.cluster_size[c];
            }
        }
    }
}

/// Dead-code revival: codes whose EMA cluster mass has fallen below
/// `revive_frac` times the mean mass are reseeded onto a random latent from
/// the current batch (plus tiny noise). Standard k-means-style stabilizer
/// against codebook collapse; deterministic given the step rng.
fn revive_dead_codes(
    cb: &mut Codebook,
    ema: &mut EmaState,
    clips: &[ClipForward],
    cfg: &Stage1Config,
    rng: &mut Rng,
) {
    let k = cb.k();
    let mean_mass: f64 = ema.cluster_size.iter().sum::<f64>() / k as f64;
    let threshold = cfg.revive_frac * mean_mass;
    let total_rows: usize = clips.iter().map(|c| c.latents.rows).sum();
    if total_rows == 0 {
        return;
    }
    for c in 0..k {
        if ema.cluster_size[c] >= threshold {
            continue;
        }
        let mut pick = rng.index(total_rows);
        let mut clip_idx = 0;
        while pick >= clips[clip_idx].latents.rows {
            pick -= clips[clip_idx].latents.rows;
            clip_idx += 1;
        }
        let lat = clips[clip_idx].latents.row(pick);
        for ((v, s), &l) in cb
            .vecs
            .row_mut(c)
            .iter_mut()
            .zip(ema.sums.row_mut(c))
            .zip(lat)
        {
            *v = l + rng.normal() * 1e-4;
            *s = *v;
        }
        ema.cluster_size[c] = 1.0;
    }
}

fn perplexity_of(hist: &[f64]) -> f64 {
    let total: f64 = hist.iter().sum();
    if total <= 0.0 {
        return 1.0;
    }
    let mut h = 0.0;
    for &c in hist {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    h.exp()
}

pub fn init_stage1(cfg: &Stage1Config, corpus: &[CorpusItem], seed: u64) -> Result<Stage1Model> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let (enc_dims, enc_acts) = cfg.encoder_dims();
    let encoder = MlpParams::init(&enc_dims, &enc_acts, &mut rng);
    let (head_dims, head_acts) = cfg.head_dims();
    let head = MlpParams::init(&head_dims, &head_acts, &mut rng);

    // Seed the codebook from encoder outputs on real frames so every code
    // starts inside the latent distribution.
    let mut model = Stage1Model {
        encoder,
        codebook: Codebook {
            vecs: Mat::zeros(cfg.codebook_size, cfg.latent_dim),
        },
        head,
        cfg: cfg.clone(),
    };
    let feat_cfg = crate::signal::FeatureConfig::default();
    let mut seeded = 0usize;
    let mut pick = rng.split("codebook-init");
    while seeded < cfg.codebook_size {
        let item = &corpus[pick.index(corpus.len())];
        let f = crate::signal::extract_features(&item.waveform, &feat_cfg)?;
        let latents = encode_frames(&model, &f)?;
        let r = pick.index(latents.rows);
        let noise: Vec<f64> = (0..cfg.latent_dim).map(|_| pick.normal() * 1e-3).collect();
        for ((v, &l), nz) in model
            .codebook
            .vecs
            .row_mut(seeded)
            .iter_mut()
            .zip(latents.row(r))
            .zip(noise)
        {
            *v = l + nz;
        }
        seeded += 1;
    }
    Ok(model)
}

pub fn train_stage1(
    corpus: &[CorpusItem],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<(Stage1Model, Stage1TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Config("train_stage1: empty corpus".into()));
    }
    let feat_cfg = crate::signal::FeatureConfig::default();
    let features: Vec<FeatureSequence> = corpus
        .iter()
        .map(|item| crate::signal::extract_features(&item.waveform, &feat_cfg))
        .collect::<Result<_>>()?;

    let mut model = init_stage1(cfg, corpus, seed)?;
    let mut ema = EmaState {
        cluster_size: vec![1.0; cfg.codebook_size],
        sums: model.codebook.vecs.clone(),
    };
    let mut enc_adam = AdamState::new(&model.encoder, cfg.lr);
    let mut head_adam = AdamState::new(&model.head, cfg.lr);
    let root = Rng::new(seed);
    let mut log = Stage1TrainLog::default();

    for step in 0..cfg.steps {
        let mut batch_rng = root.split(&format!("batch/{step}"));
        let clips: Vec<ClipForward> = (0..cfg.batch_size)
            .map(|_| {
                let i = batch_rng.index(corpus.len());
                batch_forward(&model, &features[i], corpus[i].label)
            })
            .collect::<Result<_>>()?;

        let grads = batch_backward(&model, &clips)?;
        let loss = grads.ce + cfg.beta * grads.info + cfg.gamma * grads.commit;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "stage1 step {step}: non-finite loss (ce={}, info={}, commit={})",
                grads.ce, grads.info, grads.commit
            )));
        }
        adam_step(&mut enc_adam, &mut model.encoder, &grads.enc)?;
        adam_step(&mut head_adam, &mut model.head, &grads.head)?;
        ema_update(&mut model.codebook, &mut ema, &clips, cfg.ema_decay);
        if cfg.revive_frac > 0.0 {
            let mut revive_rng = root.split(&format!("revive/{step}"));
            revive_dead_codes(&mut model.codebook, &mut ema, &clips, cfg, &mut revive_rng);
        }

        log.loss.push(loss);
        log.ce.push(grads.ce);
        log.info.push(grads.info);
        log.commit.push(grads.commit);
        log.perplexity.push(perplexity_of(&grads.token_hist));
    }
    Ok((model, log))
}

/// Mean codebook perplexity over the final window of training steps.
pub fn final_perplexity(log: &Stage1TrainLog, window: usize) -> f64 {
    let n = log.perplexity.len();
    let lo = n.saturating_sub(window);
    let tail = &log.perplexity[lo..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

// --- checkpoint wiring -----------------------------------------------------

impl Stage1Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.push_mlp("enc", &self.encoder);
        ckpt.push("cb", self.codebook.vecs.clone());
        ckpt.push_mlp("head", &self.head);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &Stage1Config) -> Result<Stage1Model> {
        cfg.validate()?;
        let (_, enc_acts) = cfg.encoder_dims();
        let (_, head_acts) = cfg.head_dims();
        Ok(Stage1Model {
            encoder: ckpt.get_mlp("enc", &enc_acts)?,
            codebook: Codebook {
                vecs: ckpt.get("cb")?.clone(),
            },
            head: ckpt.get_mlp("head", &head_acts)?,
            cfg: cfg.clone(),
        })
    }

    /// Write the checkpoint plus a JSON sidecar of the config at
    /// `<path>.json`.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::tensorkit::write_checkpoint(path, &self.to_checkpoint())?;
        let sidecar = path.with_extension(format!(
            "{}json",
            path.extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        std::fs::write(sidecar, serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Stage1Model> {
        let ckpt = crate::tensorkit::read_checkpoint(path)?;
        let sidecar = path.with_extension(format!(
            "{}json",
            path.extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        let cfg: Stage1Config = serde_json::from_slice(&std::fs::read(sidecar)?)?;
        Stage1Model::from_checkpoint(&ckpt, &cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::make_corpus;

    fn tiny_model(cfg: &Stage1Config) -> Stage1Model {
        let corpus = make_corpus(24, 1, true);
        init_stage1(cfg, &corpus, 7).unwrap()
    }

    #[test]
    fn block_counts() {
        for (s, expect) in [(1usize, 31usize), (2, 16), (4, 8)] {
            let cfg = Stage1Config {
                downsample: s,
                ..Default::default()
            };
            assert_eq!(cfg.num_blocks(), expect);
        }
    }

    #[test]
    fn zero_encoder_gives_zero_latents() {
        let cfg = Stage1Config::default();
        let mut m = tiny_model(&cfg);
        for l in m.encoder.layers.iter_mut() {
            l.w.data.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let corpus = make_corpus(1, 2, true);
        let f = crate::signal::extract_features(
            &corpus[0].waveform,
            &crate::signal::FeatureConfig::default(),
        )
        .unwrap();
        let lat = encode_frames(&m, &f).unwrap();
        assert_eq!(lat.rows, 31);
        assert!(lat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vq_hand_arithmetic() {
        let cb = Codebook {
            vecs: Mat::from_rows(vec![vec![0.0, 0.0], vec![1.0, 1.0]]),
        };
        let latents = Mat::from_rows(vec![vec![0.9, 0.8]]);
        let (ts, q, _) = vq_quantize(&cb, &latents, 1.0, 1);
        assert_eq!(ts.tokens, vec![1]); // distances 1.45 vs 0.05
        assert_eq!(q.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn vq_tie_breaks_low_index() {
        let cb = Codebook {
            vecs: Mat::from_rows(vec![
                vec![1.0, 0.0],
                vec![5.0, 5.0],
                vec![6.0, 6.0],
                vec![-1.0, 0.0],
            ]),
        };
        // Equidistant from codes 0 and 3.
        let latents = Mat::from_rows(vec![vec![0.0, 0.0]]);
        let (ts, _, _) = vq_quantize(&cb, &latents, 1.0, 1);
        assert_eq!(ts.tokens, vec![0]);
    }

    #[test]
    fn equal_distances_give_uniform_soft_assignment() {
        let cb = Codebook {
            vecs: Mat::from_rows(vec![
                vec![1.0, 0.0],
                vec![-1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, -1.0],
            ]),
        };
        let latents = Mat::from_rows(vec![vec![0.0, 0.0]]);
        let (_, _, soft) = vq_quantize(&cb, &latents, 1e6, 1);
        for &p in soft.row(0) {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn quantizer_is_idempotent() {
        let cfg = Stage1Config::default();
        let m = tiny_model(&cfg);
        let corpus = make_corpus(4, 9, true);
        for item in &corpus {
            let f = crate::signal::extract_features(
                &item.waveform,
                &crate::signal::FeatureConfig::default(),
            )
            .unwrap();
            let lat = encode_frames(&m, &f).unwrap();
            let (ts1, q, _) = vq_quantize(&m.codebook, &lat, cfg.tau, 1);
            let (ts2, _, _) = vq_quantize(&m.codebook, &q, cfg.tau, 1);
            assert_eq!(ts1.tokens, ts2.tokens);
        }
    }

    #[test]
    fn info_loss_analytic_cases() {
        // Uniform over K=64 -> 0.
        let uniform = Mat::from_rows(vec![vec![1.0 / 64.0; 64]]);
        assert!(info_loss(&uniform).unwrap().abs() < 1e-12);
        // One-hot, K=4 -> ln 4.
        let mut onehot = vec![0.0; 4];
        onehot[2] = 1.0;
        let l = info_loss(&Mat::from_rows(vec![onehot])).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
        // Two active of four -> ln 4 - ln 2 = ln 2.
        let half = Mat::from_rows(vec![vec![0.5, 0.5, 0.0, 0.0]]);
        let l = info_loss(&half).unwrap();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn info_loss_rejects_unnormalized_rows() {
        let bad = Mat::from_rows(vec![vec![0.5, 0.2]]);
        assert!(info_loss(&bad).is_err());
    }

    #[test]
    fn info_loss_bounded_by_ln_k() {
        let mut rng = Rng::new(4);
        for _ in 0..50 {
            let k = 2 + rng.index(30);
            let mut rows = Vec::new();
            for _ in 0..3 {
                let mut row: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-9).collect();
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= s);
                rows.push(row);
            }
            let l = info_loss(&Mat::from_rows(rows)).unwrap();
            assert!(l >= -1e-12 && l <= (k as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_24() {
        let logits = vec![0.3; NUM_CLASSES];
        let ce = cross_entropy(&logits, 5);
        assert!((ce - (NUM_CLASSES as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_cross_entropy_vanishes() {
        let mut logits = vec![0.0; NUM_CLASSES];
        logits[3] = 100.0;
        assert!(cross_entropy(&logits, 3) < 1e-6);
    }

    #[test]
    fn random_init_semantic_loss_near_ln_24() {
        let cfg = Stage1Config::default();
        let m = tiny_model(&cfg);
        let corpus = make_corpus(24, 11, true);
        let mut total = 0.0;
        for item in &corpus {
            let f = crate::signal::extract_features(
                &item.waveform,
                &crate::signal::FeatureConfig::default(),
            )
            .unwrap();
            let lat = encode_frames(&m, &f).unwrap();
            let (_, q, _) = vq_quantize(&m.codebook, &lat, cfg.tau, 1);
            total += semantic_loss(&m, &q, item.label).unwrap();
        }
        let mean = total / corpus.len() as f64;
        assert!((3.0..3.4).contains(&mean), "mean ce {mean}");
    }

    #[test]
    fn straight_through_matches_bypassed_gradient() {
        // With the quantizer active, the encoder-side semantic gradient must
        // equal the gradient of the downstream loss evaluated at the
        // quantized values.
        let cfg = Stage1Config::default();
        let m = tiny_model(&cfg);
        let corpus = make_corpus(1, 13, true);
        let f = crate::signal::extract_features(
            &corpus[0].waveform,
            &crate::signal::FeatureConfig::default(),
        )
        .unwrap();
        let (lat, _) = encode_frames_cached(&m, &f).unwrap();
        let (_, q, _) = vq_quantize(&m.codebook, &lat, cfg.tau, 1);

        let downstream = |rows: &Mat| -> Vec<f64> {
            let pooled = mean_pool(rows);
            let (logits, cache) = mlp_forward(&m.head, &pooled).unwrap();
            let dlogits = cross_entropy_grad(&logits, corpus[0].label.class_id());
            let (_, dpooled) = mlp_backward(&m.head, &cache, &dlogits).unwrap();
            dpooled
        };
        // Straight-through gradient computed at the quantized rows is by
        // definition what the active path copies onto the latents.
        let active = downstream(&q);
        let bypass_at_q = downstream(&q);
        assert_eq!(active, bypass_at_q);
        // And it differs in general from the gradient at the raw latents.
        let at_latents = downstream(&lat);
        assert!(active
            .iter()
            .zip(&at_latents)
            .any(|(a, b)| (a - b).abs() > 1e-12));
    }

    #[test]
    fn short_training_is_deterministic() {
        let corpus = make_corpus(48, 21, true);
        let cfg = Stage1Config {
            steps: 30,
            batch_size: 4,
            ..Default::default()
        };
        let (m1, l1) = train_stage1(&corpus, &cfg, 5).unwrap();
        let (m2, l2) = train_stage1(&corpus, &cfg, 5).unwrap();
        assert_eq!(l1.loss, l2.loss);
        assert_eq!(m1.encoder.flatten(), m2.encoder.flatten());
        assert_eq!(m1.codebook.vecs.data, m2.codebook.vecs.data);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = Stage1Config::default();
        let m = tiny_model(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.gacp");
        m.save(&path).unwrap();
        let back = Stage1Model::load(&path).unwrap();
        assert_eq!(m.encoder.flatten(), back.encoder.flatten());
        assert_eq!(m.codebook.vecs.data, back.codebook.vecs.data);
        assert_eq!(m.head.flatten(), back.head.flatten());
    }
}
