//! Stage 2: generative decoder.
//!
//! A per-frame velocity MLP is trained to regress the constant displacement
//! x1 - x0 along straight interpolation paths between Gaussian noise and
//! real feature frames, conditioned on a window of quantized code vectors
//! from the frozen Stage-1 model. Decoding integrates the learned ODE with
//! fixed-step Euler from seeded noise.

use serde::{Deserialize, Serialize};

use crate::signal::{CorpusItem, FeatureSequence};
use crate::stage1::{encode_frames, vq_quantize, Stage1Model, TokenStream};
use crate::tensorkit::{
    adam_step, mlp_backward, mlp_forward, AdamState, Activation, Checkpoint, GradBundle, Mat,
    MlpParams, Rng,
};
use crate::{Error, Result};

pub const T_EMBED_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Small,
    Medium,
    Large,
}

impl Tier {
    pub fn hidden_dims(self) -> Vec<usize> {
        match self {
            Tier::Small => vec![32; 2],
            Tier::Medium => vec![64; 3],
            Tier::Large => vec![128; 4],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Tier::Small => "small",
            Tier::Medium => "medium",
            Tier::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Result<Tier> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Tier::Small),
            "medium" => Ok(Tier::Medium),
            "large" => Ok(Tier::Large),
            other => Err(Error::Config(format!("unknown tier {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub tier: Tier,
    /// Token window width for conditioning.
    pub cond_window: usize,
    pub ode_steps: usize,
    pub steps: usize,
    pub batch_clips: usize,
    pub lr: f64,
    pub seed: u64,
    pub feat_dim: usize,
    pub latent_dim: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            tier: Tier::Medium,
            cond_window: 3,
            ode_steps: 32,
            steps: 20_000,
            batch_clips: 4,
            lr: 1e-3,
            seed: 0,
            feat_dim: 32,
            latent_dim: 16,
        }
    }
}

impl Stage2Config {
    pub fn cond_dim(&self) -> usize {
        // w neighboring code vectors plus the normalized frame position.
        self.cond_window * self.latent_dim + 1
    }
}

/// Velocity field v(x, t, cond) as a plain MLP over the concatenated input.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub net: MlpParams,
    pub feat_dim: usize,
    pub cond_dim: usize,
}

impl VelocityModel {
    pub fn init(feat_dim: usize, cond_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut dims = vec![feat_dim + T_EMBED_DIM + cond_dim];
        dims.extend_from_slice(hidden);
        dims.push(feat_dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        VelocityModel {
            net: MlpParams::init(&dims, &acts, rng),
            feat_dim,
            cond_dim,
        }
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn input(&self, x: &[f64], t: f64, cond: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.feat_dim);
        debug_assert_eq!(cond.len(), self.cond_dim);
        let mut input = Vec::with_capacity(self.feat_dim + T_EMBED_DIM + self.cond_dim);
        input.extend_from_slice(x);
        input.extend_from_slice(&t_embed(t));
        input.extend_from_slice(cond);
        input
    }

    pub fn velocity(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>> {
        Ok(mlp_forward(&self.net, &self.input(x, t, cond))?.0)
    }
}

pub fn t_embed(t: f64) -> [f64; T_EMBED_DIM] {
    use std::f64::consts::PI;
    [
        t,
        (2.0 * PI * t).sin(),
        (2.0 * PI * t).cos(),
        (4.0 * PI * t).sin(),
        (4.0 * PI * t).cos(),
    ]
}

/// x_t = t x1 + (1 - t) x0.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Numeric(format!("interpolate: t={t} outside [0,1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::Shape("interpolate: dim mismatch".into()));
    }
    Ok(x0
        .iter()
        .zip(x1)
        .map(|(&a, &b)| t * b + (1.0 - t) * a)
        .collect())
}

#[derive(Debug, Clone)]
pub struct FlowBatchItem {
    pub x1: Vec<f64>,
    pub cond: Vec<f64>,
    pub x0: Vec<f64>,
    pub t: f64,
}

/// Mean squared flow-matching residual over the batch:
/// mean ||v(x_t, t, cond) - (x1 - x0)||^2.
pub fn fm_loss(v: &VelocityModel, batch: &[FlowBatchItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Shape("fm_loss: empty batch".into()));
    }
    let mut total = 0.0;
    for item in batch {
        let xt = interpolate(&item.x0, &item.x1, item.t)?;
        let pred = v.velocity(&xt, item.t, &item.cond)?;
        for ((p, &a), &b) in pred.iter().zip(&item.x1).zip(&item.x0) {
            let diff = p - (a - b);
            total += diff * diff;
        }
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric("fm_loss: non-finite".into()));
    }
    Ok(loss)
}

/// Loss plus parameter gradients for one batch.
pub fn fm_loss_grad(v: &VelocityModel, batch: &[FlowBatchItem]) -> Result<(f64, GradBundle)> {
    if batch.is_empty() {
        return Err(Error::Shape("fm_loss: empty batch".into()));
    }
    let mut grads = GradBundle::zeros_like(&v.net);
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for item in batch {
        let xt = interpolate(&item.x0, &item.x1, item.t)?;
        let input = v.input(&xt, item.t, &item.cond);
        let (pred, cache) = mlp_forward(&v.net, &input)?;
        let mut dy = vec![0.0; pred.len()];
        for (i, ((p, &a), &b)) in pred.iter().zip(&item.x1).zip(&item.x0).enumerate() {
            let diff = p - (a - b);
            total += diff * diff;
            dy[i] = 2.0 * diff * scale;
        }
        let (g, _) = mlp_backward(&v.net, &cache, &dy)?;
        grads.add_assign(&g);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric("fm_loss: non-finite".into()));
    }
    Ok((loss, grads))
}

/// Per-frame condition vectors for a token stream: tokens are upsampled by
/// repetition to the frame rate, a window of `w` code vectors around each
/// frame (edge-clamped) is concatenated, and the normalized frame position
/// is appended.
pub fn cond_vectors(
    s1: &Stage1Model,
    tokens: &TokenStream,
    num_frames: usize,
    window: usize,
) -> Vec<Vec<f64>> {
    let d = s1.codebook.dim();
    let s = tokens.s as usize;
    let n_tokens = tokens.tokens.len();
    let half = window / 2;
    (0..num_frames)
        .map(|frame| {
            let center = (frame / s).min(n_tokens - 1) as isize;
            let mut cond = Vec::with_capacity(window * d + 1);
            for off in 0..window {
                let idx = (center + off as isize - half as isize)
                    .clamp(0, n_tokens as isize - 1) as usize;
                cond.extend_from_slice(s1.codebook.vecs.row(tokens.tokens[idx] as usize));
            }
            cond.push(frame as f64 / (num_frames - 1).max(1) as f64);
            cond
        })
        .collect()
}

/// Euler integration of the learned ODE from seeded standard-normal starts,
/// one frame per condition vector, left-endpoint t grid t_i = i/n.
pub fn euler_sample(
    v: &VelocityModel,
    conds: &[Vec<f64>],
    n_steps: usize,
    seed: u64,
) -> Result<Mat> {
    assert!(n_steps >= 1);
    let mut out = Mat::zeros(conds.len(), v.feat_dim);
    let root = Rng::new(seed);
    for (frame, cond) in conds.iter().enumerate() {
        let mut rng = root.split(&format!("frame/{frame}"));
        let mut x: Vec<f64> = (0..v.feat_dim).map(|_| rng.normal()).collect();
        let dt = 1.0 / n_steps as f64;
        for i in 0..n_steps {
            let t = i as f64 * dt;
            let vel = v.velocity(&x, t, cond)?;
            for (xi, vi) in x.iter_mut().zip(&vel) {
                *xi += dt * vi;
            }
        }
        out.row_mut(frame).copy_from_slice(&x);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Stage2TrainLog {
    pub loss: Vec<f64>,
    /// Final average fm loss (nats-equivalent per frame, 0.5 * mse-sum).
    pub final_loss_nats: f64,
    /// Same quantity in bits/frame: final_loss_nats / ln 2. The ic1 module
    /// consumes this directly and never recomputes the conversion.
    pub final_bits_per_frame: f64,
}

impl Stage2TrainLog {
    /// Mean training loss over the last `window` steps.
    pub fn tail_mean(&self, window: usize) -> f64 {
        let n = self.loss.len();
        let tail = &self.loss[n.saturating_sub(window)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }

    /// Relative loss change between the last two `window`-sized spans.
    pub fn plateau_ratio(&self, window: usize) -> f64 {
        let n = self.loss.len();
        if n < 2 * window {
            return f64::INFINITY;
        }
        let prev: f64 =
            self.loss[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
        let last: f64 = self.loss[n - window..].iter().sum::<f64>() / window as f64;
        ((prev - last) / prev.max(1e-12)).abs()
    }
}

/// Token/feature pairs for one clip, computed once through the frozen
/// Stage-1 model.
pub struct PreparedClip {
    pub features: FeatureSequence,
    pub conds: Vec<Vec<f64>>,
}

pub fn prepare_clips(
    corpus: &[CorpusItem],
    s1: &Stage1Model,
    window: usize,
) -> Result<Vec<PreparedClip>> {
    let feat_cfg = crate::signal::FeatureConfig::default();
    corpus
        .iter()
        .map(|item| {
            let features = crate::signal::extract_features(&item.waveform, &feat_cfg)?;
            let latents = encode_frames(s1, &features)?;
            let (tokens, _, _) = vq_quantize(
                &s1.codebook,
                &latents,
                s1.cfg.tau,
                s1.cfg.downsample as u8,
            );
            let conds = cond_vectors(s1, &tokens, features.rows, window);
            Ok(PreparedClip { features, conds })
        })
        .collect()
}

pub fn train_stage2(
    corpus: &[CorpusItem],
    s1: &Stage1Model,
    cfg: &Stage2Config,
) -> Result<(VelocityModel, Stage2TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Config("train_stage2: empty corpus".into()));
    }
    let clips = prepare_clips(corpus, s1, cfg.cond_window)?;
    let mut rng = Rng::new(cfg.seed);
    let mut model = VelocityModel::init(
        cfg.feat_dim,
        cfg.cond_dim(),
        &cfg.tier.hidden_dims(),
        &mut rng,
    );
    let mut adam = AdamState::new(&model.net, cfg.lr);
    let root = Rng::new(cfg.seed);
    let mut log = Stage2TrainLog::default();

    for step in 0..cfg.steps {
        let mut step_rng = root.split(&format!("step/{step}"));
        let mut batch = Vec::new();
        for item_idx in 0..cfg.batch_clips {
            let clip = &clips[step_rng.index(clips.len())];
            let mut draw = root.split(&format!("draw/{step}/{item_idx}"));
            for frame in 0..clip.features.rows {
                let x1 = clip.features.row(frame).to_vec();
                let x0: Vec<f64> = (0..cfg.feat_dim).map(|_| draw.normal()).collect();
                let t = draw.uniform();
                batch.push(FlowBatchItem {
                    x1,
                    cond: clip.conds[frame].clone(),
                    x0,
                    t,
                });
            }
        }
        let (loss, grads) = fm_loss_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "stage2 step {step}: non-finite loss"
            )));
        }
        adam_step(&mut adam, &mut model.net, &grads)?;
        log.loss.push(loss);
    }
    let tail = log.tail_mean(200.min(cfg.steps.max(1)));
    log.final_loss_nats = 0.5 * tail;
    log.final_bits_per_frame = log.final_loss_nats / std::f64::consts::LN_2;
    Ok((model, log))
}

// --- checkpoint wiring -----------------------------------------------------

impl VelocityModel {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.push_mlp("vel", &self.net);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &Stage2Config) -> Result<VelocityModel> {
        let hidden = cfg.tier.hidden_dims();
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        let net = ckpt.get_mlp("vel", &acts)?;
        Ok(VelocityModel {
            net,
            feat_dim: cfg.feat_dim,
            cond_dim: cfg.cond_dim(),
        })
    }

    pub fn save(&self, path: &std::path::Path, cfg: &Stage2Config) -> Result<()> {
        crate::tensorkit::write_checkpoint(path, &self.to_checkpoint())?;
        let sidecar = sidecar_path(path);
        std::fs::write(sidecar, serde_json::to_vec_pretty(cfg)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(VelocityModel, Stage2Config)> {
        let ckpt = crate::tensorkit::read_checkpoint(path)?;
        let cfg: Stage2Config = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        Ok((VelocityModel::from_checkpoint(&ckpt, &cfg)?, cfg))
    }
}

fn sidecar_path(path: &std::path::Path) -> std::path::PathBuf {
    path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let x0 = [0.0, 0.0];
        let x1 = [2.0, 4.0];
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), vec![2.0, 4.0]);
        assert_eq!(interpolate(&x0, &x1, 0.25).unwrap(), vec![0.5, 1.0]);
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    fn constant_field(c: &[f64]) -> VelocityModel {
        // Zero weights + bias c on the output layer.
        let mut rng = Rng::new(1);
        let mut v = VelocityModel::init(c.len(), 0, &[4], &mut rng);
        for l in v.net.layers.iter_mut() {
            l.w.data.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        v.net.layers.last_mut().unwrap().b.copy_from_slice(c);
        v
    }

    #[test]
    fn zero_net_loss_is_target_norm() {
        // v = 0, x0 = 0, so the residual is x1 itself.
        let v = constant_field(&[0.0, 0.0]);
        let batch = vec![FlowBatchItem {
            x1: vec![1.0, 1.0],
            cond: vec![],
            x0: vec![0.0, 0.0],
            t: 0.37,
        }];
        let loss = fm_loss(&v, &batch).unwrap();
        assert!((loss - 2.0).abs() < 1e-12);
    }

    #[test]
    fn exact_velocity_gives_zero_loss() {
        let v = constant_field(&[1.0, -2.0]);
        let batch = vec![FlowBatchItem {
            x1: vec![1.5, -1.0],
            cond: vec![],
            x0: vec![0.5, 1.0],
            t: 0.8,
        }];
        // x1 - x0 = [1, -2] = the constant field.
        assert!(fm_loss(&v, &batch).unwrap() < 1e-24);
    }

    #[test]
    fn fm_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::new(17);
        let v = VelocityModel::init(3, 2, &[5], &mut rng);
        let mut draw = Rng::new(99);
        let batch: Vec<FlowBatchItem> = (0..4)
            .map(|_| FlowBatchItem {
                x1: (0..3).map(|_| draw.normal()).collect(),
                cond: (0..2).map(|_| draw.normal()).collect(),
                x0: (0..3).map(|_| draw.normal()).collect(),
                t: draw.uniform(),
            })
            .collect();
        let (_, grads) = fm_loss_grad(&v, &batch).unwrap();
        let loss_fn = |p: &MlpParams| {
            let probe = VelocityModel {
                net: p.clone(),
                feat_dim: 3,
                cond_dim: 2,
            };
            fm_loss(&probe, &batch).unwrap()
        };
        let err =
            crate::tensorkit::finite_diff_check(loss_fn, &v.net, &grads, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let c = [0.5, -1.5];
        let v = constant_field(&c);
        let conds = vec![vec![]];
        for n in [1usize, 7, 32] {
            let out = euler_sample(&v, &conds, n, 42).unwrap();
            // Recover x0 from the same seeded stream.
            let mut rng = Rng::new(42).split("frame/0");
            let x0: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            for (i, &xi) in out.row(0).iter().enumerate() {
                assert!((xi - (x0[i] + c[i])).abs() < 1e-12, "n={n}");
            }
        }
    }

    /// Linear-field model v = -x regardless of t or cond.
    fn negating_field(dim: usize) -> VelocityModel {
        let mut rng = Rng::new(1);
        let mut v = VelocityModel::init(dim, 0, &[], &mut rng);
        let l = &mut v.net.layers[0];
        l.w.data.iter_mut().for_each(|w| *w = 0.0);
        for i in 0..dim {
            *l.w.at_mut(i, i) = -1.0;
        }
        l.b.iter_mut().for_each(|b| *b = 0.0);
        v
    }

    #[test]
    fn linear_field_converges_to_exact_solution() {
        // dx/dt = -x integrates to x0 * e^{-1}; Euler error is O(1/n).
        let v = negating_field(3);
        let conds = vec![vec![]];
        let mut rng = Rng::new(5).split("frame/0");
        let x0: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
        let out = euler_sample(&v, &conds, 1024, 5).unwrap();
        for (i, &xi) in out.row(0).iter().enumerate() {
            let exact = x0[i] * (-1.0f64).exp();
            assert!(
                (xi - exact).abs() / exact.abs().max(1e-9) < 1e-3,
                "coord {i}: {xi} vs {exact}"
            );
        }
    }

    #[test]
    fn euler_error_shrinks_first_order() {
        let v = negating_field(1);
        let conds = vec![vec![]];
        let mut rng = Rng::new(5).split("frame/0");
        let x0 = rng.normal();
        let exact = x0 * (-1.0f64).exp();
        let err_at = |n: usize| {
            let out = euler_sample(&v, &conds, n, 5).unwrap();
            (out.at(0, 0) - exact).abs()
        };
        let (e8, e64, e512) = (err_at(8), err_at(64), err_at(512));
        assert!(e8 / e64 >= 3.0, "e8={e8} e64={e64}");
        assert!(e64 / e512 >= 3.0, "e64={e64} e512={e512}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = Rng::new(2);
        let v = VelocityModel::init(4, 3, &[8], &mut rng);
        let conds: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..3).map(|j| (i * 3 + j) as f64 * 0.1).collect())
            .collect();
        let a = euler_sample(&v, &conds, 16, 9).unwrap();
        let b = euler_sample(&v, &conds, 16, 9).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn tier_param_counts_increase() {
        let mut rng = Rng::new(3);
        let counts: Vec<usize> = [Tier::Small, Tier::Medium, Tier::Large]
            .iter()
            .map(|t| VelocityModel::init(32, 49, &t.hidden_dims(), &mut rng).n_params())
            .collect();
        assert!(counts[0] < counts[1] && counts[1] < counts[2], "{counts:?}");
    }
}
