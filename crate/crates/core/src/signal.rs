//! Synthetic labeled audio corpus and the spectral front-end.
//!
//! Clips are 0.64 s at 8 kHz, drawn from three families (tones, chirps,
//! filtered noise bursts) over eight pitch buckets, giving 24 classes.
//! Features are log band-energies over 32 triangular bands on a scale that
//! is linear below 500 Hz and logarithmic above, so every pitch bucket's
//! fundamental lands in its own band.

use std::io::{Read, Write};
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::tensorkit::{Mat, Rng};
use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 8000;
pub const CLIP_LEN: usize = 5120;
pub const NUM_FAMILIES: usize = 3;
pub const NUM_PITCH_BUCKETS: usize = 8;
pub const NUM_CLASSES: usize = NUM_FAMILIES * NUM_PITCH_BUCKETS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Tone,
    Chirp,
    NoiseBurst,
}

impl Family {
    pub fn index(self) -> u8 {
        match self {
            Family::Tone => 0,
            Family::Chirp => 1,
            Family::NoiseBurst => 2,
        }
    }

    pub fn from_index(i: u8) -> Result<Family> {
        match i {
            0 => Ok(Family::Tone),
            1 => Ok(Family::Chirp),
            2 => Ok(Family::NoiseBurst),
            _ => Err(Error::Format(format!("bad family index {i}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClipSpec {
    pub family: Family,
    /// Pitch bucket in [0,7]; f0 = 110 * 2^(bucket/2) Hz.
    pub pitch_bucket: u8,
    pub amp: f64,
    /// Attack / decay as fractions of the clip length.
    pub attack: f64,
    pub decay: f64,
    /// Tone only, in [1,3].
    pub harmonics: u8,
    /// Chirp only, Hz/s.
    pub sweep_rate: f64,
}

pub fn f0_of_bucket(bucket: u8) -> f64 {
    110.0 * 2f64.powf(bucket as f64 / 2.0)
}

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Label(pub u8);

impl Label {
    pub fn from_spec(spec: &ClipSpec) -> Label {
        Label(spec.family.index() * NUM_PITCH_BUCKETS as u8 + spec.pitch_bucket)
    }

    pub fn class_id(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub n_bands: usize,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_len: 320,
            hop: 160,
            n_bands: 32,
            log_floor: 1e-8,
        }
    }
}

impl FeatureConfig {
    pub fn num_frames(&self) -> usize {
        1 + (CLIP_LEN - self.frame_len) / self.hop
    }
}

/// T x F matrix of natural-log band energies.
pub type FeatureSequence = Mat;

#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub waveform: Waveform,
    pub label: Label,
    pub spec: ClipSpec,
}

fn envelope(i: usize, len: usize, attack: f64, decay: f64) -> f64 {
    let up = (i as f64 + 1.0) / (attack * len as f64).max(1.0);
    let down = (len - i) as f64 / (decay * len as f64).max(1.0);
    up.min(down).min(1.0).max(0.0)
}

/// Deterministic waveform for (spec, seed), peak-normalized to spec.amp.
pub fn synth_clip(spec: &ClipSpec, seed: u64) -> Waveform {
    let f0 = f0_of_bucket(spec.pitch_bucket);
    let dt = 1.0 / SAMPLE_RATE as f64;
    let mut s = vec![0.0f64; CLIP_LEN];
    match spec.family {
        Family::Tone => {
            for (i, v) in s.iter_mut().enumerate() {
                let t = i as f64 * dt;
                let mut acc = 0.0;
                for k in 1..=spec.harmonics as usize {
                    acc += (2.0 * std::f64::consts::PI * k as f64 * f0 * t).sin() / k as f64;
                }
                *v = acc;
            }
        }
        Family::Chirp => {
            for (i, v) in s.iter_mut().enumerate() {
                let t = i as f64 * dt;
                let phase = 2.0 * std::f64::consts::PI * (f0 * t + 0.5 * spec.sweep_rate * t * t);
                *v = phase.sin();
            }
        }
        Family::NoiseBurst => {
            let mut rng = Rng::new(seed);
            // RBJ bandpass (0 dB peak gain) centered at f0, Q = 5.
            let w0 = 2.0 * std::f64::consts::PI * f0 / SAMPLE_RATE as f64;
            let q = 5.0;
            let alpha = w0.sin() / (2.0 * q);
            let a0 = 1.0 + alpha;
            let (b0, b2) = (alpha / a0, -alpha / a0);
            let a1 = -2.0 * w0.cos() / a0;
            let a2 = (1.0 - alpha) / a0;
            let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
            for v in s.iter_mut() {
                let x = rng.normal();
                let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
                x2 = x1;
                x1 = x;
                y2 = y1;
                y1 = y;
                *v = y;
            }
        }
    }
    for (i, v) in s.iter_mut().enumerate() {
        *v *= envelope(i, CLIP_LEN, spec.attack, spec.decay);
    }
    let peak = s.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        let scale = spec.amp / peak;
        for v in s.iter_mut() {
            *v *= scale;
        }
    }
    Waveform { samples: s }
}

fn draw_spec(rng: &mut Rng, family: Family, pitch_bucket: u8) -> ClipSpec {
    ClipSpec {
        family,
        pitch_bucket,
        amp: rng.uniform_range(0.1, 1.0),
        attack: rng.uniform_range(0.05, 0.3),
        decay: rng.uniform_range(0.05, 0.3),
        harmonics: 1 + rng.index(3) as u8,
        sweep_rate: rng.uniform_range(200.0, 2000.0),
    }
}

/// Seeded corpus; with `stratified` the class id cycles so each consecutive
/// block of 24 clips covers every class exactly once.
pub fn make_corpus(n_clips: usize, seed: u64, stratified: bool) -> Vec<CorpusItem> {
    assert!(n_clips >= 1);
    let root = Rng::new(seed);
    (0..n_clips)
        .map(|i| {
            let mut rng = root.split(&format!("clip/{i}"));
            let (family, bucket) = if stratified {
                let class = i % NUM_CLASSES;
                (
                    Family::from_index((class / NUM_PITCH_BUCKETS) as u8).unwrap(),
                    (class % NUM_PITCH_BUCKETS) as u8,
                )
            } else {
                (
                    Family::from_index(rng.index(NUM_FAMILIES) as u8).unwrap(),
                    rng.index(NUM_PITCH_BUCKETS) as u8,
                )
            };
            let spec = draw_spec(&mut rng, family, bucket);
            let synth_seed = rng.next_u64();
            CorpusItem {
                waveform: synth_clip(&spec, synth_seed),
                label: Label::from_spec(&spec),
                spec,
            }
        })
        .collect()
}

/// Band edge triples (left, center, right) in Hz. The warped axis is linear
/// below 500 Hz and logarithmic above, with 12 of the 33 edge intervals
/// spent below 500 Hz.
pub fn band_edges(cfg: &FeatureConfig) -> Vec<(f64, f64, f64)> {
    let n_edges = cfg.n_bands + 2;
    let n_intervals = (n_edges - 1) as f64;
    let linear_intervals = 12.0;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let knee = 500.0;
    // Warp constant chosen so the warped axis length splits 12:21 between
    // the linear and log regions.
    let a = (n_intervals - linear_intervals) * (knee / linear_intervals) / (nyquist / knee).ln();
    let total = knee + a * (nyquist / knee).ln();
    let delta = total / n_intervals;
    let inv = |x: f64| -> f64 {
        if x <= knee {
            x
        } else {
            knee * ((x - knee) / a).exp()
        }
    };
    (0..cfg.n_bands)
        .map(|k| {
            (
                inv(k as f64 * delta),
                inv((k + 1) as f64 * delta),
                inv((k + 2) as f64 * delta),
            )
        })
        .collect()
}

/// Hann-window + DFT + triangular band pooling + log with floor.
pub fn extract_features(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    if w.samples.len() != CLIP_LEN {
        return Err(Error::Shape(format!(
            "extract_features: waveform length {} != {CLIP_LEN}",
            w.samples.len()
        )));
    }
    let n = cfg.frame_len;
    let n_bins = n / 2 + 1;
    let bin_hz = SAMPLE_RATE as f64 / n as f64;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
        .collect();
    let edges = band_edges(cfg);
    // Precompute triangular weights per band over the DFT bins.
    let band_weights: Vec<Vec<(usize, f64)>> = edges
        .iter()
        .map(|&(l, c, r)| {
            (0..n_bins)
                .filter_map(|bin| {
                    let f = bin as f64 * bin_hz;
                    let wgt = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    (wgt > 0.0).then_some((bin, wgt))
                })
                .collect()
        })
        .collect();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let t = cfg.num_frames();
    let mut out = Mat::zeros(t, cfg.n_bands);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for frame in 0..t {
        let start = frame * cfg.hop;
        for i in 0..n {
            buf[i] = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr()).collect();
        for (band, weights) in band_weights.iter().enumerate() {
            let energy: f64 = weights.iter().map(|&(bin, w)| w * power[bin]).sum();
            *out.at_mut(frame, band) = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Corpus file format: magic "GACC", version u8, clip count u32 LE, seed u64
// LE, then per clip: label u8, family u8, pitch u8, harmonics u8, amp f64,
// attack f64, decay f64, sweep_rate f64 (all LE), 5120 i16 LE PCM samples.
// ---------------------------------------------------------------------------

const CORPUS_MAGIC: &[u8; 4] = b"GACC";

pub fn write_corpus(path: &Path, items: &[CorpusItem], seed: u64) -> Result<()> {
    let mut out = Vec::with_capacity(16 + items.len() * (4 + 32 + CLIP_LEN * 2));
    out.extend_from_slice(CORPUS_MAGIC);
    out.push(1u8);
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for item in items {
        out.push(item.label.0);
        out.push(item.spec.family.index());
        out.push(item.spec.pitch_bucket);
        out.push(item.spec.harmonics);
        out.extend_from_slice(&item.spec.amp.to_le_bytes());
        out.extend_from_slice(&item.spec.attack.to_le_bytes());
        out.extend_from_slice(&item.spec.decay.to_le_bytes());
        out.extend_from_slice(&item.spec.sweep_rate.to_le_bytes());
        for &s in &item.waveform.samples {
            let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
            out.extend_from_slice(&q.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(Vec<CorpusItem>, u64)> {
    let mut f = std::fs::File::open(path)?;
    let mut header = [0u8; 17];
    f.read_exact(&mut header)?;
    if &header[0..4] != CORPUS_MAGIC {
        return Err(Error::Format("corpus: bad magic".into()));
    }
    if header[4] != 1 {
        return Err(Error::Format(format!("corpus: unsupported version {}", header[4])));
    }
    let n = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(header[9..17].try_into().unwrap());
    let mut items = Vec::with_capacity(n);
    let mut rec = vec![0u8; 4 + 32 + CLIP_LEN * 2];
    for _ in 0..n {
        f.read_exact(&mut rec)?;
        let label = Label(rec[0]);
        let spec = ClipSpec {
            family: Family::from_index(rec[1])?,
            pitch_bucket: rec[2],
            harmonics: rec[3],
            amp: f64::from_le_bytes(rec[4..12].try_into().unwrap()),
            attack: f64::from_le_bytes(rec[12..20].try_into().unwrap()),
            decay: f64::from_le_bytes(rec[20..28].try_into().unwrap()),
            sweep_rate: f64::from_le_bytes(rec[28..36].try_into().unwrap()),
        };
        let samples: Vec<f64> = rec[36..]
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as f64 / 32767.0)
            .collect();
        items.push(CorpusItem {
            waveform: Waveform { samples },
            label,
            spec,
        });
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("corpus: trailing bytes".into()));
    }
    Ok((items, seed))
}

/// Convenience for tests and the CLI `decode` path: features to CSV rows.
pub fn features_to_csv<W: Write>(features: &FeatureSequence, mut w: W) -> Result<()> {
    for r in 0..features.rows {
        let row: Vec<String> = features.row(r).iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_tone_spec() -> ClipSpec {
        ClipSpec {
            family: Family::Tone,
            pitch_bucket: 0,
            amp: 1.0,
            attack: 1e-9,
            decay: 1e-9,
            harmonics: 1,
            sweep_rate: 0.0,
        }
    }

    #[test]
    fn pure_tone_is_unit_peak_sinusoid() {
        let w = synth_clip(&flat_tone_spec(), 0);
        let peak = w.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 1e-12);
        // Crossings consistent with 110 Hz: count sign changes.
        let crossings = w
            .samples
            .windows(2)
            .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0))
            .count();
        let expected = (2.0 * 110.0 * CLIP_LEN as f64 / SAMPLE_RATE as f64).round() as usize;
        assert!((crossings as i64 - expected as i64).abs() <= 2);
    }

    #[test]
    fn amp_scales_linearly() {
        let a = synth_clip(&flat_tone_spec(), 0);
        let mut spec = flat_tone_spec();
        spec.amp = 0.5;
        let b = synth_clip(&spec, 0);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((y - 0.5 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = ClipSpec {
            family: Family::NoiseBurst,
            pitch_bucket: 3,
            amp: 0.7,
            attack: 0.1,
            decay: 0.2,
            harmonics: 1,
            sweep_rate: 0.0,
        };
        let a = synth_clip(&spec, 99);
        let b = synth_clip(&spec, 99);
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stratified_24_covers_every_class() {
        let corpus = make_corpus(24, 1, true);
        let mut seen = [false; NUM_CLASSES];
        for item in &corpus {
            seen[item.label.class_id()] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = make_corpus(50, 5, false);
        let b = make_corpus(50, 5, false);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert!(x
                .waveform
                .samples
                .iter()
                .zip(&y.waveform.samples)
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn class_histogram_is_near_uniform() {
        // 24000 uniform draws over 24 classes: each count is Binomial
        // (n=24000, p=1/24), mean 1000, sd ~31; [800, 1200] is ~6.4 sigma.
        let corpus = make_corpus(24_000, 1, false);
        let mut counts = [0usize; NUM_CLASSES];
        for item in &corpus {
            counts[item.label.class_id()] += 1;
        }
        for (c, &n) in counts.iter().enumerate() {
            assert!((800..=1200).contains(&n), "class {c} count {n}");
        }
    }

    #[test]
    fn zero_waveform_hits_log_floor() {
        let cfg = FeatureConfig::default();
        let w = Waveform {
            samples: vec![0.0; CLIP_LEN],
        };
        let f = extract_features(&w, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(f.data.iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_in_band_nearest_110hz() {
        let cfg = FeatureConfig::default();
        let w = synth_clip(&flat_tone_spec(), 0);
        let f = extract_features(&w, &cfg).unwrap();
        let mid = cfg.num_frames() / 2;
        let frame = f.row(mid);
        let argmax = frame
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let edges = band_edges(&cfg);
        let nearest = edges
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 .1 - 110.0)
                    .abs()
                    .partial_cmp(&(b.1 .1 - 110.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        assert_eq!(argmax, nearest);
    }

    #[test]
    fn pitch_buckets_map_to_distinct_bands() {
        let cfg = FeatureConfig::default();
        let edges = band_edges(&cfg);
        let mut bands = Vec::new();
        for bucket in 0..NUM_PITCH_BUCKETS as u8 {
            let f0 = f0_of_bucket(bucket);
            let nearest = edges
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 .1 - f0).abs().partial_cmp(&(b.1 .1 - f0).abs()).unwrap()
                })
                .unwrap()
                .0;
            bands.push(nearest);
        }
        let mut uniq = bands.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), NUM_PITCH_BUCKETS, "bands {bands:?}");
    }

    #[test]
    fn halving_amplitude_drops_features_by_ln4() {
        let cfg = FeatureConfig::default();
        let w = synth_clip(&flat_tone_spec(), 0);
        let half = Waveform {
            samples: w.samples.iter().map(|v| v * 0.5).collect(),
        };
        let fa = extract_features(&w, &cfg).unwrap();
        let fb = extract_features(&half, &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        for (a, b) in fa.data.iter().zip(&fb.data) {
            if *b > floor + 1e-12 {
                assert!((a - b - 4.0f64.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn frame_count_is_31() {
        let cfg = FeatureConfig::default();
        assert_eq!(cfg.num_frames(), 31);
        let w = synth_clip(&flat_tone_spec(), 0);
        let f = extract_features(&w, &cfg).unwrap();
        assert_eq!(f.rows, 31);
        assert_eq!(f.cols, 32);
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let items = make_corpus(10, 3, true);
        write_corpus(&path, &items, 3).unwrap();
        let (back, seed) = read_corpus(&path).unwrap();
        assert_eq!(seed, 3);
        assert_eq!(back.len(), 10);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            for (x, y) in a.waveform.samples.iter().zip(&b.waveform.samples) {
                assert!((x - y).abs() <= 1.0 / 32767.0);
            }
        }
        // Writing the same items twice is byte-identical.
        let path2 = dir.path().join("c2.bin");
        write_corpus(&path2, &items, 3).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
