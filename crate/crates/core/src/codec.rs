//! The wire format and full encode/decode pipelines.
//!
//! A `.gacb` stream is a 19-byte header, tokens packed MSB-first at fixed
//! width ceil(log2 K) bits (zero-padded to a byte boundary), and a trailing
//! CRC32 over header + payload. Header overhead is excluded from the
//! reported bitrate and accounted separately as `HEADER_OVERHEAD_BITS`.

use crate::crc::crc32;
use crate::signal::{FeatureSequence, Waveform};
use crate::stage1::{encode_frames, vq_quantize, Stage1Model, TokenStream};
use crate::stage2::{cond_vectors, euler_sample, VelocityModel};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GACB";
const VERSION: u8 = 1;

/// Header: magic(4) version(1) sample_rate u32(4) hop u16(2) K u16(2)
/// s u8(1) bits_per_token u8(1) num_tokens u32(4) = 19 bytes, all LE.
pub const HEADER_LEN: usize = 19;
pub const HEADER_OVERHEAD_BITS: u32 = (HEADER_LEN * 8) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub sample_rate: u32,
    pub hop: u16,
    pub codebook_size: u16,
    pub downsample: u8,
    pub num_tokens: u32,
}

impl BitstreamHeader {
    pub fn bits_per_token(&self) -> u32 {
        (self.codebook_size.max(2) as f64).log2().ceil() as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Format("header: codebook_size < 2".into()));
        }
        if ![1, 2, 4].contains(&self.downsample) {
            return Err(Error::Format(format!(
                "header: downsample {} not in {{1,2,4}}",
                self.downsample
            )));
        }
        Ok(())
    }

    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(MAGIC);
        out[4] = VERSION;
        out[5..9].copy_from_slice(&self.sample_rate.to_le_bytes());
        out[9..11].copy_from_slice(&self.hop.to_le_bytes());
        out[11..13].copy_from_slice(&self.codebook_size.to_le_bytes());
        out[13] = self.downsample;
        out[14] = self.bits_per_token() as u8;
        out[15..19].copy_from_slice(&self.num_tokens.to_le_bytes());
        out
    }

    fn from_bytes(b: &[u8; HEADER_LEN]) -> Result<Self> {
        if &b[0..4] != MAGIC {
            return Err(Error::Format("bitstream: bad magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Format(format!("bitstream: unsupported version {}", b[4])));
        }
        let h = BitstreamHeader {
            sample_rate: u32::from_le_bytes(b[5..9].try_into().unwrap()),
            hop: u16::from_le_bytes(b[9..11].try_into().unwrap()),
            codebook_size: u16::from_le_bytes(b[11..13].try_into().unwrap()),
            downsample: b[13],
            num_tokens: u32::from_le_bytes(b[15..19].try_into().unwrap()),
        };
        h.validate()?;
        if b[14] as u32 != h.bits_per_token() {
            return Err(Error::Format(format!(
                "bitstream: stored bits_per_token {} != ceil(log2 {})",
                b[14], h.codebook_size
            )));
        }
        Ok(h)
    }
}

/// Serialize a token stream: header + MSB-first fixed-width payload + CRC32.
pub fn pack(ts: &TokenStream) -> Result<Vec<u8>> {
    let header = BitstreamHeader {
        sample_rate: crate::signal::SAMPLE_RATE,
        hop: 160,
        codebook_size: ts.k as u16,
        downsample: ts.s,
        num_tokens: ts.tokens.len() as u32,
    };
    header.validate().map_err(|_| Error::Config(format!("pack: invalid stream params K={} s={}", ts.k, ts.s)))?;
    let width = header.bits_per_token();
    let mut out = header.to_bytes().to_vec();
    let payload_len = ((ts.tokens.len() as u64 * width as u64).div_ceil(8)) as usize;
    let mut payload = vec![0u8; payload_len];
    let mut bit_pos = 0usize;
    for &tok in &ts.tokens {
        if tok >= ts.k {
            return Err(Error::Format(format!("pack: token {tok} out of range for K={}", ts.k)));
        }
        for b in (0..width).rev() {
            if (tok >> b) & 1 == 1 {
                payload[bit_pos / 8] |= 0x80 >> (bit_pos % 8);
            }
            bit_pos += 1;
        }
    }
    out.extend_from_slice(&payload);
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Exact inverse of `pack`. Pad bits must be zero; any single bit flip is
/// caught by the CRC.
pub fn unpack(bytes: &[u8]) -> Result<(BitstreamHeader, TokenStream)> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated {
            expected: HEADER_LEN + 4,
            got: bytes.len(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Corruption { stored, computed });
    }
    let header = BitstreamHeader::from_bytes(body[..HEADER_LEN].try_into().unwrap())?;
    let width = header.bits_per_token();
    let payload = &body[HEADER_LEN..];
    let expected_len = ((header.num_tokens as u64 * width as u64).div_ceil(8)) as usize;
    if payload.len() != expected_len {
        return Err(Error::Truncated {
            expected: HEADER_LEN + expected_len + 4,
            got: bytes.len(),
        });
    }
    let mut tokens = Vec::with_capacity(header.num_tokens as usize);
    let mut bit_pos = 0usize;
    for _ in 0..header.num_tokens {
        let mut tok = 0u32;
        for _ in 0..width {
            let bit = (payload[bit_pos / 8] >> (7 - bit_pos % 8)) & 1;
            tok = (tok << 1) | bit as u32;
            bit_pos += 1;
        }
        if tok >= header.codebook_size as u32 {
            return Err(Error::Format(format!(
                "unpack: token {tok} >= K={}",
                header.codebook_size
            )));
        }
        tokens.push(tok);
    }
    // Remaining pad bits must be zero.
    while bit_pos < payload.len() * 8 {
        if (payload[bit_pos / 8] >> (7 - bit_pos % 8)) & 1 != 0 {
            return Err(Error::Format("unpack: nonzero pad bits".into()));
        }
        bit_pos += 1;
    }
    Ok((
        header,
        TokenStream {
            tokens,
            k: header.codebook_size as u32,
            s: header.downsample,
        },
    ))
}

/// Token bitrate in bits/second; header overhead excluded.
pub fn bitrate(h: &BitstreamHeader) -> f64 {
    (h.sample_rate as f64 / h.hop as f64) / h.downsample as f64 * h.bits_per_token() as f64
}

pub fn compression_ratio(h: &BitstreamHeader, source_bits_per_second: f64) -> Result<f64> {
    let r = bitrate(h);
    if r <= 0.0 {
        return Err(Error::Numeric("compression_ratio: zero bitrate".into()));
    }
    if source_bits_per_second <= 0.0 {
        return Err(Error::Config("compression_ratio: source rate must be > 0".into()));
    }
    Ok(source_bits_per_second / r)
}

/// Transmitter path: features -> latents -> tokens -> packed bytes.
pub fn encode_clip(s1: &Stage1Model, w: &Waveform) -> Result<Vec<u8>> {
    let feat_cfg = crate::signal::FeatureConfig::default();
    let features = crate::signal::extract_features(w, &feat_cfg)?;
    let latents = encode_frames(s1, &features)?;
    let (tokens, _, _) = vq_quantize(&s1.codebook, &latents, s1.cfg.tau, s1.cfg.downsample as u8);
    pack(&tokens)
}

/// Receiver path: packed bytes -> tokens -> code vectors -> Euler sampling.
pub fn decode_clip(
    s1: &Stage1Model,
    v: &VelocityModel,
    bytes: &[u8],
    n_steps: usize,
    seed: u64,
    cond_window: usize,
) -> Result<FeatureSequence> {
    let (header, tokens) = unpack(bytes)?;
    if header.codebook_size as usize != s1.codebook.k() {
        return Err(Error::Format(format!(
            "decode_clip: stream K={} but model K={}",
            header.codebook_size,
            s1.codebook.k()
        )));
    }
    let num_frames = s1.cfg.num_frames;
    let conds = cond_vectors(s1, &tokens, num_frames, cond_window);
    euler_sample(v, &conds, n_steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ts(tokens: Vec<u32>, k: u32, s: u8) -> TokenStream {
        TokenStream { tokens, k, s }
    }

    #[test]
    fn pack_k2_by_hand() {
        let bytes = pack(&ts(vec![1, 0, 1, 1], 2, 1)).unwrap();
        let payload = &bytes[HEADER_LEN..bytes.len() - 4];
        assert_eq!(payload, &[0xB0]);
    }

    #[test]
    fn pack_k64_by_hand() {
        let bytes = pack(&ts(vec![63], 64, 1)).unwrap();
        let payload = &bytes[HEADER_LEN..bytes.len() - 4];
        assert_eq!(payload, &[0xFC]);
    }

    #[test]
    fn empty_stream_is_valid() {
        let bytes = pack(&ts(vec![], 64, 2)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        let (h, t) = unpack(&bytes).unwrap();
        assert_eq!(h.num_tokens, 0);
        assert!(t.tokens.is_empty());
    }

    #[test]
    fn out_of_range_token_rejected() {
        assert!(pack(&ts(vec![64], 64, 1)).is_err());
    }

    #[test]
    fn bit_flip_detected() {
        let bytes = pack(&ts(vec![5, 9, 63, 0], 64, 1)).unwrap();
        for byte in 0..bytes.len() {
            for bit in 0..8 {
                let mut corrupt = bytes.clone();
                corrupt[byte] ^= 1 << bit;
                assert!(unpack(&corrupt).is_err(), "flip at {byte}.{bit} undetected");
            }
        }
    }

    #[test]
    fn header_is_19_bytes() {
        assert_eq!(HEADER_LEN, 19);
        assert_eq!(HEADER_OVERHEAD_BITS, 152);
    }

    #[test]
    fn payload_length_law() {
        for (n, k, s) in [(31usize, 64u32, 1u8), (16, 128, 2), (8, 2, 4), (100, 1024, 1)] {
            let tokens: Vec<u32> = (0..n as u32).map(|i| i % k).collect();
            let bytes = pack(&ts(tokens, k, s)).unwrap();
            let width = (k as f64).log2().ceil() as usize;
            assert_eq!(
                bytes.len(),
                HEADER_LEN + (n * width).div_ceil(8) + 4
            );
        }
    }

    #[test]
    fn ladder_bitrates_exact() {
        let h = |k: u16, s: u8| BitstreamHeader {
            sample_rate: 8000,
            hop: 160,
            codebook_size: k,
            downsample: s,
            num_tokens: 0,
        };
        assert_eq!(bitrate(&h(128, 2)), 175.0);
        assert_eq!(bitrate(&h(2048, 2)), 275.0);
        assert_eq!(bitrate(&h(2, 1)), 50.0);
        assert_eq!(bitrate(&h(128, 1)), 350.0);
    }

    #[test]
    fn compression_ratios() {
        let h = BitstreamHeader {
            sample_rate: 8000,
            hop: 160,
            codebook_size: 128,
            downsample: 2,
            num_tokens: 0,
        };
        // 32 kHz x 16 bit = 512 kbps source vs 175 bps.
        let wideband = compression_ratio(&h, 32_000.0 * 16.0).unwrap();
        assert!((wideband - 2925.714285714286).abs() < 1e-9);
        // This artifact: 8 kHz x 16 bit = 128 kbps.
        let desk = compression_ratio(&h, 8_000.0 * 16.0).unwrap();
        assert!((desk - 731.4285714285714).abs() < 1e-9);
        // Ratio 1 when source equals the token rate.
        let unity = compression_ratio(&h, bitrate(&h)).unwrap();
        assert!((unity - 1.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]
        #[test]
        fn round_trip_exact(
            k_sel in 0usize..3,
            s_sel in 0usize..3,
            len in 0usize..128,
            seed in any::<u64>(),
        ) {
            let k = [2u32, 64, 1024][k_sel];
            let s = [1u8, 2, 4][s_sel];
            let mut rng = crate::tensorkit::Rng::new(seed);
            let tokens: Vec<u32> = (0..len).map(|_| rng.index(k as usize) as u32).collect();
            let stream = ts(tokens.clone(), k, s);
            let bytes = pack(&stream).unwrap();
            let (h, back) = unpack(&bytes).unwrap();
            prop_assert_eq!(back.tokens, tokens);
            prop_assert_eq!(h.codebook_size as u32, k);
            prop_assert_eq!(h.downsample, s);
        }
    }
}
