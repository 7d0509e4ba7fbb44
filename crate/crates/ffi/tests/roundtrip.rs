//! End-to-end check that the C ABI produces the same bytes and features as
//! calling the core library directly.

use std::ffi::CString;

use gac_core::signal::{make_corpus, Waveform};
use gac_core::stage1::{train_stage1, Stage1Config};
use gac_core::stage2::{train_stage2, Stage2Config, Tier};
use gac_ffi::*;

#[test]
fn ffi_matches_core_paths() {
    let corpus = make_corpus(24, 11, true);
    let s1_cfg = Stage1Config {
        codebook_size: 16,
        steps: 150,
        ..Default::default()
    };
    let (s1, _) = train_stage1(&corpus, &s1_cfg, 11).unwrap();
    let s2_cfg = Stage2Config {
        tier: Tier::Small,
        steps: 60,
        seed: 11,
        ..Default::default()
    };
    let (vel, _) = train_stage2(&corpus, &s1, &s2_cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let s1_path = dir.path().join("s1.gacp");
    let s2_path = dir.path().join("s2.gacp");
    s1.save(&s1_path).unwrap();
    vel.save(&s2_path, &s2_cfg).unwrap();

    let s1_c = CString::new(s1_path.to_str().unwrap()).unwrap();
    let s2_c = CString::new(s2_path.to_str().unwrap()).unwrap();
    let mut h1: *mut GacStage1 = std::ptr::null_mut();
    let mut h2: *mut GacStage2 = std::ptr::null_mut();
    unsafe {
        assert_eq!(gac_stage1_load(s1_c.as_ptr(), &mut h1), GacStatus::Ok);
        assert_eq!(gac_stage2_load(s2_c.as_ptr(), &mut h2), GacStatus::Ok);
    }

    // Quantize to i16 exactly as the FFI caller would hold PCM, and build
    // the reference waveform from the same quantized samples.
    let pcm: Vec<i16> = corpus[0]
        .waveform
        .samples
        .iter()
        .map(|&v| (v * 32767.0).round().clamp(-32768.0, 32767.0) as i16)
        .collect();
    let reference = Waveform {
        samples: pcm.iter().map(|&s| s as f64 / 32767.0).collect(),
    };
    let expected_bytes = gac_core::codec::encode_clip(&s1, &reference).unwrap();

    let mut buf: *mut u8 = std::ptr::null_mut();
    let mut len = 0usize;
    unsafe {
        assert_eq!(
            gac_encode_clip(h1, pcm.as_ptr(), pcm.len(), &mut buf, &mut len),
            GacStatus::Ok
        );
        let got = std::slice::from_raw_parts(buf, len).to_vec();
        assert_eq!(got, expected_bytes);

        let expected =
            gac_core::codec::decode_clip(&s1, &vel, &got, 8, 7, s2_cfg.cond_window).unwrap();
        let mut feat: *mut f64 = std::ptr::null_mut();
        let (mut rows, mut cols) = (0usize, 0usize);
        assert_eq!(
            gac_decode_clip(h1, h2, buf, len, 8, 7, &mut feat, &mut rows, &mut cols),
            GacStatus::Ok
        );
        assert_eq!((rows, cols), (expected.rows, expected.cols));
        let got_feat = std::slice::from_raw_parts(feat, rows * cols);
        assert_eq!(got_feat, expected.data.as_slice());

        // Corrupted stream surfaces as a format error.
        let mut bad = got.clone();
        let last = bad.len() - 1;
        bad[last] ^= 0x01;
        let mut f2: *mut f64 = std::ptr::null_mut();
        assert_eq!(
            gac_decode_clip(h1, h2, bad.as_ptr(), bad.len(), 8, 7, &mut f2, &mut rows, &mut cols),
            GacStatus::Format
        );

        gac_features_free(feat, rows, cols);
        gac_bytes_free(buf, len);
        gac_stage1_free(h1);
        gac_stage2_free(h2);
    }
}
