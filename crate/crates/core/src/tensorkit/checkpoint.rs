//! Checkpoint file format.
//!
//! Layout: magic "GACP", version u8 (=1), block count u32 LE, then per block
//! name length u16 LE + name bytes + rows u32 LE + cols u32 LE + row-major
//! f64 LE values, and a trailing CRC32 over everything before it.

use std::path::Path;

use super::{Activation, Layer, Mat, MlpParams};
use crate::crc::crc32;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"GACP";
const VERSION: u8 = 1;

/// Ordered named parameter blocks. Vectors are stored as 1 x n.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub blocks: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: &str, m: Mat) {
        self.blocks.push((name.to_string(), m));
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("checkpoint: missing block {name:?}")))
    }

    /// Store an MLP as blocks `{prefix}.w{i}` / `{prefix}.b{i}`.
    pub fn push_mlp(&mut self, prefix: &str, p: &MlpParams) {
        for (i, l) in p.layers.iter().enumerate() {
            self.push(&format!("{prefix}.w{i}"), l.w.clone());
            self.push(
                &format!("{prefix}.b{i}"),
                Mat {
                    rows: 1,
                    cols: l.b.len(),
                    data: l.b.clone(),
                },
            );
        }
    }

    /// Rebuild an MLP from `{prefix}.*` blocks; activations must be supplied
    /// since the file stores only values.
    pub fn get_mlp(&self, prefix: &str, acts: &[Activation]) -> Result<MlpParams> {
        let mut layers = Vec::with_capacity(acts.len());
        for (i, &act) in acts.iter().enumerate() {
            let w = self.get(&format!("{prefix}.w{i}"))?.clone();
            let b = self.get(&format!("{prefix}.b{i}"))?.data.clone();
            if b.len() != w.rows {
                return Err(Error::Format(format!(
                    "checkpoint: bias/weight shape mismatch in {prefix}.{i}"
                )));
            }
            layers.push(Layer { w, b, act });
        }
        Ok(MlpParams { layers })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, m) in &self.blocks {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(Error::Truncated {
                expected: 13,
                got: bytes.len(),
            });
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Corruption { stored, computed });
        }
        if &body[0..4] != MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        if body[4] != VERSION {
            return Err(Error::Format(format!("checkpoint: unsupported version {}", body[4])));
        }
        let n_blocks = u32::from_le_bytes(body[5..9].try_into().unwrap()) as usize;
        let mut pos = 9;
        let mut ckpt = Checkpoint::default();
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(Error::Truncated {
                    expected: *pos + n,
                    got: body.len(),
                });
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        for _ in 0..n_blocks {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("checkpoint: non-utf8 block name".into()))?;
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            ckpt.push(&name, Mat { rows, cols, data });
        }
        if pos != body.len() {
            return Err(Error::Format("checkpoint: trailing bytes".into()));
        }
        Ok(ckpt)
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::Rng;

    #[test]
    fn round_trip() {
        let mut rng = Rng::new(2);
        let p = MlpParams::init(&[4, 3, 2], &[Activation::Tanh, Activation::Identity], &mut rng);
        let mut ckpt = Checkpoint::default();
        ckpt.push_mlp("enc", &p);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let q = back
            .get_mlp("enc", &[Activation::Tanh, Activation::Identity])
            .unwrap();
        assert_eq!(p.flatten(), q.flatten());
    }

    #[test]
    fn corruption_detected() {
        let mut ckpt = Checkpoint::default();
        ckpt.push("x", Mat::zeros(2, 2));
        let mut bytes = ckpt.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Corruption { .. })
        ));
    }

    #[test]
    fn missing_block_is_error() {
        let ckpt = Checkpoint::default();
        assert!(ckpt.get("nope").is_err());
    }
}
