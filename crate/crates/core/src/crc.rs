//! CRC32 with the reflected polynomial 0xEDB88320 (the zlib/IEEE variant),
//! pinned here so bitstreams and checkpoints stay byte-compatible across
//! implementations.

const POLY: u32 = 0xEDB8_8320;

fn table() -> [u32; 256] {
    let mut t = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { POLY ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        t[i] = c;
        i += 1;
    }
    t
}

static TABLE: std::sync::LazyLock<[u32; 256]> = std::sync::LazyLock::new(table);

pub fn crc32(data: &[u8]) -> u32 {
    let t = &*TABLE;
    let mut c = !0u32;
    for &b in data {
        c = t[((c ^ b as u32) & 0xff) as usize] ^ (c >> 8);
    }
    !c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        // Standard check value for "123456789" under CRC-32/ISO-HDLC.
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn single_bit_flip_changes_crc() {
        let a = b"hello world".to_vec();
        for byte in 0..a.len() {
            for bit in 0..8 {
                let mut b = a.clone();
                b[byte] ^= 1 << bit;
                assert_ne!(crc32(&a), crc32(&b));
            }
        }
    }
}
