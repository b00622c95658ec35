use super::{ModelConfig, NUM_SPECIAL};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// Whitespace tokenizer hashing each word into the non-reserved id range.
pub fn tokenize(text: &str, config: &ModelConfig) -> Vec<u32> {
    let span = (config.vocab_size - NUM_SPECIAL) as u64;
    text.split_whitespace()
        .map(|w| (NUM_SPECIAL as u64 + fnv1a64(w.as_bytes()) % span) as u32)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text() {
        assert!(tokenize("", &ModelConfig::default()).is_empty());
        assert!(tokenize("   \t\n", &ModelConfig::default()).is_empty());
    }

    #[test]
    fn hashed_ids() {
        let cfg = ModelConfig::default();
        let ids = tokenize("w7 w7 w9", &cfg);
        // FNV-1a 64 computed byte by byte: start at the offset basis, xor the byte,
        // multiply by the prime modulo 2^64.
        let by_hand = |w: &str| {
            let mut h: u128 = 0xcbf29ce484222325;
            for b in w.bytes() {
                h ^= b as u128;
                h = (h * 0x100000001b3) % (1u128 << 64);
            }
            (4 + h % 4092) as u32
        };
        assert_eq!(ids, vec![by_hand("w7"), by_hand("w7"), by_hand("w9")]);
        assert_ne!(ids[0], ids[2]);
        assert!(ids.iter().all(|&i| (4..4096).contains(&i)));
        assert_eq!(ids, tokenize("w7 w7 w9", &cfg));
    }

    #[test]
    fn reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
