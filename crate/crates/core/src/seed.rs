//! Seed derivation.
//!
//! One global seed fans out into per-purpose seeds by hashing a label and
//! mixing it through splitmix64, so adding a new consumer never shifts the
//! streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of the splitmix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// `splitmix64(global ^ fnv1a(label))`.
pub fn derive(global: u64, label: &str) -> u64 {
    splitmix64(global ^ fnv1a(label))
}

/// Seed for a given training step of a stream, independent of how many steps ran before.
pub fn derive_step(stream: u64, step: u64) -> u64 {
    splitmix64(stream ^ splitmix64(step.wrapping_add(1)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splitmix_reference_values() {
        // First outputs of the reference splitmix64 generator seeded with 0
        // are the finalizer applied to successive multiples of the golden gamma.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(
            splitmix64(0x9E37_79B9_7F4A_7C15),
            0x6E78_9E6A_A1B9_65F4
        );
    }

    #[test]
    fn labels_are_independent() {
        let a = derive(7, "stage1");
        let b = derive(7, "stage2");
        assert_ne!(a, b);
        assert_eq!(a, derive(7, "stage1"));
        assert_ne!(derive_step(a, 0), derive_step(a, 1));
    }
}
