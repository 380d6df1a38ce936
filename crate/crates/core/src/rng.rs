//! Seed derivation for independent, order-free random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a derived stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamPurpose {
    Topology = 1,
    Partition = 2,
    ModelInit = 3,
    Sampling = 4,
    TrainDecision = 5,
    Dataset = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `(seed, node, round, purpose)` into a 64-bit stream seed.
pub fn derive_seed(seed: u64, node: u64, round: u64, purpose: StreamPurpose) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ node);
    h = splitmix64(h ^ round.rotate_left(17));
    splitmix64(h ^ (purpose as u64).rotate_left(41))
}

/// A private ChaCha stream for one `(seed, node, round, purpose)` tuple.
pub fn stream(seed: u64, node: u64, round: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, node, round, purpose))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn purposes_do_not_collide() {
        let a = derive_seed(7, 3, 0, StreamPurpose::Sampling);
        let b = derive_seed(7, 3, 0, StreamPurpose::TrainDecision);
        let c = derive_seed(7, 4, 0, StreamPurpose::Sampling);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn streams_are_reproducible() {
        let x: Vec<u64> = stream(1, 2, 3, StreamPurpose::Dataset).random_iter().take(4).collect();
        let y: Vec<u64> = stream(1, 2, 3, StreamPurpose::Dataset).random_iter().take(4).collect();
        assert_eq!(x, y);
    }
}
