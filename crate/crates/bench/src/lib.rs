//! Shared fixtures for the criterion benches under `benches/`.

use posh::synth::{generate, FamilySpec};
use posh::{HashCode, ProteinChain};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` random `d`-bit codes with lengths in 40..400.
pub fn random_codes(n: usize, d: usize, seed: u64) -> Vec<HashCode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let bits: Vec<bool> = (0..d).map(|_| rng.random()).collect();
            HashCode::from_bits(format!("s{i:07}"), rng.random_range(40..400), &bits)
        })
        .collect()
}

/// Synthetic chains of exactly `len` residues.
pub fn chains(n: usize, len: usize) -> Vec<ProteinChain> {
    let spec = FamilySpec { n_families: n, members: 1, min_len: len, max_len: len, sigma: 0.5, seed: 11 };
    generate(&spec).expect("valid spec").chains
}
