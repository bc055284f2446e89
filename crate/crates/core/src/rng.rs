//! Seeded random streams. Every consumer draws from its own ChaCha20 stream
//! derived from the run seed, so adding a draw in one place never shifts the
//! values another component sees.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::matrix::DenseMatrix;

pub(crate) mod streams {
    pub const BACKBONE: u64 = 1;
    pub const TEACHER: u64 = 2;
    pub const DATA: u64 = 3;
    pub const CALIBRATION: u64 = 4;
    /// Adapter initialisation seeds are derived from this plus a client index.
    pub const ADAPTER_INIT: u64 = 16;
}

pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub(crate) fn gaussian(rng: &mut ChaCha20Rng, rows: usize, cols: usize, std: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub(crate) fn mix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
