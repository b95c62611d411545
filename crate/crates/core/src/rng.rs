use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// Seeded generator for one named stream; streams with different ids are
/// independent, which lets per-item work run in any order.
pub fn stream(seed: u64, stream_id: u64) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Index drawn from unnormalised non-negative weights by inverse CDF.
pub fn categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left u at the top edge; take the last non-zero weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
