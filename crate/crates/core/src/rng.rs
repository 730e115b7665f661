//! Reproducible random streams. Every consumer draws from its own lane, and
//! each unit of work (iteration, chunk) from its own stream within the lane,
//! so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LANE_INIT: u64 = 1;
pub const LANE_BATCH: u64 = 2;
pub const LANE_PROBE: u64 = 3;
pub const LANE_MONTE_CARLO: u64 = 4;

pub fn lane_rng(seed: u64, lane: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ lane.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(index);
    rng
}
