//! Mask generators over the patch grid: blockwise (union of random
//! rectangles) and uniform random. The context set is always the exact
//! complement of the masked set.

use rand::Rng;
use std::collections::BTreeSet;

/// Minimum patch area of a sampled block.
pub const MIN_BLOCK: usize = 16;
/// Aspect ratio bounds for sampled blocks (log-uniform in between).
pub const MIN_ASPECT: f64 = 0.3;

/// The set of masked patch indices plus grid geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub grid_h: usize,
    pub grid_w: usize,
    masked: BTreeSet<usize>,
}

impl MaskSet {
    pub fn from_indices(grid_h: usize, grid_w: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let n = grid_h * grid_w;
        let masked: BTreeSet<usize> = indices.into_iter().inspect(|&i| assert!(i < n)).collect();
        MaskSet { grid_h, grid_w, masked }
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.masked.contains(&index)
    }

    /// Masked indices in ascending order.
    pub fn masked_indices(&self) -> Vec<usize> {
        self.masked.iter().copied().collect()
    }

    /// Context = complement of the masked set, ascending.
    pub fn context_indices(&self) -> Vec<usize> {
        (0..self.num_patches()).filter(|i| !self.is_masked(*i)).collect()
    }

    /// Per-patch visibility in row-major order (true = visible).
    pub fn visibility(&self) -> Vec<bool> {
        (0..self.num_patches()).map(|i| !self.is_masked(i)).collect()
    }

    /// Mean number of masked 4-neighbors per masked cell; the spatial
    /// contiguity statistic that separates blockwise from random masks.
    pub fn contiguity(&self) -> f64 {
        if self.masked.is_empty() {
            return 0.0;
        }
        let (gh, gw) = (self.grid_h as isize, self.grid_w as isize);
        let mut total = 0usize;
        for &i in &self.masked {
            let (r, c) = ((i / self.grid_w) as isize, (i % self.grid_w) as isize);
            for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nr, nc) = (r + dr, c + dc);
                if nr >= 0 && nr < gh && nc >= 0 && nc < gw {
                    let j = (nr * gw + nc) as usize;
                    if self.is_masked(j) {
                        total += 1;
                    }
                }
            }
        }
        total as f64 / self.masked.len() as f64
    }
}

/// A sampled rectangle on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn contains(&self, grid_w: usize, index: usize) -> bool {
        let (r, c) = (index / grid_w, index % grid_w);
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    fn cells(&self, grid_w: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in self.top..self.top + self.height {
            for c in self.left..self.left + self.width {
                out.push(r * grid_w + c);
            }
        }
        out
    }
}

fn target_count(grid_h: usize, grid_w: usize, ratio: f64) -> usize {
    assert!(ratio > 0.0 && ratio < 1.0, "mask ratio must be in (0, 1)");
    (ratio * (grid_h * grid_w) as f64).floor() as usize
}

/// Uniform sample without replacement of exactly `floor(ratio * N)` patches.
pub fn random_mask<R: Rng>(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> MaskSet {
    let n = grid_h * grid_w;
    let k = target_count(grid_h, grid_w, ratio);
    let picked = rand::seq::index::sample(rng, n, k);
    MaskSet::from_indices(grid_h, grid_w, picked.iter())
}

/// Blockwise mask: union of possibly overlapping random-aspect rectangles,
/// trimmed to exactly `floor(ratio * N)` cells. Also returns the sampled
/// blocks so tests can audit the construction.
pub fn blockwise_mask_traced<R: Rng>(
    grid_h: usize,
    grid_w: usize,
    ratio: f64,
    rng: &mut R,
) -> (MaskSet, Vec<Block>) {
    let n = grid_h * grid_w;
    let target = target_count(grid_h, grid_w, ratio);
    if target < MIN_BLOCK {
        eprintln!(
            "warning: {grid_h}x{grid_w} grid at ratio {ratio} is too small for blockwise masking; falling back to random masking"
        );
        return (random_mask(grid_h, grid_w, ratio, rng), vec![]);
    }
    let mut masked: BTreeSet<usize> = BTreeSet::new();
    let mut blocks = Vec::new();
    let mut last_added: Vec<usize> = Vec::new();
    let mut last_block = Block { top: 0, left: 0, height: 0, width: 0 };
    while masked.len() < target {
        let remaining = target - masked.len();
        let max_area = remaining.max(MIN_BLOCK).min(n);
        let area = rng.random_range(MIN_BLOCK..=max_area);
        let log_a = rng.random_range(MIN_ASPECT.ln()..=(1.0 / MIN_ASPECT).ln());
        let aspect = log_a.exp();
        let bh = (((area as f64) * aspect).sqrt().round() as usize).clamp(1, grid_h);
        let bw = (((area as f64) / aspect).sqrt().round() as usize).clamp(1, grid_w);
        let top = rng.random_range(0..=grid_h - bh);
        let left = rng.random_range(0..=grid_w - bw);
        let block = Block { top, left, height: bh, width: bw };
        let mut added = Vec::new();
        for cell in block.cells(grid_w) {
            if masked.insert(cell) {
                added.push(cell);
            }
        }
        blocks.push(block);
        if !added.is_empty() {
            last_added = added;
            last_block = block;
        }
    }
    // trim the overshoot from the last contributing block, farthest from
    // its center first
    if masked.len() > target {
        let cy = last_block.top as f64 + (last_block.height as f64 - 1.0) / 2.0;
        let cx = last_block.left as f64 + (last_block.width as f64 - 1.0) / 2.0;
        let mut order = last_added.clone();
        order.sort_by(|&a, &b| {
            let da = dist2(a, grid_w, cy, cx);
            let db = dist2(b, grid_w, cy, cx);
            db.partial_cmp(&da).unwrap().then(a.cmp(&b))
        });
        for cell in order {
            if masked.len() == target {
                break;
            }
            masked.remove(&cell);
        }
    }
    (
        MaskSet { grid_h, grid_w, masked },
        blocks,
    )
}

fn dist2(index: usize, grid_w: usize, cy: f64, cx: f64) -> f64 {
    let r = (index / grid_w) as f64;
    let c = (index % grid_w) as f64;
    (r - cy) * (r - cy) + (c - cx) * (c - cx)
}

pub fn blockwise_mask<R: Rng>(grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> MaskSet {
    blockwise_mask_traced(grid_h, grid_w, ratio, rng).0
}

/// Mask strategy selector, config key `mask.strategy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Blockwise,
    Random,
}

impl MaskStrategy {
    pub fn sample<R: Rng>(&self, grid_h: usize, grid_w: usize, ratio: f64, rng: &mut R) -> MaskSet {
        match self {
            MaskStrategy::Blockwise => blockwise_mask(grid_h, grid_w, ratio, rng),
            MaskStrategy::Random => random_mask(grid_h, grid_w, ratio, rng),
        }
    }
}

impl std::str::FromStr for MaskStrategy {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blockwise" => Ok(MaskStrategy::Blockwise),
            "random" => Ok(MaskStrategy::Random),
            other => Err(crate::error::Error::Config(format!(
                "unknown mask strategy '{other}' (expected blockwise|random)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(random_mask(2, 2, 0.5, &mut rng).len(), 2);
        assert_eq!(random_mask(14, 14, 0.25, &mut rng).len(), 49);
    }

    #[test]
    fn blockwise_exact_count_14x14() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let m = blockwise_mask(14, 14, 0.6, &mut rng);
            assert_eq!(m.len(), 117); // floor(0.6 * 196)
        }
    }

    #[test]
    fn near_full_ratio_leaves_context_nonempty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = blockwise_mask(14, 14, 0.99, &mut rng);
        assert!(m.len() < m.num_patches());
        assert!(!m.context_indices().is_empty());
    }

    #[test]
    fn masked_cells_come_from_sampled_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let (m, blocks) = blockwise_mask_traced(14, 14, 0.6, &mut rng);
            for idx in m.masked_indices() {
                assert!(
                    blocks.iter().any(|b| b.contains(14, idx)),
                    "masked cell {idx} not covered by any sampled block"
                );
            }
        }
    }

    #[test]
    fn tiny_grid_falls_back_to_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, blocks) = blockwise_mask_traced(3, 3, 0.5, &mut rng);
        assert!(blocks.is_empty());
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn random_mask_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 14 * 14;
        let draws = 10_000;
        let mut counts = vec![0u32; n];
        for _ in 0..draws {
            for idx in random_mask(14, 14, 0.6, &mut rng).masked_indices() {
                counts[idx] += 1;
            }
        }
        // 117/196 per-cell probability, tolerance 0.02 as an ~4-sigma bound
        let expect = 117.0 / 196.0;
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - expect).abs() < 0.02, "freq {freq} vs {expect}");
        }
    }

    #[test]
    fn seed_reproducibility() {
        let a = blockwise_mask(14, 14, 0.6, &mut ChaCha8Rng::seed_from_u64(9));
        let b = blockwise_mask(14, 14, 0.6, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn blockwise_more_contiguous_than_random() {
        let mut rng_b = ChaCha8Rng::seed_from_u64(10);
        let mut rng_r = ChaCha8Rng::seed_from_u64(11);
        let mut cb = 0.0;
        let mut cr = 0.0;
        for _ in 0..1000 {
            cb += blockwise_mask(14, 14, 0.6, &mut rng_b).contiguity();
            cr += random_mask(14, 14, 0.6, &mut rng_r).contiguity();
        }
        assert!(cb > cr, "blockwise contiguity {cb} <= random {cr}");
    }
}
