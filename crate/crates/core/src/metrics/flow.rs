//! Exhaustive block-matching optical flow.

use crate::datapipe::world::{CHANNELS, SIZE};
use crate::embed::check_image;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub trait FlowEstimator: Sync {
    /// Per-block displacement from `a` to `b`; `None` marks blocks with no
    /// texture to track.
    fn block_flow(&self, a: &Tensor, b: &Tensor) -> Result<Vec<Option<(i64, i64)>>>;

    /// Mean displacement magnitude over trackable blocks, 0 if none.
    fn mean_magnitude(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        let flows: Vec<(i64, i64)> = self.block_flow(a, b)?.into_iter().flatten().collect();
        if flows.is_empty() {
            return Ok(0.0);
        }
        Ok(flows.iter().map(|(dx, dy)| ((dx * dx + dy * dy) as f64).sqrt()).sum::<f64>() / flows.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMatcher {
    pub block: usize,
    pub radius: i64,
    /// Minimum in-bounds fraction of a displaced block.
    pub min_overlap: f64,
}

impl Default for BlockMatcher {
    fn default() -> Self {
        BlockMatcher { block: 4, radius: 3, min_overlap: 0.5 }
    }
}

impl BlockMatcher {
    /// Mean absolute difference over the in-bounds part of the displaced
    /// block, or `None` when too little of it is in bounds.
    fn cost(&self, a: &[f64], b: &[f64], bx: usize, by: usize, dx: i64, dy: i64) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in by..by + self.block {
            for x in bx..bx + self.block {
                let (tx, ty) = (x as i64 + dx, y as i64 + dy);
                if tx < 0 || ty < 0 || tx >= SIZE as i64 || ty >= SIZE as i64 {
                    continue;
                }
                let (i, j) = ((y * SIZE + x) * CHANNELS, (ty as usize * SIZE + tx as usize) * CHANNELS);
                for c in 0..CHANNELS {
                    sum += (a[i + c] - b[j + c]).abs();
                }
                count += 1;
            }
        }
        ((count as f64) >= self.min_overlap * (self.block * self.block) as f64).then(|| sum / (count * CHANNELS) as f64)
    }

    fn is_flat(a: &[f64], bx: usize, by: usize, block: usize) -> bool {
        let first = (by * SIZE + bx) * CHANNELS;
        let reference = &a[first..first + CHANNELS];
        (by..by + block).all(|y| (bx..bx + block).all(|x| &a[(y * SIZE + x) * CHANNELS..][..CHANNELS] == reference))
    }
}

impl FlowEstimator for BlockMatcher {
    fn block_flow(&self, a: &Tensor, b: &Tensor) -> Result<Vec<Option<(i64, i64)>>> {
        check_image("block_flow", a)?;
        check_image("block_flow", b)?;
        if self.block == 0 || !SIZE.is_multiple_of(self.block) || self.radius < 0 {
            return Err(Error::Config(format!("invalid block matcher {self:?}")));
        }
        let (ad, bd) = (a.data(), b.data());
        let n = SIZE / self.block;
        let mut out = Vec::with_capacity(n * n);
        for gy in 0..n {
            for gx in 0..n {
                let (bx, by) = (gx * self.block, gy * self.block);
                if Self::is_flat(ad, bx, by, self.block) {
                    out.push(None);
                    continue;
                }
                let mut best: Option<(f64, i64, (i64, i64))> = None;
                for dy in -self.radius..=self.radius {
                    for dx in -self.radius..=self.radius {
                        let Some(c) = self.cost(ad, bd, bx, by, dx, dy) else { continue };
                        let norm = dx * dx + dy * dy;
                        let better = match best {
                            None => true,
                            Some((bc, bn, _)) => c < bc - 1e-12 || ((c - bc).abs() <= 1e-12 && norm < bn),
                        };
                        if better {
                            best = Some((c, norm, (dx, dy)));
                        }
                    }
                }
                out.push(best.map(|(_, _, d)| d));
            }
        }
        Ok(out)
    }
}
