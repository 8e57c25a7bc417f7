use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::{Grid3, Mask3};
use crate::error::{Error, Result};

/// Aligned masks for every stage, finest first. Stage `i + 1` has half the
/// resolution of stage `i`, and every 2³ block of stage `i` agrees with the
/// corresponding voxel of stage `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPyramid {
    stages: Vec<Mask3>,
    ratio: f64,
    seed: u64,
}

/// `floor(ratio * voxels)`.
pub fn masked_target(ratio: f64, voxels: usize) -> usize {
    num_traits::Float::floor(ratio * voxels as f64) as usize
}

impl MaskPyramid {
    /// Samples the coarsest mask uniformly without replacement and
    /// upsamples it to every finer stage.
    pub fn build(coarse: Grid3, n_stages: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidRatio(ratio));
        }
        if n_stages == 0 {
            return Err(Error::invalid("build_mask_pyramid", "need at least one stage"));
        }
        if coarse.is_empty() {
            return Err(Error::invalid("build_mask_pyramid", "coarse extents must be at least 1"));
        }
        let n = coarse.len();
        let k = masked_target(ratio, n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut top = Mask3::all_visible(coarse);
        for i in rand::seq::index::sample(&mut rng, n, k) {
            top.set(i, false);
        }
        let mut stages = Vec::with_capacity(n_stages);
        stages.push(top);
        for _ in 1..n_stages {
            let finer = stages.last().expect("non-empty").upsample2();
            stages.push(finer);
        }
        stages.reverse();
        Ok(Self { stages, ratio, seed })
    }

    /// Assembles a pyramid without checking alignment; see [`Self::validate`].
    pub fn from_stages(stages: Vec<Mask3>, ratio: f64, seed: u64) -> Self {
        Self { stages, ratio, seed }
    }

    /// Checks that each stage is the exact 2× downsample of the previous one.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("mask_pyramid", "no stages"));
        }
        for (i, pair) in self.stages.windows(2).enumerate() {
            match pair[0].downsample2_exact() {
                Some(down) if down == pair[1] => {}
                _ => return Err(Error::InconsistentPyramid { fine: i, coarse: i + 1 }),
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> &[Mask3] {
        &self.stages
    }

    /// Stage `i`, 0 = finest.
    pub fn stage(&self, i: usize) -> &Mask3 {
        &self.stages[i]
    }

    pub fn finest(&self) -> &Mask3 {
        &self.stages[0]
    }

    pub fn coarsest(&self) -> &Mask3 {
        self.stages.last().expect("non-empty pyramid")
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}
