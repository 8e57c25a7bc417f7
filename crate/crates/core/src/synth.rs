//! Synthetic volumes: random ellipsoids with a smooth edge over a low
//! background, clipped to `[0, 1]`.

use alloc::vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::masking::Grid3;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticVolumeSpec {
    pub grid: Grid3,
    pub seed: u64,
    /// Inclusive range of the blob count.
    pub n_blobs: (usize, usize),
    /// Peak intensity range of each blob.
    pub intensity: (f64, f64),
    pub background: f64,
    /// Edge width relative to the ellipsoid radius.
    pub softness: f64,
}

impl SyntheticVolumeSpec {
    pub fn new(grid: Grid3, seed: u64) -> Self {
        Self { grid, seed, n_blobs: (2, 5), intensity: (0.4, 0.9), background: 0.05, softness: 0.25 }
    }
}

/// Deterministic `[1, z, y, x]` volume for `spec`.
pub fn gen_volume<T: Real>(spec: &SyntheticVolumeSpec) -> Tensor<T> {
    let g = spec.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![spec.background; g.len()];
    let (lo, hi) = spec.n_blobs;
    let count = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let ext = [g.x as f64, g.y as f64, g.z as f64];
    let soft = spec.softness.max(1e-6);
    for _ in 0..count {
        let center: [f64; 3] = core::array::from_fn(|a| rng.gen_range(0.2..0.8) * ext[a]);
        let radius: [f64; 3] = core::array::from_fn(|a| rng.gen_range(0.12..0.3) * ext[a].max(1.0));
        let peak = if spec.intensity.1 > spec.intensity.0 {
            rng.gen_range(spec.intensity.0..spec.intensity.1)
        } else {
            spec.intensity.0
        };
        for (i, v) in data.iter_mut().enumerate() {
            let p = g.coords(i);
            let r2: f64 = (0..3)
                .map(|a| {
                    let t = (p[a] as f64 + 0.5 - center[a]) / radius[a];
                    t * t
                })
                .sum();
            // logistic edge centred on the ellipsoid surface
            let w = 1.0 / (1.0 + Float::exp((Float::sqrt(r2) - 1.0) / soft));
            *v += peak * w;
        }
    }
    let data = data.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect();
    Tensor::new(g.tensor_shape(1).to_vec(), data).expect("grid extents")
}
