use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::grid::{Grid3, Mask3};
use super::sparse::SparseFeature;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Order in which a 3D grid is flattened into a token sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ScanOrder {
    /// Nested loops with `x` fastest, then `y`, then `z`.
    #[default]
    Raster,
    /// Boustrophedon: `x` direction flips on every row, `y` direction on
    /// every plane.
    Zigzag,
    /// 3D Hilbert curve over the grid padded to a power-of-two cube.
    Hilbert,
    /// Seeded uniform permutation.
    Shuffle,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [ScanOrder::Raster, ScanOrder::Zigzag, ScanOrder::Hilbert, ScanOrder::Shuffle];

    pub fn name(self) -> &'static str {
        match self {
            ScanOrder::Raster => "raster",
            ScanOrder::Zigzag => "zigzag",
            ScanOrder::Hilbert => "hilbert",
            ScanOrder::Shuffle => "shuffle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }

    /// Linear grid indices of every voxel, in visiting order.
    pub fn full_order(self, grid: Grid3, seed: u64) -> Vec<usize> {
        match self {
            ScanOrder::Raster => (0..grid.len()).collect(),
            ScanOrder::Zigzag => zigzag(grid),
            ScanOrder::Hilbert => hilbert(grid),
            ScanOrder::Shuffle => {
                let mut idx: Vec<usize> = (0..grid.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                idx
            }
        }
    }
}

fn zigzag(grid: Grid3) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.len());
    let mut row = 0usize;
    for z in 0..grid.z {
        for yi in 0..grid.y {
            let y = if z % 2 == 1 { grid.y - 1 - yi } else { yi };
            for xi in 0..grid.x {
                let x = if row % 2 == 1 { grid.x - 1 - xi } else { xi };
                out.push(grid.index([x, y, z]));
            }
            row += 1;
        }
    }
    out
}

/// Hilbert index to coordinates (Skilling's transpose-to-axes transform).
fn hilbert_point(d: u64, bits: u32) -> [u64; 3] {
    let mut x = [0u64; 3];
    for b in 0..bits {
        for (axis, xa) in x.iter_mut().enumerate() {
            let src = 3 * b as usize + (2 - axis);
            *xa |= ((d >> src) & 1) << b;
        }
    }
    let n = 2u64 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u64;
    while q != n {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    x
}

fn hilbert(grid: Grid3) -> Vec<usize> {
    let side = grid.x.max(grid.y).max(grid.z).max(2).next_power_of_two();
    let bits = side.trailing_zeros();
    let total = (side as u64).pow(3);
    let mut out = Vec::with_capacity(grid.len());
    for d in 0..total {
        let [a, b, c] = hilbert_point(d, bits);
        let p = [a as usize, b as usize, c as usize];
        if grid.contains(p) {
            out.push(grid.index(p));
        }
    }
    out
}

/// Where the visible voxels of a mask land in a scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    /// Linear grid index of every voxel in scan order.
    pub order: Vec<usize>,
    /// Linear grid index of each visible token, in scan order.
    pub visible_linear: Vec<usize>,
    /// Position of each visible token within the full scan.
    pub visible_seq: Vec<usize>,
}

impl SequenceLayout {
    pub fn new(mask: &Mask3, order: ScanOrder, seed: u64) -> Self {
        let order = order.full_order(mask.grid(), seed);
        let mut visible_linear = Vec::new();
        let mut visible_seq = Vec::new();
        for (s, &i) in order.iter().enumerate() {
            if mask.is_visible(i) {
                visible_linear.push(i);
                visible_seq.push(s);
            }
        }
        Self { order, visible_linear, visible_seq }
    }

    pub fn total_len(&self) -> usize {
        self.order.len()
    }
}

/// Visible tokens of a feature grid in scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    /// `[K, C]`, one row per visible voxel.
    pub tokens: Tensor<T>,
    pub positions: Vec<[usize; 3]>,
    /// Index of each token within the full scan of the grid.
    pub seq_index: Vec<usize>,
    pub order: ScanOrder,
    pub grid: Grid3,
    pub shuffle_seed: u64,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Flattens the visible voxels of `feature` into a token sequence.
pub fn serialize<T: Real>(feature: &SparseFeature<T>, order: ScanOrder, seed: u64) -> Result<TokenSequence<T>> {
    let mask = feature.mask();
    if mask.visible_count() == 0 {
        return Err(Error::NothingVisible("serialize"));
    }
    let grid = mask.grid();
    let layout = SequenceLayout::new(mask, order, seed);
    let c = feature.channels();
    let v = grid.len();
    let src = feature.grid().data();
    let mut data = Vec::with_capacity(layout.visible_linear.len() * c);
    for &i in &layout.visible_linear {
        data.extend((0..c).map(|ch| src[ch * v + i]));
    }
    let tokens = Tensor::new([layout.visible_linear.len(), c], data)?;
    Ok(TokenSequence {
        tokens,
        positions: layout.visible_linear.iter().map(|&i| grid.coords(i)).collect(),
        seq_index: layout.visible_seq,
        order,
        grid,
        shuffle_seed: seed,
    })
}

/// Scatters tokens back to a `[C, z, y, x]` grid; other voxels take `fill`
/// (zeros when `None`).
pub fn deserialize<T: Real>(seq: &TokenSequence<T>, fill: Option<&[T]>) -> Result<Tensor<T>> {
    let c = seq.channels();
    let grid = seq.grid;
    let v = grid.len();
    if seq.tokens.shape()[0] != seq.positions.len() {
        return Err(Error::shape("deserialize", seq.tokens.shape(), &[seq.positions.len(), c]));
    }
    let mut out = Tensor::zeros(grid.tensor_shape(c));
    if let Some(f) = fill {
        if f.len() != c {
            return Err(Error::shape("deserialize", &[f.len()], &[c]));
        }
        for (i, val) in out.data_mut().iter_mut().enumerate() {
            *val = f[i / v];
        }
    }
    let mut seen = alloc::vec![false; v];
    let data = out.data_mut();
    for (k, &p) in seq.positions.iter().enumerate() {
        if !grid.contains(p) {
            return Err(Error::invalid("deserialize", alloc::format!("position {p:?} outside {:?}", grid.as_array())));
        }
        let i = grid.index(p);
        if core::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicatePosition { op: "deserialize", index: i });
        }
        for ch in 0..c {
            data[ch * v + i] = seq.tokens.data()[k * c + ch];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskPyramid;
    use rand::Rng;

    fn sorted(mut v: Vec<usize>) -> Vec<usize> {
        v.sort_unstable();
        v
    }

    fn manhattan(g: Grid3, a: usize, b: usize) -> usize {
        let (p, q) = (g.coords(a), g.coords(b));
        (0..3).map(|i| p[i].abs_diff(q[i])).sum()
    }

    #[test]
    fn raster_two_voxels() {
        let g = Grid3::new(2, 1, 1);
        let f = SparseFeature::from_dense(Tensor::from_fn(g.tensor_shape(1), |i| i as f64), Mask3::all_visible(g)).unwrap();
        let s = serialize(&f, ScanOrder::Raster, 0).unwrap();
        assert_eq!(s.positions, [[0, 0, 0], [1, 0, 0]]);
    }

    #[test]
    fn every_order_is_a_permutation() {
        for g in [Grid3::cube(4), Grid3::new(3, 5, 2), Grid3::cube(1)] {
            for o in ScanOrder::ALL {
                assert_eq!(sorted(o.full_order(g, 7)), (0..g.len()).collect::<Vec<_>>(), "{o:?} {g:?}");
            }
        }
    }

    #[test]
    fn hilbert_steps_are_unit_moves() {
        let g = Grid3::cube(4);
        let o = ScanOrder::Hilbert.full_order(g, 0);
        assert!(o.windows(2).all(|w| manhattan(g, w[0], w[1]) == 1));
    }

    #[test]
    fn zigzag_steps_are_unit_moves() {
        let g = Grid3::new(3, 4, 3);
        let o = ScanOrder::Zigzag.full_order(g, 0);
        assert!(o.windows(2).all(|w| manhattan(g, w[0], w[1]) == 1));
    }

    #[test]
    fn round_trip_all_orders() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..4 {
            let p = MaskPyramid::build(Grid3::new(2, 3, 2), 2, 0.5, seed).unwrap();
            let m = p.finest().clone();
            let x = Tensor::from_fn(m.grid().tensor_shape(3), |_| rng.gen_range(-1.0..1.0));
            let f = SparseFeature::from_dense(x, m).unwrap();
            for o in ScanOrder::ALL {
                let s = serialize(&f, o, seed).unwrap();
                assert_eq!(s.len(), f.mask().visible_count());
                assert_eq!(&deserialize(&s, None).unwrap(), f.grid());
            }
        }
    }

    #[test]
    fn shuffle_covers_the_raster_visible_set() {
        let p = MaskPyramid::build(Grid3::cube(3), 1, 0.4, 5).unwrap();
        let m = p.finest();
        let a = SequenceLayout::new(m, ScanOrder::Shuffle, 99);
        let r = SequenceLayout::new(m, ScanOrder::Raster, 0);
        assert_eq!(sorted(a.visible_linear.clone()), r.visible_linear);
        assert_eq!(a, SequenceLayout::new(m, ScanOrder::Shuffle, 99));
    }

    #[test]
    fn fill_lands_on_empty_voxels() {
        let g = Grid3::new(2, 1, 1);
        let m = Mask3::new(g, alloc::vec![true, false]).unwrap();
        let f = SparseFeature::from_dense(Tensor::from_fn(g.tensor_shape(2), |i| 1.0 + i as f64), m).unwrap();
        let s = serialize(&f, ScanOrder::Raster, 0).unwrap();
        let d = deserialize(&s, Some(&[7.0, 8.0])).unwrap();
        assert_eq!(d.data(), &[1.0, 7.0, 3.0, 8.0]);
    }

    #[test]
    fn errors() {
        let g = Grid3::new(2, 1, 1);
        let m = Mask3::new(g, alloc::vec![false, false]).unwrap();
        let f = SparseFeature::from_dense(Tensor::<f64>::zeros(g.tensor_shape(1)), m).unwrap();
        assert!(matches!(serialize(&f, ScanOrder::Raster, 0), Err(Error::NothingVisible(_))));
        let s = TokenSequence {
            tokens: Tensor::<f64>::zeros([2, 1]),
            positions: alloc::vec![[0, 0, 0], [0, 0, 0]],
            seq_index: alloc::vec![0, 0],
            order: ScanOrder::Raster,
            grid: g,
            shuffle_seed: 0,
        };
        assert!(matches!(deserialize(&s, None), Err(Error::DuplicatePosition { .. })));
    }

    #[test]
    fn parse_names() {
        for o in ScanOrder::ALL {
            assert_eq!(ScanOrder::parse(o.name()), Some(o));
        }
        assert_eq!(ScanOrder::parse("spiral"), None);
    }
}
