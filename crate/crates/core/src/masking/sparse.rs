use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

use super::grid::{Grid3, Mask3};

/// Channel-major feature grid `[C, z, y, x]` that is exactly zero wherever
/// its mask is false.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeature<T> {
    grid: Tensor<T>,
    mask: Mask3,
}

impl<T: Real> SparseFeature<T> {
    /// Zeroes masked voxels of `dense`.
    pub fn from_dense(mut dense: Tensor<T>, mask: Mask3) -> Result<Self> {
        let (c, g) = Grid3::from_tensor_shape(dense.shape())?;
        if g != mask.grid() {
            return Err(Error::shape("sparse_feature", dense.shape(), &mask.grid().tensor_shape(c)));
        }
        let v = g.len();
        for (i, val) in dense.data_mut().iter_mut().enumerate() {
            if !mask.is_visible(i % v) {
                *val = T::zero();
            }
        }
        Ok(Self { grid: dense, mask })
    }

    /// Wraps a grid that must already be zero at masked voxels.
    pub fn new(grid: Tensor<T>, mask: Mask3) -> Result<Self> {
        let (_, g) = Grid3::from_tensor_shape(grid.shape())?;
        if g != mask.grid() {
            return Err(Error::shape("sparse_feature", grid.shape(), &mask.grid().tensor_shape(1)));
        }
        let v = g.len();
        if grid.data().iter().enumerate().any(|(i, &x)| !mask.is_visible(i % v) && x != T::zero()) {
            return Err(Error::invalid("sparse_feature", "nonzero value at a masked voxel"));
        }
        Ok(Self { grid, mask })
    }

    pub fn grid(&self) -> &Tensor<T> {
        &self.grid
    }

    pub fn mask(&self) -> &Mask3 {
        &self.mask
    }

    pub fn channels(&self) -> usize {
        self.grid.shape()[0]
    }

    pub fn into_parts(self) -> (Tensor<T>, Mask3) {
        (self.grid, self.mask)
    }
}

/// A spatial operator applied through [`sparse_op`].
#[derive(Clone, Copy, Debug)]
pub enum SparseOperator<'a, T> {
    /// Same-padded stride-1 convolution, `weight: [Cout, Cin, k, k, k]`.
    Conv {
        weight: &'a Tensor<T>,
        bias: Option<&'a Tensor<T>>,
    },
    /// Layer normalization across channels at each voxel.
    Norm {
        gamma: &'a Tensor<T>,
        beta: &'a Tensor<T>,
        eps: T,
    },
    /// 2× max-pool; the output mask must be the input mask downsampled.
    MaxPool,
}

/// Multiplies a `[C, z, y, x]` variable by a `[1, z, y, x]` mask variable.
pub fn apply_mask<T: Real>(tape: &mut Tape<T>, x: Var, mask: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let full = tape.expand(mask, &shape)?;
    tape.mul(x, full)
}

/// Masked convolution on the tape: zero masked inputs, convolve, re-mask.
pub fn masked_conv<T: Real>(tape: &mut Tape<T>, x: Var, mask: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xin = apply_mask(tape, x, mask)?;
    let y = tape.conv3d(xin, w, b)?;
    apply_mask(tape, y, mask)
}

/// Masked channel normalization on the tape.
pub fn masked_norm<T: Real>(tape: &mut Tape<T>, x: Var, mask: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
    let xin = apply_mask(tape, x, mask)?;
    let y = tape.channel_norm(xin, gamma, beta, eps)?;
    apply_mask(tape, y, mask)
}

/// Applies `op` reading only visible inputs, then zeroes every output voxel
/// that `out_mask` marks as masked.
pub fn sparse_op<T: Real>(input: &SparseFeature<T>, op: SparseOperator<'_, T>, out_mask: &Mask3) -> Result<SparseFeature<T>> {
    let in_mask = input.mask();
    let expected = match op {
        SparseOperator::MaxPool => in_mask.downsample2_exact(),
        _ => Some(in_mask.clone()),
    };
    if expected.as_ref() != Some(out_mask) {
        return Err(Error::shape("sparse_op", &in_mask.grid().as_array(), &out_mask.grid().as_array()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.grid().clone());
    let m_in = tape.constant(in_mask.to_tensor());
    let m_out = tape.constant(out_mask.to_tensor());
    let xin = apply_mask(&mut tape, x, m_in)?;
    let y = match op {
        SparseOperator::Conv { weight, bias } => {
            let w = tape.constant(weight.clone());
            let b = bias.map(|b| tape.constant(b.clone()));
            tape.conv3d(xin, w, b)?
        }
        SparseOperator::Norm { gamma, beta, eps } => {
            let g = tape.constant(gamma.clone());
            let b = tape.constant(beta.clone());
            tape.channel_norm(xin, g, b, eps)?
        }
        SparseOperator::MaxPool => tape.maxpool2(xin)?,
    };
    let out = apply_mask(&mut tape, y, m_out)?;
    SparseFeature::new(tape.value(out).detached(), out_mask.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskPyramid;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn dense_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut t = Tape::new();
        let (x, w, b) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
        let y = t.conv3d(x, w, Some(b)).unwrap();
        t.value(y).detached()
    }

    #[test]
    fn all_visible_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = Grid3::new(4, 2, 3);
        let x = random(&mut rng, &g.tensor_shape(2));
        let w = random(&mut rng, &[3, 2, 3, 3, 3]);
        let b = random(&mut rng, &[3]);
        let m = Mask3::all_visible(g);
        let f = SparseFeature::from_dense(x.clone(), m.clone()).unwrap();
        let out = sparse_op(&f, SparseOperator::Conv { weight: &w, bias: Some(&b) }, &m).unwrap();
        assert_eq!(out.grid().data(), dense_conv(&x, &w, &b).data());
    }

    #[test]
    fn masked_content_cannot_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MaskPyramid::build(Grid3::cube(2), 2, 0.5, 9).unwrap();
        let m = p.finest().clone();
        let shape = m.grid().tensor_shape(2);
        let w = random(&mut rng, &[2, 2, 3, 3, 3]);
        let b = random(&mut rng, &[2]);
        let x = random(&mut rng, &shape);
        let base = sparse_op(&SparseFeature::from_dense(x.clone(), m.clone()).unwrap(), SparseOperator::Conv { weight: &w, bias: Some(&b) }, &m).unwrap();
        // alter masked content before re-zeroing
        let v = m.grid().len();
        let mut y = x.clone();
        for (i, val) in y.data_mut().iter_mut().enumerate() {
            if !m.is_visible(i % v) {
                *val = rng.gen_range(-100.0..100.0);
            }
        }
        let again = sparse_op(&SparseFeature::from_dense(y, m.clone()).unwrap(), SparseOperator::Conv { weight: &w, bias: Some(&b) }, &m).unwrap();
        assert_eq!(base.grid().data(), again.grid().data());
    }

    #[test]
    fn fully_masked_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Grid3::cube(3);
        let m = Mask3::new(g, alloc::vec![false; g.len()]).unwrap();
        let x = random(&mut rng, &g.tensor_shape(3));
        let f = SparseFeature::from_dense(x, m.clone()).unwrap();
        let gamma = random(&mut rng, &[3]);
        let beta = random(&mut rng, &[3]);
        let w = random(&mut rng, &[2, 3, 3, 3, 3]);
        let b = random(&mut rng, &[2]);
        let n = sparse_op(&f, SparseOperator::Norm { gamma: &gamma, beta: &beta, eps: 1e-5 }, &m).unwrap();
        assert!(n.grid().data().iter().all(|&v| v == 0.0));
        let c = sparse_op(&f, SparseOperator::Conv { weight: &w, bias: Some(&b) }, &m).unwrap();
        assert!(c.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_statistics_use_visible_voxels_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MaskPyramid::build(Grid3::cube(2), 1, 0.5, 4).unwrap();
        let m = p.finest().clone();
        let x = random(&mut rng, &m.grid().tensor_shape(4));
        let ones = Tensor::full([4], 1.0);
        let zeros = Tensor::zeros([4]);
        let f = SparseFeature::from_dense(x, m.clone()).unwrap();
        let out = sparse_op(&f, SparseOperator::Norm { gamma: &ones, beta: &zeros, eps: 1e-12 }, &m).unwrap();
        let v = m.grid().len();
        for i in (0..v).filter(|&i| m.is_visible(i)) {
            let col: Vec<f64> = (0..4).map(|c| out.grid().data()[c * v + i]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 4.0;
            let var: f64 = col.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_follows_the_coarser_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MaskPyramid::build(Grid3::cube(2), 2, 0.5, 6).unwrap();
        let x = random(&mut rng, &p.stage(0).grid().tensor_shape(2));
        let f = SparseFeature::from_dense(x, p.stage(0).clone()).unwrap();
        let pooled = sparse_op(&f, SparseOperator::MaxPool, p.stage(1)).unwrap();
        assert_eq!(pooled.mask(), p.stage(1));
        assert!(sparse_op(&f, SparseOperator::MaxPool, p.stage(0)).is_err());
    }

    #[test]
    fn new_rejects_nonzero_masked_values() {
        let g = Grid3::cube(1);
        let m = Mask3::new(g, alloc::vec![false]).unwrap();
        assert!(SparseFeature::new(Tensor::full([1, 1, 1, 1], 1.0f64), m.clone()).is_err());
        assert!(SparseFeature::new(Tensor::<f64>::zeros([1, 1, 1, 1]), m).is_ok());
    }
}
