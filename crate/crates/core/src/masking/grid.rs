use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Extents of a 3D voxel grid. Linear index is `(z * y_ext + y) * x_ext + x`,
/// so tensors over a grid have shape `[C, z, y, x]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid3 {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Grid3 {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Self { x, y, z }
    }

    pub const fn cube(n: usize) -> Self {
        Self { x: n, y: n, z: n }
    }

    pub fn len(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, p: [usize; 3]) -> usize {
        (p[2] * self.y + p[1]) * self.x + p[0]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        [i % self.x, (i / self.x) % self.y, i / (self.x * self.y)]
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        p[0] < self.x && p[1] < self.y && p[2] < self.z
    }

    pub fn scaled_up(&self, factor: usize) -> Self {
        Self::new(self.x * factor, self.y * factor, self.z * factor)
    }

    pub fn divided(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.x % factor != 0 || self.y % factor != 0 || self.z % factor != 0 {
            return Err(Error::Indivisible { op: "grid", extents: self.as_array(), divisor: factor });
        }
        Ok(Self::new(self.x / factor, self.y / factor, self.z / factor))
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }

    /// Tensor shape `[channels, z, y, x]`.
    pub fn tensor_shape(&self, channels: usize) -> [usize; 4] {
        [channels, self.z, self.y, self.x]
    }

    pub fn from_tensor_shape(shape: &[usize]) -> Result<(usize, Self)> {
        match *shape {
            [c, z, y, x] => Ok((c, Self::new(x, y, z))),
            _ => Err(Error::invalid("grid", alloc::format!("expected [C, z, y, x], got {shape:?}"))),
        }
    }
}

/// Boolean voxel grid; `true` marks a visible voxel.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask3 {
    grid: Grid3,
    visible: Vec<bool>,
}

impl Mask3 {
    pub fn new(grid: Grid3, visible: Vec<bool>) -> Result<Self> {
        if visible.len() != grid.len() {
            return Err(Error::shape("mask", &grid.as_array(), &[visible.len()]));
        }
        Ok(Self { grid, visible })
    }

    pub fn all_visible(grid: Grid3) -> Self {
        Self { grid, visible: alloc::vec![true; grid.len()] }
    }

    pub fn grid(&self) -> Grid3 {
        self.grid
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.visible
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.visible[i]
    }

    pub fn set(&mut self, i: usize, visible: bool) {
        self.visible[i] = visible;
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    pub fn masked_count(&self) -> usize {
        self.visible.len() - self.visible_count()
    }

    /// Nearest-neighbour 2× upsample.
    pub fn upsample2(&self) -> Self {
        let fine = self.grid.scaled_up(2);
        let visible = (0..fine.len())
            .map(|i| {
                let [x, y, z] = fine.coords(i);
                self.visible[self.grid.index([x / 2, y / 2, z / 2])]
            })
            .collect();
        Self { grid: fine, visible }
    }

    /// 2× downsample when every 2³ block is uniform, `None` otherwise.
    pub fn downsample2_exact(&self) -> Option<Self> {
        let coarse = self.grid.divided(2).ok()?;
        let mut visible = Vec::with_capacity(coarse.len());
        for i in 0..coarse.len() {
            let [x, y, z] = coarse.coords(i);
            let v = self.visible[self.grid.index([2 * x, 2 * y, 2 * z])];
            for d in 0..8 {
                let p = [2 * x + (d & 1), 2 * y + ((d >> 1) & 1), 2 * z + (d >> 2)];
                if self.visible[self.grid.index(p)] != v {
                    return None;
                }
            }
            visible.push(v);
        }
        Some(Self { grid: coarse, visible })
    }

    /// `[1, z, y, x]` tensor of ones (visible) and zeros (masked).
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.visible.iter().map(|&v| if v { T::one() } else { T::zero() }).collect();
        Tensor::new(self.grid.tensor_shape(1).to_vec(), data).expect("mask extents")
    }

    /// Complement, as a `[1, z, y, x]` tensor.
    pub fn to_inverse_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.visible.iter().map(|&v| if v { T::zero() } else { T::one() }).collect();
        Tensor::new(self.grid.tensor_shape(1).to_vec(), data).expect("mask extents")
    }
}
