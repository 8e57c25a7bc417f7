//! Plain-slice forward/backward kernels behind the tape operations.
//!
//! Volumetric layouts are `[channels, depth, height, width]`, row-major, so
//! the x axis is contiguous.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub cin: usize,
    pub cout: usize,
    pub dims: [usize; 3],
    pub kernel: usize,
}

impl Conv3dGeom {
    fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }
}

/// Valid output range along one axis for kernel offset `off`.
#[inline]
fn span(len: usize, off: isize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi = if off > 0 {
        len.saturating_sub(off as usize)
    } else {
        len
    };
    (lo, hi.max(lo))
}

/// Visits every (output row, input row, run length, weight index) quadruple of
/// a same-padded, stride-1 convolution between one input and one output
/// channel.
#[inline]
fn for_each_tap(geom: &Conv3dGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    let [d, h, w] = geom.dims;
    let k = geom.kernel;
    let p = geom.pad();
    for kz in 0..k {
        let oz = kz as isize - p;
        let (z0, z1) = span(d, oz);
        for ky in 0..k {
            let oy = ky as isize - p;
            let (y0, y1) = span(h, oy);
            for kx in 0..k {
                let ox = kx as isize - p;
                let (x0, x1) = span(w, ox);
                if x1 <= x0 {
                    continue;
                }
                let tap = (kz * k + ky) * k + kx;
                for z in z0..z1 {
                    let iz = (z as isize + oz) as usize;
                    for y in y0..y1 {
                        let iy = (y as isize + oy) as usize;
                        let out = (z * h + y) * w + x0;
                        let inp = (iz * h + iy) * w + (x0 as isize + ox) as usize;
                        f(out, inp, x1 - x0, tap);
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, geom: &Conv3dGeom) -> Vec<T> {
    let v = geom.voxels();
    let taps = geom.kernel.pow(3);
    let mut out = vec![T::zero(); geom.cout * v];
    for co in 0..geom.cout {
        let oc = &mut out[co * v..(co + 1) * v];
        if let Some(b) = bias {
            oc.fill(b[co]);
        }
        for ci in 0..geom.cin {
            let xc = &x[ci * v..(ci + 1) * v];
            let wk = &weight[(co * geom.cin + ci) * taps..][..taps];
            for_each_tap(geom, |o, i, n, tap| {
                let wv = wk[tap];
                for (dst, &src) in oc[o..o + n].iter_mut().zip(&xc[i..i + n]) {
                    *dst += wv * src;
                }
            });
        }
    }
    out
}

/// Returns `(d input, d weight, d bias)`; the input gradient is skipped when
/// `need_input` is false.
pub fn conv3d_backward<T: Real>(
    grad_out: &[T],
    x: &[T],
    weight: &[T],
    geom: &Conv3dGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let v = geom.voxels();
    let taps = geom.kernel.pow(3);
    let mut gx = need_input.then(|| vec![T::zero(); geom.cin * v]);
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); geom.cout];
    for co in 0..geom.cout {
        let go = &grad_out[co * v..(co + 1) * v];
        gb[co] = go.iter().copied().sum();
        for ci in 0..geom.cin {
            let xc = &x[ci * v..(ci + 1) * v];
            let base = (co * geom.cin + ci) * taps;
            let wk = &weight[base..base + taps];
            let gwk = &mut gw[base..base + taps];
            match gx.as_mut() {
                Some(gx) => {
                    let gxc = &mut gx[ci * v..(ci + 1) * v];
                    for_each_tap(geom, |o, i, n, tap| {
                        let wv = wk[tap];
                        let mut acc = T::zero();
                        for ((&g, &xi), dst) in go[o..o + n]
                            .iter()
                            .zip(&xc[i..i + n])
                            .zip(gxc[i..i + n].iter_mut())
                        {
                            acc += g * xi;
                            *dst += wv * g;
                        }
                        gwk[tap] += acc;
                    });
                }
                None => for_each_tap(geom, |o, i, n, tap| {
                    let mut acc = T::zero();
                    for (&g, &xi) in go[o..o + n].iter().zip(&xc[i..i + n]) {
                        acc += g * xi;
                    }
                    gwk[tap] += acc;
                }),
            }
        }
    }
    (gx, gw, gb)
}

/// 2× max-pool over `[c, d, h, w]`; returns pooled values and the flat input
/// index of each maximum (first maximum on ties).
pub fn maxpool2_forward<T: Real>(x: &[T], c: usize, dims: [usize; 3]) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = dims;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let n = c * od * oh * ow;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + ((2 * z + dz) * h + 2 * y + dy) * w + 2 * xx + dx;
                                if best == usize::MAX || x[i] > best_v {
                                    best = i;
                                    best_v = x[i];
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

/// Nearest-neighbour 2× upsample over `[c, d, h, w]`.
pub fn upsample2_forward<T: Real>(x: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let mut out = Vec::with_capacity(c * ud * uh * uw);
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..ud {
            for y in 0..uh {
                let row = base + ((z / 2) * h + y / 2) * w;
                for xx in 0..uw {
                    out.push(x[row + xx / 2]);
                }
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(g: &[T], c: usize, dims: [usize; 3]) -> Vec<T> {
    let [d, h, w] = dims;
    let (ud, uh, uw) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![T::zero(); c * d * h * w];
    let mut k = 0;
    for ch in 0..c {
        let base = ch * d * h * w;
        for z in 0..ud {
            for y in 0..uh {
                let row = base + ((z / 2) * h + y / 2) * w;
                for xx in 0..uw {
                    out[row + xx / 2] += g[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Row-major `[m, k] x [k, n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a^T` for a row-major `[m, n]` matrix.
pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `j` reads input element `map[j]`.
pub fn permute_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Broadcast map for same-rank `src` → `dst` where each source extent is 1 or
/// equal to the destination extent.
pub fn expand_map(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let src_strides = strides(src);
    let n: usize = dst.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; dst.len()];
    for _ in 0..n {
        map.push(
            idx.iter()
                .enumerate()
                .map(|(ax, &i)| if src[ax] == 1 { 0 } else { i * src_strides[ax] })
                .sum(),
        );
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < dst[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

/// Splits a shape around `axis` into (outer count, axis extent, inner count).
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
