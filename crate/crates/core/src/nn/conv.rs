//! 3D convolutions over [`Volume`]s with hand-written backward passes.
//!
//! Stride-1 3×3×3 convolutions run on a zero-padded copy of each input
//! channel. In the padded layout every kernel tap is a constant offset, so a
//! tap becomes one contiguous `axpy` (forward, input gradient) or `dot`
//! (weight gradient) over the whole padded grid. Border positions of the
//! accumulator hold garbage and are dropped when the interior is extracted.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{voxel_count, Dims, Real, Volume};

#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for j in 0..8 {
            acc[j] += xa[j] * xb[j];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a grid padded by one voxel on every side.
#[derive(Clone, Copy, Debug)]
struct Padded {
    dims: Dims,
    row: usize,
    plane: usize,
    len: usize,
}

impl Padded {
    fn new(dims: Dims) -> Self {
        let pw = dims[2] + 2;
        let ph = dims[1] + 2;
        let pd = dims[0] + 2;
        Self {
            dims,
            row: pw,
            plane: pw * ph,
            len: pw * ph * pd,
        }
    }

    /// Half-open range of padded indices spanning all interior voxels.
    fn interior(&self) -> (usize, usize) {
        let [d, h, w] = self.dims;
        let lo = self.plane + self.row + 1;
        let hi = d * self.plane + h * self.row + w + 1;
        (lo, hi)
    }

    fn offset(&self, kz: usize, ky: usize, kx: usize) -> isize {
        (kz as isize - 1) * self.plane as isize + (ky as isize - 1) * self.row as isize
            + (kx as isize - 1)
    }

    fn pad<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let s = (z * h + y) * w;
                let t = (z + 1) * self.plane + (y + 1) * self.row + 1;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }

    fn extract<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let s = (z + 1) * self.plane + (y + 1) * self.row + 1;
                let t = (z * h + y) * w;
                dst[t..t + w].copy_from_slice(&src[s..s + w]);
            }
        }
    }

    fn pad_channels<T: Real>(&self, vol: &Volume<T>) -> Vec<T> {
        let mut out = vec![T::zero(); vol.channels() * self.len];
        for c in 0..vol.channels() {
            self.pad(vol.channel(c), &mut out[c * self.len..(c + 1) * self.len]);
        }
        out
    }
}

/// A 3D convolution whose weights live in a shared flat parameter vector.
///
/// Weight layout is `[cout][cin][kz][ky][kx]` starting at `offset`, followed
/// by `cout` biases. Padding is `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub offset: usize,
}

impl ConvLayer {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, offset: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel must be 1 or 3");
        assert!(stride == 1 || (stride == 2 && kernel == 3), "unsupported stride");
        Self {
            cin,
            cout,
            kernel,
            stride,
            offset,
        }
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn end(&self) -> usize {
        self.offset + self.param_len()
    }

    fn split<'a, T>(&self, params: &'a [T]) -> (&'a [T], &'a [T]) {
        let w = &params[self.offset..self.offset + self.weight_len()];
        let b = &params[self.offset + self.weight_len()..self.end()];
        (w, b)
    }

    fn split_mut<'a, T>(&self, params: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        let slot = &mut params[self.offset..self.end()];
        slot.split_at_mut(self.weight_len())
    }

    /// He-style uniform initialization scaled by fan-in; zero biases.
    pub fn init<T: Real, R: Rng>(&self, params: &mut [T], rng: &mut R) {
        let fan_in = (self.cin * self.taps()) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let (w, b) = self.split_mut(params);
        for x in w.iter_mut() {
            *x = T::of(rng.random_range(-bound..bound));
        }
        b.fill(T::zero());
    }

    pub fn out_dims(&self, dims: Dims) -> Result<Dims> {
        if self.stride == 1 {
            return Ok(dims);
        }
        if dims.iter().any(|&n| n < 2 || n % 2 != 0) {
            return Err(Error::shape("strided convolution (even extent)", "even dims", dims));
        }
        Ok([dims[0] / 2, dims[1] / 2, dims[2] / 2])
    }

    pub fn forward<T: Real>(&self, params: &[T], x: &Volume<T>) -> Result<Volume<T>> {
        if x.channels() != self.cin {
            return Err(Error::shape("conv input channels", self.cin, x.channels()));
        }
        let out_dims = self.out_dims(x.dims())?;
        let mut out = Volume::zeros(self.cout, out_dims);
        match (self.kernel, self.stride) {
            (1, 1) => self.forward_pointwise(params, x, &mut out),
            (3, 1) => self.forward_dense(params, x, &mut out),
            _ => self.forward_strided(params, x, &mut out),
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads` (same layout as the
    /// parameter vector) and returns the gradient with respect to `x`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &Volume<T>,
        gout: &Volume<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Option<Volume<T>> {
        debug_assert_eq!(gout.dims(), self.out_dims(x.dims()).unwrap());
        {
            let (_, gb) = self.split_mut(grads);
            for (co, g) in gb.iter_mut().enumerate() {
                *g += gout.channel(co).iter().copied().sum::<T>();
            }
        }
        match (self.kernel, self.stride) {
            (1, 1) => self.backward_pointwise(params, x, gout, grads, input_grad),
            (3, 1) => self.backward_dense(params, x, gout, grads, input_grad),
            _ => self.backward_strided(params, x, gout, grads, input_grad),
        }
    }

    fn forward_pointwise<T: Real>(&self, params: &[T], x: &Volume<T>, out: &mut Volume<T>) {
        let (w, b) = self.split(params);
        for co in 0..self.cout {
            let dst = out.channel_mut(co);
            dst.fill(b[co]);
            for ci in 0..self.cin {
                axpy(w[co * self.cin + ci], x.channel(ci), dst);
            }
        }
    }

    fn backward_pointwise<T: Real>(
        &self,
        params: &[T],
        x: &Volume<T>,
        gout: &Volume<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Option<Volume<T>> {
        let (w, _) = self.split(params);
        let (gw, _) = self.split_mut(grads);
        for co in 0..self.cout {
            for ci in 0..self.cin {
                gw[co * self.cin + ci] += dot(gout.channel(co), x.channel(ci));
            }
        }
        if !input_grad {
            return None;
        }
        let mut gin = Volume::zeros(self.cin, x.dims());
        for ci in 0..self.cin {
            let dst = gin.channel_mut(ci);
            for co in 0..self.cout {
                axpy(w[co * self.cin + ci], gout.channel(co), dst);
            }
        }
        Some(gin)
    }

    fn forward_dense<T: Real>(&self, params: &[T], x: &Volume<T>, out: &mut Volume<T>) {
        let (w, b) = self.split(params);
        let pad = Padded::new(x.dims());
        let xp = pad.pad_channels(x);
        let (lo, hi) = pad.interior();
        let mut acc = vec![T::zero(); pad.len];
        for co in 0..self.cout {
            acc[lo..hi].fill(b[co]);
            for ci in 0..self.cin {
                let src = &xp[ci * pad.len..(ci + 1) * pad.len];
                let wk = &w[(co * self.cin + ci) * 27..][..27];
                let mut t = 0;
                for kz in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let off = pad.offset(kz, ky, kx);
                            let s = (lo as isize + off) as usize;
                            axpy(wk[t], &src[s..s + (hi - lo)], &mut acc[lo..hi]);
                            t += 1;
                        }
                    }
                }
            }
            pad.extract(&acc, out.channel_mut(co));
        }
    }

    fn backward_dense<T: Real>(
        &self,
        params: &[T],
        x: &Volume<T>,
        gout: &Volume<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Option<Volume<T>> {
        let (w, _) = self.split(params);
        let pad = Padded::new(x.dims());
        let (lo, hi) = pad.interior();
        let xp = pad.pad_channels(x);
        let gp = pad.pad_channels(gout);
        {
            let (gw, _) = self.split_mut(grads);
            for co in 0..self.cout {
                let g = &gp[co * pad.len + lo..co * pad.len + hi];
                for ci in 0..self.cin {
                    let src = &xp[ci * pad.len..(ci + 1) * pad.len];
                    let gk = &mut gw[(co * self.cin + ci) * 27..][..27];
                    let mut t = 0;
                    for kz in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let s = (lo as isize + pad.offset(kz, ky, kx)) as usize;
                                gk[t] += dot(g, &src[s..s + (hi - lo)]);
                                t += 1;
                            }
                        }
                    }
                }
            }
        }
        if !input_grad {
            return None;
        }
        let mut gin = Volume::zeros(self.cin, x.dims());
        let mut acc = vec![T::zero(); pad.len];
        for ci in 0..self.cin {
            acc.fill(T::zero());
            for co in 0..self.cout {
                let g = &gp[co * pad.len + lo..co * pad.len + hi];
                let wk = &w[(co * self.cin + ci) * 27..][..27];
                let mut t = 0;
                for kz in 0..3 {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let s = (lo as isize + pad.offset(kz, ky, kx)) as usize;
                            axpy(wk[t], g, &mut acc[s..s + (hi - lo)]);
                            t += 1;
                        }
                    }
                }
            }
            pad.extract(&acc, gin.channel_mut(ci));
        }
        Some(gin)
    }

    fn forward_strided<T: Real>(&self, params: &[T], x: &Volume<T>, out: &mut Volume<T>) {
        let (w, b) = self.split(params);
        let ph = Phases::new(x.dims());
        let xp = ph.split(x);
        let span = ph.span();
        let mut acc = vec![T::zero(); span];
        for co in 0..self.cout {
            acc.fill(b[co]);
            for ci in 0..self.cin {
                let wk = &w[(co * self.cin + ci) * 27..][..27];
                for (t, &wt) in wk.iter().enumerate() {
                    let (phase, off) = ph.tap(t);
                    let src = &xp[(ci * 8 + phase) * ph.len + off..][..span];
                    axpy(wt, src, &mut acc);
                }
            }
            ph.extract(&acc, out.channel_mut(co));
        }
    }

    fn backward_strided<T: Real>(
        &self,
        params: &[T],
        x: &Volume<T>,
        gout: &Volume<T>,
        grads: &mut [T],
        input_grad: bool,
    ) -> Option<Volume<T>> {
        let (w, _) = self.split(params);
        let ph = Phases::new(x.dims());
        let xp = ph.split(x);
        let span = ph.span();
        let mut g = vec![T::zero(); self.cout * span];
        for co in 0..self.cout {
            ph.scatter(gout.channel(co), &mut g[co * span..(co + 1) * span]);
        }
        {
            let (gw, _) = self.split_mut(grads);
            for co in 0..self.cout {
                let gc = &g[co * span..(co + 1) * span];
                for ci in 0..self.cin {
                    for t in 0..27 {
                        let (phase, off) = ph.tap(t);
                        let src = &xp[(ci * 8 + phase) * ph.len + off..][..span];
                        gw[(co * self.cin + ci) * 27 + t] += dot(gc, src);
                    }
                }
            }
        }
        if !input_grad {
            return None;
        }
        let mut gp = vec![T::zero(); 8 * ph.len];
        let mut gin = Volume::zeros(self.cin, x.dims());
        for ci in 0..self.cin {
            gp.fill(T::zero());
            for co in 0..self.cout {
                let gc = &g[co * span..(co + 1) * span];
                let wk = &w[(co * self.cin + ci) * 27..][..27];
                for (t, &wt) in wk.iter().enumerate() {
                    let (phase, off) = ph.tap(t);
                    axpy(wt, gc, &mut gp[phase * ph.len + off..][..span]);
                }
            }
            ph.merge(&gp, gin.channel_mut(ci));
        }
        Some(gin)
    }
}

/// Polyphase view of a padded grid for stride-2 convolutions.
///
/// The padded input is split into 8 sub-grids by coordinate parity. Output
/// voxel `(z, y, x)` under tap `(kz, ky, kx)` reads phase
/// `(kz % 2, ky % 2, kx % 2)` at `(z + kz / 2, y + ky / 2, x + kx / 2)`, so
/// with outputs laid out on the phase grid each tap is a constant offset.
#[derive(Clone, Copy, Debug)]
struct Phases {
    dims: Dims,
    out: Dims,
    row: usize,
    plane: usize,
    len: usize,
}

impl Phases {
    fn new(dims: Dims) -> Self {
        let out = [dims[0] / 2, dims[1] / 2, dims[2] / 2];
        let row = out[2] + 1;
        let plane = row * (out[1] + 1);
        Self {
            dims,
            out,
            row,
            plane,
            len: plane * (out[0] + 1),
        }
    }

    fn span(&self) -> usize {
        let [d, h, w] = self.out;
        (d - 1) * self.plane + (h - 1) * self.row + w
    }

    fn tap(&self, t: usize) -> (usize, usize) {
        let (kz, ky, kx) = (t / 9, (t / 3) % 3, t % 3);
        let phase = (kz % 2) * 4 + (ky % 2) * 2 + kx % 2;
        let off = (kz / 2) * self.plane + (ky / 2) * self.row + kx / 2;
        (phase, off)
    }

    /// Location of interior voxel `(z, y, x)` in the phase buffers.
    #[inline]
    fn locate(&self, z: usize, y: usize, x: usize) -> usize {
        let (pz, py, px) = (z + 1, y + 1, x + 1);
        let phase = (pz % 2) * 4 + (py % 2) * 2 + px % 2;
        phase * self.len + (pz / 2) * self.plane + (py / 2) * self.row + px / 2
    }

    fn split<T: Real>(&self, x: &Volume<T>) -> Vec<T> {
        let [d, h, w] = self.dims;
        let mut out = vec![T::zero(); x.channels() * 8 * self.len];
        for c in 0..x.channels() {
            let src = x.channel(c);
            let dst = &mut out[c * 8 * self.len..(c + 1) * 8 * self.len];
            for z in 0..d {
                for y in 0..h {
                    let srow = &src[(z * h + y) * w..][..w];
                    for (xx, &v) in srow.iter().enumerate() {
                        dst[self.locate(z, y, xx)] = v;
                    }
                }
            }
        }
        out
    }

    fn merge<T: Real>(&self, phases: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let drow = &mut dst[(z * h + y) * w..][..w];
                for (xx, v) in drow.iter_mut().enumerate() {
                    *v = phases[self.locate(z, y, xx)];
                }
            }
        }
    }

    fn extract<T: Real>(&self, acc: &[T], dst: &mut [T]) {
        let [d, h, w] = self.out;
        for z in 0..d {
            for y in 0..h {
                let s = z * self.plane + y * self.row;
                dst[(z * h + y) * w..][..w].copy_from_slice(&acc[s..s + w]);
            }
        }
    }

    fn scatter<T: Real>(&self, src: &[T], acc: &mut [T]) {
        let [d, h, w] = self.out;
        for z in 0..d {
            for y in 0..h {
                let s = z * self.plane + y * self.row;
                acc[s..s + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
            }
        }
    }
}

/// Multiply-accumulate count of one forward application on `dims`.
pub fn conv_macs(layer: &ConvLayer, dims: Dims) -> usize {
    let out = layer.out_dims(dims).unwrap_or(dims);
    voxel_count(out) * layer.cin * layer.cout * layer.taps()
}
