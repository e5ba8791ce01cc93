//! Dense multi-channel 3D grids.
//!
//! A [`Volume`] stores `C × D × H × W` values in C order. All network
//! activations, soft masks and phantom intensities use this layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point element type of networks and losses.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Spatial extent `[D, H, W]`.
pub type Dims = [usize; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    channels: usize,
    dims: Dims,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * voxel_count(dims)],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        let expected = channels * voxel_count(dims);
        if data.len() != expected {
            return Err(Error::shape("Volume::from_vec", expected, data.len()));
        }
        Ok(Self {
            channels,
            dims,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let v = self.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let v = self.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }

    /// Stacks the channels of `self` followed by the channels of `other`.
    pub fn concat(&self, other: &Volume<T>) -> Result<Volume<T>> {
        if self.dims != other.dims {
            return Err(Error::shape("Volume::concat", self.dims, other.dims));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Volume {
            channels: self.channels + other.channels,
            dims: self.dims,
            data,
        })
    }

    /// Splits off the first `channels` channels.
    pub fn split_channels(&self, channels: usize) -> (Volume<T>, Volume<T>) {
        let cut = channels * self.voxels();
        (
            Volume {
                channels,
                dims: self.dims,
                data: self.data[..cut].to_vec(),
            },
            Volume {
                channels: self.channels - channels,
                dims: self.dims,
                data: self.data[cut..].to_vec(),
            },
        )
    }
}

/// Index of voxel `(z, y, x)` in a C-order grid of extent `dims`.
#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

/// One-hot encodes a label grid into an `N`-channel volume.
pub fn one_hot<T: Real>(labels: &[u8], n_classes: usize, dims: Dims) -> Result<Volume<T>> {
    if labels.len() != voxel_count(dims) {
        return Err(Error::shape("one_hot", voxel_count(dims), labels.len()));
    }
    let mut out = Volume::zeros(n_classes, dims);
    let v = labels.len();
    for (i, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= n_classes {
            return Err(Error::shape("one_hot label", n_classes, l));
        }
        out.data[l * v + i] = T::one();
    }
    Ok(out)
}

/// Per-voxel argmax over channels; ties go to the lowest channel index.
pub fn argmax_channels<T: Real>(vol: &Volume<T>) -> Vec<u8> {
    let v = vol.voxels();
    let mut best = vol.channel(0).to_vec();
    let mut label = vec![0u8; v];
    for c in 1..vol.channels() {
        for ((b, l), &p) in best.iter_mut().zip(label.iter_mut()).zip(vol.channel(c)) {
            if p > *b {
                *b = p;
                *l = c as u8;
            }
        }
    }
    label
}
