//! Invertible test-time augmentations: axis flips, in-plane quarter turns,
//! integer translations with zero padding, and affine intensity jitter.
//!
//! The forward spatial map sends an original coordinate `q` to
//! `shift + rot^k(flip(q))`. Rotation acts on the (y, x) plane and is only
//! sampled when the plane is square.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Dims, Real, Volume};

/// Largest translation as a fraction of the axis extent.
pub const MAX_SHIFT_FRACTION: f64 = 0.1;
pub const SCALE_RANGE: [f64; 2] = [0.9, 1.1];
/// Intensity offset bound as a fraction of the input's intensity range.
pub const OFFSET_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub flips: [bool; 3],
    /// Number of quarter turns in the (y, x) plane.
    pub quarter_turns: u8,
    pub shift: [isize; 3],
    pub scale: f64,
    /// Offset as a fraction of the intensity range.
    pub offset: f64,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self {
            flips: [false; 3],
            quarter_turns: 0,
            shift: [0; 3],
            scale: 1.0,
            offset: 0.0,
        }
    }

    pub fn flip(flips: [bool; 3]) -> Self {
        Self {
            flips,
            ..Self::identity()
        }
    }

    pub fn sample<R: Rng>(dims: Dims, rng: &mut R) -> Self {
        let mut flips = [false; 3];
        for f in &mut flips {
            *f = rng.random_bool(0.5);
        }
        let quarter_turns = if dims[1] == dims[2] { rng.random_range(0..4u8) } else { 0 };
        let mut shift = [0isize; 3];
        for (s, &n) in shift.iter_mut().zip(&dims) {
            let max = (MAX_SHIFT_FRACTION * n as f64).floor() as i64;
            *s = rng.random_range(-max..=max) as isize;
        }
        Self {
            flips,
            quarter_turns,
            shift,
            scale: rng.random_range(SCALE_RANGE[0]..=SCALE_RANGE[1]),
            offset: rng.random_range(-OFFSET_FRACTION..=OFFSET_FRACTION),
        }
    }

    pub fn is_spatial_identity(&self) -> bool {
        self.flips == [false; 3] && self.quarter_turns % 4 == 0 && self.shift == [0; 3]
    }

    /// Original coordinate to augmented coordinate.
    fn map_forward(&self, q: [isize; 3], dims: Dims) -> [isize; 3] {
        let mut p = q;
        for axis in 0..3 {
            if self.flips[axis] {
                p[axis] = dims[axis] as isize - 1 - p[axis];
            }
        }
        let n = dims[2] as isize;
        for _ in 0..self.quarter_turns % 4 {
            p = [p[0], p[2], n - 1 - p[1]];
        }
        for axis in 0..3 {
            p[axis] += self.shift[axis];
        }
        p
    }

    /// Augmented coordinate to original coordinate.
    fn map_inverse(&self, o: [isize; 3], dims: Dims) -> [isize; 3] {
        let mut p = o;
        for axis in 0..3 {
            p[axis] -= self.shift[axis];
        }
        let n = dims[2] as isize;
        for _ in 0..self.quarter_turns % 4 {
            p = [p[0], n - 1 - p[2], p[1]];
        }
        for axis in 0..3 {
            if self.flips[axis] {
                p[axis] = dims[axis] as isize - 1 - p[axis];
            }
        }
        p
    }

    /// Augments a network input. Voxels shifted in from outside are zero.
    pub fn apply<T: Real>(&self, x: &Volume<T>) -> Volume<T> {
        let (lo, hi) = x
            .data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v.f64()), hi.max(v.f64()))
            });
        let range = if hi > lo { hi - lo } else { 0.0 };
        let scale = T::of(self.scale);
        let offset = T::of(self.offset * range);
        let mut out = self.remap(x, |o, dims| self.map_inverse(o, dims), &vec![T::zero(); x.channels()]);
        for v in out.data_mut() {
            *v = *v * scale + offset;
        }
        out
    }

    /// Maps a prediction made on the augmented input back to the original
    /// frame. Voxels whose preimage left the field of view take `fill`.
    pub fn invert<T: Real>(&self, pred: &Volume<T>, fill: &[T]) -> Volume<T> {
        self.remap(pred, |q, dims| self.map_forward(q, dims), fill)
    }

    fn remap<T: Real>(
        &self,
        src: &Volume<T>,
        source_of: impl Fn([isize; 3], Dims) -> [isize; 3],
        fill: &[T],
    ) -> Volume<T> {
        let dims = src.dims();
        assert!(
            self.quarter_turns % 4 == 0 || dims[1] == dims[2],
            "in-plane rotation needs a square plane"
        );
        let v = src.voxels();
        let mut out = Volume::zeros(src.channels(), dims);
        let [d, h, w] = dims;
        let mut idx = 0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let s = source_of([z as isize, y as isize, x as isize], dims);
                    let inside = (0..3).all(|a| s[a] >= 0 && (s[a] as usize) < dims[a]);
                    if inside {
                        let si = (s[0] as usize * h + s[1] as usize) * w + s[2] as usize;
                        for c in 0..src.channels() {
                            out.data_mut()[c * v + idx] = src.data()[c * v + si];
                        }
                    } else {
                        for c in 0..src.channels() {
                            out.data_mut()[c * v + idx] = fill[c];
                        }
                    }
                    idx += 1;
                }
            }
        }
        out
    }
}

/// `n` augmentations drawn from a generator seeded with `seed`.
pub fn sample_augmentations(dims: Dims, n: usize, seed: u64) -> Vec<Augmentation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Augmentation::sample(dims, &mut rng)).collect()
}
