//! Parameter-free layers and their backward passes.

use rand::Rng;

use crate::tensor::{Dims, Real, Volume};

pub fn relu_inplace<T: Real>(x: &mut Volume<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<T: Real>(act: &Volume<T>, grad: &mut Volume<T>) {
    for (g, &a) in grad.data_mut().iter_mut().zip(act.data()) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

const NORM_EPS: f64 = 1e-5;

/// Non-affine instance normalization: each channel is shifted and scaled
/// to zero mean and unit (biased) variance. Returns the per-channel
/// inverse standard deviations.
pub fn instance_norm_inplace<T: Real>(x: &mut Volume<T>) -> Vec<T> {
    (0..x.channels())
        .map(|c| {
            let ch = x.channel_mut(c);
            let n = ch.len() as f64;
            let mean = ch.iter().map(|v| v.f64()).sum::<f64>() / n;
            let var = ch.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            let (m, s) = (T::of(mean), T::of(inv));
            for v in ch.iter_mut() {
                *v = (*v - m) * s;
            }
            s
        })
        .collect()
}

/// Maps the gradient w.r.t. the normalized output `xhat` to the gradient
/// w.r.t. the input, in place.
pub fn instance_norm_backward<T: Real>(xhat: &Volume<T>, inv_std: &[T], grad: &mut Volume<T>) {
    for (c, &inv) in inv_std.iter().enumerate() {
        let xh = xhat.channel(c);
        let g = grad.channel_mut(c);
        let n = g.len() as f64;
        let mean_g = g.iter().map(|v| v.f64()).sum::<f64>() / n;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() / n;
        let (mg, mgx) = (T::of(mean_g), T::of(mean_gx));
        for (g, &x) in g.iter_mut().zip(xh) {
            *g = inv * (*g - mg - x * mgx);
        }
    }
}

/// Samples an inverted-dropout mask: each entry is `0` with probability
/// `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<T: Real, R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn apply_mask<T: Real>(x: &mut [T], mask: &[T]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v *= m;
    }
}

/// Nearest-neighbour upsampling by 2 along every axis.
pub fn upsample2<T: Real>(x: &Volume<T>) -> Volume<T> {
    let [d, h, w] = x.dims();
    let od: Dims = [2 * d, 2 * h, 2 * w];
    let mut out = Volume::zeros(x.channels(), od);
    for c in 0..x.channels() {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..2 * d {
            for y in 0..2 * h {
                let srow = &src[((z / 2) * h + y / 2) * w..][..w];
                let drow = &mut dst[(z * 2 * h + y) * 2 * w..][..2 * w];
                for (xo, v) in drow.iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2×2 block.
pub fn upsample2_backward<T: Real>(g: &Volume<T>) -> Volume<T> {
    let [gd, gh, gw] = g.dims();
    let dims: Dims = [gd / 2, gh / 2, gw / 2];
    let [_, h, w] = dims;
    let mut out = Volume::zeros(g.channels(), dims);
    for c in 0..g.channels() {
        let src = g.channel(c);
        let dst = out.channel_mut(c);
        for z in 0..gd {
            for y in 0..gh {
                let srow = &src[(z * gh + y) * gw..][..gw];
                let drow = &mut dst[((z / 2) * h + y / 2) * w..][..w];
                for (xo, &v) in srow.iter().enumerate() {
                    drow[xo / 2] += v;
                }
            }
        }
    }
    out
}

/// Channel-wise softmax of `logits / temperature`, per voxel.
pub fn softmax_channels<T: Real>(logits: &Volume<T>, temperature: T) -> Volume<T> {
    let n = logits.channels();
    let v = logits.voxels();
    let src = logits.data();
    let mut out = Volume::zeros(n, logits.dims());
    let dst = out.data_mut();
    let inv_t = T::one() / temperature;
    let mut max = vec![T::neg_infinity(); v];
    for c in 0..n {
        for (m, &z) in max.iter_mut().zip(&src[c * v..(c + 1) * v]) {
            let z = z * inv_t;
            if z > *m {
                *m = z;
            }
        }
    }
    let mut sum = vec![T::zero(); v];
    for c in 0..n {
        let row = &mut dst[c * v..(c + 1) * v];
        for ((o, &z), (&m, s)) in row
            .iter_mut()
            .zip(&src[c * v..(c + 1) * v])
            .zip(max.iter().zip(sum.iter_mut()))
        {
            *o = (z * inv_t - m).exp();
            *s += *o;
        }
    }
    for c in 0..n {
        for (o, &s) in dst[c * v..(c + 1) * v].iter_mut().zip(&sum) {
            *o /= s;
        }
    }
    out
}

/// Chains a gradient with respect to softmax outputs back to the logits
/// (unit temperature): `dz_k = p_k (dp_k − Σ_j p_j dp_j)`.
pub fn softmax_backward<T: Real>(probs: &Volume<T>, grad_probs: &Volume<T>) -> Volume<T> {
    let n = probs.channels();
    let v = probs.voxels();
    let p = probs.data();
    let g = grad_probs.data();
    let mut inner = vec![T::zero(); v];
    for c in 0..n {
        for ((s, &pc), &gc) in inner.iter_mut().zip(&p[c * v..(c + 1) * v]).zip(&g[c * v..(c + 1) * v]) {
            *s += pc * gc;
        }
    }
    let mut out = Volume::zeros(n, probs.dims());
    let dst = out.data_mut();
    for c in 0..n {
        for (((o, &pc), &gc), &s) in dst[c * v..(c + 1) * v]
            .iter_mut()
            .zip(&p[c * v..(c + 1) * v])
            .zip(&g[c * v..(c + 1) * v])
            .zip(&inner)
        {
            *o = pc * (gc - s);
        }
    }
    out
}

/// Averages each channel over space into a `C × 1 × 1 × 1` volume.
pub fn global_avg_pool<T: Real>(x: &Volume<T>) -> Volume<T> {
    let n = T::of(x.voxels() as f64);
    let data = (0..x.channels())
        .map(|c| x.channel(c).iter().copied().sum::<T>() / n)
        .collect();
    Volume::from_vec(x.channels(), [1, 1, 1], data).expect("pooled shape")
}

pub fn global_avg_pool_backward<T: Real>(g: &Volume<T>, dims: Dims) -> Volume<T> {
    let mut out = Volume::zeros(g.channels(), dims);
    let n = T::of(out.voxels() as f64);
    for c in 0..g.channels() {
        let v = g.data()[c] / n;
        out.channel_mut(c).fill(v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(channels: usize, dims: Dims, seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = channels * dims.iter().product::<usize>();
        Volume::from_vec(channels, dims, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    fn inner(a: &Volume<f64>, b: &Volume<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = random_volume(2, [2, 3, 2], 1);
        let g = random_volume(2, [4, 6, 4], 2);
        let lhs = inner(&upsample2(&x), &g);
        let rhs = inner(&x, &upsample2_backward(&g));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = random_volume(4, [2, 2, 2], 5);
        for t in [0.5, 1.0, 3.0] {
            let p = softmax_channels(&z, t);
            for i in 0..p.voxels() {
                let s: f64 = (0..4).map(|c| p.channel(c)[i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn instance_norm_standardizes_channels() {
        let mut x = random_volume(2, [2, 3, 4], 3);
        instance_norm_inplace(&mut x);
        for c in 0..2 {
            let ch = x.channel(c);
            let mean = ch.iter().sum::<f64>() / 24.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_backward_matches_finite_differences() {
        let x = random_volume(2, [1, 3, 3], 4);
        let r = random_volume(2, [1, 3, 3], 5);
        let f = |x: &Volume<f64>| {
            let mut y = x.clone();
            instance_norm_inplace(&mut y);
            inner(&y, &r)
        };
        let mut xhat = x.clone();
        let inv = instance_norm_inplace(&mut xhat);
        let mut g = r.clone();
        instance_norm_backward(&xhat, &inv, &mut g);
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += 1e-6;
            let mut xm = x.clone();
            xm.data_mut()[i] -= 1e-6;
            let fd = (f(&xp) - f(&xm)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-7, "{i}: {fd} vs {}", g.data()[i]);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let z = random_volume(3, [1, 2, 2], 8);
        let r = random_volume(3, [1, 2, 2], 9);
        let f = |z: &Volume<f64>| inner(&softmax_channels(z, 1.0), &r);
        let p = softmax_channels(&z, 1.0);
        let g = softmax_backward(&p, &r);
        for i in 0..z.data().len() {
            let mut zp = z.clone();
            zp.data_mut()[i] += 1e-6;
            let mut zm = z.clone();
            zm.data_mut()[i] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let x = random_volume(3, [2, 2, 4], 3);
        let g = random_volume(3, [1, 1, 1], 4);
        let lhs = inner(&global_avg_pool(&x), &g);
        let rhs = inner(&x, &global_avg_pool_backward(&g, x.dims()));
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Vec<f64> = dropout_mask(10_000, 0.2, &mut rng);
        let dropped = m.iter().filter(|&&x| x == 0.0).count();
        assert!((1700..2300).contains(&dropped));
        assert!(m.iter().all(|&x| x == 0.0 || (x - 1.25).abs() < 1e-12));
    }
}
