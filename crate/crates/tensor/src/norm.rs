//! Instance normalization over the time axis of `[batch, time, channels]`.
//!
//! `Full` uses statistics of every valid step of the sample. `Causal` uses
//! running statistics of steps `0..=t`, so the output at `t` never depends on
//! later inputs. Steps at or beyond a sample's valid length produce zero.

use std::rc::Rc;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Full,
    Causal,
}

#[derive(Clone, Debug)]
pub(crate) struct NormGeom {
    pub batch: usize,
    pub time: usize,
    pub channels: usize,
    pub mode: NormMode,
    pub lengths: Option<Rc<[usize]>>,
}

impl NormGeom {
    fn len_of(&self, b: usize) -> usize {
        self.lengths.as_ref().map_or(self.time, |l| l[b].min(self.time))
    }
}

/// Saved per-element statistics. For `Full` the mean and inverse std are
/// constant across time within a (sample, channel).
#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    pub xhat: Vec<T>,
}

pub(crate) fn forward<T: Real>(
    g: &NormGeom,
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let (tt, cc) = (g.time, g.channels);
    let n_all = g.batch * tt * cc;
    let mut y = vec![T::zero(); n_all];
    let mut cache = NormCache {
        mean: vec![T::zero(); n_all],
        inv_std: vec![T::zero(); n_all],
        xhat: vec![T::zero(); n_all],
    };
    let at = |b: usize, t: usize, c: usize| (b * tt + t) * cc + c;
    for b in 0..g.batch {
        let len = g.len_of(b);
        if len == 0 {
            continue;
        }
        for c in 0..cc {
            match g.mode {
                NormMode::Full => {
                    let n = T::from_usize(len).unwrap();
                    let mean = (0..len).map(|t| x[at(b, t, c)]).sum::<T>() / n;
                    let var = (0..len)
                        .map(|t| {
                            let d = x[at(b, t, c)] - mean;
                            d * d
                        })
                        .sum::<T>()
                        / n;
                    let inv = (var + eps).sqrt().recip();
                    for t in 0..len {
                        let i = at(b, t, c);
                        let xh = (x[i] - mean) * inv;
                        cache.mean[i] = mean;
                        cache.inv_std[i] = inv;
                        cache.xhat[i] = xh;
                        y[i] = gamma[c] * xh + beta[c];
                    }
                }
                NormMode::Causal => {
                    // Welford running moments.
                    let mut mean = T::zero();
                    let mut m2 = T::zero();
                    for t in 0..len {
                        let i = at(b, t, c);
                        let n = T::from_usize(t + 1).unwrap();
                        let d = x[i] - mean;
                        mean += d / n;
                        m2 += d * (x[i] - mean);
                        let inv = (m2 / n + eps).sqrt().recip();
                        let xh = (x[i] - mean) * inv;
                        cache.mean[i] = mean;
                        cache.inv_std[i] = inv;
                        cache.xhat[i] = xh;
                        y[i] = gamma[c] * xh + beta[c];
                    }
                }
            }
        }
    }
    (y, cache)
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<T: Real>(
    g: &NormGeom,
    x: &[T],
    gamma: &[T],
    cache: &NormCache<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (tt, cc) = (g.time, g.channels);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); cc];
    let mut dbeta = vec![T::zero(); cc];
    let at = |b: usize, t: usize, c: usize| (b * tt + t) * cc + c;
    for b in 0..g.batch {
        let len = g.len_of(b);
        for c in 0..cc {
            for t in 0..len {
                let i = at(b, t, c);
                dgamma[c] += dy[i] * cache.xhat[i];
                dbeta[c] += dy[i];
            }
            match g.mode {
                NormMode::Full => {
                    if len == 0 {
                        continue;
                    }
                    let n = T::from_usize(len).unwrap();
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for t in 0..len {
                        let i = at(b, t, c);
                        let d = dy[i] * gamma[c];
                        sum_d += d;
                        sum_dx += d * cache.xhat[i];
                    }
                    for t in 0..len {
                        let i = at(b, t, c);
                        let d = dy[i] * gamma[c];
                        dx[i] = cache.inv_std[i] / n * (n * d - sum_d - cache.xhat[i] * sum_dx);
                    }
                }
                NormMode::Causal => {
                    // Output t touches inputs 0..=t; accumulate its pull on
                    // each earlier input through suffix sums over t.
                    let mut suf_a = T::zero();
                    let mut suf_b = T::zero();
                    let mut suf_bm = T::zero();
                    for s in (0..len).rev() {
                        let i = at(b, s, c);
                        let n = T::from_usize(s + 1).unwrap();
                        let d = dy[i] * gamma[c];
                        let inv = cache.inv_std[i];
                        let coef_b = d * inv * inv * cache.xhat[i] / n;
                        suf_a += d * inv / n;
                        suf_b += coef_b;
                        suf_bm += coef_b * cache.mean[i];
                        dx[i] = d * inv - suf_a - x[i] * suf_b + suf_bm;
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
