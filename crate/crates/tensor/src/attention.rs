//! Multi-head scaled dot-product attention over batched `[batch, rows, dim]`.

use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::real::Real;

/// Which keys each query row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    /// Row `n` sees keys `0..=n` (self-attention over one timeline).
    Causal,
    /// Per-sample count of valid keys; keys at or past it are hidden.
    KeyLengths(Rc<[usize]>),
    CausalKeyLengths(Rc<[usize]>),
    /// Explicit `[batch, rows, keys]` allow-list.
    Explicit(Rc<[bool]>),
}

impl AttnMask {
    pub(crate) fn allows(&self, b: usize, n: usize, m: usize, rows: usize, keys: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => m <= n,
            AttnMask::KeyLengths(l) => m < l[b],
            AttnMask::CausalKeyLengths(l) => m <= n && m < l[b],
            AttnMask::Explicit(a) => a[(b * rows + n) * keys + m],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub rows: usize,
    pub keys: usize,
    pub dk: usize,
    pub dv: usize,
    pub heads: usize,
    pub mask: AttnMask,
}

impl AttnGeom {
    fn scale<T: Real>(&self) -> T {
        T::from_usize(self.dk / self.heads).unwrap().sqrt().recip()
    }
}

/// Returns the output and the `[batch, heads, rows, keys]` weights.
pub(crate) fn forward<T: Real>(g: &AttnGeom, q: &[T], k: &[T], v: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let (nr, nk, h) = (g.rows, g.keys, g.heads);
    let (hk, hv) = (g.dk / h, g.dv / h);
    let scale: T = g.scale();
    let mut probs = vec![T::zero(); g.batch * h * nr * nk];
    let mut out = vec![T::zero(); g.batch * nr * g.dv];
    let mut scores = vec![T::zero(); nk];
    for b in 0..g.batch {
        for n in 0..nr {
            if !(0..nk).any(|m| g.mask.allows(b, n, m, nr, nk)) {
                return Err(TensorError::FullyMasked { batch: b, row: n });
            }
        }
        for hh in 0..h {
            for n in 0..nr {
                let qrow = &q[(b * nr + n) * g.dk + hh * hk..][..hk];
                let mut max = T::neg_infinity();
                for m in 0..nk {
                    if g.mask.allows(b, n, m, nr, nk) {
                        let krow = &k[(b * nk + m) * g.dk + hh * hk..][..hk];
                        let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        scores[m] = s;
                        max = max.max(s);
                    }
                }
                let p = &mut probs[((b * h + hh) * nr + n) * nk..][..nk];
                let mut total = T::zero();
                for m in 0..nk {
                    if g.mask.allows(b, n, m, nr, nk) {
                        p[m] = (scores[m] - max).exp();
                        total += p[m];
                    }
                }
                let o = &mut out[(b * nr + n) * g.dv + hh * hv..][..hv];
                for m in 0..nk {
                    if p[m] == T::zero() {
                        continue;
                    }
                    p[m] = p[m] / total;
                    let vrow = &v[(b * nk + m) * g.dv + hh * hv..][..hv];
                    o.iter_mut().zip(vrow).for_each(|(a, &c)| *a += p[m] * c);
                }
            }
        }
    }
    Ok((out, probs))
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn backward<T: Real>(
    g: &AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (nr, nk, h) = (g.rows, g.keys, g.heads);
    let (hk, hv) = (g.dk / h, g.dv / h);
    let scale: T = g.scale();
    let mut dq = vec![T::zero(); q.len()];
    let mut dkey = vec![T::zero(); k.len()];
    let mut dval = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); nk];
    for b in 0..g.batch {
        for hh in 0..h {
            for n in 0..nr {
                let p = &probs[((b * h + hh) * nr + n) * nk..][..nk];
                let dorow = &dout[(b * nr + n) * g.dv + hh * hv..][..hv];
                let mut dot = T::zero();
                for m in 0..nk {
                    let vrow = &v[(b * nk + m) * g.dv + hh * hv..][..hv];
                    dp[m] = dorow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                    dot += p[m] * dp[m];
                    let dvrow = &mut dval[(b * nk + m) * g.dv + hh * hv..][..hv];
                    dvrow.iter_mut().zip(dorow).for_each(|(a, &c)| *a += p[m] * c);
                }
                let qoff = (b * nr + n) * g.dk + hh * hk;
                for m in 0..nk {
                    let ds = p[m] * (dp[m] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let koff = (b * nk + m) * g.dk + hh * hk;
                    for j in 0..hk {
                        dq[qoff + j] += ds * k[koff + j];
                        dkey[koff + j] += ds * q[qoff + j];
                    }
                }
            }
        }
    }
    (dq, dkey, dval)
}
