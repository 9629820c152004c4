//! Dilated 1-d convolution over `[batch, time, channels]` activations.

use std::rc::Rc;

use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// `dilation * (kernel - 1)` zeros on the past side only.
    Causal,
    /// Zeros split across both sides so the output keeps the input length.
    Same,
}

/// Layer-level description of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv1dSpec {
    pub fn causal(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Conv1dSpec {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            padding: Padding::Causal,
        }
    }

    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Conv1dSpec {
            padding: Padding::Same,
            ..Self::causal(in_channels, out_channels, kernel_size, dilation)
        }
    }

    pub fn weight_shape(&self) -> [usize; 3] {
        [self.out_channels, self.in_channels, self.kernel_size]
    }

    /// Zeros inserted before the first time step.
    pub fn pad_left(&self) -> usize {
        let total = self.dilation * (self.kernel_size - 1);
        match self.padding {
            Padding::Causal => total,
            Padding::Same => total / 2,
        }
    }

    /// Number of past steps (including the current one) an output can see.
    pub fn receptive_field(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub time: usize,
    pub spec: Conv1dSpec,
    /// Per-sample valid lengths; inputs at or beyond them read as zero.
    pub lengths: Option<Rc<[usize]>>,
}

impl ConvGeom {
    fn len_of(&self, b: usize) -> usize {
        self.lengths.as_ref().map_or(self.time, |l| l[b].min(self.time))
    }

    /// Output rows `[lo, hi)` that read tap `j`, and the signed input offset.
    fn tap_range(&self, b: usize, j: usize) -> Option<(usize, usize, isize)> {
        let off = (j * self.spec.dilation) as isize - self.spec.pad_left() as isize;
        let lo = (-off).max(0) as usize;
        let hi = (self.len_of(b) as isize - off).clamp(0, self.time as isize) as usize;
        (lo < hi).then_some((lo, hi, off))
    }
}

/// `[cout, cin, k]` weights regrouped into `k` blocks of `[cin, cout]`.
fn per_tap<T: Real>(w: &[T], cin: usize, cout: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for j in 0..k {
                out[j * cin * cout + i * cout + o] = w[(o * cin + i) * k + j];
            }
        }
    }
    out
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let Conv1dSpec {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        ..
    } = g.spec;
    let mut out = vec![T::zero(); g.batch * g.time * cout];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
    }
    let taps = per_tap(w, cin, cout, k);
    for b in 0..g.batch {
        let xb = &x[b * g.time * cin..(b + 1) * g.time * cin];
        let yb = &mut out[b * g.time * cout..(b + 1) * g.time * cout];
        for j in 0..k {
            let Some((lo, hi, off)) = g.tap_range(b, j) else {
                continue;
            };
            let src = (lo as isize + off) as usize;
            T::gemm(
                hi - lo,
                cin,
                cout,
                &xb[src * cin..],
                false,
                &taps[j * cin * cout..(j + 1) * cin * cout],
                false,
                &mut yb[lo * cout..],
                true,
            );
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let Conv1dSpec {
        in_channels: cin,
        out_channels: cout,
        kernel_size: k,
        ..
    } = g.spec;
    let taps = per_tap(w, cin, cout, k);
    let mut dx = vec![T::zero(); x.len()];
    let mut dtaps = vec![T::zero(); taps.len()];
    let mut db = vec![T::zero(); cout];
    for row in dy.chunks_exact(cout) {
        db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
    }
    for b in 0..g.batch {
        let xb = &x[b * g.time * cin..(b + 1) * g.time * cin];
        let dxb = &mut dx[b * g.time * cin..(b + 1) * g.time * cin];
        let dyb = &dy[b * g.time * cout..(b + 1) * g.time * cout];
        for j in 0..k {
            let Some((lo, hi, off)) = g.tap_range(b, j) else {
                continue;
            };
            let src = (lo as isize + off) as usize;
            let rows = hi - lo;
            let tap = &taps[j * cin * cout..(j + 1) * cin * cout];
            T::gemm(rows, cout, cin, &dyb[lo * cout..], false, tap, true, &mut dxb[src * cin..], true);
            T::gemm(
                cin,
                rows,
                cout,
                &xb[src * cin..(src + rows) * cin],
                true,
                &dyb[lo * cout..],
                false,
                &mut dtaps[j * cin * cout..(j + 1) * cin * cout],
                true,
            );
        }
    }
    let mut dw = vec![T::zero(); w.len()];
    for o in 0..cout {
        for i in 0..cin {
            for j in 0..k {
                dw[(o * cin + i) * k + j] = dtaps[j * cin * cout + i * cout + o];
            }
        }
    }
    (dx, dw, db)
}
