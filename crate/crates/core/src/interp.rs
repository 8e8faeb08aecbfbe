//! Catmull-Rom bicubic interpolation (`a = -0.5`).
//!
//! Grid resampling maps output pixel centres onto input pixel centres, so an
//! identity resize reproduces the input exactly.

use ndarray::{Array2, ArrayView2};

const A: f64 = -0.5;

/// Catmull-Rom cubic convolution kernel.
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// How samples outside the image are treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Border {
    /// Replicate edge pixels.
    Clamp,
    /// Positions beyond the outer pixel edges read as exactly zero; positions
    /// inside use edge-clamped taps.
    Zero,
}

#[derive(Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

#[inline]
fn taps(pos: f64, len: usize) -> Taps {
    let base = pos.floor();
    let t = pos - base;
    let base = base as isize;
    let last = len as isize - 1;
    let mut idx = [0usize; 4];
    let mut w = [0.0; 4];
    for k in 0..4 {
        let i = base - 1 + k as isize;
        idx[k] = i.clamp(0, last) as usize;
        w[k] = cubic_kernel(t - (k as f64 - 1.0));
    }
    Taps { idx, w }
}

fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| taps((i as f64 + 0.5) * scale - 0.5, in_len))
        .collect()
}

/// Resample `image` to `out_dims` with edge-clamped borders.
pub fn resample_bicubic(image: ArrayView2<f64>, out_dims: (usize, usize)) -> Array2<f64> {
    let (h, w) = image.dim();
    let (oh, ow) = out_dims;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Array2::zeros(out_dims);
    }
    let col_taps = axis_taps(w, ow);
    let row_taps = axis_taps(h, oh);

    // Horizontal pass: h × ow.
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for r in 0..h {
        let src = image.row(r);
        let mut dst = tmp.row_mut(r);
        for (c, t) in col_taps.iter().enumerate() {
            dst[c] = t.w[0] * src[t.idx[0]]
                + t.w[1] * src[t.idx[1]]
                + t.w[2] * src[t.idx[2]]
                + t.w[3] * src[t.idx[3]];
        }
    }
    // Vertical pass.
    let mut out = Array2::<f64>::zeros((oh, ow));
    for (r, t) in row_taps.iter().enumerate() {
        let rows = [tmp.row(t.idx[0]), tmp.row(t.idx[1]), tmp.row(t.idx[2]), tmp.row(t.idx[3])];
        let mut dst = out.row_mut(r);
        for c in 0..ow {
            dst[c] = t.w[0] * rows[0][c] + t.w[1] * rows[1][c] + t.w[2] * rows[2][c] + t.w[3] * rows[3][c];
        }
    }
    out
}

/// Bicubic sample at a continuous `(row, col)` position.
pub fn sample_bicubic(image: ArrayView2<f64>, row: f64, col: f64, border: Border) -> f64 {
    let (h, w) = image.dim();
    if h == 0 || w == 0 {
        return 0.0;
    }
    if border == Border::Zero
        && (row < -0.5 || col < -0.5 || row > h as f64 - 0.5 || col > w as f64 - 0.5)
    {
        return 0.0;
    }
    let tr = taps(row, h);
    let tc = taps(col, w);
    let mut acc = 0.0;
    for (i, wr) in tr.idx.iter().zip(tr.w) {
        if wr == 0.0 {
            continue;
        }
        let line = image.row(*i);
        let v = tc.w[0] * line[tc.idx[0]]
            + tc.w[1] * line[tc.idx[1]]
            + tc.w[2] * line[tc.idx[2]]
            + tc.w[3] * line[tc.idx[3]];
        acc += wr * v;
    }
    acc
}
