//! Centered, orthonormal 2D Fourier transforms applied frame by frame.
//!
//! Forward: `K = fftshift(F(x)) / sqrt(H*W)`, so the DC coefficient sits at
//! `(H/2, W/2)` (floor) and Parseval holds exactly in exact arithmetic.
//! Inverse: `x = F^-1(ifftshift(K)) * H*W / sqrt(H*W)`.

use std::sync::Arc;

use ndarray::{Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{ensure, Result};
use crate::tensor::{ComplexSequence, KSpace};

/// Reusable plans for one frame size.
#[derive(Clone)]
pub struct Fft2Plan {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl Fft2Plan {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2Plan {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            scale: 1.0 / ((rows * cols) as f64).sqrt(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// In-place centered forward transform of one row-major `rows x cols` frame.
    pub fn forward_frame(&self, frame: &mut [Complex64]) {
        self.transform(frame, true);
        shift(frame, self.rows, self.cols, Shift::Forward);
    }

    /// In-place centered inverse transform of one row-major frame.
    pub fn inverse_frame(&self, frame: &mut [Complex64]) {
        shift(frame, self.rows, self.cols, Shift::Inverse);
        self.transform(frame, false);
    }

    fn transform(&self, frame: &mut [Complex64], forward: bool) {
        let (rows, cols) = (self.rows, self.cols);
        debug_assert_eq!(frame.len(), rows * cols);
        let (row_fft, col_fft) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row_fft.process(frame);

        let mut transposed = vec![Complex64::new(0.0, 0.0); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                transposed[c * rows + r] = frame[r * cols + c];
            }
        }
        col_fft.process(&mut transposed);
        for c in 0..cols {
            for r in 0..rows {
                frame[r * cols + c] = transposed[c * rows + r] * self.scale;
            }
        }
    }

    /// Applies a per-frame transform to every frame of a `T x H x W` array.
    pub(crate) fn apply(&self, data: &mut Array3<Complex64>, forward: bool) {
        data.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut frame| {
            let slice = frame.as_slice_mut().expect("sequence frames are contiguous");
            if forward {
                self.forward_frame(slice);
            } else {
                self.inverse_frame(slice);
            }
        });
    }
}

#[derive(Clone, Copy)]
enum Shift {
    Forward,
    Inverse,
}

/// fftshift (forward) / ifftshift (inverse) along both axes of one frame.
fn shift(frame: &mut [Complex64], rows: usize, cols: usize, dir: Shift) {
    let (dr, dc) = match dir {
        Shift::Forward => (rows / 2, cols / 2),
        Shift::Inverse => (rows - rows / 2, cols - cols / 2),
    };
    if dr == 0 && dc == 0 {
        return;
    }
    let src = frame.to_vec();
    for r in 0..rows {
        let rr = (r + dr) % rows;
        for c in 0..cols {
            frame[rr * cols + (c + dc) % cols] = src[r * cols + c];
        }
    }
}

fn standard_layout(a: &Array3<Complex64>) -> Array3<Complex64> {
    if a.is_standard_layout() {
        a.clone()
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Centered orthonormal 2D DFT of every frame.
pub fn fft2(seq: &ComplexSequence) -> Result<KSpace> {
    let g = seq.geometry();
    ensure!(
        seq.data().iter().all(|v| v.re.is_finite() && v.im.is_finite()),
        "fft2 input contains non-finite values"
    );
    let mut data = standard_layout(seq.data());
    Fft2Plan::new(g.rows, g.cols).apply(&mut data, true);
    KSpace::new(data)
}

/// Exact inverse of [`fft2`].
pub fn ifft2(ks: &KSpace) -> Result<ComplexSequence> {
    let g = ks.geometry();
    let mut data = standard_layout(ks.data());
    Fft2Plan::new(g.rows, g.cols).apply(&mut data, false);
    ComplexSequence::new(data)
}

/// [`ifft2`] after checking the k-space against a declared geometry.
pub fn ifft2_checked(ks: &KSpace, expected: crate::tensor::Geometry) -> Result<ComplexSequence> {
    ks.expect_geometry(expected)?;
    ifft2(ks)
}
