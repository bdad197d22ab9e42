//! Sequence types shared by every stage.
//!
//! All sequences are `T x H x W` arrays indexed `[frame, row, col]`. Rows are
//! the Cartesian phase-encode lines: a [`LineMask`] is `T x H` and line `l` of
//! frame `t` is `kspace[[t, l, ..]]`.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

pub const MIN_FRAMES: usize = 1;
pub const MIN_ROWS: usize = 4;
pub const MIN_COLS: usize = 4;

/// Axis of a sequence array that enumerates Cartesian lines.
pub const LINE_AXIS: Axis = Axis(1);
/// Axis of a sequence array that runs along a line (readout).
pub const READOUT_AXIS: Axis = Axis(2);

/// Sequence dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub frames: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Geometry {
    pub fn new(frames: usize, rows: usize, cols: usize) -> Result<Self> {
        let g = Geometry { frames, rows, cols };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames >= MIN_FRAMES && self.rows >= MIN_ROWS && self.cols >= MIN_COLS,
            "sequence dims must be at least {}x{}x{}, got {}x{}x{}",
            MIN_FRAMES,
            MIN_ROWS,
            MIN_COLS,
            self.frames,
            self.rows,
            self.cols
        );
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.rows, self.cols)
    }

    /// Number of Cartesian lines per frame.
    pub fn lines(&self) -> usize {
        self.rows
    }

    pub fn pixels_per_frame(&self) -> usize {
        self.rows * self.cols
    }

    pub fn total_pixels(&self) -> usize {
        self.frames * self.rows * self.cols
    }

    fn of<T>(a: &Array3<T>) -> Self {
        let (frames, rows, cols) = a.dim();
        Geometry { frames, rows, cols }
    }
}

fn check_shape<T>(a: &Array3<T>) -> Result<Geometry> {
    let g = Geometry::of(a);
    g.validate()?;
    Ok(g)
}

/// Real-valued image sequence (magnitudes, normalized intensities).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSequence(Array3<f64>);

impl ImageSequence {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        check_shape(&data)?;
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "image sequence contains non-finite values"
        );
        Ok(ImageSequence(data))
    }

    pub fn from_fn(geometry: Geometry, f: impl FnMut((usize, usize, usize)) -> f64) -> Result<Self> {
        Self::new(Array3::from_shape_fn(geometry.shape(), f))
    }

    pub fn zeros(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        Ok(ImageSequence(Array3::zeros(geometry.shape())))
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::of(&self.0)
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.0
    }

    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.0.index_axis(Axis(0), t)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_complex(&self) -> ComplexSequence {
        ComplexSequence(self.0.mapv(|v| Complex64::new(v, 0.0)))
    }

    /// Returns a sequence with frames reordered as `order[i]` -> position `i`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        ensure!(order.len() == self.geometry().frames, "permutation length mismatch");
        Ok(ImageSequence(self.0.select(Axis(0), order)))
    }
}

/// Complex image-domain sequence; real and imaginary parts are the two channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSequence(Array3<Complex64>);

impl ComplexSequence {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        check_shape(&data)?;
        ensure!(
            data.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
            "complex sequence contains non-finite values"
        );
        Ok(ComplexSequence(data))
    }

    pub fn zeros(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        Ok(ComplexSequence(Array3::zeros(geometry.shape())))
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::of(&self.0)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.0
    }

    pub fn magnitude(&self) -> ImageSequence {
        magnitude(self)
    }
}

/// Per-pixel complex modulus.
pub fn magnitude(seq: &ComplexSequence) -> ImageSequence {
    ImageSequence(seq.0.mapv(|c| c.norm()))
}

/// Centered Fourier-domain sequence. Rows are Cartesian lines.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpace(Array3<Complex64>);

impl KSpace {
    pub fn new(data: Array3<Complex64>) -> Result<Self> {
        check_shape(&data)?;
        ensure!(
            data.iter().all(|v| v.re.is_finite() && v.im.is_finite()),
            "k-space contains non-finite values"
        );
        Ok(KSpace(data))
    }

    pub fn zeros(geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        Ok(KSpace(Array3::zeros(geometry.shape())))
    }

    pub fn geometry(&self) -> Geometry {
        Geometry::of(&self.0)
    }

    pub fn data(&self) -> &Array3<Complex64> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<Complex64> {
        self.0
    }

    pub fn line(&self, frame: usize, line: usize) -> ArrayView1<'_, Complex64> {
        self.0.slice(ndarray::s![frame, line, ..])
    }

    pub fn expect_geometry(&self, expected: Geometry) -> Result<()> {
        ensure!(
            self.geometry() == expected,
            "k-space shape {:?} does not match declared geometry {:?}",
            self.geometry().shape(),
            expected.shape()
        );
        Ok(())
    }

    /// Mutable access for crate-internal kernels that preserve finiteness.
    pub(crate) fn data_mut(&mut self) -> &mut Array3<Complex64> {
        &mut self.0
    }
}

/// Per-frame, per-line corruption indicator: `1` = corrupted, `0` = clean.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineMask(Array2<u8>);

impl LineMask {
    pub fn zeros(frames: usize, lines: usize) -> Self {
        LineMask(Array2::zeros((frames, lines)))
    }

    pub fn ones(frames: usize, lines: usize) -> Self {
        LineMask(Array2::ones((frames, lines)))
    }

    pub fn new(data: Array2<u8>) -> Result<Self> {
        ensure!(data.iter().all(|&v| v <= 1), "line mask entries must be 0 or 1");
        Ok(LineMask(data))
    }

    pub fn from_fn(frames: usize, lines: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        LineMask(Array2::from_shape_fn((frames, lines), |(t, l)| f(t, l) as u8))
    }

    pub fn frames(&self) -> usize {
        self.0.nrows()
    }

    pub fn lines(&self) -> usize {
        self.0.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn is_corrupted(&self, frame: usize, line: usize) -> bool {
        self.0[[frame, line]] == 1
    }

    pub fn set(&mut self, frame: usize, line: usize, corrupted: bool) {
        self.0[[frame, line]] = corrupted as u8;
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|&v| v as usize).sum()
    }

    pub fn count_in_frame(&self, frame: usize) -> usize {
        self.0.row(frame).iter().map(|&v| v as usize).sum()
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.0
    }

    /// Labels as `0.0`/`1.0`, e.g. for use as detection targets.
    pub fn as_f64(&self) -> Array2<f64> {
        self.0.mapv(f64::from)
    }

    pub fn matches(&self, geometry: Geometry) -> Result<()> {
        ensure!(
            self.dim() == (geometry.frames, geometry.lines()),
            "line mask shape {:?} does not match (frames, lines) = ({}, {})",
            self.dim(),
            geometry.frames,
            geometry.lines()
        );
        Ok(())
    }
}

pub(crate) fn ensure_same_geometry(a: Geometry, b: Geometry, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::validation(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}
