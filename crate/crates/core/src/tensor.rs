//! Dense row-major tensors on an `f64` carrier, with allocation metering.
//!
//! Every buffer built through [`Tensor`] is charged to a per-thread meter
//! at `numel * format.bytes()` logical bytes and released on drop, so the
//! high-water mark reflects the storage a native implementation in the
//! tagged formats would need.

use crate::numerics::{quantize_slice, NumericFormat};
use std::cell::Cell;
use std::fmt;

thread_local! {
    static LIVE_BYTES: Cell<usize> = const { Cell::new(0) };
    static PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

fn charge(bytes: usize) {
    LIVE_BYTES.with(|live| {
        let now = live.get() + bytes;
        live.set(now);
        PEAK_BYTES.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

fn release(bytes: usize) {
    LIVE_BYTES.with(|live| live.set(live.get().saturating_sub(bytes)));
}

/// Per-thread tensor allocation meter.
pub mod memory {
    use super::{LIVE_BYTES, PEAK_BYTES};

    /// High-water mark of live tensor bytes since the last [`reset`].
    pub fn peak_bytes() -> usize {
        PEAK_BYTES.with(|p| p.get())
    }

    pub fn live_bytes() -> usize {
        LIVE_BYTES.with(|l| l.get())
    }

    /// Restart peak tracking from the current live total.
    pub fn reset() {
        let live = live_bytes();
        PEAK_BYTES.with(|p| p.set(live));
    }
}

pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    format: NumericFormat,
}

impl Tensor {
    fn metered(shape: Vec<usize>, data: Vec<f64>, format: NumericFormat) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        charge(data.len() * format.bytes());
        Self { shape, data, format }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::metered(shape.to_vec(), vec![0.0; n], NumericFormat::Fp64)
    }

    pub fn zeros2(rows: usize, cols: usize) -> Self {
        Self::zeros(&[rows, cols])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::metered(shape.to_vec(), vec![value; n], NumericFormat::Fp64)
    }

    /// Wraps existing data, tagged FP64.
    ///
    /// # Panics
    /// If `data.len()` differs from the product of `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self::metered(shape.to_vec(), data, NumericFormat::Fp64)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn format(&self) -> NumericFormat {
        self.format
    }

    pub fn bytes(&self) -> usize {
        self.data.len() * self.format.bytes()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let c = self.shape[1];
        &mut self.data[i * c + j]
    }

    /// Round every element onto `fmt`'s grid and retag.
    pub fn quantize(&mut self, fmt: NumericFormat) {
        quantize_slice(&mut self.data, fmt);
        self.retag(fmt);
    }

    pub fn quantized(mut self, fmt: NumericFormat) -> Self {
        self.quantize(fmt);
        self
    }

    /// Retag values already known to lie on `fmt`'s grid.
    pub(crate) fn assume_format(&mut self, fmt: NumericFormat) {
        debug_assert!(self.data.iter().all(|&v| fmt.contains(v)));
        self.retag(fmt);
    }

    fn retag(&mut self, fmt: NumericFormat) {
        if fmt != self.format {
            release(self.bytes());
            self.format = fmt;
            charge(self.bytes());
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        self.axpy(1.0, other);
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros2(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (n, k) = (self.rows(), self.cols());
        let m = other.cols();
        assert_eq!(k, other.rows(), "matmul inner dimension mismatch");
        let mut out = Tensor::zeros2(n, m);
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Tensor) -> Tensor {
        let (k, n) = (self.rows(), self.cols());
        let m = other.cols();
        assert_eq!(k, other.rows(), "t_matmul inner dimension mismatch");
        let mut out = Tensor::zeros2(n, m);
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out.data[i * m..(i + 1) * m];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols(), other.cols(), "matmul_t inner dimension mismatch");
        // the row-axpy kernel vectorises; a dot-product loop does not
        self.matmul(&other.transpose())
    }

    pub fn max_abs(&self) -> f64 {
        crate::numerics::max_abs(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn into_vec(mut self) -> Vec<f64> {
        release(self.bytes());
        std::mem::take(&mut self.data)
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Self::metered(self.shape.clone(), self.data.clone(), self.format)
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        release(self.data.len() * self.format.bytes());
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("format", &self.format)
            .field("data", &self.data)
            .finish()
    }
}
