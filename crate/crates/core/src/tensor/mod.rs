//! Dense row-major `f64` arrays, the primitive kernels the blocks are built
//! from, a reverse-mode tape and a central-difference gradient checker.
//!
//! Tensors are immutable values: every kernel returns a fresh allocation and
//! gathers copy. The tape ([`Tape`]) wraps the same kernels and records a
//! vector-Jacobian product per node so that any composed block can be
//! differentiated and checked against finite differences.

mod gradcheck;
pub mod ops;
mod params;
mod tape;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub use gradcheck::{central_difference, finite_diff_check, max_relative_error};
pub use ops::{measure_flops, Activation};
pub use params::{Bound, LayerKind, LayerParams, ParamSet};
pub use tape::{Gradients, RowPick, Tape, Var};

/// A rank-3 `(H, W, C)` tensor of token features.
pub type FeatureMap = Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err("Tensor::new", &shape, &[data.len()]);
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose shape is known to match `data`. Internal kernels
    /// use this after computing the output extent themselves.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Validation("ragged matrix rows".into()));
        }
        Self::new(vec![r, c], rows.iter().flat_map(|row| row.iter().copied()).collect())
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    }

    /// Approximately normal entries (sum of uniforms), scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                (s - 6.0) * std
            })
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &d)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} of {:?}", self.shape);
            flat = flat * d + ix;
        }
        self.data[flat]
    }

    /// `(rows, cols)` of the tensor viewed as a matrix over its last axis.
    pub fn as_rows(&self) -> (usize, usize) {
        let c = *self.shape.last().expect("rank >= 1");
        (self.numel() / c, c)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.as_rows();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Exact equality of every value's bit pattern.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Little-endian binary form: `u32` rank, `u32` dims, `f64` payload.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let rank = u32::try_from(self.rank()).map_err(|_| Error::Format("rank overflow".into()))?;
        w.write_all(&rank.to_le_bytes())?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            shape.push(u32::from_le_bytes(word) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Self::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.rank() + 8 * self.numel());
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_binary(bytes)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Tensor = serde_json::from_str(text)?;
        Self::new(t.shape, t.data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn json_form() {
        let t = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.5]]).unwrap();
        let text = t.to_json().unwrap();
        assert_eq!(text, r#"{"shape":[2,2],"data":[1.0,2.0,3.0,4.5]}"#);
        assert_eq!(Tensor::from_json(&text).unwrap(), t);
        assert!(Tensor::from_json(r#"{"shape":[3],"data":[1.0]}"#).is_err());
    }

    #[test]
    fn binary_layout_is_little_endian() {
        let t = Tensor::new(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24);
        assert!(Tensor::from_bytes(&bytes[..20]).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(dims in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::uniform(&dims, -1e3, 1e3, &mut rng);
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert!(back.bitwise_eq(&t));
        }
    }
}
