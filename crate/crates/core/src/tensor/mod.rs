//! Dense float32 tensors, row-slices ("fragments") of them and the reference
//! operator kernels.

pub mod blob;
pub mod kernels;

use std::fmt;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::Source;

pub use kernels::{combine, run_layer_fragment, run_layer_full};

/// Shape of a row-major float32 tensor.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    dims: Vec<usize>,
}

impl TensorSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("tensor needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {:?}", dims)));
        }
        Ok(TensorSpec { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn bytes(&self) -> u64 {
        self.numel() as u64 * 4
    }

    /// Axis along which operators slice this tensor: the row (height) axis of a
    /// `[C, H, W]` map, the leading axis otherwise.
    pub fn partition_axis(&self) -> usize {
        if self.dims.len() == 3 {
            1
        } else {
            0
        }
    }

    pub fn axis_len(&self) -> usize {
        self.dims[self.partition_axis()]
    }

    /// Elements before the partition axis (channels for a feature map).
    pub fn outer(&self) -> usize {
        self.dims[..self.partition_axis()].iter().product()
    }

    /// Elements per partition index per outer index.
    pub fn inner(&self) -> usize {
        self.dims[self.partition_axis() + 1..].iter().product()
    }

    /// Elements in one partition index across all outer indices.
    pub fn row_elems(&self) -> usize {
        self.outer() * self.inner()
    }

    /// Same shape with the partition axis resized.
    pub fn with_axis_len(&self, n: usize) -> TensorSpec {
        let mut dims = self.dims.clone();
        dims[self.partition_axis()] = n;
        TensorSpec { dims }
    }
}

impl fmt::Debug for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

impl fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("x"))
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    spec: TensorSpec,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(spec: TensorSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != spec.numel() {
            return Err(Error::Shape(format!(
                "buffer of {} elements for shape {}",
                data.len(),
                spec
            )));
        }
        Ok(Tensor { spec, data })
    }

    pub fn from_dims(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        Tensor::new(TensorSpec::new(dims.to_vec())?, data)
    }

    pub fn zeros(spec: TensorSpec) -> Self {
        let n = spec.numel();
        Tensor {
            spec,
            data: vec![0.0; n],
        }
    }

    pub fn spec(&self) -> &TensorSpec {
        &self.spec
    }

    pub fn dims(&self) -> &[usize] {
        self.spec.dims()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian bytes of the buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(spec: TensorSpec, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != spec.numel() * 4 {
            return Err(Error::Shape(format!(
                "{} payload bytes for shape {}",
                bytes.len(),
                spec
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { spec, data })
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, equates identical NaNs).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.spec == other.spec
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Copy of partition-axis indices `range`.
    pub fn slice_axis(&self, range: Range<usize>) -> Result<Tensor> {
        let len = self.spec.axis_len();
        if range.start > range.end || range.end > len {
            return Err(Error::Fragment(format!(
                "slice {:?} outside axis of length {}",
                range, len
            )));
        }
        let outer = self.spec.outer();
        let inner = self.spec.inner();
        let rows = range.end - range.start;
        let mut data = Vec::with_capacity(outer * rows * inner);
        for o in 0..outer {
            let base = (o * len + range.start) * inner;
            data.extend_from_slice(&self.data[base..base + rows * inner]);
        }
        Ok(Tensor {
            spec: self.spec.with_axis_len(rows),
            data,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.spec)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

/// Contiguous slice of a tensor along its partition axis.
///
/// `range` is in partition-axis index units of the full tensor produced by
/// `source`. The edge flags record whether the slice touches the true first or
/// last row of that tensor; only there does a block-wise consumer apply padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Fragment {
    pub source: Source,
    pub range: Range<usize>,
    pub tensor: Tensor,
    pub top_edge: bool,
    pub bottom_edge: bool,
}

impl Fragment {
    /// Wraps a slice, checking that the tensor shape matches the range.
    pub fn new(
        source: Source,
        range: Range<usize>,
        full_len: usize,
        tensor: Tensor,
    ) -> Result<Self> {
        if range.start >= range.end || range.end > full_len {
            return Err(Error::Fragment(format!(
                "range {:?} invalid for axis length {}",
                range, full_len
            )));
        }
        if tensor.spec().axis_len() != range.end - range.start {
            return Err(Error::Fragment(format!(
                "tensor {} does not match range {:?}",
                tensor.spec(),
                range
            )));
        }
        Ok(Fragment {
            source,
            top_edge: range.start == 0,
            bottom_edge: range.end == full_len,
            range,
            tensor,
        })
    }

    /// The whole tensor as one fragment.
    pub fn whole(source: Source, tensor: Tensor) -> Self {
        let n = tensor.spec().axis_len();
        Fragment {
            source,
            range: 0..n,
            tensor,
            top_edge: true,
            bottom_edge: true,
        }
    }

    pub fn len(&self) -> usize {
        self.range.end - self.range.start
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}
