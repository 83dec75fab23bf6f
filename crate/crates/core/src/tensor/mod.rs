//! Dense 4-D tensors, value types and zero statistics.
//!
//! Tensors are stored in canonical `(n, c, h, w)` row-major order. The
//! 16×16 group layout used by the on-chip memories is produced on demand by
//! [`layout_groups`] and inverted by [`GroupLayout::to_tensor`].

mod bf16;
mod layout;

pub use bf16::{round_bf16, to_bf16};
pub use layout::{layout_groups, transpose16, Group16, GroupId, GroupLayout, GROUP};

use crate::error::{Error, Result};

/// Role of a tensor in the training computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    /// Input activations.
    Activations,
    Weights,
    /// Output-activation gradients (or activation gradients).
    Gradients,
    /// Output activations.
    Outputs,
}

impl TensorKind {
    pub fn code(self) -> u8 {
        match self {
            TensorKind::Activations => 0,
            TensorKind::Weights => 1,
            TensorKind::Gradients => 2,
            TensorKind::Outputs => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TensorKind::Activations),
            1 => Some(TensorKind::Weights),
            2 => Some(TensorKind::Gradients),
            3 => Some(TensorKind::Outputs),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            TensorKind::Activations => "A",
            TensorKind::Weights => "W",
            TensorKind::Gradients => "G",
            TensorKind::Outputs => "O",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    #[default]
    F32,
    BF16,
}

impl DType {
    pub fn bits(self) -> u64 {
        match self {
            DType::F32 => 32,
            DType::BF16 => 16,
        }
    }

    /// Significand width including the implicit bit.
    pub fn mantissa_bits(self) -> u32 {
        match self {
            DType::F32 => 24,
            DType::BF16 => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::BF16 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::BF16),
            _ => None,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f32" | "fp32" => Ok(DType::F32),
            "bf16" | "bfloat16" => Ok(DType::BF16),
            other => Err(Error::Config(format!("unknown dtype `{other}`"))),
        }
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::BF16 => "bf16",
        })
    }
}

/// Tensor extents: samples-or-filters, channels, rows (y), columns (x).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Dims4 { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checked element count, `None` on overflow.
    pub fn checked_len(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && y < self.h && x < self.w);
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    kind: TensorKind,
    dims: Dims4,
    dtype: DType,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Builds a tensor, checking the element count and, for BF16, that every
    /// value is exactly representable.
    pub fn new(kind: TensorKind, dims: Dims4, dtype: DType, data: Vec<f32>) -> Result<Self> {
        if dims.checked_len() != Some(data.len()) {
            return Err(Error::Shape(format!(
                "dims {dims} need {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if dtype == DType::BF16 {
            if let Some(v) = data.iter().find(|v| v.to_bits() & 0xFFFF != 0) {
                return Err(Error::Usage(format!("{v} is not a bf16 value")));
            }
        }
        Ok(Tensor4 {
            kind,
            dims,
            dtype,
            data,
        })
    }

    pub fn zeros(kind: TensorKind, dims: Dims4) -> Self {
        Tensor4 {
            kind,
            dims,
            dtype: DType::F32,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn from_fn(
        kind: TensorKind,
        dims: Dims4,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for y in 0..dims.h {
                    for x in 0..dims.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor4 {
            kind,
            dims,
            dtype: DType::F32,
            data,
        }
    }

    pub fn kind(&self) -> TensorKind {
        self.kind
    }

    pub fn with_kind(mut self, kind: TensorKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.dims.index(n, c, y, x)]
    }

    /// Like [`get`](Self::get) but with signed spatial coordinates; positions
    /// outside the tensor read as zero.
    #[inline]
    pub fn get_padded(&self, n: usize, c: usize, y: isize, x: isize) -> f32 {
        if y < 0 || x < 0 || y as usize >= self.dims.h || x as usize >= self.dims.w {
            0.0
        } else {
            self.get(n, c, y as usize, x as usize)
        }
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.dims.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            kind: self.kind,
            dims: self.dims,
            dtype: DType::F32,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bitwise equality of the payload (distinguishes `-0.0`, compares NaNs).
    pub fn bits_eq(&self, other: &Tensor4) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub(crate) fn with_dtype_unchecked(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }
}

/// Exact-zero census of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SparsityStats {
    pub total: u64,
    pub zeros: u64,
}

impl SparsityStats {
    pub fn of_values(values: &[f32]) -> Self {
        SparsityStats {
            total: values.len() as u64,
            zeros: values.iter().filter(|&&v| v == 0.0).count() as u64,
        }
    }

    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.zeros as f64 / self.total as f64
        }
    }

    pub fn merge(self, other: SparsityStats) -> SparsityStats {
        SparsityStats {
            total: self.total + other.total,
            zeros: self.zeros + other.zeros,
        }
    }
}

pub fn sparsity_stats(t: &Tensor4) -> SparsityStats {
    SparsityStats::of_values(t.data())
}

/// All-MACs over remaining-MACs. Saturates at `total` when nothing remains.
pub fn potential_speedup(stats: SparsityStats) -> f64 {
    if stats.total == 0 {
        return 1.0;
    }
    let remaining = stats.total - stats.zeros;
    if remaining == 0 {
        stats.total as f64
    } else {
        stats.total as f64 / remaining as f64
    }
}

/// Non-zero flags of one 16-value block, bit `i` set iff `block[i] != 0`.
pub fn zero_mask(block: &[f32]) -> Result<u16> {
    if block.len() != 16 {
        return Err(Error::Usage(format!(
            "zero_mask expects 16 values, got {}",
            block.len()
        )));
    }
    Ok(nonzero_bits(block) as u16)
}

/// Non-zero flags of up to 64 values. `-0.0` counts as zero, NaN as non-zero.
#[inline]
pub fn nonzero_bits(values: &[f32]) -> u64 {
    debug_assert!(values.len() <= 64);
    values
        .iter()
        .enumerate()
        .fold(0u64, |m, (i, &v)| if v != 0.0 { m | (1 << i) } else { m })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mask_cases() {
        assert_eq!(zero_mask(&[0.0; 16]).unwrap(), 0x0000);
        assert_eq!(zero_mask(&[1.0; 16]).unwrap(), 0xFFFF);
        let alt: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 0.0 } else { 3.0 }).collect();
        assert_eq!(zero_mask(&alt).unwrap(), 0xAAAA);
        let mut odd = [1.0f32; 16];
        odd[3] = -0.0;
        odd[4] = f32::NAN;
        assert_eq!(zero_mask(&odd).unwrap(), 0xFFFF & !(1 << 3));
        assert!(matches!(zero_mask(&[1.0; 15]), Err(Error::Usage(_))));
    }

    #[test]
    fn stats_and_speedup() {
        let z = Tensor4::zeros(TensorKind::Activations, Dims4::new(1, 4, 4, 4));
        let s = sparsity_stats(&z);
        assert_eq!(s.fraction(), 1.0);
        assert_eq!(potential_speedup(s), 64.0);

        let half: Vec<f32> = (0..16).map(|i| if i < 8 { 0.0 } else { 1.0 }).collect();
        let s = SparsityStats::of_values(&half);
        assert_eq!(s.fraction(), 0.5);
        assert_eq!(potential_speedup(s), 2.0);
        assert_eq!(potential_speedup(SparsityStats { total: 9, zeros: 0 }), 1.0);
    }

    #[test]
    fn new_checks_length_and_bf16() {
        let d = Dims4::new(1, 1, 2, 2);
        assert!(Tensor4::new(TensorKind::Weights, d, DType::F32, vec![0.0; 3]).is_err());
        assert!(Tensor4::new(TensorKind::Weights, d, DType::BF16, vec![1.0, 2.0, 0.5, 0.1]).is_err());
        assert!(Tensor4::new(TensorKind::Weights, d, DType::BF16, vec![1.0, 2.0, 0.5, -4.0]).is_ok());
    }
}
