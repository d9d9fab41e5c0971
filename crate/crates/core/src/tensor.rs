//! Dense tensors, binary masks, and the kernels the merge methods share.
//!
//! Values are held as `f32` in memory whatever the storage dtype is. A
//! tensor's `dtype` is the width it was read with and the width it is written
//! back at; construction rounds every value to that dtype so the in-memory
//! values are always exactly representable on disk.

use std::fmt;

use half::{bf16, f16};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F16,
    BF16,
}

impl DType {
    pub const fn byte_width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::BF16 => 2,
        }
    }

    /// Name used in safetensors headers.
    pub const fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
            DType::BF16 => "BF16",
        }
    }

    pub fn from_safetensors(name: &str) -> Option<Self> {
        match name {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            "BF16" => Some(DType::BF16),
            _ => None,
        }
    }

    /// Rounds an `f32` to the nearest value this dtype can store.
    #[inline]
    pub fn round(self, v: f32) -> f32 {
        match self {
            DType::F32 => v,
            DType::F16 => f16::from_f32(v).to_f32(),
            DType::BF16 => bf16::from_f32(v).to_f32(),
        }
    }

    /// Decodes little-endian storage bytes, appending to `out`.
    pub fn decode_into(self, bytes: &[u8], out: &mut Vec<f32>) {
        match self {
            DType::F32 => out.extend(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
            ),
            DType::F16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
            DType::BF16 => out.extend(
                bytes
                    .chunks_exact(2)
                    .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32()),
            ),
        }
    }

    /// Encodes values as little-endian storage bytes, appending to `out`.
    pub fn encode_into(self, values: &[f32], out: &mut Vec<u8>) {
        match self {
            DType::F32 => values.iter().for_each(|v| out.extend(v.to_le_bytes())),
            DType::F16 => values
                .iter()
                .for_each(|v| out.extend(f16::from_f32(*v).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|v| out.extend(bf16::from_f32(*v).to_le_bytes())),
        }
    }
}

impl serde::Serialize for DType {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape).field("dtype", &self.dtype);
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

impl Tensor {
    /// Builds a tensor, rounding every value to `dtype`.
    pub fn new(shape: Vec<usize>, dtype: DType, mut data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor construction", &[], &shape));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor construction",
                &shape,
                &[data.len()],
            ));
        }
        if dtype != DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        Ok(Tensor { shape, dtype, data })
    }

    /// A float32 tensor.
    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, DType::F32, data)
    }

    /// A 1-D float32 tensor. Panics on an empty slice.
    pub fn vector(data: &[f32]) -> Self {
        Self::from_f32(vec![data.len()], data.to_vec()).expect("non-empty vector")
    }

    pub fn zeros(shape: Vec<usize>, dtype: DType) -> Result<Self> {
        let n = numel(&shape);
        Self::new(shape, dtype, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access to the values. Callers that write must round to
    /// `dtype` themselves (see [`Tensor::round_to_dtype`]).
    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f32> {
        self.data
    }

    /// Storage size in bytes.
    pub fn byte_len(&self) -> usize {
        self.data.len() * self.dtype.byte_width()
    }

    pub fn round_to_dtype(&mut self) {
        if self.dtype != DType::F32 {
            let dtype = self.dtype;
            self.data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
    }

    /// Reinterprets the tensor at another storage width, rounding values.
    pub fn cast(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self.round_to_dtype();
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        self.dtype.encode_into(&self.data, &mut out);
        out
    }

    pub fn from_bytes(shape: Vec<usize>, dtype: DType, bytes: &[u8]) -> Result<Self> {
        let n = numel(&shape);
        if bytes.len() != n * dtype.byte_width() {
            return Err(Error::shape(
                "tensor bytes",
                &[n * dtype.byte_width()],
                &[bytes.len()],
            ));
        }
        let mut data = Vec::with_capacity(n);
        dtype.decode_into(bytes, &mut data);
        Ok(Tensor { shape, dtype, data })
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(context, &self.shape, &other.shape));
        }
        Ok(())
    }
}

/// One bit per tensor element, row-major like [`Tensor`].
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    len: usize,
    bits: Vec<u64>,
}

impl fmt::Debug for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("BinaryMask");
        s.field("shape", &self.shape);
        if self.len <= 64 {
            let bits: String = (0..self.len)
                .map(|i| if self.get(i) { '1' } else { '0' })
                .collect();
            s.field("bits", &bits);
        } else {
            s.field("ones", &self.count_ones());
        }
        s.finish()
    }
}

impl BinaryMask {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = numel(&shape);
        BinaryMask {
            shape,
            len,
            bits: vec![0; len.div_ceil(64)],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        let mut mask = Self::zeros(shape);
        for i in 0..mask.len {
            mask.set(i, true);
        }
        mask
    }

    pub fn from_bools(shape: Vec<usize>, values: &[bool]) -> Result<Self> {
        let mut mask = Self::zeros(shape);
        if values.len() != mask.len {
            return Err(Error::shape("mask construction", &mask.shape, &[values.len()]));
        }
        for (i, &v) in values.iter().enumerate() {
            mask.set(i, v);
        }
        Ok(mask)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, on: bool) {
        debug_assert!(i < self.len);
        let word = &mut self.bits[i / 64];
        if on {
            *word |= 1 << (i % 64);
        } else {
            *word &= !(1 << (i % 64));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// Zeroes every element whose bit is unset.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        if t.shape() != self.shape.as_slice() {
            return Err(Error::shape("mask application", &self.shape, t.shape()));
        }
        let data = t
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| if self.get(i) { v } else { 0.0 })
            .collect();
        Ok(Tensor {
            shape: t.shape.clone(),
            dtype: t.dtype,
            data,
        })
    }
}

/// `acc + c * x`, elementwise, accumulated in `f32`.
pub fn axpy_accumulate(acc: &Tensor, x: &Tensor, c: f32) -> Result<Tensor> {
    acc.check_same_shape(x, "axpy_accumulate")?;
    let mut out = acc.clone();
    out.data
        .iter_mut()
        .zip(&x.data)
        .for_each(|(a, &v)| *a += c * v);
    out.round_to_dtype();
    Ok(out)
}

/// `ceil(fraction * numel)` for `fraction` in (0, 1].
///
/// `fraction` is read as the shortest decimal that round-trips to it, so
/// `0.1 * 10` gives 1 and `0.3 * 10` gives 3 even though neither decimal is
/// exact in binary.
pub fn keep_count(numel: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidKeepFraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(numel);
    }
    let text = format!("{fraction}");
    let decimals = text.split_once('.').map_or("", |(_, d)| d);
    let significant = decimals.trim_start_matches('0');
    let digits: u128 = significant.parse().unwrap_or(0);
    let scale = decimals.len() as u32;
    let product = digits * numel as u128;
    if product == 0 {
        return Ok(0);
    }
    // digits < 10^17 and numel < 2^64 keep the product below 10^37.
    if scale > 37 {
        return Ok(1);
    }
    let denom = 10u128.pow(scale);
    Ok((product.div_ceil(denom)) as usize)
}

#[inline]
fn magnitude_key(v: f32) -> u32 {
    v.to_bits() & 0x7fff_ffff
}

const SMALL_SELECT: usize = 1 << 14;

/// Mask of the `k` largest-magnitude entries of `values`; ties at the cut go
/// to the lower flat index.
pub fn topk_mask_values(shape: Vec<usize>, values: &[f32], k: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(shape);
    let n = values.len();
    if k == 0 {
        return mask;
    }
    if k >= n {
        for i in 0..n {
            mask.set(i, true);
        }
        return mask;
    }
    let (threshold, above) = if n <= SMALL_SELECT {
        kth_key_by_select(values, k)
    } else {
        kth_key_by_radix(values, k)
    };
    // Everything strictly above the threshold, then the earliest ties.
    let mut ties_left = k - above;
    for (i, &v) in values.iter().enumerate() {
        let key = magnitude_key(v);
        if key > threshold {
            mask.set(i, true);
        } else if key == threshold && ties_left > 0 {
            mask.set(i, true);
            ties_left -= 1;
        }
    }
    mask
}

/// Returns (key of the k-th largest magnitude, count of keys strictly above it).
fn kth_key_by_select(values: &[f32], k: usize) -> (u32, usize) {
    let mut keys: Vec<u32> = values.iter().map(|&v| magnitude_key(v)).collect();
    let (_, kth, _) = keys.select_nth_unstable_by(k - 1, |a, b| b.cmp(a));
    let threshold = *kth;
    let above = keys.iter().filter(|&&key| key > threshold).count();
    (threshold, above)
}

/// Two-pass 16-bit radix select; needs no copy of the values.
fn kth_key_by_radix(values: &[f32], k: usize) -> (u32, usize) {
    let mut hist = vec![0usize; 1 << 16];
    for &v in values {
        hist[(magnitude_key(v) >> 16) as usize] += 1;
    }
    let mut above = 0usize;
    let mut high = 0u32;
    for bucket in (0..hist.len()).rev() {
        if above + hist[bucket] >= k {
            high = bucket as u32;
            break;
        }
        above += hist[bucket];
    }
    hist.iter_mut().for_each(|h| *h = 0);
    for &v in values {
        let key = magnitude_key(v);
        if key >> 16 == high {
            hist[(key & 0xffff) as usize] += 1;
        }
    }
    for bucket in (0..hist.len()).rev() {
        if above + hist[bucket] >= k {
            return ((high << 16) | bucket as u32, above);
        }
        above += hist[bucket];
    }
    unreachable!("k <= numel guarantees a threshold bucket")
}

/// Mask of the `ceil(keep_fraction * numel)` largest-magnitude entries.
pub fn topk_magnitude_mask(t: &Tensor, keep_fraction: f64) -> Result<BinaryMask> {
    let k = keep_count(t.numel(), keep_fraction)?;
    Ok(topk_mask_values(t.shape.clone(), t.values(), k))
}

/// Elected sign at one position: +1 when the positive mass is at least the
/// negative mass.
#[inline]
pub(crate) fn elect_sign_at(values: impl Iterator<Item = f32>) -> f32 {
    let (mut pos, mut neg) = (0.0f64, 0.0f64);
    for v in values {
        if v > 0.0 {
            pos += v as f64;
        } else {
            neg -= v as f64;
        }
    }
    if pos >= neg {
        1.0
    } else {
        -1.0
    }
}

/// Per position, the sign carrying more total magnitude across `deltas`.
pub fn elect_sign(deltas: &[Tensor]) -> Result<Tensor> {
    let first = deltas.first().ok_or(Error::EmptyInput {
        what: "sign election",
    })?;
    for d in &deltas[1..] {
        first.check_same_shape(d, "sign election")?;
    }
    let data = (0..first.numel())
        .map(|j| elect_sign_at(deltas.iter().map(|d| d.data[j])))
        .collect();
    Tensor::from_f32(first.shape.clone(), data)
}
