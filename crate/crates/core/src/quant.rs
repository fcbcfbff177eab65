//! 4-bit NormalFloat (NF4) quantization.
//!
//! Frozen base weights are compressed blockwise: each block of 64 values is
//! scaled by its max-magnitude element and every entry is snapped to the
//! nearest of 16 codebook levels. The levels are quantiles of the standard
//! normal distribution normalized to [-1, 1], which matches the distribution
//! of trained network weights far better than evenly spaced grids.

use std::sync::OnceLock;

use thiserror::Error;

use crate::numerics::{bf16_round, Tensor};

/// Values per quantization block. The packed index payload of a full block
/// is `BLOCK_SIZE / 2` bytes.
pub const BLOCK_SIZE: usize = 64;

/// Index of the exact-zero level in the codebook.
pub const ZERO_LEVEL: usize = 8;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("corrupt NF4 index {index} at position {position} (must be 0..=15)")]
    CorruptIndex { index: u8, position: usize },
    #[error("block scale must be non-negative and finite, got {0}")]
    BadScale(f64),
    #[error("block holds {len} values, limit is {BLOCK_SIZE}")]
    BlockTooLong { len: usize },
    #[error("quantized tensor inconsistent: {numel} elements need {expected} blocks, found {found} (tail length {tail_len})")]
    LayoutMismatch {
        numel: usize,
        expected: usize,
        found: usize,
        tail_len: usize,
    },
}

/// The 16 NF4 levels in ascending order: 8 negative quantiles, an exact
/// zero, and 7 positive quantiles, normalized so the endpoints are +-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Codebook {
    levels: [f64; 16],
}

impl Nf4Codebook {
    pub fn levels(&self) -> &[f64; 16] {
        &self.levels
    }

    /// Nearest level to `u`; exact ties resolve toward the lower index.
    pub fn nearest_index(&self, u: f64) -> u8 {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (i, &level) in self.levels.iter().enumerate() {
            let d = (u - level).abs();
            if d < best_dist {
                best_dist = d;
                best = i;
            }
        }
        best as u8
    }
}

/// Probability mass reserved beyond the extreme quantiles: half the mean
/// spacing of the 16-point and 15-point half-grids. The extreme quantile
/// would be infinite without it.
const TAIL_MASS: f64 = 0.5 * (1.0 / 32.0 + 1.0 / 30.0);

fn build_codebook() -> Nf4Codebook {
    let offset = 1.0 - TAIL_MASS;
    let z_max = inverse_normal_cdf(offset);
    let mut levels = [0.0f64; 16];
    // Negative half: 8 evenly spaced probabilities in (0.5, offset], mirrored
    // through the distribution's symmetry so the endpoint is exactly -1.
    for i in 0..8 {
        let p = offset - (offset - 0.5) * (i as f64) / 8.0;
        levels[i] = -(inverse_normal_cdf(p) / z_max);
    }
    levels[ZERO_LEVEL] = 0.0;
    // Positive half: 7 evenly spaced probabilities in (0.5, offset].
    for j in 0..7 {
        let p = offset - (offset - 0.5) * (j as f64) / 7.0;
        levels[15 - j] = inverse_normal_cdf(p) / z_max;
    }
    debug_assert!(levels.windows(2).all(|w| w[0] < w[1]));
    Nf4Codebook { levels }
}

/// The codebook is a fixed mathematical object; build it once.
pub fn nf4_codebook() -> &'static Nf4Codebook {
    static CODEBOOK: OnceLock<Nf4Codebook> = OnceLock::new();
    CODEBOOK.get_or_init(build_codebook)
}

/// Inverse standard-normal CDF, Acklam's rational approximation
/// (relative error below 1.2e-9 across (0, 1)).
fn inverse_normal_cdf(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must be in (0, 1)");
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// One quantized block: up to 64 values as packed 4-bit codebook indices
/// (two per byte, low nibble first) plus a bf16-rounded absmax scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Nf4Block {
    packed: [u8; BLOCK_SIZE / 2],
    absmax: f64,
}

impl Nf4Block {
    pub fn absmax(&self) -> f64 {
        self.absmax
    }

    pub fn packed(&self) -> &[u8; BLOCK_SIZE / 2] {
        &self.packed
    }

    pub fn index(&self, i: usize) -> u8 {
        let byte = self.packed[i / 2];
        if i % 2 == 0 {
            byte & 0x0F
        } else {
            byte >> 4
        }
    }

    /// Rebuild a block from unpacked indices and a scale, validating both.
    pub fn from_parts(indices: &[u8], absmax: f64) -> Result<Self, QuantError> {
        if indices.len() > BLOCK_SIZE {
            return Err(QuantError::BlockTooLong { len: indices.len() });
        }
        if !(absmax >= 0.0 && absmax.is_finite()) {
            return Err(QuantError::BadScale(absmax));
        }
        let mut packed = [pack_pair(ZERO_LEVEL as u8, ZERO_LEVEL as u8); BLOCK_SIZE / 2];
        for (position, &index) in indices.iter().enumerate() {
            if index > 15 {
                return Err(QuantError::CorruptIndex { index, position });
            }
        }
        for (k, pair) in indices.chunks(2).enumerate() {
            let lo = pair[0];
            let hi = pair.get(1).copied().unwrap_or(ZERO_LEVEL as u8);
            packed[k] = pack_pair(lo, hi);
        }
        Ok(Nf4Block { packed, absmax })
    }
}

fn pack_pair(lo: u8, hi: u8) -> u8 {
    (lo & 0x0F) | (hi << 4)
}

/// Quantize up to 64 values. Short blocks are padded logically with zeros;
/// an all-zero block stores scale 0 with every index at the zero level.
pub fn quantize_block(values: &[f64]) -> Result<Nf4Block, QuantError> {
    if values.len() > BLOCK_SIZE {
        return Err(QuantError::BlockTooLong { len: values.len() });
    }
    let raw_absmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // The stored scale is bf16; normalize by the *stored* value so the
    // reconstruction error bound holds against it.
    let absmax = bf16_round(raw_absmax);
    let codebook = nf4_codebook();
    let zero = ZERO_LEVEL as u8;
    let mut indices = [zero; BLOCK_SIZE];
    if absmax > 0.0 {
        for (i, &v) in values.iter().enumerate() {
            indices[i] = codebook.nearest_index(v / absmax);
        }
    }
    let mut packed = [0u8; BLOCK_SIZE / 2];
    for k in 0..BLOCK_SIZE / 2 {
        packed[k] = pack_pair(indices[2 * k], indices[2 * k + 1]);
    }
    Ok(Nf4Block { packed, absmax })
}

/// Reconstruct all 64 slots of a block: `v[i] = levels[index[i]] * absmax`.
pub fn dequantize_block(block: &Nf4Block) -> [f64; BLOCK_SIZE] {
    let levels = nf4_codebook().levels();
    let mut out = [0.0f64; BLOCK_SIZE];
    for (k, &byte) in block.packed.iter().enumerate() {
        out[2 * k] = levels[(byte & 0x0F) as usize] * block.absmax;
        out[2 * k + 1] = levels[(byte >> 4) as usize] * block.absmax;
    }
    out
}

/// An NF4-quantized tensor: the original shape plus a block sequence over
/// the row-major flattened data. `tail_len` counts the valid entries of the
/// final block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    blocks: Vec<Nf4Block>,
    tail_len: usize,
}

impl QuantizedTensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn blocks(&self) -> &[Nf4Block] {
        &self.blocks
    }

    pub fn tail_len(&self) -> usize {
        self.tail_len
    }

    /// Total packed index bytes across blocks (excludes scales).
    pub fn packed_bytes(&self) -> usize {
        self.blocks.len() * (BLOCK_SIZE / 2)
    }

    fn validate(&self) -> Result<(), QuantError> {
        let numel = self.numel();
        let expected = numel.div_ceil(BLOCK_SIZE);
        let tail_ok = if numel == 0 {
            self.tail_len == 0
        } else {
            let implied = numel - (expected - 1) * BLOCK_SIZE;
            self.tail_len == implied
        };
        if self.blocks.len() != expected || !tail_ok {
            return Err(QuantError::LayoutMismatch {
                numel,
                expected,
                found: self.blocks.len(),
                tail_len: self.tail_len,
            });
        }
        Ok(())
    }

    /// FNV-1a over every packed byte and scale bit pattern. Training must
    /// never change this value.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for b in &self.blocks {
            for &byte in b.packed.iter() {
                eat(byte);
            }
            for byte in b.absmax.to_le_bytes() {
                eat(byte);
            }
        }
        h
    }
}

/// Quantize a tensor blockwise over its flattened data.
pub fn quantize_tensor(t: &Tensor) -> QuantizedTensor {
    let data = t.data();
    let blocks: Vec<Nf4Block> = data
        .chunks(BLOCK_SIZE)
        .map(|chunk| quantize_block(chunk).expect("chunk length bounded by BLOCK_SIZE"))
        .collect();
    let tail_len = if data.is_empty() {
        0
    } else {
        data.len() - (blocks.len() - 1) * BLOCK_SIZE
    };
    QuantizedTensor {
        shape: t.shape().to_vec(),
        blocks,
        tail_len,
    }
}

/// Reconstruct the dense tensor; shape is preserved.
pub fn dequantize_tensor(q: &QuantizedTensor) -> Result<Tensor, QuantError> {
    q.validate()?;
    let numel = q.numel();
    let mut data = Vec::with_capacity(numel);
    for block in &q.blocks {
        data.extend_from_slice(&dequantize_block(block));
    }
    data.truncate(numel);
    Ok(Tensor::from_vec(q.shape(), data).expect("validated layout"))
}
