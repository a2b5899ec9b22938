use serde::{Deserialize, Serialize};

use super::reduce::reduce_in_place;
use super::{KernelError, Matrix, PrecisionMode, ReductionOrder};

/// Everything that decides the numeric path of a kernel call.
///
/// Two calls with equal inputs and equal profiles are bitwise identical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionProfile {
    pub reduction: ReductionOrder,
    /// Tile length along the reduction axis of a matmul.
    pub tile: usize,
    pub accum: PrecisionMode,
    /// Round activations to `accum` between layers.
    pub intermediate_rounding: bool,
    #[doc(hidden)]
    #[serde(skip)]
    pub fault: KernelFault,
}

/// Test hook for the self-test: deliberately broken kernel behaviour.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum KernelFault {
    #[default]
    None,
    /// Tile size chosen from the batch row count, as an auto-tuner would.
    BatchDependentTiling,
}

impl ExecutionProfile {
    /// The reference path: sequential full-precision accumulation.
    pub const fn exact() -> Self {
        ExecutionProfile {
            reduction: ReductionOrder::Sequential,
            tile: 16,
            accum: PrecisionMode::Full64,
            intermediate_rounding: false,
            fault: KernelFault::None,
        }
    }

    /// The calibrated mismatch path: pairwise-tree reduction over tiles of 8
    /// in a 6-bit-mantissa format with rounded activations. Small on average,
    /// heavy-tailed on a trained policy.
    pub const fn variant() -> Self {
        ExecutionProfile {
            reduction: ReductionOrder::PairwiseTree,
            tile: 8,
            accum: PrecisionMode::EmulatedReduced { mantissa_bits: 6 },
            intermediate_rounding: true,
            fault: KernelFault::None,
        }
    }

    /// Named profiles: `exact`, `variant`, `bf16` and `fp32`.
    pub fn preset(name: &str) -> Option<Self> {
        let tree = |accum| ExecutionProfile {
            reduction: ReductionOrder::PairwiseTree,
            tile: 8,
            accum,
            intermediate_rounding: true,
            fault: KernelFault::None,
        };
        match name {
            "exact" => Some(ExecutionProfile::exact()),
            "variant" => Some(ExecutionProfile::variant()),
            "bf16" => Some(tree(PrecisionMode::EmulatedReduced { mantissa_bits: 7 })),
            "fp32" => Some(tree(PrecisionMode::Full32)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        if self.tile == 0 {
            return Err(KernelError::InvalidTile);
        }
        if let ReductionOrder::Blocked { block_size: 0 } = self.reduction {
            return Err(KernelError::InvalidBlockSize);
        }
        if let PrecisionMode::EmulatedReduced { mantissa_bits } = self.accum {
            PrecisionMode::reduced(mantissa_bits)?;
        }
        Ok(())
    }

    /// Rounding applied to layer outputs.
    #[inline]
    pub fn activation(&self, x: f64) -> f64 {
        if self.intermediate_rounding {
            self.accum.round(x)
        } else {
            x
        }
    }

    fn tile_for(&self, rows: usize) -> usize {
        match self.fault {
            KernelFault::None => self.tile,
            KernelFault::BatchDependentTiling => {
                if rows > 1 {
                    (self.tile / 2).max(1)
                } else {
                    self.tile
                }
            }
        }
    }
}

impl Default for ExecutionProfile {
    fn default() -> Self {
        ExecutionProfile::exact()
    }
}

/// Batch-invariant matrix product.
///
/// Each output entry reduces the inner product tile by tile; tile boundaries
/// are aligned at index 0 and depend only on `a.cols()` and the profile's
/// tile length. Tile partials are combined with a left fold.
pub fn matmul_bi(a: &Matrix, b: &Matrix, profile: &ExecutionProfile) -> Result<Matrix, KernelError> {
    profile.validate()?;
    if a.cols() != b.rows() {
        return Err(KernelError::ShapeMismatch { left: a.shape(), right: b.shape() });
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let tile = profile.tile_for(n);
    let prec = profile.accum;
    let mut out = Matrix::zeros(n, m);
    let mut acc = vec![0.0; m];
    let mut partial = vec![0.0; m];
    let mut scratch = vec![0.0; m * tile];
    let bd = b.data();
    for i in 0..n {
        let arow = a.row(i);
        acc.iter_mut().for_each(|v| *v = 0.0);
        let mut t0 = 0;
        while t0 < k {
            let t1 = (t0 + tile).min(k);
            let len = t1 - t0;
            match profile.reduction {
                ReductionOrder::Sequential => {
                    partial.iter_mut().for_each(|v| *v = 0.0);
                    for kk in t0..t1 {
                        let aik = arow[kk];
                        let brow = &bd[kk * m..(kk + 1) * m];
                        for (p, &bkj) in partial.iter_mut().zip(brow) {
                            *p = prec.round(*p + prec.round(aik * bkj));
                        }
                    }
                }
                order => {
                    for (kk, &aik) in arow[t0..t1].iter().enumerate() {
                        let brow = &bd[(t0 + kk) * m..(t0 + kk + 1) * m];
                        for (s, &bkj) in scratch[kk * m..(kk + 1) * m].iter_mut().zip(brow) {
                            *s = prec.round(aik * bkj);
                        }
                    }
                    reduce_rows(&mut scratch[..len * m], m, order, prec, &mut partial);
                }
            }
            for (s, &p) in acc.iter_mut().zip(&partial) {
                *s = prec.round(*s + p);
            }
            t0 = t1;
        }
        if let Some(j) = acc.iter().position(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite { index: i * m + j, value: acc[j] });
        }
        out.row_mut(i).copy_from_slice(&acc);
    }
    Ok(out)
}

/// Column-wise reduction of the `buf.len() / m` rows of `buf`, each column
/// in exactly the order `reduce_in_place` would use.
fn reduce_rows(buf: &mut [f64], m: usize, order: ReductionOrder, prec: PrecisionMode, out: &mut [f64]) {
    let rows = buf.len() / m;
    match order {
        ReductionOrder::Sequential | ReductionOrder::Blocked { .. } => {
            let block = match order {
                ReductionOrder::Blocked { block_size } => block_size.max(1),
                _ => rows.max(1),
            };
            out.iter_mut().for_each(|v| *v = 0.0);
            let mut part = vec![0.0; m];
            for chunk in buf.chunks(block * m) {
                part.iter_mut().for_each(|v| *v = 0.0);
                for row in chunk.chunks(m) {
                    for (p, &x) in part.iter_mut().zip(row) {
                        *p = prec.round(*p + x);
                    }
                }
                for (o, &p) in out.iter_mut().zip(&part) {
                    *o = prec.round(*o + p);
                }
            }
        }
        ReductionOrder::PairwiseTree => {
            let mut n = rows;
            if n == 0 {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            while n > 1 {
                let half = n / 2;
                // row i is written only after rows 2i and 2i+1 were read
                for i in 0..half {
                    for j in 0..m {
                        buf[i * m + j] = prec.round(buf[2 * i * m + j] + buf[(2 * i + 1) * m + j]);
                    }
                }
                if n % 2 == 1 {
                    buf.copy_within((n - 1) * m..n * m, half * m);
                }
                n = half + n % 2;
            }
            out.copy_from_slice(&buf[..m]);
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_bi(logits: &Matrix, profile: &ExecutionProfile) -> Result<Matrix, KernelError> {
    profile.validate()?;
    if logits.cols() == 0 {
        return Err(KernelError::EmptyRow);
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    let mut scratch = vec![0.0; logits.cols()];
    for i in 0..logits.rows() {
        log_softmax_row(logits.row(i), out.row_mut(i), &mut scratch, profile).map_err(|e| e.offset_index(i * logits.cols()))?;
    }
    Ok(out)
}

/// Single-row log-softmax shared by the matrix kernel and the policy.
pub(crate) fn log_softmax_row(row: &[f64], out: &mut [f64], scratch: &mut [f64], profile: &ExecutionProfile) -> Result<(), KernelError> {
    if row.is_empty() {
        return Err(KernelError::EmptyRow);
    }
    if let Some(index) = row.iter().position(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite { index, value: row[index] });
    }
    let prec = profile.accum;
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for ((o, s), &x) in out.iter_mut().zip(scratch.iter_mut()).zip(row) {
        *o = prec.round(x - max);
        *s = prec.round(o.exp());
    }
    let total = reduce_in_place(&mut scratch[..row.len()], profile.reduction, prec);
    let lse = prec.round(total.ln());
    for o in out.iter_mut() {
        *o = prec.round(*o - lse);
    }
    Ok(())
}

/// RMSNorm: `gamma_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rmsnorm_bi(x: &[f64], gamma: &[f64], eps: f64, profile: &ExecutionProfile) -> Result<Vec<f64>, KernelError> {
    profile.validate()?;
    let mut out = vec![0.0; x.len()];
    let mut scratch = vec![0.0; x.len()];
    rmsnorm_row(x, gamma, eps, &mut out, &mut scratch, profile)?;
    Ok(out)
}

/// Returns the normalizer `sqrt(mean(x^2) + eps)` used; the policy's
/// backward pass needs it.
pub(crate) fn rmsnorm_row(
    x: &[f64],
    gamma: &[f64],
    eps: f64,
    out: &mut [f64],
    scratch: &mut [f64],
    profile: &ExecutionProfile,
) -> Result<f64, KernelError> {
    if x.len() != gamma.len() {
        return Err(KernelError::LengthMismatch { expected: x.len(), got: gamma.len() });
    }
    if !(eps > 0.0) {
        return Err(KernelError::InvalidEps(eps));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite { index, value: x[index] });
    }
    if x.is_empty() {
        return Ok(eps.sqrt());
    }
    let prec = profile.accum;
    for (s, &v) in scratch.iter_mut().zip(x) {
        *s = prec.round(v * v);
    }
    let sum = reduce_in_place(&mut scratch[..x.len()], profile.reduction, prec);
    let mean = prec.round(sum / x.len() as f64);
    let rms = prec.round((mean + eps).sqrt());
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gamma) {
        *o = prec.round(g * v / rms);
    }
    Ok(rms)
}
