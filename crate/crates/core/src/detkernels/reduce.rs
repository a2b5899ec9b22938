use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{KernelError, PrecisionMode};

/// Order in which a reduction combines its operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReductionOrder {
    /// Left fold.
    Sequential,
    /// Balanced binary tree over adjacent pairs; an odd trailing element is
    /// carried to the next level unchanged.
    PairwiseTree,
    /// Left fold within consecutive blocks, then a left fold over the block
    /// partials.
    Blocked { block_size: usize },
}

impl ReductionOrder {
    pub fn blocked(block_size: usize) -> Result<Self, KernelError> {
        if block_size == 0 {
            return Err(KernelError::InvalidBlockSize);
        }
        Ok(ReductionOrder::Blocked { block_size })
    }
}

/// Deterministic sum of `values` in exactly the given order, rounding every
/// operand and every partial per `precision`.
///
/// ```
/// use timlab::detkernels::{det_sum, PrecisionMode, ReductionOrder};
/// let s = det_sum(&[1.0, 2.0, 3.0], ReductionOrder::Sequential, PrecisionMode::Full64).unwrap();
/// assert_eq!(s, 6.0);
/// ```
pub fn det_sum(values: &[f64], order: ReductionOrder, precision: PrecisionMode) -> Result<f64, KernelError> {
    if let ReductionOrder::Blocked { block_size: 0 } = order {
        return Err(KernelError::InvalidBlockSize);
    }
    let mut buf = Vec::with_capacity(values.len());
    for (index, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(KernelError::NonFinite { index, value: v });
        }
        buf.push(precision.round(v));
    }
    let s = reduce_in_place(&mut buf, order, precision);
    if s.is_finite() {
        Ok(s)
    } else {
        Err(KernelError::Overflow { value: s, precision })
    }
}

/// Core reduction on already-rounded operands. May clobber `buf`.
#[inline]
pub(crate) fn reduce_in_place(buf: &mut [f64], order: ReductionOrder, precision: PrecisionMode) -> f64 {
    match order {
        ReductionOrder::Sequential => fold(buf, precision),
        ReductionOrder::PairwiseTree => {
            let mut n = buf.len();
            if n == 0 {
                return 0.0;
            }
            while n > 1 {
                let half = n / 2;
                for i in 0..half {
                    buf[i] = precision.round(buf[2 * i] + buf[2 * i + 1]);
                }
                if n % 2 == 1 {
                    buf[half] = buf[n - 1];
                }
                n = half + n % 2;
            }
            buf[0]
        }
        ReductionOrder::Blocked { block_size } => {
            let mut acc = 0.0;
            for block in buf.chunks(block_size.max(1)) {
                acc = precision.round(acc + fold(block, precision));
            }
            acc
        }
    }
}

#[inline]
fn fold(values: &[f64], precision: PrecisionMode) -> f64 {
    let mut acc = 0.0;
    for &v in values {
        acc = precision.round(acc + v);
    }
    acc
}

impl fmt::Display for ReductionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReductionOrder::Sequential => f.write_str("sequential"),
            ReductionOrder::PairwiseTree => f.write_str("pairwise_tree"),
            ReductionOrder::Blocked { block_size } => write!(f, "blocked:{block_size}"),
        }
    }
}

impl FromStr for ReductionOrder {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sequential" => Ok(ReductionOrder::Sequential),
            "pairwise_tree" => Ok(ReductionOrder::PairwiseTree),
            other => {
                let size = other
                    .strip_prefix("blocked:")
                    .and_then(|b| b.parse::<usize>().ok())
                    .ok_or_else(|| KernelError::Parse(format!("unknown reduction order `{other}`")))?;
                ReductionOrder::blocked(size)
            }
        }
    }
}

impl TryFrom<String> for ReductionOrder {
    type Error = KernelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ReductionOrder> for String {
    fn from(r: ReductionOrder) -> String {
        r.to_string()
    }
}
