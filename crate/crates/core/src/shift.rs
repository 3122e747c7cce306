//! Temporal shift: the fixed TSM frame shift and its learnable
//! generalization as a per-channel length-3 temporal convolution.
//!
//! With the kernel from [`make_tsm_kernel`], [`adaptive_shift`] reproduces
//! [`tsm_shift`] exactly: the first eighth of the channels read the next
//! frame, the second eighth read the previous frame, and the rest pass
//! through. Frames shifted in from outside the clip are zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{uniform, Forward, ParamId, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor};

/// How a shift kernel is initialized and whether it trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMode {
    /// Untied channel-mixing temporal convolution, random init (structure a).
    Conv1d,
    /// Depthwise kernel, random init, trainable (structure b).
    Random,
    /// TSM kernel, never updated (structure c).
    Frozen,
    /// TSM kernel as initialization, trainable (structure d).
    Pretrained,
    /// Pass-through kernel, never updated. Removes all temporal mixing.
    Identity,
}

impl ShiftMode {
    pub const ALL: [ShiftMode; 5] =
        [ShiftMode::Conv1d, ShiftMode::Random, ShiftMode::Frozen, ShiftMode::Pretrained, ShiftMode::Identity];

    pub fn trainable(self) -> bool {
        matches!(self, ShiftMode::Conv1d | ShiftMode::Random | ShiftMode::Pretrained)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ShiftMode::Conv1d => "conv1d",
            ShiftMode::Random => "random",
            ShiftMode::Frozen => "frozen",
            ShiftMode::Pretrained => "pretrained",
            ShiftMode::Identity => "identity",
        }
    }
}

impl fmt::Display for ShiftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShiftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShiftMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift mode {s:?} (conv1d|random|frozen|pretrained|identity)")))
    }
}

fn check_eighths(channels: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(8) {
        return Err(Error::Shape(format!("temporal shift needs a channel count divisible by 8, got {channels}")));
    }
    Ok(())
}

/// Fixed TSM shift of a `[N, T, C, H, W]` tensor.
pub fn tsm_shift<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, t, c, h, w] = x.dims5()?;
    check_eighths(c)?;
    let plane = h * w;
    let (left, right) = (c / 8, c / 4);
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let src_t = if ci < left {
                    (ti + 1 < t).then_some(ti + 1)
                } else if ci < right {
                    ti.checked_sub(1)
                } else {
                    Some(ti)
                };
                if let Some(s) = src_t {
                    let src = x.offset5(ni, s, ci, 0, 0);
                    let dst = x.offset5(ni, ti, ci, 0, 0);
                    out.data_mut()[dst..dst + plane].copy_from_slice(&x.data()[src..src + plane]);
                }
            }
        }
    }
    Ok(out)
}

/// `[C, 3]` kernel equivalent to [`tsm_shift`]: rows `0..C/8` are
/// `(0, 0, 1)`, rows `C/8..C/4` are `(1, 0, 0)`, the rest `(0, 1, 0)`.
pub fn make_tsm_kernel<T: Element>(channels: usize) -> Result<Tensor<T>> {
    check_eighths(channels)?;
    let mut k = Tensor::zeros(&[channels, 3]);
    for c in 0..channels {
        let tap = if c < channels / 8 {
            2
        } else if c < channels / 4 {
            0
        } else {
            1
        };
        k.data_mut()[c * 3 + tap] = T::one();
    }
    Ok(k)
}

pub fn make_identity_kernel<T: Element>(channels: usize) -> Tensor<T> {
    Tensor::from_fn(&[channels, 3], |i| if i % 3 == 1 { T::one() } else { T::zero() })
}

/// Applies a `[C, 3]` depthwise or `[C, C, 3]` channel-mixing temporal
/// kernel to `[N, T, C, H, W]`.
pub fn adaptive_shift<'t, T: Element>(x: Var<'t, T>, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
    if kernel.shape().len() == 3 {
        x.temporal_full(kernel)
    } else {
        x.temporal_depthwise(kernel)
    }
}

/// Scale of the uniform random initialization for depthwise kernels.
pub fn random_init_bound() -> f64 {
    1.0 / 3f64.sqrt()
}

/// A learnable (or frozen) temporal shift layer.
#[derive(Clone, Debug)]
pub struct ShiftKernel {
    pub weight: ParamId,
    pub mode: ShiftMode,
    pub channels: usize,
}

impl ShiftKernel {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        mode: ShiftMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_eighths(channels)?;
        let value = match mode {
            ShiftMode::Conv1d => uniform(&[channels, channels, 3], 1.0 / ((3 * channels) as f64).sqrt(), rng),
            ShiftMode::Random => uniform(&[channels, 3], random_init_bound(), rng),
            ShiftMode::Frozen | ShiftMode::Pretrained => make_tsm_kernel(channels)?,
            ShiftMode::Identity => make_identity_kernel(channels),
        };
        let kind = if mode.trainable() { ParamKind::Weight } else { ParamKind::Buffer };
        let weight = store.add(format!("{name}.kernel"), value, kind);
        Ok(ShiftKernel { weight, mode, channels })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        adaptive_shift(x, ctx.param(self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    /// Per-channel sequences (a, b, c) = (1, 2, 3) + 10 * channel.
    fn sequences() -> Tensor<f64> {
        Tensor::from_fn(&[1, 3, 8, 1, 1], |i| {
            let (t, c) = (i / 8, i % 8);
            (t + 1) as f64 + 10.0 * c as f64
        })
    }

    fn channel(x: &Tensor<f64>, c: usize) -> Vec<f64> {
        (0..x.shape()[1]).map(|t| x.at5(0, t, c, 0, 0)).collect()
    }

    #[test]
    fn tsm_shift_moves_first_two_eighths() {
        let y = tsm_shift(&sequences()).unwrap();
        assert_eq!(channel(&y, 0), vec![2.0, 3.0, 0.0]);
        assert_eq!(channel(&y, 1), vec![0.0, 11.0, 12.0]);
        for c in 2..8 {
            assert_eq!(channel(&y, c), channel(&sequences(), c));
        }
    }

    #[test]
    fn single_frame_zeroes_shifted_channels() {
        let x = Tensor::<f64>::full(&[1, 1, 16, 2, 2], 3.0);
        let y = tsm_shift(&x).unwrap();
        for c in 0..16 {
            let expect = if c < 4 { 0.0 } else { 3.0 };
            assert_eq!(y.at5(0, 0, c, 1, 1), expect);
        }
    }

    #[test]
    fn tsm_kernel_rows() {
        let k = make_tsm_kernel::<f64>(8).unwrap();
        assert_eq!(&k.data()[..6], &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(k.data()[6..].chunks(3).all(|r| r == [0.0, 1.0, 0.0]));
        let k = make_tsm_kernel::<f64>(16).unwrap();
        let rows: Vec<_> = k.data().chunks(3).collect();
        assert!(rows[..2].iter().all(|r| *r == [0.0, 0.0, 1.0]));
        assert!(rows[2..4].iter().all(|r| *r == [1.0, 0.0, 0.0]));
        assert!(rows[4..].iter().all(|r| *r == [0.0, 1.0, 0.0]));
        assert!(make_tsm_kernel::<f64>(7).is_err());
        assert!(tsm_shift(&Tensor::<f64>::zeros(&[1, 2, 12, 1, 1])).is_err());
    }

    #[test]
    fn kernel_forms_match_sequences() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let left = tape.constant(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap());
        let ident = tape.constant(Tensor::new(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap());
        assert_eq!(adaptive_shift(x, left).unwrap().value().data(), &[2.0, 3.0, 0.0]);
        assert_eq!(adaptive_shift(x, ident).unwrap().value().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mode_parsing() {
        for m in ShiftMode::ALL {
            assert_eq!(m.as_str().parse::<ShiftMode>().unwrap(), m);
        }
        assert!("tsm".parse::<ShiftMode>().is_err());
        assert!(!ShiftMode::Frozen.trainable());
        assert!(ShiftMode::Pretrained.trainable());
    }
}
