//! Cascaded long-range motion integration.
//!
//! The channels are split into four equal slices `X0..X3`. Slice 0 passes
//! through; slice 1 goes through a 3x3 convolution and a temporal shift;
//! slices 2 and 3 first add the previous slice's output, then do the same.
//! Every stage widens the temporal (and spatial) dependency window by one
//! step on each side, so slice `i` depends on at most `2i + 1` frames.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Mode, ParamStore};
use crate::shift::{ShiftKernel, ShiftMode};
use crate::tensor::{Element, Tensor};

pub const SLICES: usize = 4;

#[derive(Clone, Debug)]
pub struct Clim {
    pub channels: usize,
    /// One untied 3x3 convolution per processed slice (slices 1..=3).
    pub conv_spt: Vec<Conv2d>,
    pub shifts: Vec<ShiftKernel>,
}

pub fn check_channels(channels: usize) -> Result<()> {
    if channels == 0 || !channels.is_multiple_of(32) {
        return Err(Error::Shape(format!(
            "CLIM needs channels divisible by 32 (four slices, each divisible by 8), got {channels}"
        )));
    }
    Ok(())
}

impl Clim {
    /// `modes` gives the shift mode of slices 1, 2, 3.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        modes: [ShiftMode; 3],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_channels(channels)?;
        let width = channels / SLICES;
        let mut conv_spt = Vec::with_capacity(3);
        let mut shifts = Vec::with_capacity(3);
        for (i, mode) in modes.into_iter().enumerate() {
            conv_spt.push(Conv2d::new(store, &format!("{name}.conv_spt{}", i + 1), width, width, 3, true, rng)?);
            shifts.push(ShiftKernel::new(store, &format!("{name}.shift{}", i + 1), width, mode, rng)?);
        }
        Ok(Clim { channels, conv_spt, shifts })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 5 || s[2] != self.channels {
            return Err(Error::Shape(format!("CLIM built for {} channels received input {s:?}", self.channels)));
        }
        let width = self.channels / SLICES;
        let mut outputs = Vec::with_capacity(SLICES);
        outputs.push(x.narrow(2, 0, width)?);
        let mut previous: Option<Var<'t, T>> = None;
        for i in 1..SLICES {
            let slice = x.narrow(2, i * width, width)?;
            let input = match previous {
                Some(p) => slice.add(p)?,
                None => slice,
            };
            let convolved = self.conv_spt[i - 1].forward(ctx, input)?;
            let shifted = self.shifts[i - 1].forward(ctx, convolved)?;
            outputs.push(shifted);
            previous = Some(shifted);
        }
        x.tape().concat(&outputs, 2)
    }
}

/// Output frames affected in each slice when the input changes only at
/// frame `t0`.
pub fn temporal_dependency_probe<T: Element>(
    clim: &Clim,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    t0: usize,
) -> Result<Vec<BTreeSet<usize>>> {
    let [n, t, c, h, w] = input.dims5()?;
    if t0 >= t {
        return Err(Error::Shape(format!("probe frame {t0} outside clip of {t} frames")));
    }
    let mut perturbed = input.clone();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let o = input.offset5(ni, t0, ci, y, x);
                    perturbed.data_mut()[o] += T::one();
                }
            }
        }
    }
    let delta = output_change(clim, store, input, &perturbed)?;
    Ok(changed_sets(&delta, clim.channels, |_, t, _, _| t))
}

/// Spatial extent (side of the bounding square, in pixels) of the change in
/// each slice's output when a single input pixel changes in every channel.
pub fn spatial_dependency_probe<T: Element>(
    clim: &Clim,
    store: &ParamStore<T>,
    input: &Tensor<T>,
    pixel: (usize, usize),
) -> Result<Vec<usize>> {
    let [n, t, c, h, w] = input.dims5()?;
    if pixel.0 >= h || pixel.1 >= w {
        return Err(Error::Shape(format!("probe pixel {pixel:?} outside {h}x{w}")));
    }
    let mut perturbed = input.clone();
    for ni in 0..n {
        for ti in 0..t {
            for ci in 0..c {
                let o = input.offset5(ni, ti, ci, pixel.0, pixel.1);
                perturbed.data_mut()[o] += T::one();
            }
        }
    }
    let delta = output_change(clim, store, input, &perturbed)?;
    let rows = changed_sets(&delta, clim.channels, |_, _, y, _| y);
    let cols = changed_sets(&delta, clim.channels, |_, _, _, x| x);
    Ok(rows
        .iter()
        .zip(&cols)
        .map(|(r, c)| {
            let extent = |s: &BTreeSet<usize>| match (s.first(), s.last()) {
                (Some(a), Some(b)) => b - a + 1,
                _ => 0,
            };
            extent(r).max(extent(c))
        })
        .collect())
}

fn output_change<T: Element>(clim: &Clim, store: &ParamStore<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let run = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let tape = Tape::new();
        let ctx = Forward::new(&tape, store, Mode::Eval, 0);
        let y = clim.forward(&ctx, tape.constant(x.clone()))?;
        Ok((*y.value()).clone())
    };
    let (ya, yb) = (run(a)?, run(b)?);
    let data = ya.data().iter().zip(yb.data()).map(|(p, q)| *q - *p).collect();
    Tensor::new(ya.shape(), data)
}

/// For each slice, the set of `key(n, t, y, x)` over entries that changed.
fn changed_sets<T: Element>(
    delta: &Tensor<T>,
    channels: usize,
    key: impl Fn(usize, usize, usize, usize) -> usize,
) -> Vec<BTreeSet<usize>> {
    let s = delta.shape();
    let width = channels / SLICES;
    let mut sets = vec![BTreeSet::new(); SLICES];
    for n in 0..s[0] {
        for t in 0..s[1] {
            for c in 0..s[2] {
                for y in 0..s[3] {
                    for x in 0..s[4] {
                        if delta.at5(n, t, c, y, x) != T::zero() {
                            sets[c / width].insert(key(n, t, y, x));
                        }
                    }
                }
            }
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_channels_not_divisible_by_32() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Clim::new(&mut store, "c", 48, [ShiftMode::Pretrained; 3], &mut rng).is_err());
        assert!(Clim::new(&mut store, "c", 64, [ShiftMode::Pretrained; 3], &mut rng).is_ok());
    }

    #[test]
    fn zero_convolutions_annihilate_processed_slices() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let clim = Clim::new(&mut store, "c", 32, [ShiftMode::Pretrained; 3], &mut rng).unwrap();
        for conv in &clim.conv_spt {
            conv.zero(&mut store);
        }
        let x = Tensor::from_fn(&[1, 3, 32, 2, 2], |i| 1.0 + i as f64);
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
        let y = clim.forward(&ctx, tape.constant(x.clone())).unwrap().value();
        for t in 0..3 {
            for c in 0..32 {
                let expect = if c < 8 { x.at5(0, t, c, 1, 0) } else { 0.0 };
                assert_eq!(y.at5(0, t, c, 1, 0), expect);
            }
        }
    }
}
