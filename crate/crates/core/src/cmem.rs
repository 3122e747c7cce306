//! Short-range motion enhancement by channel attention.
//!
//! The input is first compressed by a factor `r` along channels. A shared
//! 3x3 convolution transforms every frame, and two motion cues are taken
//! between neighbouring frames: the feature difference (later pooled over
//! space) and the per-channel cosine similarity. Their weighted sum is
//! expanded back to `C` channels and squashed into a gain `F^s`; the output
//! is `X + X * F^s`, broadcasting the gain over each spatial plane.
//!
//! Both cues are defined for the `T - 1` transitions; slot `t` holds the
//! transition from frame `t` to frame `t + 1` and the final slot is zero.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, ParamStore};
use crate::tensor::{Element, Tensor};

/// Squashing applied to the expanded motion features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionForm {
    /// `2 * sigmoid(z) - 1`, in (-1, 1) and zero for `z = 0`.
    #[default]
    ShiftedSigmoid,
    /// `2 * sigmoid(z - 1)`, in (0, 2).
    OffsetSigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmemConfig {
    /// Channel reduction ratio.
    pub r: usize,
    /// Weight of the pooled frame difference.
    pub alpha: f64,
    /// Weight of the cosine similarity.
    pub beta: f64,
    pub attention_form: AttentionForm,
}

impl Default for CmemConfig {
    fn default() -> Self {
        CmemConfig { r: 16, alpha: 0.5, beta: 0.5, attention_form: AttentionForm::ShiftedSigmoid }
    }
}

impl CmemConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.r == 0 || !channels.is_multiple_of(self.r) {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by reduction ratio r = {}",
                self.r
            )));
        }
        let finite = self.alpha.is_finite() && self.beta.is_finite();
        if !finite || self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "motion weights must be non-negative with a positive sum (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Cmem {
    pub config: CmemConfig,
    pub channels: usize,
    /// 1x1, `C -> C/r`.
    pub conv_prev: Conv2d,
    /// 3x3, `C/r -> C/r`, shared by both frames of a transition.
    pub conv_trans: Conv2d,
    /// 1x1, `C/r -> C`.
    pub conv_exp: Conv2d,
}

/// Intermediate tensors of one CMEM pass.
pub struct CmemTrace<'t, T: Element> {
    pub reduced: Var<'t, T>,
    pub difference: Var<'t, T>,
    pub cosine: Var<'t, T>,
    pub attention: Var<'t, T>,
    pub output: Var<'t, T>,
}

impl Cmem {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        config: CmemConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate(channels)?;
        let reduced = channels / config.r;
        Ok(Cmem {
            conv_prev: Conv2d::new(store, &format!("{name}.conv_prev"), channels, reduced, 1, true, rng)?,
            conv_trans: Conv2d::new(store, &format!("{name}.conv_trans"), reduced, reduced, 3, true, rng)?,
            conv_exp: Conv2d::new(store, &format!("{name}.conv_exp"), reduced, channels, 1, true, rng)?,
            config,
            channels,
        })
    }

    pub fn reduced_channels(&self) -> usize {
        self.channels / self.config.r
    }

    fn check_input<T: Element>(&self, x: &Var<'_, T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[2] != self.channels {
            return Err(Error::Shape(format!(
                "CMEM built for {} channels received input {:?}",
                self.channels, s
            )));
        }
        Ok(())
    }

    /// `conv_prev * X`.
    pub fn reduce_channels<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x)?;
        self.conv_prev.forward(ctx, x)
    }

    /// Frame differences of `conv_trans * xr`.
    pub fn motion_difference<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, xr: Var<'t, T>) -> Result<Var<'t, T>> {
        frame_differences(self.conv_trans.forward(ctx, xr)?)
    }

    /// Per-channel cosine similarity of `conv_trans * xr` between frames.
    pub fn motion_cosine<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, xr: Var<'t, T>) -> Result<Var<'t, T>> {
        frame_cosines(self.conv_trans.forward(ctx, xr)?)
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.trace(ctx, x)?.output)
    }

    /// Full pass returning every intermediate.
    pub fn trace<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<CmemTrace<'t, T>> {
        let reduced = self.reduce_channels(ctx, x)?;
        let transformed = self.conv_trans.forward(ctx, reduced)?;
        let difference = frame_differences(transformed)?;
        let cosine = frame_cosines(transformed)?;
        let (attention, output) = self.fuse_and_excite(ctx, x, difference, cosine)?;
        Ok(CmemTrace { reduced, difference, cosine, attention, output })
    }

    /// Pools the difference, mixes it with the cosine, expands and squashes
    /// it into `F^s`, and applies `X + X * F^s`. Returns `(F^s, output)`.
    pub fn fuse_and_excite<'t, T: Element>(
        &self,
        ctx: &Forward<'t, '_, T>,
        x: Var<'t, T>,
        difference: Var<'t, T>,
        cosine: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let pooled = difference.global_avg_pool()?;
        let fused = pooled.scale(self.config.alpha).add(cosine.scale(self.config.beta))?;
        let expanded = self.conv_exp.forward(ctx, fused)?;
        let attention = match self.config.attention_form {
            AttentionForm::ShiftedSigmoid => expanded.sigmoid().scale(2.0).add_scalar(-1.0),
            AttentionForm::OffsetSigmoid => expanded.add_scalar(-1.0).sigmoid().scale(2.0),
        };
        if ctx.capturing() {
            ctx.probe("attention", &attention.value());
        }
        let output = x.add(x.mul_channel(attention)?)?;
        Ok((attention, output))
    }
}

fn zeros_like_frames<'t, T: Element>(y: Var<'t, T>, spatial: bool) -> Result<Var<'t, T>> {
    let mut s = y.shape();
    if !spatial {
        s[3] = 1;
        s[4] = 1;
    }
    Ok(y.tape().constant(Tensor::zeros(&s)))
}

/// `y[t+1] - y[t]` for the `T - 1` transitions, zero in the last slot.
pub fn frame_differences<T: Element>(y: Var<'_, T>) -> Result<Var<'_, T>> {
    let t = y.value().dims5()?[1];
    if t < 2 {
        return zeros_like_frames(y, true);
    }
    let next = y.narrow(1, 1, t - 1)?;
    let prev = y.narrow(1, 0, t - 1)?;
    next.sub(prev)?.pad_axis(1, 0, 1)
}

/// `cos(y[t+1], y[t])` per channel for the `T - 1` transitions, zero in
/// the last slot.
pub fn frame_cosines<T: Element>(y: Var<'_, T>) -> Result<Var<'_, T>> {
    let t = y.value().dims5()?[1];
    if t < 2 {
        return zeros_like_frames(y, false);
    }
    let next = y.narrow(1, 1, t - 1)?;
    let prev = y.narrow(1, 0, t - 1)?;
    next.cosine_per_channel(prev)?.pad_axis(1, 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn module(channels: usize, config: CmemConfig) -> (ParamStore<f64>, Cmem) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Cmem::new(&mut store, "cmem", channels, config, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn reduction_ratio_sets_channels() {
        let (store, m) = module(16, CmemConfig::default());
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = tape.constant(Tensor::full(&[1, 2, 16, 3, 3], 0.5));
        assert_eq!(m.reduce_channels(&ctx, x).unwrap().shape(), vec![1, 2, 1, 3, 3]);
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = Cmem::new(&mut store, "c", 24, CmemConfig::default(), &mut rng).unwrap_err().to_string();
        assert!(err.contains("24") && err.contains("16"), "{err}");
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let bad = CmemConfig { alpha: 0.0, beta: 0.0, ..CmemConfig::default() };
        assert!(bad.validate(16).is_err());
        let neg = CmemConfig { alpha: -0.1, ..CmemConfig::default() };
        assert!(neg.validate(16).is_err());
    }

    #[test]
    fn single_frame_motion_is_zero() {
        let (store, m) = module(16, CmemConfig::default());
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = tape.constant(Tensor::from_fn(&[2, 1, 16, 3, 3], |i| (i % 7) as f64));
        let tr = m.trace(&ctx, x).unwrap();
        assert!(tr.difference.value().data().iter().all(|&v| v == 0.0));
        assert!(tr.cosine.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(tr.output.shape(), vec![2, 1, 16, 3, 3]);
    }

    #[test]
    fn offset_form_gain_range() {
        let cfg = CmemConfig { attention_form: AttentionForm::OffsetSigmoid, ..CmemConfig::default() };
        let (store, m) = module(16, cfg);
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 16, 4, 4], |i| ((i * 31 % 17) as f64) - 8.0));
        let tr = m.trace(&ctx, x).unwrap();
        assert!(tr.attention.value().data().iter().all(|&v| v > 0.0 && v < 2.0));
    }
}
