//! IMG residual blocks and the clip classifier built from them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::clim::{self, Clim};
use crate::cmem::{Cmem, CmemConfig};
use crate::error::{Error, Result};
use crate::nn::{dropout, BatchNorm, Conv2d, Forward, Linear, ParamStore};
use crate::shift::ShiftMode;
use crate::tensor::Element;

/// How per-frame scores are aggregated over time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Consensus {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Channels of the input clips.
    pub in_channels: usize,
    /// Output channels of the stem, which is also the residual width.
    pub stem_width: usize,
    /// Non-overlapping spatial average pooling applied after the stem.
    pub pool: usize,
    /// Bottleneck width of each block, in order.
    pub blocks: Vec<usize>,
    pub num_classes: usize,
    pub consensus: Consensus,
    pub cmem_enabled: bool,
    pub clim_enabled: bool,
    pub shift_mode: ShiftMode,
    /// Per-slice override of `shift_mode` for CLIM slices 1, 2, 3.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_shift_modes: Option<[ShiftMode; 3]>,
    /// Run CLIM before CMEM inside each block.
    pub swap_order: bool,
    /// Initial scale of each block's tail normalization. Zero starts every
    /// block as the identity.
    pub tail_scale: f64,
    pub cmem: CmemConfig,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 1,
            stem_width: 8,
            pool: 4,
            blocks: vec![32, 32],
            num_classes: 4,
            consensus: Consensus::Mean,
            cmem_enabled: true,
            clim_enabled: true,
            shift_mode: ShiftMode::Pretrained,
            slice_shift_modes: None,
            swap_order: false,
            tail_scale: 1.0,
            cmem: CmemConfig::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.in_channels == 0 || self.stem_width == 0 || self.pool == 0 {
            return Err(Error::Config("in_channels, stem_width and pool must be positive".into()));
        }
        if !self.tail_scale.is_finite() {
            return Err(Error::Config(format!("tail_scale must be finite, got {}", self.tail_scale)));
        }
        for (i, &mid) in self.blocks.iter().enumerate() {
            if mid == 0 {
                return Err(Error::Config(format!("block {i} has zero width")));
            }
            if self.clim_enabled {
                clim::check_channels(mid).map_err(|e| Error::Config(format!("block {i}: {e}")))?;
            }
            if self.cmem_enabled {
                self.cmem.validate(mid).map_err(|e| Error::Config(format!("block {i}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn slice_modes(&self) -> [ShiftMode; 3] {
        self.slice_shift_modes.unwrap_or([self.shift_mode; 3])
    }
}

#[derive(Clone, Debug)]
pub struct ImgBlock {
    pub width: usize,
    pub mid: usize,
    pub head: Conv2d,
    pub head_norm: BatchNorm,
    pub cmem: Option<Cmem>,
    pub clim: Option<Clim>,
    pub tail: Conv2d,
    pub tail_norm: BatchNorm,
    pub swap_order: bool,
}

impl ImgBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        mid: usize,
        config: &NetworkConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let head = Conv2d::new(store, &format!("{name}.head"), width, mid, 1, false, rng)?;
        let head_norm = BatchNorm::new(store, &format!("{name}.head_bn"), mid, 1.0);
        let cmem = config
            .cmem_enabled
            .then(|| Cmem::new(store, &format!("{name}.cmem"), mid, config.cmem.clone(), rng))
            .transpose()?;
        let clim = config
            .clim_enabled
            .then(|| Clim::new(store, &format!("{name}.clim"), mid, config.slice_modes(), rng))
            .transpose()?;
        let tail = Conv2d::new(store, &format!("{name}.tail"), mid, width, 1, false, rng)?;
        // zero scale: every block starts as the identity map
        let tail_norm = BatchNorm::new(store, &format!("{name}.tail_bn"), width, config.tail_scale);
        Ok(ImgBlock { width, mid, head, head_norm, cmem, clim, tail, tail_norm, swap_order: config.swap_order })
    }

    /// `x + tail(CLIM(CMEM(head(x))))`.
    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        if s.len() != 5 || s[2] != self.width {
            return Err(Error::Shape(format!("block of width {} received input {s:?}", self.width)));
        }
        let mut h = self.head_norm.forward(ctx, self.head.forward(ctx, x)?)?.relu();
        let apply_cmem = |h| match &self.cmem {
            Some(m) => m.forward(ctx, h),
            None => Ok(h),
        };
        let apply_clim = |h| match &self.clim {
            Some(c) => c.forward(ctx, h),
            None => Ok(h),
        };
        h = if self.swap_order { apply_cmem(apply_clim(h)?)? } else { apply_clim(apply_cmem(h)?)? };
        let t = self.tail_norm.forward(ctx, self.tail.forward(ctx, h)?)?;
        x.add(t)
    }

    pub fn norms_mut(&mut self) -> [&mut BatchNorm; 2] {
        [&mut self.head_norm, &mut self.tail_norm]
    }
}

/// Stem, IMG blocks, spatial pooling, per-frame linear classifier and
/// temporal consensus.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub stem: Conv2d,
    pub stem_norm: BatchNorm,
    pub blocks: Vec<ImgBlock>,
    pub classifier: Linear,
}

impl Network {
    pub fn new<T: Element>(config: NetworkConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = config.stem_width;
        let stem = Conv2d::new(store, "stem", config.in_channels, width, 3, false, &mut rng)?;
        let stem_norm = BatchNorm::new(store, "stem_bn", width, 1.0);
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, &mid)| ImgBlock::new(store, &format!("block{i}"), width, mid, &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let classifier = Linear::new(store, "fc", width, config.num_classes, &mut rng);
        Ok(Network { config, stem, stem_norm, blocks, classifier })
    }

    /// Freezes every normalization layer except the stem's.
    pub fn freeze_batch_norm<T: Element>(&mut self, store: &mut ParamStore<T>) {
        for block in &mut self.blocks {
            for bn in block.norms_mut() {
                bn.freeze(store);
            }
        }
    }

    /// Per-frame features after the blocks: `[N, T, C, H', W']`.
    pub fn features<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, clip: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = clip.shape();
        let [_, _, c, h, w] = match s[..] {
            [n, t, c, h, w] => [n, t, c, h, w],
            _ => return Err(Error::Shape(format!("clip must be [N,T,C,H,W], got {s:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "clip has {c} channels but the network expects in_channels = {}",
                self.config.in_channels
            )));
        }
        if h % self.config.pool != 0 || w % self.config.pool != 0 {
            return Err(Error::Shape(format!("frame size {h}x{w} is not divisible by pool {}", self.config.pool)));
        }
        let mut x = self.stem_norm.forward(ctx, self.stem.forward(ctx, clip)?)?.relu();
        x = x.avg_pool2d(self.config.pool)?;
        for block in &self.blocks {
            x = block.forward(ctx, x)?;
        }
        Ok(x)
    }

    /// Class scores `[N, M]` for a batch of clips.
    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Forward<'t, '_, T>,
        clip: Var<'t, T>,
        dropout_rate: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.features(ctx, clip)?;
        self.classify(ctx, x, dropout_rate)
    }

    /// Pool, drop out, classify every frame, and aggregate over time.
    pub fn classify<'t, T: Element>(
        &self,
        ctx: &Forward<'t, '_, T>,
        features: Var<'t, T>,
        dropout_rate: f64,
    ) -> Result<Var<'t, T>> {
        let [n, t, c, _, _] = features.value().dims5()?;
        let pooled = features.global_avg_pool()?.reshape(&[n * t, c])?;
        let dropped = dropout(ctx, pooled, dropout_rate)?;
        let frame_scores = self.classifier.forward(ctx, dropped)?.reshape(&[n, t, self.config.num_classes])?;
        match self.config.consensus {
            Consensus::Mean => frame_scores.mean_axis(1),
            Consensus::Max => frame_scores.max_axis(1),
        }
    }

    pub fn parameter_count<T: Element>(&self, store: &ParamStore<T>) -> usize {
        store.parameter_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use crate::tensor::Tensor;

    fn small() -> NetworkConfig {
        NetworkConfig { stem_width: 32, pool: 2, blocks: vec![32], num_classes: 3, ..NetworkConfig::default() }
    }

    #[test]
    fn rejects_incompatible_block_width() {
        let cfg = NetworkConfig { blocks: vec![48], ..small() };
        assert!(Network::new(cfg, &mut ParamStore::<f32>::new(), 0).is_err());
        let cfg = NetworkConfig { num_classes: 1, ..small() };
        assert!(Network::new(cfg, &mut ParamStore::<f32>::new(), 0).is_err());
    }

    #[test]
    fn rejects_wrong_input_channels() {
        let mut store = ParamStore::<f32>::new();
        let net = Network::new(small(), &mut store, 0).unwrap();
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 0);
        let clip = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let err = net.forward(&ctx, clip, 0.0).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains("in_channels = 1"), "{err}");
    }

    #[test]
    fn scores_have_batch_by_class_shape() {
        let mut store = ParamStore::<f32>::new();
        let net = Network::new(small(), &mut store, 0).unwrap();
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Train, 0);
        let clip = tape.constant(Tensor::from_fn(&[2, 4, 1, 8, 8], |i| (i % 5) as f32 / 5.0));
        let scores = net.forward(&ctx, clip, 0.5).unwrap();
        assert_eq!(scores.shape(), vec![2, 3]);
        assert!(scores.value().all_finite());
    }

    #[test]
    fn ablations_shrink_parameter_count() {
        let count = |cmem, clim| {
            let mut store = ParamStore::<f32>::new();
            let cfg = NetworkConfig { cmem_enabled: cmem, clim_enabled: clim, ..small() };
            let net = Network::new(cfg, &mut store, 0).unwrap();
            net.parameter_count(&store)
        };
        assert!(count(false, false) < count(true, false));
        assert!(count(false, false) < count(false, true));
        assert!(count(true, false) < count(true, true));
    }

    #[test]
    fn zero_tail_blocks_are_identity() {
        let x = Tensor::from_fn(&[2, 3, 32, 4, 4], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4);
        for zero_scale in [true, false] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let cfg = NetworkConfig { tail_scale: if zero_scale { 0.0 } else { 1.0 }, ..small() };
            let block = ImgBlock::new(&mut store, "b", 32, 32, &cfg, &mut rng).unwrap();
            if !zero_scale {
                block.tail.zero(&mut store);
            }
            let tape = Tape::new();
            let ctx = Forward::new(&tape, &store, Mode::Train, 0);
            let y = block.forward(&ctx, tape.constant(x.clone())).unwrap();
            assert_eq!(y.value().data(), x.data());
        }
    }
}
