//! Synthetic motion clips and their binary archive.
//!
//! Every clip shows a 3x3 bright sprite on a dark field. In `direction4` the
//! sprite translates one pixel per frame right, left, down or up; the
//! static coordinate is drawn from the same distribution as the moving one,
//! so a single frame (or a shuffled clip) says nothing about the class. In
//! `phase-order2` the sprite sweeps right then left, or left then right,
//! over the same span; both classes show the same frames in a different
//! order. `mixed` draws from both label sets (four direction classes
//! followed by the two order classes).

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const SPRITE: usize = 3;
pub const ARCHIVE_MAGIC: &str = "IMGD";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Direction4,
    PhaseOrder2,
    Mixed,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Direction4 => 4,
            Task::PhaseOrder2 => 2,
            Task::Mixed => 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub task: Task,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

fn default_noise() -> f64 {
    0.05
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            task: Task::Direction4,
            train_per_class: 500,
            val_per_class: 100,
            frames: 8,
            height: 32,
            width: 32,
            channels: 1,
            noise: 0.05,
            seed: 0,
        }
    }
}

/// Frame layout of an order clip: `gap` blank frames, a sweep of `sweep`
/// frames, `gap` blanks, a second sweep, then blanks to the end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OrderLayout {
    pub gap: usize,
    pub sweep: usize,
}

impl OrderLayout {
    pub fn for_frames(frames: usize) -> Result<Self> {
        if frames < 8 {
            return Err(Error::Config(format!("phase-order clips need at least 8 frames, got {frames}")));
        }
        let gap = (frames / 8).max(1);
        let sweep = (frames - 3 * gap) / 2;
        Ok(OrderLayout { gap, sweep })
    }

    pub fn first(&self) -> std::ops::Range<usize> {
        self.gap..self.gap + self.sweep
    }

    pub fn second(&self) -> std::ops::Range<usize> {
        let start = 2 * self.gap + self.sweep;
        start..start + self.sweep
    }
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.task.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("need at least 2 frames, got {}", self.frames)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be a non-negative number, got {}", self.noise)));
        }
        if matches!(self.task, Task::Direction4 | Task::Mixed) {
            // moving and static coordinates both span sprite + (T - 1)
            let need = SPRITE + self.frames - 1;
            if self.height < need || self.width < need {
                return Err(Error::Config(format!(
                    "a {} frame sprite path needs a field of at least {need}x{need}, got {}x{}",
                    self.frames, self.height, self.width
                )));
            }
        }
        if matches!(self.task, Task::PhaseOrder2 | Task::Mixed) {
            let layout = OrderLayout::for_frames(self.frames)?;
            let need = SPRITE + layout.sweep - 1;
            if self.width < need || self.height < SPRITE {
                return Err(Error::Config(format!(
                    "a sweep of {} frames needs a field at least {need} wide and {SPRITE} high, got {}x{}",
                    layout.sweep, self.height, self.width
                )));
            }
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }
}

/// Sprite top-left corner `(y, x)` per frame, `None` for a blank frame.
pub type Path2 = Vec<Option<(usize, usize)>>;

/// Direction classes: 0 right, 1 left, 2 down, 3 up.
pub fn direction_path(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Path2 {
    let t = spec.frames;
    let horizontal = class < 2;
    let (moving_extent, static_extent) =
        if horizontal { (spec.width, spec.height) } else { (spec.height, spec.width) };
    let start = rng.random_range(0..=moving_extent - SPRITE - (t - 1));
    let fixed = rng.random_range(0..=static_extent - SPRITE - (t - 1)) + rng.random_range(0..t);
    (0..t)
        .map(|f| {
            let step = if class.is_multiple_of(2) { f } else { t - 1 - f };
            let moving = start + step;
            Some(if horizontal { (fixed, moving) } else { (moving, fixed) })
        })
        .collect()
}

/// Order classes: 0 sweeps right then left, 1 left then right.
pub fn order_path(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Result<Path2> {
    let layout = OrderLayout::for_frames(spec.frames)?;
    let x0 = rng.random_range(0..=spec.width - SPRITE - (layout.sweep - 1));
    let y = rng.random_range(0..=spec.height - SPRITE);
    let mut path = vec![None; spec.frames];
    for i in 0..layout.sweep {
        let out = x0 + i;
        let back = x0 + layout.sweep - 1 - i;
        let (a, b) = if class == 0 { (out, back) } else { (back, out) };
        path[layout.first().start + i] = Some((y, a));
        path[layout.second().start + i] = Some((y, b));
    }
    Ok(path)
}

/// Renders a path into `[T, C, H, W]` values in `[0, 1]`.
pub fn render(spec: &DatasetSpec, path: &Path2, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let plane = h * w;
    let mut clip = vec![0f32; spec.clip_len()];
    for (t, pos) in path.iter().enumerate() {
        if let Some((y0, x0)) = *pos {
            for ch in 0..c {
                let base = (t * c + ch) * plane;
                for y in y0..y0 + SPRITE {
                    clip[base + y * w + x0..base + y * w + x0 + SPRITE].fill(1.0);
                }
            }
        }
    }
    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("validated noise");
        for v in &mut clip {
            *v = (*v + normal.sample(rng) as f32).clamp(0.0, 1.0);
        }
    }
    clip
}

/// Seed of clip `index`, independent of generation order.
pub fn clip_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generated clips with labels, split flags and training-set statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub mean: f32,
    pub std: f32,
    /// `[T, C, H, W]` of every clip.
    pub dims: [usize; 4],
    pub clips: Vec<f32>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
}

fn path_for(spec: &DatasetSpec, label: usize, rng: &mut impl Rng) -> Result<Path2> {
    match (spec.task, label) {
        (Task::Direction4, l) | (Task::Mixed, l @ 0..4) => Ok(direction_path(spec, l, rng)),
        (Task::PhaseOrder2, l) => order_path(spec, l, rng),
        (Task::Mixed, l) => order_path(spec, l - 4, rng),
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let m = spec.num_classes();
    let mut clips = Vec::with_capacity((spec.train_per_class + spec.val_per_class) * m * spec.clip_len());
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (split, per_class) in [(Split::Train, spec.train_per_class), (Split::Val, spec.val_per_class)] {
        for i in 0..per_class * m {
            let index = labels.len() as u64;
            let label = i % m;
            let mut rng = ChaCha8Rng::seed_from_u64(clip_seed(spec.seed, index));
            let path = path_for(spec, label, &mut rng)?;
            clips.extend(render(spec, &path, &mut rng));
            labels.push(label);
            splits.push(split);
        }
    }
    let clip_len = spec.clip_len();
    let (mut sum, mut sq, mut count) = (0f64, 0f64, 0usize);
    for (clip, split) in clips.chunks(clip_len).zip(&splits) {
        if *split == Split::Train {
            for &v in clip {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
            count += clip.len();
        }
    }
    let mean = sum / count as f64;
    let std = (sq / count as f64 - mean * mean).max(0.0).sqrt().max(1e-6);
    Ok(Dataset {
        spec: spec.clone(),
        mean: mean as f32,
        std: std as f32,
        dims: [spec.frames, spec.channels, spec.height, spec.width],
        clips,
        labels,
        splits,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn clip_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Raw `[T, C, H, W]` values of clip `i`.
    pub fn clip(&self, i: usize) -> &[f32] {
        let n = self.clip_len();
        &self.clips[i * n..(i + 1) * n]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Normalized `[N, T, C, H, W]` batch of the given clips.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (mean, inv) = (self.mean as f64, 1.0 / self.std as f64);
        let mut data = Vec::with_capacity(indices.len() * self.clip_len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!("clip index {i} out of range for {} clips", self.len())));
            }
            data.extend(self.clip(i).iter().map(|&v| T::of((v as f64 - mean) * inv)));
        }
        let [t, c, h, w] = self.dims;
        Tensor::new(&[indices.len(), t, c, h, w], data)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(b"IMGD", ARCHIVE_VERSION);
        w.str(&serde_json::to_string(&self.spec).expect("spec serializes"));
        w.f32(self.mean);
        w.f32(self.std);
        w.u32(self.len() as u32);
        for d in self.dims {
            w.u32(d as u32);
        }
        w.f32s(&self.clips);
        for &l in &self.labels {
            w.u32(l as u32);
        }
        for s in &self.splits {
            w.u8(matches!(s, Split::Val) as u8);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::open(buf, ARCHIVE_MAGIC, ARCHIVE_VERSION)?;
        let at = r.offset();
        let spec: DatasetSpec =
            serde_json::from_str(r.str()?).map_err(|e| r.error_at(at, format!("bad spec block: {e}")))?;
        let mean = r.f32()?;
        let std = r.f32()?;
        let n = r.u32()? as usize;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let clip_len: usize = dims.iter().product();
        let clips = r.f32s(n.checked_mul(clip_len).ok_or_else(|| r.error("clip count overflows".into()))?)?;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let at = r.offset();
            let l = r.u32()? as usize;
            if l >= spec.num_classes() {
                return Err(r.error_at(at, format!("label {l} out of range")));
            }
            labels.push(l);
        }
        let mut splits = Vec::with_capacity(n);
        for _ in 0..n {
            splits.push(match r.u8()? {
                0 => Split::Train,
                1 => Split::Val,
                other => return Err(r.error_at(r.offset() - 1, format!("bad split flag {other}"))),
            });
        }
        r.finish()?;
        Ok(Dataset { spec, mean, std, dims, clips, labels, splits })
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&buf)
    }
}
