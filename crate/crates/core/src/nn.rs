//! Parameter storage and the basic layers (convolution, normalization,
//! linear map) shared by every module.

use std::cell::RefCell;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weight: trained, weight-decayed.
    Weight,
    /// Bias or normalization scale/offset: trained, not decayed.
    Bias,
    /// Non-trainable state such as running statistics or frozen kernels.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub kind: ParamKind,
    pub trainable: bool,
}

/// Named tensors of a model: trainable parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let trainable = kind != ParamKind::Buffer;
        self.entries.push(ParamEntry { name: name.into(), value: Arc::new(value), kind, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape(format!("{}: {:?} replaced by {:?}", e.name, e.value.shape(), value.shape())));
        }
        e.value = Arc::new(value);
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar values in trainable (non-buffer) parameters.
    pub fn parameter_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind != ParamKind::Buffer).map(|e| e.value.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: Arc::new(e.value.cast()),
                    kind: e.kind,
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Whether a forward pass trains or evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of a single forward pass: the tape, lazily bound parameter leaves,
/// the dropout generator, and deferred buffer updates.
pub struct Forward<'t, 'p, T: Element> {
    pub tape: &'t Tape<T>,
    store: &'p ParamStore<T>,
    mode: Mode,
    bound: RefCell<Vec<Option<Var<'t, T>>>>,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
    rng: RefCell<ChaCha8Rng>,
    probes: RefCell<Vec<(String, Tensor<T>)>>,
    capture: bool,
}

impl<'t, 'p, T: Element> Forward<'t, 'p, T> {
    pub fn new(tape: &'t Tape<T>, store: &'p ParamStore<T>, mode: Mode, dropout_seed: u64) -> Self {
        Forward {
            tape,
            store,
            mode,
            bound: RefCell::new(vec![None; store.len()]),
            updates: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(dropout_seed)),
            probes: RefCell::new(Vec::new()),
            capture: false,
        }
    }

    /// Records intermediate tensors passed to [`Forward::probe`].
    pub fn with_capture(mut self) -> Self {
        self.capture = true;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    /// The leaf for a stored parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'t, T> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let e = self.store.entry(id);
        let v = self.tape.leaf_shared(e.value.clone(), e.trainable);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Substitutes an externally created leaf for a stored parameter.
    pub fn bind(&self, id: ParamId, var: Var<'t, T>) -> Result<()> {
        if var.shape() != self.store.value(id).shape() {
            return Err(Error::Shape(format!(
                "binding {:?} to {} of shape {:?}",
                var.shape(),
                self.store.entry(id).name,
                self.store.value(id).shape()
            )));
        }
        self.bound.borrow_mut()[id.0] = Some(var);
        Ok(())
    }

    /// Gradients for every parameter bound during this pass.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound.borrow().iter().map(|b| b.and_then(|v| grads.get(v).cloned())).collect()
    }

    pub(crate) fn defer_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Buffer updates (running statistics) produced by this pass.
    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    pub(crate) fn rng(&self) -> std::cell::RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    pub fn capturing(&self) -> bool {
        self.capture
    }

    pub fn probe(&self, name: impl Into<String>, value: &Tensor<T>) {
        if self.capture {
            self.probes.borrow_mut().push((name.into(), value.clone()));
        }
    }

    pub fn take_probes(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut self.probes.borrow_mut())
    }
}

/// Uniform(-bound, bound) tensor.
pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..=bound)))
}

/// 2D convolution parameters: `[C_out, C_in, k, k]` weights, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Kaiming-uniform initialized convolution (`bound = sqrt(6 / fan_in)`).
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(kernel == 1 || kernel == 3) {
            return Err(Error::Config(format!("{name}: kernel size {kernel} (only 1 and 3 are supported)")));
        }
        if c_in == 0 || c_out == 0 {
            return Err(Error::Config(format!("{name}: zero channels ({c_in} -> {c_out})")));
        }
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = store.add(
            format!("{name}.weight"),
            uniform(&[c_out, c_in, kernel, kernel], (6.0 / fan_in).sqrt(), rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), uniform(&[c_out], 1.0 / fan_in.sqrt(), rng), ParamKind::Bias)
        });
        Ok(Conv2d { weight, bias, c_in, c_out, kernel })
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)))
    }

    pub fn zero<T: Element>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.weight).data_mut().fill(T::zero());
        if let Some(b) = self.bias {
            store.value_mut(b).data_mut().fill(T::zero());
        }
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Normalize with running statistics and never update anything.
    pub frozen: bool,
}

impl BatchNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, channels: usize, init_scale: f64) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::of(init_scale)), ParamKind::Bias),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Bias),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], T::one()), ParamKind::Buffer),
            frozen: false,
        }
    }

    /// Switches to frozen mode and marks scale/offset as not trainable.
    pub fn freeze<T: Element>(&mut self, store: &mut ParamStore<T>) {
        self.frozen = true;
        store.set_trainable(self.gamma, false);
        store.set_trainable(self.beta, false);
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let (gamma, beta) = (ctx.param(self.gamma), ctx.param(self.beta));
        if ctx.mode() == Mode::Train && !self.frozen {
            let (y, stats) = x.batch_norm(gamma, beta, NormStats::Batch, BN_EPS)?;
            if let Some((mean, var)) = stats {
                let count = x.value().len() / mean.len();
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let m = T::of(BN_MOMENTUM);
                let keep = T::one() - m;
                let rm = ctx.store().value(self.running_mean);
                let rv = ctx.store().value(self.running_var);
                let new_mean = Tensor::from_fn(&[mean.len()], |c| keep * rm.data()[c] + m * mean[c]);
                let new_var =
                    Tensor::from_fn(&[var.len()], |c| keep * rv.data()[c] + m * var[c] * T::of(unbias));
                ctx.defer_update(self.running_mean, new_mean);
                ctx.defer_update(self.running_var, new_var);
            }
            Ok(y)
        } else {
            let store = ctx.store();
            let stats = NormStats::Running {
                mean: store.value(self.running_mean).data(),
                var: store.value(self.running_var).data(),
            };
            Ok(x.batch_norm(gamma, beta, stats, BN_EPS)?.0)
        }
    }
}

/// Fully connected layer on `[rows, in]` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), uniform(&[c_out, c_in], bound, rng), ParamKind::Weight),
            bias: store.add(format!("{name}.bias"), uniform(&[c_out], bound, rng), ParamKind::Bias),
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(ctx.param(self.weight), Some(ctx.param(self.bias)))
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. A no-op in
/// evaluation mode or with `rate == 0`.
pub fn dropout<'t, T: Element>(ctx: &Forward<'t, '_, T>, x: Var<'t, T>, rate: f64) -> Result<Var<'t, T>> {
    if ctx.mode() == Mode::Eval || rate <= 0.0 {
        return Ok(x);
    }
    if rate >= 1.0 {
        return Err(Error::Config(format!("dropout rate {rate} must be below 1")));
    }
    let keep = T::of(1.0 / (1.0 - rate));
    let len = x.value().len();
    let mask = {
        let mut rng = ctx.rng();
        (0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect()
    };
    x.dropout_with_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eval_dropout_is_identity() {
        let store = ParamStore::<f32>::new();
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Eval, 7);
        let x = tape.constant(Tensor::full(&[4, 4], 1.0));
        let y = dropout(&ctx, x, 0.5).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn train_dropout_is_seeded() {
        let store = ParamStore::<f32>::new();
        let run = |seed| {
            let tape = Tape::new();
            let ctx = Forward::new(&tape, &store, Mode::Train, seed);
            let x = tape.constant(Tensor::full(&[64], 1.0));
            dropout(&ctx, x, 0.5).unwrap().value().data().to_vec()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
        assert!(run(3).iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn frozen_batch_norm_defers_no_updates() {
        let mut store = ParamStore::<f64>::new();
        let mut bn = BatchNorm::new(&mut store, "bn", 2, 1.0);
        let x = Tensor::from_fn(&[2, 2, 2, 3, 3], |i| i as f64);
        {
            let tape = Tape::new();
            let ctx = Forward::new(&tape, &store, Mode::Train, 0);
            bn.forward(&ctx, tape.constant(x.clone())).unwrap();
            assert_eq!(ctx.take_updates().len(), 2);
        }
        bn.freeze(&mut store);
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Train, 0);
        let y = bn.forward(&ctx, tape.constant(x.clone())).unwrap();
        assert!(ctx.take_updates().is_empty());
        // running stats are (0, 1): output = x / sqrt(1 + eps)
        let expected = x.data()[5] / (1.0 + BN_EPS).sqrt();
        assert!((y.value().data()[5] - expected).abs() < 1e-12);
        assert!(!ctx.param(bn.gamma).requires_grad());
    }
}
