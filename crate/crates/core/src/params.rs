//! Named parameter storage and the forward-pass session that binds
//! parameters onto a tape.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Parameter groups that training stages freeze or release together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Stem,
    Attribute,
    Appearance,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Stem, ParamGroup::Attribute, ParamGroup::Appearance];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Stem => "stem.",
            ParamGroup::Attribute => "att.",
            ParamGroup::Appearance => "app.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        match s {
            "stem" => Some(ParamGroup::Stem),
            "attribute" | "att" => Some(ParamGroup::Attribute),
            "appearance" | "app" => Some(ParamGroup::Appearance),
            _ => None,
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Stem => "stem",
            ParamGroup::Attribute => "attribute",
            ParamGroup::Appearance => "appearance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        }
    }
}

/// Learnable weights plus non-learnable buffers (running batch-norm statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, v: Vec<f64>) {
        self.buffers.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&[f64]> {
        self.buffers
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(group.prefix()))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Names whose shapes differ between `self` and `other`, or that exist in only one.
    pub fn shape_diff(&self, other: &ParamStore) -> Vec<String> {
        let mut diffs = Vec::new();
        for (name, t) in &self.params {
            match other.params.get(name) {
                None => diffs.push(format!("{name}: missing")),
                Some(o) if o.shape() != t.shape() => {
                    diffs.push(format!("{name}: expected {:?}, found {:?}", t.shape(), o.shape()))
                }
                _ => {}
            }
        }
        for name in other.params.keys() {
            if !self.params.contains_key(name) {
                diffs.push(format!("{name}: unexpected"));
            }
        }
        for (name, b) in &self.buffers {
            match other.buffers.get(name) {
                None => diffs.push(format!("{name}: missing buffer")),
                Some(o) if o.len() != b.len() => {
                    diffs.push(format!("{name}: expected {} values, found {}", b.len(), o.len()))
                }
                _ => {}
            }
        }
        diffs
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` of the generator seeded with `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Init { rng }
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    /// Normal with variance `gain / fan_in`, fan-in being every axis but the first.
    pub fn fan_in(&mut self, shape: &[usize], gain: f64) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (gain / fan_in as f64).sqrt())
    }

    pub fn conv(&mut self, store: &mut ParamStore, name: &str, out_c: usize, in_c: usize, k: usize, gain: f64) {
        store.insert(format!("{name}.weight"), self.fan_in(&[out_c, in_c, k, k], gain));
    }

    pub fn bn(&mut self, store: &mut ParamStore, name: &str, channels: usize) {
        store.insert(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.insert_buffer(format!("{name}.running_mean"), vec![0.0; channels]);
        store.insert_buffer(format!("{name}.running_var"), vec![1.0; channels]);
    }

    pub fn linear(&mut self, store: &mut ParamStore, name: &str, out_f: usize, in_f: usize, bias: bool) {
        store.insert(format!("{name}.weight"), self.fan_in(&[out_f, in_f], 1.0));
        if bias {
            store.insert(format!("{name}.bias"), Tensor::zeros(&[out_f]));
        }
    }
}

/// One forward pass: a fresh tape plus the parameters bound onto it.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    trainable: Vec<ParamGroup>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a mut ParamStore, mode: Mode, trainable: &[ParamGroup]) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            mode,
            trainable: trainable.to_vec(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Binds a parameter onto the tape (once per session).
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let mut t = self.store.param(name)?.clone();
        t.clear_grad();
        t.requires_grad = ParamGroup::of(name).is_some_and(|g| self.trainable.contains(&g));
        let v = self.tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn conv(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let y = self.tape.conv2d(x, w, stride, pad)?;
        let bias = format!("{name}.bias");
        if self.store.get(&bias).is_some() {
            let b = self.param(&bias)?;
            return self.tape.channel_bias(y, b);
        }
        Ok(y)
    }

    pub fn linear(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let bias = format!("{name}.bias");
        let b = if self.store.get(&bias).is_some() {
            Some(self.param(&bias)?)
        } else {
            None
        };
        self.tape.linear(x, w, b)
    }

    /// Batch norm; in train mode also folds the batch statistics into the
    /// running averages.
    pub fn batch_norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(&format!("{name}.gamma"))?;
        let beta = self.param(&format!("{name}.beta"))?;
        let mean_key = format!("{name}.running_mean");
        let var_key = format!("{name}.running_var");
        match self.mode {
            Mode::Train => {
                let out = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                if let Some(rm) = self.store.buffer_mut(&mean_key) {
                    rm.iter_mut()
                        .zip(&out.mean)
                        .for_each(|(r, m)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m);
                }
                if let Some(rv) = self.store.buffer_mut(&var_key) {
                    rv.iter_mut()
                        .zip(&out.var)
                        .for_each(|(r, v)| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v);
                }
                Ok(out.output)
            }
            Mode::Eval => {
                let mean = self.store.buffer(&mean_key)?.to_vec();
                let var = self.store.buffer(&var_key)?.to_vec();
                self.tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
            }
        }
    }

    /// conv -> batch norm -> relu
    pub fn conv_bn_relu(&mut self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let y = self.conv(x, &format!("{name}.conv"), stride, pad)?;
        let y = self.batch_norm(y, &format!("{name}.bn"))?;
        Ok(self.tape.relu(y))
    }

    /// Back-propagates `loss` and adds the parameter gradients into the store.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)?;
        for (name, var) in &self.bound {
            if let Some(g) = self.tape.grad(*var) {
                let p = self.store.get_mut(name).expect("bound parameter exists");
                p.grad_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.bound.keys().map(String::as_str)
    }
}
