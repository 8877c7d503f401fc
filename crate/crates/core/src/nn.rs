//! Binding named parameters into a [`Graph`] and the few layer helpers the
//! networks share.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::ParamStore;
use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Which parameters receive gradients in a session.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    /// Inference: nothing is trainable.
    #[default]
    Nothing,
    /// Everything except names starting with one of these prefixes.
    AllExcept(Vec<String>),
}

impl Trainable {
    pub fn is_trainable(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::AllExcept(frozen) => !frozen.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A graph plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    params: &'a ParamStore,
    trainable: Trainable,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn inference(params: &'a ParamStore) -> Self {
        Self::new(params, Trainable::Nothing)
    }

    pub fn new(params: &'a ParamStore, trainable: Trainable) -> Self {
        Session {
            graph: Graph::new(),
            params,
            trainable,
            bound: HashMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.params.expect(name)?.clone();
        let v = if self.trainable.is_trainable(name) {
            self.graph.param(value)
        } else {
            self.graph.constant_shared(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Shape of a stored parameter, without binding it.
    pub fn stored_shape(&self, name: &str) -> Result<&'a [usize]> {
        Ok(self.params.expect(name)?.shape())
    }

    /// Bound trainable parameters, by name.
    pub fn trainable_vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound
            .iter()
            .filter(|(k, _)| self.trainable.is_trainable(k))
            .map(|(k, &v)| (k.as_str(), v))
    }

    /// `relu?(conv(x, {prefix}.w, {prefix}.b))`.
    pub fn conv(
        &mut self,
        x: Var,
        prefix: &str,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.graph.conv2d(x, w, Some(b), stride, pad)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }
}

/// FNV-1a, used to derive a per-parameter stream from the model seed so
/// initialization does not depend on creation order.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ name_hash(name))
}

/// Zero-mean normal weights with standard deviation `gain / sqrt(fan_in)`.
pub(crate) fn init_weight(shape: &[usize], fan_in: usize, gain: f64, seed: u64, name: &str) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut rng = rng_for(seed, name);
    Tensor::from_fn(shape, |_| normal.sample(&mut rng))
}

/// He-initialized `[cout, cin, k, k]` conv weights and zero bias under `prefix`.
pub(crate) fn add_conv(store: &mut ParamStore, prefix: &str, cin: usize, cout: usize, k: usize, seed: u64) {
    let name = format!("{prefix}.w");
    let w = init_weight(&[cout, cin, k, k], cin * k * k, 2f64.sqrt(), seed, &name);
    store.insert(name, w);
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}
