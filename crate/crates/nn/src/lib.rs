//! Minimal reverse-mode automatic differentiation for small convolutional
//! networks on the CPU.
//!
//! The tape records NCHW tensors and the handful of layers the ciGAN
//! generator, discriminator, feature extractor and classifier need.
//! Everything is single-threaded and evaluated in a fixed order, so a run
//! with the same inputs is bit-reproducible.

mod adam;
mod conv;
mod real;
mod tape;

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD, IxDyn};

pub use adam::{Adam, AdamConfig};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};

/// Named parameter tensors, ordered by name.
pub type ParamSet<T> = BTreeMap<String, ArrayD<T>>;

/// View a stored parameter as the 4-D tensor the tape expects:
/// `[C]` becomes `(1, C, 1, 1)`, `[O, I]` becomes `(O, I, 1, 1)`.
pub fn to_4d<T: Real>(a: &ArrayD<T>) -> Array4<T> {
    let shape = a.shape();
    let dims = match shape.len() {
        1 => (1, shape[0], 1, 1),
        2 => (shape[0], shape[1], 1, 1),
        4 => (shape[0], shape[1], shape[2], shape[3]),
        n => panic!("unsupported parameter rank {n}"),
    };
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order(dims)
        .expect("parameter reshape")
}

/// Parameters recorded on a tape, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Record every tensor of `params` as a leaf. `trainable` decides
    /// whether gradients are tracked for them.
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(to_4d(v), trainable)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for the bound parameters, reshaped to their stored shapes.
    pub fn collect_grads<T: Real>(&self, grads: &mut Gradients<T>, params: &ParamSet<T>) -> ParamSet<T> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let (Some(g), Some(p)) = (grads.take(*var), params.get(name)) {
                let g = g
                    .into_shape_with_order(IxDyn(p.shape()))
                    .expect("gradient matches parameter size");
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Convert every tensor of a parameter set to another element type.
pub fn cast_params<A: Real, B: Real>(params: &ParamSet<A>) -> ParamSet<B> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), v.mapv(|x| B::lit(x.as_f64()))))
        .collect()
}
