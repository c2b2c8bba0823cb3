//! Named parameter storage and the handful of layers the networks are built from.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tensor::{conv2d, conv_transpose2d, instance_norm, Float, Gradients, Tape, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Parameters keyed by stable dotted names, e.g. `encoder.conv1.kernel`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::of(x.as_f64()))))
                .collect(),
        }
    }

    /// Places every parameter on `tape`; those accepted by `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        self.bind_subset(tape, |_| true, trainable)
    }

    pub fn frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }

    /// Like [`ParamStore::bind`] but only for names accepted by `include`.
    pub fn bind_subset<'t>(
        &self,
        tape: &'t Tape<T>,
        include: impl Fn(&str) -> bool,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .filter(|(name, _)| include(name))
            .map(|(name, value)| {
                let var = if trainable(name) {
                    tape.leaf(value.clone())
                } else {
                    tape.constant(value.clone())
                };
                (name.clone(), var)
            })
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, T: Float> {
    tape: &'t Tape<T>,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Float> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn get(&self, name: &str) -> Var<'t, T> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not in the store"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients for every differentiable parameter that received one.
    pub fn gradients(&self, grads: &mut Gradients<T>) -> BTreeMap<String, ArrayD<T>> {
        self.vars
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

pub(crate) fn uniform<T: Float, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> ArrayD<T> {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::of(dist.sample(rng))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape matches length")
}

/// Kernel `[c_out, c_in, k, k]` and bias `[c_out]`, uniform in ±1/sqrt(fan_in).
pub fn init_conv<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    store.insert(format!("{name}.kernel"), uniform(&[c_out, c_in, k, k], bound, rng));
    store.insert(format!("{name}.bias"), uniform(&[c_out], bound, rng));
}

/// Kernel `[c_in, c_out, k, k]` and bias `[c_out]` for a transposed convolution.
pub fn init_conv_transpose<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
) {
    let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
    store.insert(format!("{name}.kernel"), uniform(&[c_in, c_out, k, k], bound, rng));
    store.insert(format!("{name}.bias"), uniform(&[c_out], bound, rng));
}

/// Weight `[in, out]` and bias `[out]`; `zero` gives an all-zero layer.
pub fn init_linear<T: Float, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    name: &str,
    inputs: usize,
    outputs: usize,
    zero: bool,
) {
    if zero {
        store.insert(format!("{name}.weight"), ArrayD::zeros(IxDyn(&[inputs, outputs])));
        store.insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[outputs])));
    } else {
        let bound = 1.0 / (inputs as f64).sqrt();
        store.insert(format!("{name}.weight"), uniform(&[inputs, outputs], bound, rng));
        store.insert(format!("{name}.bias"), uniform(&[outputs], bound, rng));
    }
}

pub fn init_res_block<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, channels: usize) {
    init_conv(store, rng, &format!("{name}.conv1"), channels, channels, 3);
    init_conv(store, rng, &format!("{name}.conv2"), channels, channels, 3);
}

pub fn conv<'t, T: Float>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
    conv2d(
        x,
        p.get(&format!("{name}.kernel")),
        Some(p.get(&format!("{name}.bias"))),
        stride,
        pad,
    )
}

pub fn conv_transpose<'t, T: Float>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    conv_transpose2d(
        x,
        p.get(&format!("{name}.kernel")),
        Some(p.get(&format!("{name}.bias"))),
        2,
        1,
        1,
    )
}

/// `x: [n, in]` to `[n, out]`.
pub fn linear<'t, T: Float>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    x.matmul(p.get(&format!("{name}.weight")))
        .add(p.get(&format!("{name}.bias")))
}

pub fn norm<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    instance_norm(x, NORM_EPS)
}

/// `x + IN(conv2(relu(IN(conv1(x)))))`, channel count preserved.
pub fn res_block<'t, T: Float>(p: &Bound<'t, T>, name: &str, x: Var<'t, T>) -> Var<'t, T> {
    let h = norm(conv(p, &format!("{name}.conv1"), x, 1, 1)).relu();
    let h = norm(conv(p, &format!("{name}.conv2"), h, 1, 1));
    x.add(h)
}
