//! Named parameter storage and the two primitive layers (convolution and
//! instance normalisation) that the network blocks are built from.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{ConvSpec, Gradients, Real, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Flat, ordered collection of named tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<T>> {
        self.id(name).map(|id| &self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn element_count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies every parameter of `self` that also exists in `source` with the same shape.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, source: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(v) = source.by_name(&p.name) {
                if v.shape() == p.value.shape() {
                    p.value.assign(v);
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replaces a parameter's value, checking the name and shape.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: expected shape {:?}, found {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// A forward pass in progress: a tape plus the parameters bound into it so far.
pub struct Graph<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        self.tape.value(v)
    }

    /// Runs the reverse pass and maps the results back onto parameters.
    /// Parameters not used by the forward pass get `None`.
    pub fn param_gradients(&self, loss: Var) -> Vec<Option<ArrayD<T>>> {
        let mut grads: Gradients<T> = self.tape.backward(loss);
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.take(v)))
            .collect()
    }
}

fn he_normal<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(normal.sample(rng)))
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub transposed: bool,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl Conv {
    /// He-normal weights, zero bias. `name` gets `.weight` / `.bias` appended.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Conv {
        Self::build(store, name, channels_in, channels_out, spec, bias, false, rng)
    }

    pub fn transposed<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Conv {
        Self::build(store, name, channels_in, channels_out, spec, bias, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels_in: usize,
        channels_out: usize,
        spec: ConvSpec,
        bias: bool,
        transposed: bool,
        rng: &mut R,
    ) -> Conv {
        let g = spec.groups;
        assert!(
            channels_in % g == 0 && channels_out % g == 0,
            "{name}: channels {channels_in}->{channels_out} not divisible by {g} groups"
        );
        let k = spec.kernel;
        let taps = k * k * k;
        let (shape, fan_in) = if transposed {
            // each output voxel sees taps / stride^3 input positions per channel
            let reach = (taps / spec.stride.pow(3)).max(1);
            ([channels_in, channels_out / g, k, k, k], channels_in / g * reach)
        } else {
            ([channels_out, channels_in / g, k, k, k], channels_in / g * taps)
        };
        let weight = store.add(format!("{name}.weight"), he_normal(&shape, fan_in, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[channels_out]))));
        Conv {
            weight,
            bias,
            spec,
            transposed,
            channels_in,
            channels_out,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        if self.transposed {
            g.tape.conv_transpose3d(x, w, b, self.spec)
        } else {
            g.tape.conv3d(x, w, b, self.spec)
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: store.add(format!("{name}.gamma"), ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels]))),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.tape.instance_norm(x, gamma, beta, NORM_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_weight_shapes_and_counts() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv::new(&mut store, "a", 8, 12, ConvSpec::same3(4), true, &mut rng);
        assert_eq!(store.get(c.weight).value.shape(), &[12, 2, 3, 3, 3]);
        let t = Conv::transposed(&mut store, "b", 8, 4, ConvSpec::down2(1), false, &mut rng);
        assert_eq!(store.get(t.weight).value.shape(), &[8, 4, 2, 2, 2]);
        assert_eq!(store.element_count(), 12 * 2 * 27 + 12 + 8 * 4 * 8);
        assert_eq!(store.element_count_with_prefix("b."), 8 * 4 * 8);
    }

    #[test]
    fn he_init_has_expected_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: ArrayD<f64> = he_normal(&[64, 16, 3, 3, 3], 16 * 27, &mut rng);
        let var = w.mapv(|v| v * v).mean().unwrap();
        let expected = 2.0 / (16.0 * 27.0);
        assert!((var / expected - 1.0).abs() < 0.05, "{var} vs {expected}");
    }

    #[test]
    fn copy_matching_skips_missing_and_reshaped() {
        let mut a = ParamStore::<f64>::new();
        a.add("x", ArrayD::zeros(IxDyn(&[2])));
        a.add("y", ArrayD::zeros(IxDyn(&[3])));
        let mut b = ParamStore::<f64>::new();
        b.add("x", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        b.add("y", ArrayD::from_elem(IxDyn(&[4]), 1.0));
        assert_eq!(a.copy_matching(&b), 1);
        assert_eq!(a.by_name("x").unwrap()[[0]], 1.0);
        assert!(a.set("y", ArrayD::zeros(IxDyn(&[4]))).is_err());
        assert!(a.set("z", ArrayD::zeros(IxDyn(&[3]))).is_err());
    }
}
