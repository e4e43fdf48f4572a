//! Named parameter storage and the small perceptron building blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Negative-side slope of every leaky-relu in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Network,
    /// The initial atoms and the atom update maps; trained at a reduced rate.
    Dictionary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Every learnable tensor of a model, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tensor, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Places every parameter on `tape` as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.param(p.tensor.clone())).collect())
    }

    /// Places every parameter on `tape` as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect())
    }
}

/// Tape variables of a [`ParamStore`] bound for one pass.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Deterministic initializer. Each parameter draws from its own stream,
/// keyed by the model seed and the parameter name, so two models built
/// from the same seed agree on every parameter they have in common.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::from_parts_unchecked(shape.to_vec(), data)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Mixes several integers into one seed (splitmix64 finalizer per word).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Fully connected layer `y = x·W + b`, with `W` stored `[in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Kaiming-uniform weights for a leaky-relu consumer and zero biases.
    pub fn new(store: &mut ParamStore, init: Init, name: &str, inputs: usize, outputs: usize, group: ParamGroup) -> Self {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let bound = gain * (3.0 / inputs as f64).sqrt();
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = init.uniform(&wname, &[inputs, outputs], bound);
        let b = Tensor::zeros(vec![outputs]);
        Linear {
            weight: store.add(wname, w, group),
            bias: store.add(bname, b, group),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add(y, bound.var(self.bias))
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    LeakyRelu,
    Identity,
}

/// Shared perceptron with one hidden layer as wide as its output:
/// `Linear → activation → Linear`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
    pub activation: Activation,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, inputs: usize, outputs: usize, group: ParamGroup) -> Self {
        Mlp {
            hidden: Linear::new(store, init, &format!("{name}.0"), inputs, outputs, group),
            output: Linear::new(store, init, &format!("{name}.1"), outputs, outputs, group),
            activation: Activation::LeakyRelu,
        }
    }

    /// Applies the perceptron to each row of `x[R × in]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, bound, x)?;
        let h = match self.activation {
            Activation::LeakyRelu => tape.leaky_relu(h, LEAKY_SLOPE),
            Activation::Identity => h,
        };
        self.output.forward(tape, bound, h)
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        Linear::param_count(inputs, outputs) + Linear::param_count(outputs, outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_keyed_by_name() {
        let init = Init { seed: 5 };
        assert_eq!(init.uniform("a", &[4], 1.0), init.uniform("a", &[4], 1.0));
        assert_ne!(init.uniform("a", &[4], 1.0), init.uniform("b", &[4], 1.0));
        assert_ne!(init.uniform("a", &[4], 1.0), Init { seed: 6 }.uniform("a", &[4], 1.0));
    }

    #[test]
    fn mlp_matches_hand_evaluation() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, Init { seed: 1 }, "f", 2, 2, ParamGroup::Network);
        let x = [0.7, -1.3];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(Tensor::new(vec![1, 2], x.to_vec()).unwrap());
        let y = mlp.forward(&mut tape, &bound, xv).unwrap();

        let layer = |l: &Linear, input: &[f64]| -> Vec<f64> {
            let w = store.get(l.weight).tensor.data();
            let b = store.get(l.bias).tensor.data();
            (0..l.outputs)
                .map(|o| b[o] + (0..l.inputs).map(|i| input[i] * w[i * l.outputs + o]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = layer(&mlp.hidden, &x)
            .into_iter()
            .map(|v| if v > 0.0 { v } else { 0.2 * v })
            .collect();
        let expect = layer(&mlp.output, &h);
        for (a, b) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
