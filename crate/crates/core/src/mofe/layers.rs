use rand::Rng;

use super::matrix::Matrix;
use crate::scalar::Scalar;

/// Affine map `y = x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![T::zero(); output],
        }
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = || T::of(rng.gen_range(-bound..=bound));
        let weight = Matrix::from_fn(input, output, |_, _| draw());
        let bias = (0..output).map(|_| draw()).collect();
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        x.matmul(&self.weight).add_row(&self.bias)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        grad.weight.add_assign(&x.t_matmul(dy));
        for (g, d) in grad.bias.iter_mut().zip(dy.sum_rows()) {
            *g = *g + d;
        }
        dy.matmul_t(&self.weight)
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut [T]; 2] {
        [self.weight.as_mut_slice(), &mut self.bias]
    }

    pub(crate) fn tensors(&self) -> [&[T]; 2] {
        [self.weight.as_slice(), &self.bias]
    }
}

const GELU_CUBIC: f64 = 0.044715;

fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::of(GELU_CUBIC) * x * x * x);
    (u.tanh(), c)
}

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (t, _) = gelu_inner(x);
    T::of(0.5) * x * (T::one() + t)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (t, c) = gelu_inner(x);
    let half = T::of(0.5);
    let du = c * (T::one() + T::of(3.0 * GELU_CUBIC) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Two affine layers with a GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertCache<T> {
    pub input: Matrix<T>,
    pub pre_act: Matrix<T>,
    pub act: Matrix<T>,
}

impl<T: Scalar> Expert<T> {
    pub fn init(d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::init(d_model, hidden, rng),
            fc2: Linear::init(hidden, d_model, rng),
        }
    }

    pub fn zeros(d_model: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::zeros(d_model, hidden),
            fc2: Linear::zeros(hidden, d_model),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn forward(&self, x: &Matrix<T>) -> (Matrix<T>, ExpertCache<T>) {
        let pre_act = self.fc1.forward(x);
        let act = pre_act.map(gelu);
        let out = self.fc2.forward(&act);
        let cache = ExpertCache {
            input: x.clone(),
            pre_act,
            act,
        };
        (out, cache)
    }

    pub fn backward(&self, cache: &ExpertCache<T>, dy: &Matrix<T>, grad: &mut Expert<T>) -> Matrix<T> {
        let d_act = self.fc2.backward(&cache.act, dy, &mut grad.fc2);
        let d_pre = d_act.zip_map(&cache.pre_act, |d, h| d * gelu_grad(h));
        self.fc1.backward(&cache.input, &d_pre, &mut grad.fc1)
    }
}

/// Gate network mapping concatenated expert outputs to three logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate<T> {
    Linear(Linear<T>),
    Mlp { fc1: Linear<T>, fc2: Linear<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateNetCache<T> {
    Linear {
        input: Matrix<T>,
    },
    Mlp {
        input: Matrix<T>,
        pre_act: Matrix<T>,
        act: Matrix<T>,
    },
}

impl<T: Scalar> Gate<T> {
    pub fn param_count(&self) -> usize {
        match self {
            Gate::Linear(l) => l.param_count(),
            Gate::Mlp { fc1, fc2 } => fc1.param_count() + fc2.param_count(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Gate::Linear(l) => Gate::Linear(Linear::zeros(l.input_dim(), l.output_dim())),
            Gate::Mlp { fc1, fc2 } => Gate::Mlp {
                fc1: Linear::zeros(fc1.input_dim(), fc1.output_dim()),
                fc2: Linear::zeros(fc2.input_dim(), fc2.output_dim()),
            },
        }
    }

    pub fn logits(&self, x: &Matrix<T>) -> (Matrix<T>, GateNetCache<T>) {
        match self {
            Gate::Linear(l) => (l.forward(x), GateNetCache::Linear { input: x.clone() }),
            Gate::Mlp { fc1, fc2 } => {
                let pre_act = fc1.forward(x);
                let act = pre_act.map(gelu);
                let out = fc2.forward(&act);
                (
                    out,
                    GateNetCache::Mlp {
                        input: x.clone(),
                        pre_act,
                        act,
                    },
                )
            }
        }
    }

    pub fn backward(&self, cache: &GateNetCache<T>, d_logits: &Matrix<T>, grad: &mut Gate<T>) -> Matrix<T> {
        match (self, cache, grad) {
            (Gate::Linear(l), GateNetCache::Linear { input }, Gate::Linear(g)) => l.backward(input, d_logits, g),
            (Gate::Mlp { fc1, fc2 }, GateNetCache::Mlp { input, pre_act, act }, Gate::Mlp { fc1: g1, fc2: g2 }) => {
                let d_act = fc2.backward(act, d_logits, g2);
                let d_pre = d_act.zip_map(pre_act, |d, h| d * gelu_grad(h));
                fc1.backward(input, &d_pre, g1)
            }
            _ => unreachable!("gate, cache and gradient variants always match"),
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Gate::Linear(l) => l.tensors_mut().into(),
            Gate::Mlp { fc1, fc2 } => fc1.tensors_mut().into_iter().chain(fc2.tensors_mut()).collect(),
        }
    }

    pub(crate) fn tensors(&self) -> Vec<&[T]> {
        match self {
            Gate::Linear(l) => l.tensors().into(),
            Gate::Mlp { fc1, fc2 } => fc1.tensors().into_iter().chain(fc2.tensors()).collect(),
        }
    }
}
