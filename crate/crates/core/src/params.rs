use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Position of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter {name}");
        self.names.push(name.to_string());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) {
        assert_eq!(t.shape(), self.tensors[id.0].shape(), "shape change for {}", self.names[id.0]);
        self.tensors[id.0] = t;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Records every tensor as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Seeded weight initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite deviation");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(&mut self.rng)))
    }

    /// He-normal weights for a ReLU layer with the given fan-in.
    pub fn he<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, libm::sqrt(2.0 / fan_in as f64))
    }

    /// Variance-preserving weights for a layer without a following ReLU.
    pub fn lecun<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        self.normal(shape, libm::sqrt(1.0 / fan_in as f64))
    }
}

/// `kh × kw` convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    /// He-initialized weights (`relu_follows`) or variance-preserving ones, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        ksize: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        relu_follows: bool,
    ) -> Self {
        let shape = [ksize, ksize, cin, cout];
        let fan_in = ksize * ksize * cin;
        let w = if relu_follows { init.he(&shape, fan_in) } else { init.lecun(&shape, fan_in) };
        ConvLayer {
            w: ps.push(&alloc::format!("{name}.w"), w),
            b: ps.push(&alloc::format!("{name}.b"), Tensor::zeros(&[cout])),
            stride,
            pad: ksize / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> crate::Result<Var> {
        g.conv2d(x, p[self.w], p[self.b], self.stride, self.pad)
    }
}

/// Per-row affine layer `x · w + b`.
#[derive(Debug, Clone, Copy)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearLayer {
    pub fn build<T: Scalar>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        relu_follows: bool,
    ) -> Self {
        let w = if relu_follows { init.he(&[cin, cout], cin) } else { init.lecun(&[cin, cout], cin) };
        Self::with_weights(ps, name, w, Tensor::zeros(&[cout]))
    }

    pub fn with_weights<T: Scalar>(ps: &mut ParamSet<T>, name: &str, w: Tensor<T>, b: Tensor<T>) -> Self {
        LinearLayer {
            w: ps.push(&alloc::format!("{name}.w"), w),
            b: ps.push(&alloc::format!("{name}.b"), b),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> crate::Result<Var> {
        g.linear(x, p[self.w], p[self.b])
    }
}

/// `lin2(relu(lin1(x))) + proj(x)`: the residual block used by both stream
/// embeddings.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub lin1: LinearLayer,
    pub lin2: LinearLayer,
    pub proj: LinearLayer,
}

impl ResBlock {
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        ResBlock {
            lin1: LinearLayer::build(ps, init, &alloc::format!("{name}.lin1"), cin, cout, true),
            lin2: LinearLayer::build(ps, init, &alloc::format!("{name}.lin2"), cout, cout, false),
            proj: LinearLayer::build(ps, init, &alloc::format!("{name}.proj"), cin, cout, false),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> crate::Result<Var> {
        let h = self.lin1.forward(g, p, x)?;
        let h = g.relu(h);
        let h = self.lin2.forward(g, p, h)?;
        let s = self.proj.forward(g, p, x)?;
        g.add(h, s)
    }
}
