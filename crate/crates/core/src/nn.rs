//! Small building blocks shared by the denoisers.

use alloc::format;

use rand::Rng;

use crate::autodiff::Var;
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Normal(f64),
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
}

impl Init {
    pub fn tensor<R: Rng + ?Sized>(self, shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Normal(std) => Tensor::randn(shape, std, rng),
            Init::FanIn(gain) => Tensor::randn(shape, gain / libm::sqrt(fan_in as f64), rng),
        }
    }
}

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init.tensor(&[fan_in, fan_out], fan_in, rng),
        );
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }

    /// Accepts `[n, in]` or a single vector `[in]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let vector = g.shape(x).len() == 1;
        let x2 = if vector {
            g.reshape(x, &[1, self.fan_in])
        } else {
            x
        };
        let w = g.param(self.w);
        let mut y = g.matmul(x2, w);
        if let Some(b) = self.b {
            let b = g.param(b);
            y = g.add_bcast(y, b);
        }
        if vector {
            g.reshape(y, &[self.fan_out])
        } else {
            y
        }
    }
}
