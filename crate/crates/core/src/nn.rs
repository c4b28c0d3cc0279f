//! Small parameterized building blocks shared by the model modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::scalar::Real;
use crate::tensor::{Result, Tensor};

/// Gaussian init with standard deviation `std`.
pub fn normal_tensor<R: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| R::lit(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weight matrix with fan-in scaled init.
pub fn weight<R: Real>(
    store: &mut ParamStore<R>,
    rng: &mut impl Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<ParamId> {
    let std = (1.0 / fan_in as f64).sqrt();
    store.add(name, normal_tensor(rng, &[fan_in, fan_out], std))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            w: weight(store, rng, &format!("{name}.w"), d_in, d_out)?,
            b: store.add(format!("{name}.b"), Tensor::zeros([d_out]))?,
        })
    }

    /// Like `new` with an explicit weight standard deviation.
    pub fn with_std<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(format!("{name}.w"), normal_tensor(rng, &[d_in, d_out], std))?,
            b: store.add(format!("{name}.b"), Tensor::zeros([d_out]))?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let b = g.param(ps, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Real>(store: &mut ParamStore<R>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([d], R::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d]))?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let gamma = g.param(ps, self.gamma);
        let beta = g.param(ps, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, rng, &format!("{name}.0"), d_in, d_hidden)?,
            out: Linear::new(store, rng, &format!("{name}.1"), d_hidden, d_out)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(g, ps, x)?;
        let h = g.relu(h);
        self.out.forward(g, ps, h)
    }
}

/// Position-wise feed-forward block with residual and post-normalization.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub mlp: Mlp,
    pub norm: LayerNorm,
}

impl FeedForward {
    pub fn new<R: Real>(
        store: &mut ParamStore<R>,
        rng: &mut impl Rng,
        name: &str,
        d: usize,
        d_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), d, d_hidden, d)?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), d)?,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, ps: &ParamStore<R>, x: Var) -> Result<Var> {
        let h = self.mlp.forward(g, ps, x)?;
        let s = g.add(x, h)?;
        self.norm.forward(g, ps, s)
    }
}
