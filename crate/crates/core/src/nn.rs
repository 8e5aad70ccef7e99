//! Parameterized building blocks shared by the encoder and decoder.

use crate::autodiff::{BatchNormMode, Var};
use crate::error::Result;
use crate::kernels::conv::ConvGeom;
use crate::params::{BufferId, Graph, Init, Mode, ParamId, ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Standard deviation of the normal init used for projections and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Registers parameters under a hierarchical name prefix.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub init: &'a mut Init,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, init: &'a mut Init) -> Self {
        Builder { store, init, prefix: String::new() }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        let saved = self.prefix.clone();
        self.prefix = if saved.is_empty() { name.to_string() } else { format!("{saved}.{name}") };
        let out = f(self);
        self.prefix = saved;
        out
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let full = self.full_name(name);
        self.store.add(full, value, kind)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        let v = self.init.normal(shape, INIT_STD);
        self.add(name, v, kind)
    }

    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<ParamId> {
        let v = self.init.he(shape, fan_in);
        self.add(name, v, ParamKind::Weight)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape.to_vec()), kind)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<ParamId> {
        self.add(name, Tensor::ones(shape.to_vec()), kind)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufferId> {
        let full = self.full_name(name);
        self.store.add_buffer(full, value)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        b.scope(name, |b| {
            let w = b.normal("w", &[d_in, d_out], ParamKind::Weight)?;
            let bias = if bias { Some(b.zeros("b", &[d_out], ParamKind::Bias)?) } else { None };
            Ok(Linear { w, b: bias })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_suffix(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, d: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(LayerNorm { gain: b.ones("gain", &[d], ParamKind::Norm)?, bias: b.zeros("bias", &[d], ParamKind::Norm)? })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        g.tape.layer_norm(x, gain, bias, T::lit(LN_EPS))
    }
}

/// Layer norm, linear, GELU, linear.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Mlp {
                norm: LayerNorm::new(b, "ln", d_in)?,
                fc1: Linear::new(b, "fc1", d_in, hidden, true)?,
                fc2: Linear::new(b, "fc2", hidden, d_out, true)?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.tape.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// NHWC convolution with "same" padding, He-initialized.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
}

impl Conv {
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        bias: bool,
    ) -> Result<Self> {
        b.scope(name, |b| {
            let w = b.he("w", &[kernel, kernel, c_in, c_out], kernel * kernel * c_in)?;
            let bias = if bias { Some(b.zeros("b", &[c_out], ParamKind::Bias)?) } else { None };
            Ok(Conv { w, b: bias, kernel })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let b = self.b.map(|b| g.p(b));
        g.tape.conv2d(x, w, b, ConvGeom::same(self.kernel))
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Deconv {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Deconv { w: b.he("w", &[c_in, 2, 2, c_out], c_in)?, b: b.zeros("b", &[c_out], ParamKind::Bias)? })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        g.tape.deconv2x2(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(BatchNorm {
                gamma: b.ones("gamma", &[c], ParamKind::Norm)?,
                beta: b.zeros("beta", &[c], ParamKind::Norm)?,
                running_mean: b.buffer("running_mean", Tensor::zeros([c]))?,
                running_var: b.buffer("running_var", Tensor::ones([c]))?,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.p(self.gamma), g.p(self.beta));
        let eps = T::lit(BN_EPS);
        match g.mode() {
            Mode::Train => {
                let y = g.tape.batch_norm(x, gamma, beta, eps, BatchNormMode::Train, None)?;
                g.record_bn(self.running_mean, self.running_var, y);
                Ok(y)
            }
            Mode::Eval => {
                let store = g.store();
                let running = (store.buffer(self.running_mean).data(), store.buffer(self.running_var).data());
                g.tape.batch_norm(x, gamma, beta, eps, BatchNormMode::Eval, Some(running))
            }
        }
    }
}

/// 3×3 convolution, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        b.scope(name, |b| Ok(ConvBnRelu { conv: Conv::new(b, "conv", 3, c_in, c_out, false)?, bn: BatchNorm::new(b, "bn", c_out)? }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        g.tape.relu(y)
    }
}
