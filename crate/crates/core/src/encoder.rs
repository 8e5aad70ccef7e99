//! Self-attention and bidirectional cross-attention blocks, and the layer stack
//! that alternates them.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, LayerNorm, Linear, Mlp};
use crate::params::Graph;
use crate::real::Real;

/// Query/key/value and output projections of one attention direction.
#[derive(Clone, Debug)]
pub struct Projections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl Projections {
    fn new<T: Real>(b: &mut Builder<T>, dim: usize) -> Result<Self> {
        Ok(Projections {
            wq: Linear::new(b, "wq", dim, dim, false)?,
            wk: Linear::new(b, "wk", dim, dim, false)?,
            wv: Linear::new(b, "wv", dim, dim, false)?,
            wo: Linear::new(b, "wo", dim, dim, false)?,
        })
    }

    /// `softmax(Q Kᵀ / √(D/L)) V` per head, heads concatenated, then projected.
    fn attend<T: Real>(&self, g: &mut Graph<T>, q_in: Var, kv_in: Var, heads: usize) -> Result<Var> {
        let d = g.tape.value(q_in).last_dim();
        let q = self.wq.forward(g, q_in)?;
        let k = self.wk.forward(g, kv_in)?;
        let v = self.wv.forward(g, kv_in)?;
        let scale = T::one() / T::from_usize(d / heads).unwrap().sqrt();
        let a = g.tape.attention(q, k, v, heads, scale)?;
        self.wo.forward(g, a)
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!("token dim {dim} is not divisible by {heads} heads")));
    }
    Ok(())
}

/// Pre-norm multi-head self-attention followed by an MLP, both residual.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: LayerNorm,
    pub proj: Projections,
    pub mlp: Mlp,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, mlp_dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        b.scope(name, |b| {
            Ok(SelfAttention {
                norm: LayerNorm::new(b, "ln", dim)?,
                proj: Projections::new(b, dim)?,
                mlp: Mlp::new(b, "mlp", dim, mlp_dim, dim)?,
                heads,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let n = self.norm.forward(g, z)?;
        let a = self.proj.attend(g, n, n, self.heads)?;
        let z = g.tape.add(z, a)?;
        let m = self.mlp.forward(g, z)?;
        g.tape.add(z, m)
    }
}

/// One direction of cross-attention: queries from `z_q`, keys and values from
/// `z_kv`, residual on `z_q`.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub proj: Projections,
    pub mlp: Mlp,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, mlp_dim: usize, heads: usize) -> Result<Self> {
        check_heads(dim, heads)?;
        b.scope(name, |b| {
            Ok(CrossAttention {
                norm_q: LayerNorm::new(b, "ln_q", dim)?,
                norm_kv: LayerNorm::new(b, "ln_kv", dim)?,
                proj: Projections::new(b, dim)?,
                mlp: Mlp::new(b, "mlp", dim, mlp_dim, dim)?,
                heads,
            })
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z_q: Var, z_kv: Var) -> Result<Var> {
        let (dq, dk) = (g.tape.value(z_q).last_dim(), g.tape.value(z_kv).last_dim());
        if dq != dk {
            return Err(Error::shape("cross_attention", format!("token dims {dq} and {dk} differ")));
        }
        let nq = self.norm_q.forward(g, z_q)?;
        let nkv = self.norm_kv.forward(g, z_kv)?;
        let a = self.proj.attend(g, nq, nkv, self.heads)?;
        let z = g.tape.add(z_q, a)?;
        let m = self.mlp.forward(g, z)?;
        g.tape.add(z, m)
    }
}

/// What follows the per-stream self-attention inside a layer.
#[derive(Clone, Debug)]
pub enum Mixer {
    /// Both cross-attention directions, computed from the same inputs.
    Bidirectional { c2v: CrossAttention, v2c: CrossAttention },
    /// Only current-to-visual; the current stream passes through.
    CurrentToVisual(CrossAttention),
    /// A second self-attention per present stream in place of cross-attention.
    SelfOnly { video: Option<SelfAttention>, current: Option<SelfAttention> },
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub sa_v: Option<SelfAttention>,
    pub sa_c: Option<SelfAttention>,
    pub mixer: Mixer,
}

/// Which cross-modal mixing the stack uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    Bidirectional,
    CurrentToVisual,
    SelfOnly,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<T>,
        depth: usize,
        dim: usize,
        mlp_dim: usize,
        heads: usize,
        video: bool,
        current: bool,
        mixer: MixerKind,
    ) -> Result<Self> {
        if mixer != MixerKind::SelfOnly && !(video && current) {
            return Err(Error::Config("cross-attention needs both modalities".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let layer = b.scope(&format!("enc.{i}"), |b| {
                let sa_v = video.then(|| SelfAttention::new(b, "sa_v", dim, mlp_dim, heads)).transpose()?;
                let sa_c = current.then(|| SelfAttention::new(b, "sa_c", dim, mlp_dim, heads)).transpose()?;
                let mixer = match mixer {
                    MixerKind::Bidirectional => Mixer::Bidirectional {
                        c2v: CrossAttention::new(b, "ca_c2v", dim, mlp_dim, heads)?,
                        v2c: CrossAttention::new(b, "ca_v2c", dim, mlp_dim, heads)?,
                    },
                    MixerKind::CurrentToVisual => {
                        Mixer::CurrentToVisual(CrossAttention::new(b, "ca_c2v", dim, mlp_dim, heads)?)
                    }
                    MixerKind::SelfOnly => Mixer::SelfOnly {
                        video: video.then(|| SelfAttention::new(b, "sa2_v", dim, mlp_dim, heads)).transpose()?,
                        current: current.then(|| SelfAttention::new(b, "sa2_c", dim, mlp_dim, heads)).transpose()?,
                    },
                };
                Ok(EncoderLayer { sa_v, sa_c, mixer })
            })?;
            layers.push(layer);
        }
        Ok(Encoder { layers })
    }

    /// Runs every layer; absent streams stay absent.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, mut zv: Option<Var>, mut zc: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
        for layer in &self.layers {
            (zv, zc) = layer.forward(g, zv, zc)?;
        }
        Ok((zv, zc))
    }
}

fn apply<T: Real>(g: &mut Graph<T>, block: Option<&SelfAttention>, z: Option<Var>) -> Result<Option<Var>> {
    match (block, z) {
        (Some(b), Some(z)) => Ok(Some(b.forward(g, z)?)),
        (None, z) => Ok(z),
        (Some(_), None) => Err(Error::Contract("missing modality input".into())),
    }
}

impl EncoderLayer {
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, zv: Option<Var>, zc: Option<Var>) -> Result<(Option<Var>, Option<Var>)> {
        let zv = apply(g, self.sa_v.as_ref(), zv)?;
        let zc = apply(g, self.sa_c.as_ref(), zc)?;
        match &self.mixer {
            Mixer::Bidirectional { c2v, v2c } => {
                let (v, c) = both(zv, zc)?;
                let v2 = c2v.forward(g, v, c)?;
                let c2 = v2c.forward(g, c, v)?;
                Ok((Some(v2), Some(c2)))
            }
            Mixer::CurrentToVisual(c2v) => {
                let (v, c) = both(zv, zc)?;
                Ok((Some(c2v.forward(g, v, c)?), Some(c)))
            }
            Mixer::SelfOnly { video, current } => Ok((apply(g, video.as_ref(), zv)?, apply(g, current.as_ref(), zc)?)),
        }
    }
}

fn both(zv: Option<Var>, zc: Option<Var>) -> Result<(Var, Var)> {
    match (zv, zc) {
        (Some(v), Some(c)) => Ok((v, c)),
        _ => Err(Error::Contract("cross-attention needs both token streams".into())),
    }
}
