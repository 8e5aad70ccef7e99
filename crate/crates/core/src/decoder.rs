//! Dense head (token reassembly, scale blending, upsampling) and classification
//! heads.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv, ConvBnRelu, Deconv, Mlp};
use crate::params::Graph;
use crate::real::Real;
use crate::tokenization::VideoLayout;

/// Output channels of the `i`-th upsampling stage: 128, 64, 32, then halving.
pub fn stage_channels(i: usize) -> usize {
    (128usize >> i).max(1)
}

/// Number of ×2 upsampling stages for a patch side of `h_v` pixels.
pub fn stage_count(h_v: usize) -> usize {
    h_v.max(1).ilog2() as usize
}

/// Turns one token segment `[B, n_t·n_h·n_w, D]` into an image
/// `[B, n_h, n_w, n_t·D]` by folding time into channels.
pub fn tokens_to_image<T: Real>(
    g: &mut Graph<T>,
    seg: Var,
    n_t: usize,
    n_h: usize,
    n_w: usize,
    target_t: usize,
) -> Result<Var> {
    let (b, d) = (g.tape.shape(seg)[0], g.tape.shape(seg)[2]);
    let mut x = seg;
    if n_t != target_t {
        x = g.tape.reshape(x, &[b, n_t, n_h * n_w, d])?;
        x = g.tape.resize_bilinear(x, target_t, n_h * n_w)?;
    }
    let x = g.tape.reshape(x, &[b, target_t, n_h, n_w, d])?;
    let x = g.tape.permute(x, &[0, 2, 3, 1, 4])?;
    g.tape.reshape(x, &[b, n_h, n_w, target_t * d])
}

#[derive(Clone, Debug)]
pub struct Reassemble {
    pub squeeze_dilated: Option<Conv>,
    pub squeeze: Conv,
    /// Temporal patch count the squeeze convolutions were built for.
    pub n_t: usize,
}

impl Reassemble {
    pub fn new<T: Real>(b: &mut Builder<T>, n_t: usize, dim: usize, dilated: bool) -> Result<Self> {
        b.scope("reassemble", |b| {
            Ok(Reassemble {
                squeeze_dilated: dilated.then(|| Conv::new(b, "squeeze_d", 1, n_t * dim, dim, true)).transpose()?,
                squeeze: Conv::new(b, "squeeze", 1, n_t * dim, dim, true)?,
                n_t,
            })
        })
    }

    /// Class row dropped, each segment reshaped and squeezed to `D` channels.
    /// A clip with a different temporal patch count is linearly resampled in
    /// time to the built count first.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z: Var, layout: &VideoLayout) -> Result<(Option<Var>, Var)> {
        if g.tape.shape(z)[1] != layout.tokens() {
            return Err(Error::shape("reassemble", format!("{:?} for a {}-token layout", g.tape.shape(z), layout.tokens())));
        }
        let grid = layout.grid;
        let dilated = match (&self.squeeze_dilated, layout.dilated) {
            (Some(conv), true) => {
                let r = layout.dilated_rows();
                let seg = g.tape.narrow(z, 1, r.start, r.len())?;
                let img = tokens_to_image(g, seg, grid.n_t, grid.n_hd, grid.n_wd, self.n_t)?;
                Some(conv.forward(g, img)?)
            }
            (None, false) => None,
            _ => return Err(Error::Contract("layout and decoder disagree on the dilated segment".into())),
        };
        let r = layout.standard_rows();
        let seg = g.tape.narrow(z, 1, r.start, r.len())?;
        let img = tokens_to_image(g, seg, grid.n_t, grid.n_h, grid.n_w, self.n_t)?;
        Ok((dilated, self.squeeze.forward(g, img)?))
    }
}

/// `I_b = I + ConvBnReLU(resize(deconv(I_d)))`, the resize only when the
/// doubled dilated grid does not already match.
#[derive(Clone, Debug)]
pub struct Blend {
    pub up: Deconv,
    pub refine: ConvBnRelu,
}

impl Blend {
    pub fn new<T: Real>(b: &mut Builder<T>, dim: usize) -> Result<Self> {
        b.scope("blend", |b| Ok(Blend { up: Deconv::new(b, "deconv", dim, dim)?, refine: ConvBnRelu::new(b, "cbr", dim, dim)? }))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, dilated: Var, standard: Var) -> Result<Var> {
        let (h, w) = (g.tape.shape(standard)[1], g.tape.shape(standard)[2]);
        let mut u = self.up.forward(g, dilated)?;
        if g.tape.shape(u)[1] != h || g.tape.shape(u)[2] != w {
            u = g.tape.resize_bilinear(u, h, w)?;
        }
        let u = self.refine.forward(g, u)?;
        g.tape.add(standard, u)
    }
}

#[derive(Clone, Debug)]
pub struct DenseHead {
    pub stages: Vec<(Deconv, ConvBnRelu)>,
    pub out: Conv,
}

impl DenseHead {
    pub fn new<T: Real>(b: &mut Builder<T>, dim: usize, h_v: usize, classes: usize) -> Result<Self> {
        b.scope("dense", |b| {
            let mut stages = Vec::new();
            let mut c_in = dim;
            for i in 0..stage_count(h_v) {
                let c = stage_channels(i);
                let stage = b.scope(&format!("stage{i}"), |b| Ok((Deconv::new(b, "deconv", c_in, c)?, ConvBnRelu::new(b, "cbr", c, c)?)))?;
                stages.push(stage);
                c_in = c;
            }
            Ok(DenseHead { stages, out: Conv::new(b, "out", 1, c_in, classes, true)? })
        })
    }

    /// `[B, n_h, n_w, D]` to logits `[B, height, width, K]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, height: usize, width: usize) -> Result<Var> {
        let mut x = x;
        for (deconv, cbr) in &self.stages {
            x = deconv.forward(g, x)?;
            x = cbr.forward(g, x)?;
        }
        let mut y = self.out.forward(g, x)?;
        let (h, w) = (g.tape.shape(y)[1], g.tape.shape(y)[2]);
        if (h, w) != (height, width) {
            log::debug!("dense head resizes {h}x{w} logits to {height}x{width}");
            y = g.tape.resize_bilinear(y, height, width)?;
        }
        Ok(y)
    }
}

/// Class-token row `[B, D]` of a token matrix `[B, N, D]`.
pub fn class_token<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var> {
    let (b, d) = (g.tape.shape(z)[0], g.tape.shape(z)[2]);
    let c = g.tape.narrow(z, 1, 0, 1)?;
    g.tape.reshape(c, &[b, d])
}

/// Layer norm, linear `D→D`, GELU, linear `D→K` on a class token.
pub fn class_head<T: Real>(b: &mut Builder<T>, name: &str, dim: usize, classes: usize) -> Result<Mlp> {
    Mlp::new(b, name, dim, dim, classes)
}

/// Sums per-stream class logits and normalizes them.
pub fn fuse<T: Real>(g: &mut Graph<T>, logits: &[Var]) -> Result<Var> {
    let (first, rest) = logits.split_first().ok_or_else(|| Error::Contract("no class logits to fuse".into()))?;
    let mut sum = *first;
    for &l in rest {
        sum = g.tape.add(sum, l)?;
    }
    g.tape.softmax(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_schedule() {
        assert_eq!(stage_count(8), 3);
        assert_eq!(stage_count(16), 4);
        assert_eq!((0..4).map(stage_channels).collect::<Vec<_>>(), vec![128, 64, 32, 16]);
    }
}
