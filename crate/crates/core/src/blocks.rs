//! Convolutional blocks shared by the semantic encoder and the denoiser.

use crate::error::Result;
use crate::nn::layers::{group_count, Conv2d, Norm};
use crate::nn::{Graph, ParamStore, Scalar, Var};
use crate::rng::Rng;

/// Preferred number of normalization groups for feature maps.
pub const GROUPS: usize = 8;

/// Pre-activation residual block: `x + conv(silu(gn(conv(silu(gn(x))))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv2d,
    pub norm2: Norm,
    pub conv2: Conv2d,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        let groups = group_count(channels, GROUPS);
        Self {
            norm1: Norm::group(format!("{name}/norm1"), channels, groups),
            conv1: Conv2d::new(format!("{name}/conv1"), channels, channels, 3, 1),
            norm2: Norm::group(format!("{name}/norm2"), channels, groups),
            conv2: Conv2d::new(format!("{name}/conv2"), channels, channels, 3, 1),
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.norm1.init(p)?;
        self.conv1.init(p, rng)?;
        self.norm2.init(p)?;
        self.conv2.init(p, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        g.add(x, h)
    }
}

/// Multi-head self-attention over spatial positions with a residual path.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: Norm,
    pub qkv: Conv2d,
    pub proj: Conv2d,
    pub heads: usize,
}

impl AttentionBlock {
    pub fn new(name: &str, channels: usize, heads: usize) -> Self {
        Self {
            norm: Norm::group(format!("{name}/norm"), channels, group_count(channels, GROUPS)),
            qkv: Conv2d::new(format!("{name}/qkv"), channels, 3 * channels, 1, 1),
            proj: Conv2d::new(format!("{name}/proj"), channels, channels, 1, 1),
            heads,
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.norm.init(p)?;
        self.qkv.init(p, rng)?;
        self.proj.init(p, rng)
    }

    /// Attention on an already normalised input, without the residual.
    pub fn attend<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, h: Var) -> Result<Var> {
        let qkv = self.qkv.forward(g, p, h)?;
        let a = g.attention(qkv, self.heads)?;
        self.proj.forward(g, p, a)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let h = self.attend(g, p, h)?;
        g.add(x, h)
    }
}
