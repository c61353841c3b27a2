//! Conditional noise predictor `eps(x_t, t, z_sem)`.
//!
//! A small U-Net in which every normalization is an adaptive group norm
//! site: `z_s * (t_s * GroupNorm(h) + t_b) + z_b`, with `(t_s, t_b)` an MLP
//! of the sinusoidal timestep embedding and `(z_s, z_b)` an MLP of the
//! semantic code.

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionBlock, GROUPS};
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{group_count, Conv2d, Linear, NORM_EPS};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

pub const PREFIX: &str = "denoiser/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub resolution: usize,
    pub in_channels: usize,
    /// Channels per resolution level, finest first; each level halves the side.
    pub channels: Vec<usize>,
    /// Spatial sides at which attention blocks are inserted.
    pub attention_sides: Vec<usize>,
    pub heads: usize,
    pub d_sem: usize,
    pub time_dim: usize,
    pub cond_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            channels: vec![16, 32, 64],
            attention_sides: vec![8],
            heads: 2,
            d_sem: 64,
            time_dim: 64,
            cond_hidden: 64,
        }
    }
}

/// Sinusoidal embedding of one timestep: `[sin(t f_i)..., cos(t f_i)...]`
/// with `f_i = 10000^(-i / (dim/2 - 1))`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dimension {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freq = |i: usize| {
        if half == 1 {
            1.0
        } else {
            (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp()
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|i| (t * freq(i)).sin()));
    out.extend((0..half).map(|i| (t * freq(i)).cos()));
    Ok(out)
}

/// Embeddings for a batch of timesteps, `[N, dim]`.
pub fn time_embedding_batch<T: Scalar>(ts: &[usize], dim: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(time_embedding(t as f64, dim)?.into_iter().map(T::lit));
    }
    Tensor::new(&[ts.len(), dim], data)
}

/// Two-layer MLP producing a `(scale, shift)` pair of channel vectors.
#[derive(Clone, Debug)]
pub struct ModulationMlp {
    pub hidden: Linear,
    pub out: Linear,
    pub channels: usize,
}

impl ModulationMlp {
    fn new(name: &str, din: usize, hidden: usize, channels: usize) -> Self {
        Self {
            hidden: Linear::new(format!("{name}/hidden"), din, hidden),
            out: Linear::new(format!("{name}/out"), hidden, 2 * channels),
            channels,
        }
    }

    fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.hidden.init(p, rng)?;
        // scale half starts at 1 so a fresh site is close to plain GroupNorm
        let c = self.channels;
        let bias = Tensor::from_fn(&[2 * c], |i| if i < c { T::one() } else { T::zero() });
        self.out.init_with_bias(p, rng, bias)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        let h = self.hidden.forward(g, p, x)?;
        let h = g.silu(h);
        let o = self.out.forward(g, p, h)?;
        let c = self.channels;
        Ok((g.slice_cols(o, 0, c)?, g.slice_cols(o, c, 2 * c)?))
    }
}

/// One adaptive group normalization site.
#[derive(Clone, Debug)]
pub struct AdaGn {
    pub channels: usize,
    pub groups: usize,
    pub time: ModulationMlp,
    pub sem: ModulationMlp,
}

/// Per-sample conditioning inputs shared by every site.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning {
    pub time_emb: Var,
    pub z_sem: Var,
}

impl AdaGn {
    pub fn new(name: &str, channels: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            channels,
            groups: group_count(channels, GROUPS),
            time: ModulationMlp::new(&format!("{name}/time"), cfg.time_dim, cfg.cond_hidden, channels),
            sem: ModulationMlp::new(&format!("{name}/sem"), cfg.d_sem, cfg.cond_hidden, channels),
        }
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.time.init(p, rng)?;
        self.sem.init(p, rng)
    }

    /// Modulation vectors `((t_s, t_b), (z_s, z_b))` for this site.
    pub fn modulations<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        cond: Conditioning,
    ) -> Result<((Var, Var), (Var, Var))> {
        Ok((self.time.forward(g, p, cond.time_emb)?, self.sem.forward(g, p, cond.z_sem)?))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, h: Var, cond: Conditioning) -> Result<Var> {
        if g.shape(h).get(1) != Some(&self.channels) {
            return Err(shape_err!("AdaGN site has {} channels, input {:?}", self.channels, g.shape(h)));
        }
        let ((ts, tb), (zs, zb)) = self.modulations(g, p, cond)?;
        apply_ada_gn(g, h, self.groups, (ts, tb), (zs, zb))
    }
}

/// `z_s * (t_s * GroupNorm(h) + t_b) + z_b` for explicit modulation vectors.
pub fn apply_ada_gn<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    groups: usize,
    (ts, tb): (Var, Var),
    (zs, zb): (Var, Var),
) -> Result<Var> {
    let n = g.group_norm(h, groups, None, None, NORM_EPS)?;
    let inner = g.modulate(n, ts, tb)?;
    g.modulate(inner, zs, zb)
}

/// Residual block with two AdaGN sites; a 1x1 projection on the skip path
/// when the channel count changes.
#[derive(Clone, Debug)]
pub struct CondResBlock {
    pub norm1: AdaGn,
    pub conv1: Conv2d,
    pub norm2: AdaGn,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl CondResBlock {
    fn new(name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            norm1: AdaGn::new(&format!("{name}/norm1"), cin, cfg),
            conv1: Conv2d::new(format!("{name}/conv1"), cin, cout, 3, 1),
            norm2: AdaGn::new(&format!("{name}/norm2"), cout, cfg),
            conv2: Conv2d::new(format!("{name}/conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}/skip"), cin, cout, 1, 1)),
        }
    }

    fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.norm1.init(p, rng)?;
        self.conv1.init(p, rng)?;
        self.norm2.init(p, rng)?;
        self.conv2.init(p, rng)?;
        if let Some(s) = &self.skip {
            s.init(p, rng)?;
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, cond: Conditioning) -> Result<Var> {
        let h = self.norm1.forward(g, p, x, cond)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h, cond)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(skip, h)
    }
}

#[derive(Clone, Debug)]
pub struct CondAttention {
    pub norm: AdaGn,
    pub attn: AttentionBlock,
}

impl CondAttention {
    fn new(name: &str, channels: usize, cfg: &DenoiserConfig) -> Self {
        Self {
            norm: AdaGn::new(&format!("{name}/norm"), channels, cfg),
            attn: AttentionBlock::new(name, channels, cfg.heads),
        }
    }

    fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.norm.init(p, rng)?;
        self.attn.qkv.init(p, rng)?;
        self.attn.proj.init(p, rng)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, cond: Conditioning) -> Result<Var> {
        let h = self.norm.forward(g, p, x, cond)?;
        let h = self.attn.attend(g, p, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
struct Level {
    block: CondResBlock,
    attn: Option<CondAttention>,
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    in_conv: Conv2d,
    down: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid_block: CondResBlock,
    mid_attn: CondAttention,
    up: Vec<Level>,
    out_norm: AdaGn,
    out_conv: Conv2d,
}

impl Denoiser {
    pub fn new(cfg: &DenoiserConfig) -> Result<Self> {
        let levels = cfg.channels.len();
        if levels == 0 || !cfg.resolution.is_multiple_of(1 << (levels - 1)) {
            return Err(Error::InvalidArgument("denoiser needs levels that evenly halve the resolution".into()));
        }
        if cfg.channels.iter().any(|c| c % cfg.heads != 0) {
            return Err(Error::InvalidArgument("channels must be divisible by the head count".into()));
        }
        let side = |i: usize| cfg.resolution >> i;
        let attn_at = |i: usize, name: &str, ch: usize| {
            cfg.attention_sides.contains(&side(i)).then(|| CondAttention::new(name, ch, cfg))
        };
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = cfg.channels[0];
        for (i, &ch) in cfg.channels.iter().enumerate() {
            let name = format!("{PREFIX}down{i}");
            down.push(Level { block: CondResBlock::new(&name, prev, ch, cfg), attn: attn_at(i, &format!("{name}/attn"), ch) });
            if i + 1 < levels {
                downsample.push(Conv2d::new(format!("{PREFIX}downsample{i}"), ch, ch, 3, 2));
            }
            prev = ch;
        }
        let c_last = prev;
        let mid_block = CondResBlock::new(&format!("{PREFIX}mid/block"), c_last, c_last, cfg);
        let mid_attn = CondAttention::new(&format!("{PREFIX}mid/attn"), c_last, cfg);
        let mut up = Vec::new();
        let mut cur = c_last;
        for i in (0..levels).rev() {
            let ch = cfg.channels[i];
            let name = format!("{PREFIX}up{i}");
            up.push(Level { block: CondResBlock::new(&name, cur + ch, ch, cfg), attn: attn_at(i, &format!("{name}/attn"), ch) });
            cur = ch;
        }
        let c0 = cfg.channels[0];
        Ok(Self {
            config: cfg.clone(),
            in_conv: Conv2d::new(format!("{PREFIX}in_conv"), cfg.in_channels, c0, 3, 1),
            down,
            downsample,
            mid_block,
            mid_attn,
            up,
            out_norm: AdaGn::new(&format!("{PREFIX}out_norm"), c0, cfg),
            out_conv: Conv2d::new(format!("{PREFIX}out_conv"), c0, cfg.in_channels, 3, 1),
        })
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.in_conv.init(p, rng)?;
        for (i, l) in self.down.iter().enumerate() {
            l.block.init(p, rng)?;
            if let Some(a) = &l.attn {
                a.init(p, rng)?;
            }
            if let Some(d) = self.downsample.get(i) {
                d.init(p, rng)?;
            }
        }
        self.mid_block.init(p, rng)?;
        self.mid_attn.init(p, rng)?;
        for l in &self.up {
            l.block.init(p, rng)?;
            if let Some(a) = &l.attn {
                a.init(p, rng)?;
            }
        }
        self.out_norm.init(p, rng)?;
        self.out_conv.init(p, rng)
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        let mut p = ParamStore::new();
        self.init(&mut p, rng)?;
        Ok(p)
    }

    /// Number of AdaGN sites; equals the number of normalization layers.
    pub fn ada_gn_sites(&self) -> usize {
        let level = |l: &Level| 2 + usize::from(l.attn.is_some());
        self.down.iter().map(level).sum::<usize>() + 2 + 1 + self.up.iter().map(level).sum::<usize>() + 1
    }

    /// `x_t: [N, C, H, W]`, per-sample timesteps, `z_sem: [N, d_sem]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x_t: Var,
        timesteps: &[usize],
        z_sem: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let xs = g.shape(x_t).to_vec();
        if xs.len() != 4 || xs[1..] != [cfg.in_channels, cfg.resolution, cfg.resolution] {
            return Err(shape_err!(
                "denoiser expects [N, {}, {}, {}], got {:?}",
                cfg.in_channels,
                cfg.resolution,
                cfg.resolution,
                xs
            ));
        }
        if g.shape(z_sem) != [xs[0], cfg.d_sem] || timesteps.len() != xs[0] {
            return Err(shape_err!(
                "denoiser batch {}: z_sem {:?}, {} timesteps",
                xs[0],
                g.shape(z_sem),
                timesteps.len()
            ));
        }
        let temb = g.constant(time_embedding_batch(timesteps, cfg.time_dim)?);
        let cond = Conditioning { time_emb: temb, z_sem };
        let mut h = self.in_conv.forward(g, p, x_t)?;
        let mut skips = Vec::new();
        for (i, l) in self.down.iter().enumerate() {
            h = l.block.forward(g, p, h, cond)?;
            if let Some(a) = &l.attn {
                h = a.forward(g, p, h, cond)?;
            }
            skips.push(h);
            if let Some(d) = self.downsample.get(i) {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid_block.forward(g, p, h, cond)?;
        h = self.mid_attn.forward(g, p, h, cond)?;
        for (i, l) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = g.concat_channels(h, skip)?;
            h = l.block.forward(g, p, h, cond)?;
            if let Some(a) = &l.attn {
                h = a.forward(g, p, h, cond)?;
            }
            // nearest-neighbour upsampling; the next level's block mixes it
            if i + 1 < self.up.len() {
                h = g.upsample2x(h)?;
            }
        }
        let h = self.out_norm.forward(g, p, h, cond)?;
        let h = g.silu(h);
        self.out_conv.forward(g, p, h)
    }

    /// Inference-only noise prediction.
    pub fn predict_eps<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        x_t: &Tensor<T>,
        timesteps: &[usize],
        z_sem: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(x_t.clone());
        let z = g.constant(z_sem.clone());
        let e = self.forward(&mut g, p, x, timesteps, z)?;
        Ok(g.value(e).clone())
    }
}
