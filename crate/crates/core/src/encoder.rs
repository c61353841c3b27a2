//! Semantic encoder: image to the flat semantic code `z_sem`.
//!
//! Alternating residual stages where the block closest to the end of a
//! stage is a self-attention block (for stages small enough to afford it),
//! strided-convolution downsampling between stages, global average pooling
//! and a final linear map.

use serde::{Deserialize, Serialize};

use crate::blocks::{AttentionBlock, ResBlock, GROUPS};
use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{group_count, Conv2d, Linear, Norm};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

pub const PREFIX: &str = "encoder/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub in_channels: usize,
    /// Stride of the stem convolution; 2 runs every stage at half resolution.
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub attention_at_stage_end: bool,
    /// Stages whose spatial side exceeds this keep a conv block at the end.
    pub attention_max_side: usize,
    pub heads: usize,
    pub d_sem: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            stem_stride: 2,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 2,
            attention_at_stage_end: true,
            attention_max_side: 16,
            heads: 2,
            d_sem: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub enum EncoderBlock {
    Conv(ResBlock),
    Attention(AttentionBlock),
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<EncoderBlock>,
    pub down: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub config: EncoderConfig,
    pub stem: Conv2d,
    pub stages: Vec<Stage>,
    pub out_norm: Norm,
    pub head: Linear,
}

impl SemanticEncoder {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        if config.stage_channels.is_empty() || config.blocks_per_stage == 0 || config.d_sem == 0 {
            return Err(Error::InvalidArgument("encoder needs at least one stage, block and output".into()));
        }
        if !matches!(config.stem_stride, 1 | 2) {
            return Err(Error::InvalidArgument(format!("stem stride {} must be 1 or 2", config.stem_stride)));
        }
        let total = (config.stage_channels.len() - 1) as u32 + config.stem_stride.trailing_zeros();
        if !config.resolution.is_multiple_of(1 << total) {
            return Err(Error::InvalidArgument(format!(
                "resolution {} not divisible by 2^{total}",
                config.resolution
            )));
        }
        let c0 = config.stage_channels[0];
        let stem = Conv2d::new(format!("{PREFIX}stem"), config.in_channels, c0, 3, config.stem_stride);
        let mut stages = Vec::new();
        let mut side = config.resolution / config.stem_stride;
        for (s, &ch) in config.stage_channels.iter().enumerate() {
            let attn_here = config.attention_at_stage_end && side <= config.attention_max_side;
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let name = format!("{PREFIX}stage{s}/block{b}");
                    if attn_here && b + 1 == config.blocks_per_stage {
                        if ch % config.heads != 0 {
                            return Err(shape_err!("{ch} channels not divisible into {} heads", config.heads));
                        }
                        Ok(EncoderBlock::Attention(AttentionBlock::new(&name, ch, config.heads)))
                    } else {
                        Ok(EncoderBlock::Conv(ResBlock::new(&name, ch)))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let down = config
                .stage_channels
                .get(s + 1)
                .map(|&next| Conv2d::new(format!("{PREFIX}stage{s}/down"), ch, next, 3, 2));
            if down.is_some() {
                side /= 2;
            }
            stages.push(Stage { blocks, down });
        }
        let c_last = *config.stage_channels.last().expect("non-empty");
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
            out_norm: Norm::group(format!("{PREFIX}out_norm"), c_last, group_count(c_last, GROUPS)),
            head: Linear::new(format!("{PREFIX}head"), c_last, config.d_sem),
        })
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        self.stem.init(p, rng)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                match block {
                    EncoderBlock::Conv(b) => b.init(p, rng)?,
                    EncoderBlock::Attention(b) => b.init(p, rng)?,
                }
            }
            if let Some(d) = &stage.down {
                d.init(p, rng)?;
            }
        }
        self.out_norm.init(p)?;
        self.head.init(p, rng)
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        let mut p = ParamStore::new();
        self.init(&mut p, rng)?;
        Ok(p)
    }

    pub fn attention_blocks(&self) -> usize {
        self.stages
            .iter()
            .flat_map(|s| &s.blocks)
            .filter(|b| matches!(b, EncoderBlock::Attention(_)))
            .count()
    }

    /// `[N, C, H, W]` image batch to `[N, d_sem]` codes.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = &self.config;
        let want = [c.in_channels, c.resolution, c.resolution];
        if g.shape(x).len() != 4 || g.shape(x)[1..] != want {
            return Err(shape_err!("encoder expects [N, {}, {}, {}], got {:?}", want[0], want[1], want[2], g.shape(x)));
        }
        let mut h = self.stem.forward(g, p, x)?;
        for stage in &self.stages {
            for block in &stage.blocks {
                h = match block {
                    EncoderBlock::Conv(b) => b.forward(g, p, h)?,
                    EncoderBlock::Attention(b) => b.forward(g, p, h)?,
                };
            }
            if let Some(d) = &stage.down {
                h = d.forward(g, p, h)?;
            }
        }
        let h = self.out_norm.forward(g, p, h)?;
        let h = g.silu(h);
        let h = g.mean_spatial(h)?;
        self.head.forward(g, p, h)
    }

    /// Inference-only encoding of an image batch.
    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(images.clone());
        let z = self.forward(&mut g, p, x)?;
        Ok(g.value(z).clone())
    }
}
