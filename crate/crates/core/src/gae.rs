//! Group-supervised autoencoder on semantic codes.
//!
//! `z_sem -> z_dis` is split into contiguous per-attribute slices. Training
//! swaps and reassembles slices between codes whose images share exactly one
//! attribute and asks the decoder to land back on the right `z_sem`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::layers::{group_count, Linear, Norm};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::Rng;

pub const PREFIX: &str = "gae/";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub cardinality: usize,
    pub width: usize,
}

/// Ordered partition of `z_dis` into one slice per attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeLayout {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeLayout {
    type Error = Error;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self> {
        Self::new(attributes)
    }
}

impl From<AttributeLayout> for Vec<Attribute> {
    fn from(l: AttributeLayout) -> Self {
        l.attributes
    }
}

impl Default for AttributeLayout {
    /// Identity, background, pose at a 60/20/20 split of 40 dimensions.
    fn default() -> Self {
        let a = |name: &str, cardinality, width| Attribute { name: name.into(), cardinality, width };
        Self::new(vec![a("identity", 6, 24), a("background", 8, 8), a("pose", 10, 8)]).expect("valid default")
    }
}

impl AttributeLayout {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(Error::InvalidArgument("layout needs at least one attribute".into()));
        }
        for (i, a) in attributes.iter().enumerate() {
            if a.width == 0 || a.cardinality == 0 {
                return Err(Error::InvalidArgument(format!("attribute `{}` has zero width or cardinality", a.name)));
            }
            if attributes[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::InvalidArgument(format!("attribute `{}` listed twice", a.name)));
            }
        }
        Ok(Self { attributes })
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn width(&self) -> usize {
        self.attributes.iter().map(|a| a.width).sum()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::UnknownAttribute(name.to_string()))
    }

    /// Column range of slice `r`.
    pub fn range(&self, r: usize) -> std::ops::Range<usize> {
        let start: usize = self.attributes[..r].iter().map(|a| a.width).sum();
        start..start + self.attributes[r].width
    }

    pub fn range_of(&self, name: &str) -> Result<std::ops::Range<usize>> {
        Ok(self.range(self.index_of(name)?))
    }

    fn check_len<T>(&self, z: &[T]) -> Result<()> {
        if z.len() != self.width() {
            return Err(shape_err!("code of length {} for a layout of width {}", z.len(), self.width()));
        }
        Ok(())
    }

    pub fn slice<'a, T>(&self, z: &'a [T], name: &str) -> Result<&'a [T]> {
        self.check_len(z)?;
        Ok(&z[self.range_of(name)?])
    }

    /// `a` with the slice of `name` taken from `b`.
    pub fn swap<T: Copy>(&self, a: &[T], b: &[T], name: &str) -> Result<Vec<T>> {
        self.check_len(a)?;
        self.check_len(b)?;
        let r = self.range_of(name)?;
        let mut out = a.to_vec();
        out[r.clone()].copy_from_slice(&b[r]);
        Ok(out)
    }

    /// Builds a code whose every slice comes from the named donor.
    pub fn reassemble<T: Copy>(&self, donors: &BTreeMap<String, &[T]>) -> Result<Vec<T>> {
        if let Some(extra) = donors.keys().find(|k| self.index_of(k).is_err()) {
            return Err(Error::UnknownAttribute(extra.clone()));
        }
        let mut out = Vec::with_capacity(self.width());
        for a in &self.attributes {
            let d = donors.get(&a.name).ok_or_else(|| Error::MissingPrerequisite(format!("no donor for `{}`", a.name)))?;
            self.check_len(d)?;
            out.extend_from_slice(&d[self.range_of(&a.name)?]);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaeConfig {
    pub d_sem: usize,
    pub hidden: usize,
    pub layout: AttributeLayout,
    /// Bottleneck blocks squeeze the hidden width by this factor.
    pub bottleneck_factor: usize,
    pub decoder_groups: usize,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            d_sem: 64,
            hidden: 128,
            layout: AttributeLayout::default(),
            bottleneck_factor: 4,
            decoder_groups: 8,
        }
    }
}

impl GaeConfig {
    pub fn d_dis(&self) -> usize {
        self.layout.width()
    }
}

/// `Linear -> Norm -> SiLU -> Linear` plus a skip (a projection when the
/// width changes).
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub norm: Norm,
    pub fc2: Linear,
    pub skip: Option<Linear>,
}

/// `Linear(down) -> Norm -> SiLU -> Linear(up)` plus an identity skip.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub down: Linear,
    pub norm: Norm,
    pub up: Linear,
}

#[derive(Clone, Debug)]
pub enum GaeBlock {
    Mlp(MlpBlock),
    Bottleneck(Bottleneck),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Encoder,
    Decoder,
}

impl Side {
    fn norm(self, name: String, width: usize, groups: usize) -> Norm {
        match self {
            Side::Encoder => Norm::layer(name, width),
            Side::Decoder => Norm::group(name, width, group_count(width, groups)),
        }
    }
}

impl GaeBlock {
    fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        match self {
            GaeBlock::Mlp(b) => {
                b.fc1.init(p, rng)?;
                b.norm.init(p)?;
                b.fc2.init(p, rng)?;
                if let Some(s) = &b.skip {
                    s.init(p, rng)?;
                }
            }
            GaeBlock::Bottleneck(b) => {
                b.down.init(p, rng)?;
                b.norm.init(p)?;
                b.up.init(p, rng)?;
            }
        }
        Ok(())
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let (first, norm, second, skip) = match self {
            GaeBlock::Mlp(b) => (&b.fc1, &b.norm, &b.fc2, b.skip.as_ref()),
            GaeBlock::Bottleneck(b) => (&b.down, &b.norm, &b.up, None),
        };
        let h = first.forward(g, p, x)?;
        let h = norm.forward(g, p, h)?;
        let h = g.silu(h);
        let h = second.forward(g, p, h)?;
        let s = match skip {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Four MLP blocks and two bottlenecks: MLP, BN, MLP, MLP, BN, MLP.
fn block_stack(prefix: &str, side: Side, din: usize, dout: usize, cfg: &GaeConfig) -> Vec<GaeBlock> {
    let h = cfg.hidden;
    let groups = cfg.decoder_groups;
    let mlp = |name: &str, i: usize, o: usize| {
        let n = format!("{prefix}/{name}");
        GaeBlock::Mlp(MlpBlock {
            fc1: Linear::new(format!("{n}/fc1"), i, o),
            norm: side.norm(format!("{n}/norm"), o, groups),
            fc2: Linear::new(format!("{n}/fc2"), o, o),
            skip: (i != o).then(|| Linear::new(format!("{n}/skip"), i, o)),
        })
    };
    let bottleneck = |name: &str| {
        let n = format!("{prefix}/{name}");
        let narrow = (h / cfg.bottleneck_factor).max(1);
        GaeBlock::Bottleneck(Bottleneck {
            down: Linear::new(format!("{n}/down"), h, narrow),
            norm: side.norm(format!("{n}/norm"), narrow, groups),
            up: Linear::new(format!("{n}/up"), narrow, h),
        })
    };
    vec![
        mlp("mlp1", din, h),
        bottleneck("bn1"),
        mlp("mlp2", h, h),
        mlp("mlp3", h, h),
        bottleneck("bn2"),
        mlp("mlp4", h, dout),
    ]
}

/// Encoder/decoder pair over latent codes.
pub trait LatentCodec<T: Scalar> {
    fn layout(&self) -> &AttributeLayout;
    fn encode(&self, g: &mut Graph<T>, z_sem: Var) -> Result<Var>;
    fn decode(&self, g: &mut Graph<T>, z_dis: Var) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct Gae {
    pub config: GaeConfig,
    pub encoder: Vec<GaeBlock>,
    pub decoder: Vec<GaeBlock>,
}

impl Gae {
    pub fn new(cfg: &GaeConfig) -> Result<Self> {
        if cfg.d_sem == 0 || cfg.hidden == 0 || cfg.bottleneck_factor == 0 {
            return Err(Error::InvalidArgument("GAE widths must be positive".into()));
        }
        if cfg.d_sem < cfg.layout.len() {
            return Err(Error::InvalidArgument(format!(
                "d_sem {} is smaller than the {} attribute partitions",
                cfg.d_sem,
                cfg.layout.len()
            )));
        }
        Ok(Self {
            config: cfg.clone(),
            encoder: block_stack(&format!("{PREFIX}enc"), Side::Encoder, cfg.d_sem, cfg.d_dis(), cfg),
            decoder: block_stack(&format!("{PREFIX}dec"), Side::Decoder, cfg.d_dis(), cfg.d_sem, cfg),
        })
    }

    pub fn init<T: Scalar>(&self, p: &mut ParamStore<T>, rng: &mut Rng) -> Result<()> {
        for b in self.encoder.iter().chain(&self.decoder) {
            b.init(p, rng)?;
        }
        Ok(())
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        let mut p = ParamStore::new();
        self.init(&mut p, rng)?;
        Ok(p)
    }

    /// Binds parameters for use as a [`LatentCodec`].
    pub fn bind<'a, T>(&'a self, params: &'a ParamStore<T>) -> BoundGae<'a, T> {
        BoundGae { gae: self, params }
    }

    fn run<T: Scalar>(blocks: &[GaeBlock], g: &mut Graph<T>, p: &ParamStore<T>, x: Var, din: usize) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != din {
            return Err(shape_err!("GAE expects [N, {din}], got {:?}", s));
        }
        blocks.iter().try_fold(x, |h, b| b.forward(g, p, h))
    }

    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, z_sem: Var) -> Result<Var> {
        Self::run(&self.encoder, g, p, z_sem, self.config.d_sem)
    }

    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, z_dis: Var) -> Result<Var> {
        Self::run(&self.decoder, g, p, z_dis, self.config.d_dis())
    }

    /// Inference-only `z_sem -> z_dis` for a `[N, d_sem]` batch.
    pub fn encode<T: Scalar>(&self, p: &ParamStore<T>, z_sem: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let z = g.constant(z_sem.clone());
        let out = self.encode_graph(&mut g, p, z)?;
        Ok(g.value(out).clone())
    }

    /// Inference-only `z_dis -> z_sem` for a `[N, d_dis]` batch.
    pub fn decode<T: Scalar>(&self, p: &ParamStore<T>, z_dis: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let z = g.constant(z_dis.clone());
        let out = self.decode_graph(&mut g, p, z)?;
        Ok(g.value(out).clone())
    }
}

pub struct BoundGae<'a, T> {
    pub gae: &'a Gae,
    pub params: &'a ParamStore<T>,
}

impl<T: Scalar> LatentCodec<T> for BoundGae<'_, T> {
    fn layout(&self) -> &AttributeLayout {
        &self.gae.config.layout
    }

    fn encode(&self, g: &mut Graph<T>, z_sem: Var) -> Result<Var> {
        self.gae.encode_graph(g, self.params, z_sem)
    }

    fn decode(&self, g: &mut Graph<T>, z_dis: Var) -> Result<Var> {
        self.gae.decode_graph(g, self.params, z_dis)
    }
}

/// Encoder and decoder both the identity; needs `d_sem == d_dis`.
pub struct IdentityCodec(pub AttributeLayout);

impl<T: Scalar> LatentCodec<T> for IdentityCodec {
    fn layout(&self) -> &AttributeLayout {
        &self.0
    }

    fn encode(&self, _g: &mut Graph<T>, z_sem: Var) -> Result<Var> {
        Ok(z_sem)
    }

    fn decode(&self, _g: &mut Graph<T>, z_dis: Var) -> Result<Var> {
        Ok(z_dis)
    }
}

/// Semantic codes of a batch of groups: `anchors[i]` and `companions[r][i]`
/// share exactly attribute `r`. All are `[G, d_sem]`.
#[derive(Clone, Debug)]
pub struct LatentGroups {
    pub anchors: Var,
    pub companions: Vec<Var>,
}

/// Mean L1 between `z` and its reconstruction through the codec.
pub fn loss_r<T: Scalar>(g: &mut Graph<T>, codec: &impl LatentCodec<T>, z_sem: Var) -> Result<Var> {
    let e = codec.encode(g, z_sem)?;
    let d = codec.decode(g, e)?;
    g.l1_mean(d, z_sem)
}

/// Swap supervision: exchanging the shared slice between an anchor and
/// each companion (both directions) must leave both decodable to
/// themselves, and reassembling every slice from the companion that shares
/// it must decode to the anchor. Mean of the `2m + 1` L1 terms.
pub fn loss_ss<T: Scalar>(g: &mut Graph<T>, codec: &impl LatentCodec<T>, groups: &LatentGroups) -> Result<Var> {
    let layout = codec.layout().clone();
    if groups.companions.len() != layout.len() {
        return Err(Error::InvalidArgument(format!(
            "group has {} companions for {} attributes",
            groups.companions.len(),
            layout.len()
        )));
    }
    let ea = codec.encode(g, groups.anchors)?;
    let mut terms = Vec::new();
    let mut assembled = ea;
    for (r, &comp) in groups.companions.iter().enumerate() {
        let range = layout.range(r);
        let ec = codec.encode(g, comp)?;
        let a_swapped = g.splice_cols(ea, ec, range.start, range.end)?;
        let c_swapped = g.splice_cols(ec, ea, range.start, range.end)?;
        let da = codec.decode(g, a_swapped)?;
        terms.push(g.l1_mean(da, groups.anchors)?);
        let dc = codec.decode(g, c_swapped)?;
        terms.push(g.l1_mean(dc, comp)?);
        assembled = g.splice_cols(assembled, ec, range.start, range.end)?;
    }
    let d = codec.decode(g, assembled)?;
    terms.push(g.l1_mean(d, groups.anchors)?);
    let n = terms.len();
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, T::one() / T::lit(n as f64)))
}

/// Donor rows for unsupervised reassembly: one assembly per batch row, each
/// drawing `m` distinct donors uniformly.
pub fn draw_donors(rng: &mut Rng, batch: usize, attributes: usize) -> Result<Vec<Vec<usize>>> {
    if batch < attributes {
        return Err(Error::InvalidArgument(format!(
            "batch of {batch} cannot supply {attributes} distinct donors"
        )));
    }
    Ok((0..batch).map(|_| rng.choose_distinct(batch, attributes)).collect())
}

/// Unsupervised reassembly cycle: random slices are combined into `z_u`,
/// decoded, re-encoded, and must come back as `z_u`.
pub fn loss_ur<T: Scalar>(
    g: &mut Graph<T>,
    codec: &impl LatentCodec<T>,
    z_sem: Var,
    donors: &[Vec<usize>],
) -> Result<Var> {
    let layout = codec.layout().clone();
    let n = g.shape(z_sem).first().copied().unwrap_or(0);
    if donors.is_empty() || donors.iter().any(|d| d.len() != layout.len() || d.iter().any(|&i| i >= n)) {
        return Err(Error::InvalidArgument("donor table does not match the batch and layout".into()));
    }
    let e = codec.encode(g, z_sem)?;
    let mut z_u: Option<Var> = None;
    for r in 0..layout.len() {
        let rows: Vec<usize> = donors.iter().map(|d| d[r]).collect();
        let picked = g.gather_rows(e, &rows)?;
        let range = layout.range(r);
        z_u = Some(match z_u {
            None => picked,
            Some(acc) => g.splice_cols(acc, picked, range.start, range.end)?,
        });
    }
    let z_u = z_u.expect("layout is non-empty");
    let d = codec.decode(g, z_u)?;
    let back = codec.encode(g, d)?;
    g.l1_mean(back, z_u)
}

/// Loss values of one evaluation, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DisTerms {
    pub l_r: f64,
    pub l_ss: f64,
    pub l_ur: f64,
    pub total: f64,
}

/// `L_r + lambda_ss * L_ss + lambda_ur * L_ur`. `L_r` and `L_ur` run over
/// `batch`; `L_ss` over `groups`.
#[allow(clippy::too_many_arguments)]
pub fn loss_dis<T: Scalar>(
    g: &mut Graph<T>,
    codec: &impl LatentCodec<T>,
    groups: &LatentGroups,
    batch: Var,
    donors: &[Vec<usize>],
    lambda_ss: f64,
    lambda_ur: f64,
) -> Result<(Var, DisTerms)> {
    let lr = loss_r(g, codec, batch)?;
    let lss = loss_ss(g, codec, groups)?;
    let lur = loss_ur(g, codec, batch, donors)?;
    let ss = g.scale(lss, T::lit(lambda_ss));
    let ur = g.scale(lur, T::lit(lambda_ur));
    let total = g.add_all(&[lr, ss, ur])?;
    let v = |x: Var| g.value(x).item().as_f64();
    let terms = DisTerms { l_r: v(lr), l_ss: v(lss), l_ur: v(lur), total: v(total) };
    Ok((total, terms))
}
