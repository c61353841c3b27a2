//! ShapesToy: a procedurally rendered grid of 6 identities x 8 backgrounds
//! x 10 poses, the group sampler over it, and the store of encoded latents.

use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::SemanticEncoder;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Scalar, Tensor};
use crate::rng::Rng;

pub const IDENTITIES: usize = 6;
pub const BACKGROUNDS: usize = 8;
pub const POSES: usize = 10;
pub const CARDINALITIES: [usize; 3] = [IDENTITIES, BACKGROUNDS, POSES];
pub const DATASET_LEN: usize = IDENTITIES * BACKGROUNDS * POSES;
pub const ATTRIBUTE_NAMES: [&str; 3] = ["identity", "background", "pose"];

/// Degrees of rotation per pose step.
pub const POSE_STEP_DEG: f64 = 36.0;

const SUPERSAMPLE: usize = 4;

/// Polygon outlines in unit coordinates. None has a rotational symmetry
/// that is a multiple of the pose step.
const SHAPES: [&[(f64, f64)]; IDENTITIES] = [
    &[(-0.6, -0.7), (-0.15, -0.7), (-0.15, 0.3), (0.6, 0.3), (0.6, 0.7), (-0.6, 0.7)],
    &[(-0.7, -0.2), (0.1, -0.2), (0.1, -0.6), (0.75, 0.0), (0.1, 0.6), (0.1, 0.2), (-0.7, 0.2)],
    &[(-0.5, -0.75), (0.6, -0.75), (0.6, 0.0), (-0.1, 0.0), (-0.1, 0.75), (-0.5, 0.75)],
    &[(-0.7, -0.6), (0.75, -0.3), (-0.3, 0.75)],
    &[(-0.7, -0.6), (0.7, -0.6), (0.7, -0.2), (0.15, -0.2), (0.15, 0.7), (-0.25, 0.7), (-0.25, -0.2), (-0.7, -0.2)],
    &[(-0.6, -0.5), (0.3, -0.7), (0.7, 0.4), (-0.4, 0.6)],
];

const TINTS: [[f64; 3]; IDENTITIES] = [
    [0.95, 0.85, 0.25],
    [0.95, 0.45, 0.35],
    [0.45, 0.90, 0.95],
    [0.95, 0.60, 0.95],
    [0.60, 0.95, 0.50],
    [0.98, 0.98, 0.98],
];

const PALETTE: [[f64; 3]; BACKGROUNDS] = [
    [0.05, 0.05, 0.05],
    [0.45, 0.08, 0.08],
    [0.08, 0.35, 0.08],
    [0.08, 0.10, 0.45],
    [0.40, 0.35, 0.05],
    [0.35, 0.08, 0.40],
    [0.05, 0.35, 0.40],
    [0.35, 0.35, 0.35],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeTuple {
    pub identity: usize,
    pub background: usize,
    pub pose: usize,
}

impl AttributeTuple {
    pub fn new(identity: usize, background: usize, pose: usize) -> Result<Self> {
        Self::from_values([identity, background, pose])
    }

    pub fn from_values(v: [usize; 3]) -> Result<Self> {
        for (r, (&x, &card)) in v.iter().zip(&CARDINALITIES).enumerate() {
            if x >= card {
                return Err(Error::InvalidArgument(format!("{} index {x} out of 0..{card}", ATTRIBUTE_NAMES[r])));
            }
        }
        Ok(Self { identity: v[0], background: v[1], pose: v[2] })
    }

    pub fn values(&self) -> [usize; 3] {
        [self.identity, self.background, self.pose]
    }

    /// Position in identity-major order.
    pub fn index(&self) -> usize {
        (self.identity * BACKGROUNDS + self.background) * POSES + self.pose
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= DATASET_LEN {
            return Err(Error::InvalidArgument(format!("dataset index {i} out of 0..{DATASET_LEN}")));
        }
        Self::new(i / (BACKGROUNDS * POSES), (i / POSES) % BACKGROUNDS, i % POSES)
    }

    pub fn shared_count(&self, other: &Self) -> usize {
        self.values().iter().zip(other.values()).filter(|(a, b)| **a == *b).count()
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Fraction of each pixel covered by the rotated shape, `[H * W]`.
pub fn coverage(attrs: &AttributeTuple, resolution: usize) -> Vec<f64> {
    let poly = SHAPES[attrs.identity];
    let theta = (attrs.pose as f64 * POSE_STEP_DEG).to_radians();
    let (s, c) = theta.sin_cos();
    let half = resolution as f64 / 2.0;
    let scale = resolution as f64 * 0.41;
    let mut out = vec![0.0; resolution * resolution];
    for py in 0..resolution {
        for px in 0..resolution {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - half) / scale;
                    let y = (py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - half) / scale;
                    // rotate the sample point back into the shape's frame
                    let (u, v) = (c * x + s * y, -s * x + c * y);
                    hits += usize::from(inside(poly, u, v));
                }
            }
            out[py * resolution + px] = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
        }
    }
    out
}

/// Renders one tuple as `[3, H, W]` with values in `[-1, 1]`.
pub fn render<T: Scalar>(attrs: &AttributeTuple, resolution: usize) -> Tensor<T> {
    let cov = coverage(attrs, resolution);
    let fg = TINTS[attrs.identity];
    let bg = PALETTE[attrs.background];
    let hw = resolution * resolution;
    Tensor::from_fn(&[3, resolution, resolution], |i| {
        let (ch, p) = (i / hw, i % hw);
        let a = cov[p];
        let v = a * fg[ch] + (1.0 - a) * bg[ch];
        T::lit(2.0 * v - 1.0)
    })
}

/// Every tuple with its image, identity-major.
pub fn enumerate_dataset<T: Scalar>(resolution: usize) -> Vec<(AttributeTuple, Tensor<T>)> {
    (0..DATASET_LEN)
        .map(|i| {
            let t = AttributeTuple::from_index(i).expect("in range");
            (t, render(&t, resolution))
        })
        .collect()
}

/// Stacks the images of `tuples` into `[N, 3, H, W]`.
pub fn batch_images<T: Scalar>(images: &[Tensor<T>], tuples: &[AttributeTuple]) -> Result<Tensor<T>> {
    let picked: Vec<Tensor<T>> = tuples.iter().map(|t| images[t.index()].clone()).collect();
    Tensor::stack(&picked)
}

/// An anchor and, for each attribute `r`, a companion that agrees with the
/// anchor on `r` and differs on every other attribute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSample {
    pub anchor: AttributeTuple,
    pub companions: [AttributeTuple; 3],
}

fn other_value(rng: &mut Rng, card: usize, avoid: usize) -> usize {
    let v = rng.below(card - 1);
    if v >= avoid {
        v + 1
    } else {
        v
    }
}

pub fn sample_group(anchor: AttributeTuple, rng: &mut Rng) -> GroupSample {
    let a = anchor.values();
    let companions = std::array::from_fn(|r| {
        let mut v = [0; 3];
        for k in 0..3 {
            v[k] = if k == r { a[k] } else { other_value(rng, CARDINALITIES[k], a[k]) };
        }
        AttributeTuple::from_values(v).expect("in range")
    });
    GroupSample { anchor, companions }
}

impl GroupSample {
    /// Every companion shares exactly its own attribute with the anchor.
    pub fn is_well_formed(&self) -> bool {
        self.companions.iter().enumerate().all(|(r, c)| {
            self.anchor.shared_count(c) == 1 && c.values()[r] == self.anchor.values()[r]
        })
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Train/test index split, 80:20 by hashed tuple index. Seeds whose test
/// or train side lacks some attribute value are skipped deterministically.
pub fn split(seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut s = seed;
    loop {
        let mut order: Vec<usize> = (0..DATASET_LEN).collect();
        order.sort_by_key(|&i| (splitmix64(s ^ splitmix64(i as u64)), i));
        let n_train = DATASET_LEN * 4 / 5;
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        let covers = |idx: &[usize]| {
            (0..3).all(|r| {
                let mut seen = vec![false; CARDINALITIES[r]];
                for &i in idx {
                    seen[AttributeTuple::from_index(i).expect("in range").values()[r]] = true;
                }
                seen.iter().all(|&b| b)
            })
        };
        if covers(&train) && covers(&test) {
            return (train, test);
        }
        s = s.wrapping_add(1);
    }
}

const STORE_MAGIC: &[u8; 4] = b"DGZL";
const STORE_VERSION: u32 = 1;

/// Encoded semantic codes of the whole grid, indexed like the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStore {
    pub dim: usize,
    pub records: Vec<(AttributeTuple, Vec<f32>)>,
}

impl LatentStore {
    /// Encodes every image in chunks; record order follows `images`.
    pub fn build(
        encoder: &SemanticEncoder,
        params: &ParamStore<f32>,
        dataset: &[(AttributeTuple, Tensor<f32>)],
        chunk: usize,
    ) -> Result<Self> {
        let mut records = Vec::with_capacity(dataset.len());
        for part in dataset.chunks(chunk.max(1)) {
            let imgs: Vec<Tensor<f32>> = part.iter().map(|(_, x)| x.clone()).collect();
            let z = encoder.encode(params, &Tensor::stack(&imgs)?)?;
            if !z.all_finite() {
                return Err(Error::NonFinite("semantic code".into()));
            }
            let d = z.dim(1);
            for (k, (t, _)) in part.iter().enumerate() {
                records.push((*t, z.data()[k * d..(k + 1) * d].to_vec()));
            }
        }
        Ok(Self { dim: encoder.config.d_sem, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, t: &AttributeTuple) -> Option<&[f32]> {
        self.records.iter().find(|(u, _)| u == t).map(|(_, z)| z.as_slice())
    }

    /// Codes of `tuples` as a `[N, dim]` tensor.
    pub fn batch<T: Scalar>(&self, tuples: &[AttributeTuple]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(tuples.len() * self.dim);
        for t in tuples {
            let z = self.get(t).ok_or_else(|| Error::InvalidArgument(format!("tuple {t:?} not in store")))?;
            data.extend(z.iter().map(|&v| T::lit(v as f64)));
        }
        Tensor::new(&[tuples.len(), self.dim], data)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(STORE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for (t, z) in &self.records {
            for v in t.values() {
                w.write_all(&(v as u16).to_le_bytes())?;
            }
            for x in z {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != STORE_MAGIC {
            return Err(Error::Format("not a latent store".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != STORE_VERSION {
            return Err(Error::Format("unsupported latent store version".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dim = u64::from_le_bytes(b8) as usize;
        if count > DATASET_LEN * 16 || dim > 1 << 20 {
            return Err(Error::Format("implausible latent store header".into()));
        }
        let mut records = Vec::with_capacity(count);
        let mut b2 = [0u8; 2];
        for _ in 0..count {
            let mut v = [0usize; 3];
            for x in &mut v {
                r.read_exact(&mut b2)?;
                *x = u16::from_le_bytes(b2) as usize;
            }
            let t = AttributeTuple::from_values(v).map_err(|e| Error::Format(e.to_string()))?;
            let mut z = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4)?;
                z.push(f32::from_le_bytes(b4));
            }
            records.push((t, z));
        }
        Ok(Self { dim, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, buf)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::MissingPrerequisite(format!("latent store {}: {e}", path.display())))?;
        Self::read_from(&mut bytes.as_slice())
    }
}
