//! Cross-attention fusion of audio feature maps with per-frame visual
//! embeddings, plus the visual-embedding file format.
//!
//! Audio features serve as queries and the visual frames as keys and values:
//! for each (channel, time) position the F-dimensional audio column is
//! projected to a d-dimensional query, attended over all visual frames with
//! scaled dot-product attention (single head), projected back to F, and the
//! result is added residually after group normalization.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VISUAL_EMBED_DIM: usize = 768;
pub const VISUAL_FRAME_RATE: f64 = 25.0;

const EMBED_MAGIC: &[u8; 6] = b"AVEMB1";

/// Per-frame visual features, one row per video frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    data: Array2<f32>, // T_v x p
    pub frame_rate: f64,
}

impl VisualEmbedding {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::EmptyVisual);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteFile);
        }
        Ok(Self { data, frame_rate: VISUAL_FRAME_RATE })
    }

    pub fn t_v(&self) -> usize {
        self.data.nrows()
    }

    pub fn p(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Mean over the frame axis, in f64 for downstream numerics.
    pub fn pooled(&self) -> Array1<f64> {
        let mut out = Array1::<f64>::zeros(self.p());
        for row in self.data.rows() {
            for (o, &x) in out.iter_mut().zip(row.iter()) {
                *o += x as f64;
            }
        }
        out.mapv(|x| x / self.t_v() as f64)
    }

    /// Frame rows as f64, for attention keys/values.
    pub fn rows_f64(&self) -> Array2<f64> {
        self.data.mapv(|x| x as f64)
    }
}

/// Read an "AVEMB1" file: magic, u32 frame count, u32 embedding dim, then
/// row-major little-endian f32 values.
pub fn load_visual_embedding(path: impl AsRef<Path>) -> Result<VisualEmbedding> {
    let file = File::open(path.as_ref())?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::Truncated {
        expected: 6,
        actual: file_len,
    })?;
    if &magic != EMBED_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(EMBED_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let t_v = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b4)?;
    let p = u32::from_le_bytes(b4) as usize;

    let expected = 6 + 8 + 4 * (t_v as u64) * (p as u64);
    if file_len != expected {
        return Err(Error::Truncated { expected, actual: file_len });
    }
    let mut values = Vec::with_capacity(t_v * p);
    for _ in 0..t_v * p {
        r.read_exact(&mut b4)?;
        values.push(f32::from_le_bytes(b4));
    }
    let data = Array2::from_shape_vec((t_v, p), values)
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    VisualEmbedding::new(data)
}

pub fn write_visual_embedding(path: impl AsRef<Path>, v: &VisualEmbedding) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    out.write_all(EMBED_MAGIC)?;
    out.write_all(&(v.t_v() as u32).to_le_bytes())?;
    out.write_all(&(v.p() as u32).to_le_bytes())?;
    for x in v.data.iter() {
        out.write_all(&x.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Dimensions of one fusion site: audio map C x F x T, projection width d,
/// visual embedding dim p.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionDims {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
    pub proj: usize,
    pub embed: usize,
}

impl FusionDims {
    /// Default projection width: half the frequency dim, rounded up.
    pub fn with_default_proj(channels: usize, freq: usize, time: usize, embed: usize) -> Self {
        Self { channels, freq, time, proj: freq.div_ceil(2), embed }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.freq == 0 || self.time == 0 || self.proj == 0
            || self.embed == 0
        {
            return Err(Error::InvalidParam("fusion dims must all be >= 1".into()));
        }
        Ok(())
    }
}

const GROUP_NORM_EPS: f64 = 1e-6;

/// Single-head cross-attention block with residual group-normalized output.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    /// Position of the block in its host network (informational).
    pub layer: usize,
    dims: FusionDims,
    w_q: Array2<f64>, // d x F
    w_k: Array2<f64>, // d x p
    w_v: Array2<f64>, // d x p
    w_o: Array2<f64>, // F x d
    gn_gain: Array1<f64>, // C
    gn_bias: Array1<f64>, // C
    groups: usize,
}

/// Intermediate products of a fuse call, exposed for inspection.
pub struct FusionDetail {
    pub fused: Array3<f64>,
    /// Attention output after the F projection, before group norm and the
    /// residual add: C x F x T.
    pub pre_residual: Array3<f64>,
    /// Softmax weights, C x T x T_v.
    pub attention: Array3<f64>,
}

impl FusionBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        layer: usize,
        dims: FusionDims,
        w_q: Array2<f64>,
        w_k: Array2<f64>,
        w_v: Array2<f64>,
        w_o: Array2<f64>,
        gn_gain: Array1<f64>,
        gn_bias: Array1<f64>,
    ) -> Result<Self> {
        dims.validate()?;
        let check = |name: &str, a: &Array2<f64>, rows: usize, cols: usize| {
            if a.dim() != (rows, cols) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{name} of ({rows}, {cols})"),
                    got: format!("{:?}", a.dim()),
                });
            }
            Ok(())
        };
        check("w_q", &w_q, dims.proj, dims.freq)?;
        check("w_k", &w_k, dims.proj, dims.embed)?;
        check("w_v", &w_v, dims.proj, dims.embed)?;
        check("w_o", &w_o, dims.freq, dims.proj)?;
        if gn_gain.len() != dims.channels || gn_bias.len() != dims.channels {
            return Err(Error::ShapeMismatch {
                expected: format!("gain/bias of length {}", dims.channels),
                got: format!("{}/{}", gn_gain.len(), gn_bias.len()),
            });
        }
        Ok(Self {
            layer,
            dims,
            w_q,
            w_k,
            w_v,
            w_o,
            gn_gain,
            gn_bias,
            groups: dims.channels.min(8),
        })
    }

    /// Random parameters scaled by 1/sqrt(fan-in), unit gain, zero bias.
    pub fn random<R: Rng + ?Sized>(layer: usize, dims: FusionDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let mat = |rows: usize, cols: usize, rng: &mut R| {
            let s = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-s..s))
        };
        let w_q = mat(dims.proj, dims.freq, rng);
        let w_k = mat(dims.proj, dims.embed, rng);
        let w_v = mat(dims.proj, dims.embed, rng);
        let w_o = mat(dims.freq, dims.proj, rng);
        Self::from_parts(
            layer,
            dims,
            w_q,
            w_k,
            w_v,
            w_o,
            Array1::ones(dims.channels),
            Array1::zeros(dims.channels),
        )
    }

    pub fn dims(&self) -> FusionDims {
        self.dims
    }

    /// Zero the value projection (used by the residual-identity tests).
    pub fn zero_values(&mut self) {
        self.w_v.fill(0.0);
    }

    pub fn fuse(&self, e_a: &Array3<f64>, v: &VisualEmbedding) -> Result<Array3<f64>> {
        Ok(self.fuse_detailed(e_a, v)?.fused)
    }

    pub fn fuse_detailed(&self, e_a: &Array3<f64>, v: &VisualEmbedding) -> Result<FusionDetail> {
        let (c, f, t) = (self.dims.channels, self.dims.freq, self.dims.time);
        if e_a.dim() != (c, f, t) {
            return Err(Error::ShapeMismatch {
                expected: format!("({c}, {f}, {t})"),
                got: format!("{:?}", e_a.dim()),
            });
        }
        if v.p() != self.dims.embed {
            return Err(Error::ShapeMismatch {
                expected: format!("visual embedding dim {}", self.dims.embed),
                got: format!("{}", v.p()),
            });
        }
        let t_v = v.t_v();
        let frames = v.rows_f64(); // T_v x p

        // Keys and values are shared by every (channel, time) query.
        let keys = frames.dot(&self.w_k.t()); // T_v x d
        let values = frames.dot(&self.w_v.t()); // T_v x d
        let scale = 1.0 / (self.dims.proj as f64).sqrt();

        let mut pre = Array3::<f64>::zeros((c, f, t));
        let mut attention = Array3::<f64>::zeros((c, t, t_v));
        let mut query = Array1::<f64>::zeros(self.dims.proj);
        let mut attended = Array1::<f64>::zeros(self.dims.proj);
        for ci in 0..c {
            for ti in 0..t {
                let col = e_a.slice(ndarray::s![ci, .., ti]);
                query.assign(&self.w_q.dot(&col));

                let mut weights = keys.dot(&query);
                weights.mapv_inplace(|x| x * scale);
                let max = weights.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
                weights.mapv_inplace(|x| (x - max).exp());
                let sum: f64 = weights.sum();
                weights.mapv_inplace(|x| x / sum);

                attended.fill(0.0);
                for (j, &a) in weights.iter().enumerate() {
                    attended.scaled_add(a, &values.row(j));
                }
                let out = self.w_o.dot(&attended);
                pre.slice_mut(ndarray::s![ci, .., ti]).assign(&out);
                attention.slice_mut(ndarray::s![ci, ti, ..]).assign(&weights);
            }
        }

        let normed = self.group_norm(&pre);
        let fused = e_a + &normed;
        Ok(FusionDetail { fused, pre_residual: pre, attention })
    }

    /// Group normalization over contiguous channel groups (near-equal split
    /// when the group count does not divide C), per-channel affine.
    fn group_norm(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c, _f, _t) = x.dim();
        let mut out = x.clone();
        let bounds = group_bounds(c, self.groups);
        for (start, end) in bounds {
            let slab = x.slice(ndarray::s![start..end, .., ..]);
            let n = slab.len() as f64;
            let mean = slab.sum() / n;
            let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for ci in start..end {
                let gain = self.gn_gain[ci];
                let bias = self.gn_bias[ci];
                out.slice_mut(ndarray::s![ci, .., ..])
                    .mapv_inplace(|v| (v - mean) * inv * gain + bias);
            }
        }
        out
    }
}

/// Split `c` channels into `groups` contiguous near-equal ranges.
fn group_bounds(c: usize, groups: usize) -> Vec<(usize, usize)> {
    let groups = groups.min(c).max(1);
    let base = c / groups;
    let extra = c % groups;
    let mut bounds = Vec::with_capacity(groups);
    let mut start = 0;
    for g in 0..groups {
        let len = base + usize::from(g < extra);
        bounds.push((start, start + len));
        start += len;
    }
    bounds
}
