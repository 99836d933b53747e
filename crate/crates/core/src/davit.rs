//! Dual-axes encoder: y-encoder layers attend over the patches of one
//! column, the columns are concatenated into a sequence of width `D_x`, and
//! x-encoder layers attend over that sequence. Also the single-axis
//! ablation, the split into two independent half-encoders, and attention
//! multiply-accumulate accounting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    encoder_layer, init_encoder_layer, scaled_dot_product, sinusoid_table, LayerDims, LayerLabels, NormMode,
};
use crate::error::{Error, Result};
use crate::portmanteau::{sub_block, Half, HalfLabeling, PortConfig};
use crate::tensor::{c, Element, Graph, MacTag, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    #[default]
    Davit,
    /// y-encoder layers removed; vertical strips feed the x-encoder directly.
    Savit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub l_x: usize,
    pub l_y: usize,
    pub h_x: usize,
    pub h_y: usize,
    pub d_lb_x: usize,
    pub d_lb_y: usize,
    pub norm_mode: NormMode,
    pub variant: EncoderVariant,
}

impl EncoderConfig {
    pub fn reference() -> Self {
        Self {
            l_x: 8,
            l_y: 2,
            h_x: 16,
            h_y: 2,
            d_lb_x: 2048,
            d_lb_y: 512,
            norm_mode: NormMode::Standard,
            variant: EncoderVariant::Davit,
        }
    }

    pub fn toy() -> Self {
        Self {
            l_x: 2,
            l_y: 1,
            h_x: 16,
            h_y: 2,
            d_lb_x: 256,
            d_lb_y: 32,
            norm_mode: NormMode::Standard,
            variant: EncoderVariant::Davit,
        }
    }

    pub fn validate(&self, port: &PortConfig) -> Result<()> {
        port.validate()?;
        let d_x = port.d_x();
        if self.h_x == 0 || d_x % self.h_x != 0 {
            return Err(Error::Config(format!("h_x={} does not divide D_x={d_x}", self.h_x)));
        }
        if self.h_y == 0 || port.d_y % self.h_y != 0 {
            return Err(Error::Config(format!("h_y={} does not divide D_y={}", self.h_y, port.d_y)));
        }
        if self.d_lb_x == 0 || self.d_lb_y == 0 {
            return Err(Error::Config("linear-block widths must be positive".into()));
        }
        Ok(())
    }

    /// The configuration of one of the two half-encoders.
    pub fn half(&self) -> Result<Self> {
        if self.h_x % 2 != 0 || self.h_y % 2 != 0 || self.d_lb_x % 2 != 0 || self.d_lb_y % 2 != 0 {
            return Err(Error::Config("head counts and inner widths must be even to split".into()));
        }
        Ok(Self {
            h_x: self.h_x / 2,
            h_y: self.h_y / 2,
            d_lb_x: self.d_lb_x / 2,
            d_lb_y: self.d_lb_y / 2,
            ..*self
        })
    }
}

/// Feature labelings of the y layers (`D_y`, `D_LB_y`) and x layers (`D_x`, `D_LB_x`).
pub fn encoder_labels(port: &PortConfig, enc: &EncoderConfig) -> Result<(LayerLabels, LayerLabels)> {
    Ok((
        (HalfLabeling::grouped(port.d_y)?, HalfLabeling::grouped(enc.d_lb_y)?),
        (
            HalfLabeling::interleaved(port.d_y, port.n_y())?,
            HalfLabeling::grouped(enc.d_lb_x)?,
        ),
    ))
}

/// Inserts `enc.y{i}.*` and `enc.x{i}.*`; BMI-masked when `paired`.
pub fn init_encoder<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    port: &PortConfig,
    enc: &EncoderConfig,
    paired: bool,
) -> Result<()> {
    enc.validate(port)?;
    let labels = if paired { Some(encoder_labels(port, enc)?) } else { None };
    if enc.variant == EncoderVariant::Davit {
        let dims = LayerDims {
            d: port.d_y,
            heads: enc.h_y,
            inner: enc.d_lb_y,
        };
        for i in 0..enc.l_y {
            init_encoder_layer(s, rng, &format!("enc.y{i}"), dims, labels.as_ref().map(|l| &l.0))?;
        }
    }
    let dims = LayerDims {
        d: port.d_x(),
        heads: enc.h_x,
        inner: enc.d_lb_x,
    };
    for i in 0..enc.l_x {
        init_encoder_layer(s, rng, &format!("enc.x{i}"), dims, labels.as_ref().map(|l| &l.1))?;
    }
    Ok(())
}

/// `[N_x, D_x]` x-only encoding. With `paired`, a table of width `D_y/2`
/// is built and added identically to both halves of every column feature;
/// otherwise the table has width `D_y`. Either way it is repeated for each
/// of the `N_y` column positions.
pub fn positional_encoding_x<T: Element>(n_x: usize, n_y: usize, d_y: usize, paired: bool) -> Tensor<T> {
    let w = if paired { d_y / 2 } else { d_y };
    let table = sinusoid_table(n_x, w);
    Tensor::from_fn(&[n_x, n_y * d_y], |i| {
        let (x, k) = (i / (n_y * d_y), i % d_y);
        c(table[x * w + k % w])
    })
}

/// Sequence-wide encoding `[n, d]` for the single-axis encoder.
pub fn positional_encoding_flat<T: Element>(n: usize, d: usize) -> Tensor<T> {
    let table = sinusoid_table(n, d);
    Tensor::from_fn(&[n, d], |i| c(table[i]))
}

/// Dual-axes encoding of projected patches `[B, N_x, N_y, D_y]` into `[B, N_x, D_x]`.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    port: &PortConfig,
    enc: &EncoderConfig,
    paired: bool,
    f: Var,
) -> Result<Var> {
    let (n_x, n_y, d_y) = (port.n_x(), port.n_y(), port.d_y);
    let sf = g.shape(f).to_vec();
    if sf.len() != 4 || sf[1..] != [n_x, n_y, d_y] {
        return Err(Error::shape("encode", &sf, &[0, n_x, n_y, d_y]));
    }
    let b = sf[0];
    let mut h = g.reshape(f, &[b * n_x, n_y, d_y])?;
    for i in 0..enc.l_y {
        h = encoder_layer(g, s, &format!("enc.y{i}"), h, enc.h_y, enc.norm_mode, MacTag::ScoreY)?;
    }
    let h = g.reshape(h, &[b, n_x, n_y * d_y])?;
    let pe = g.input(positional_encoding_x(n_x, n_y, d_y, paired))?;
    let h = g.add(h, pe)?;
    x_stack(g, s, enc, h)
}

fn x_stack<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, enc: &EncoderConfig, mut h: Var) -> Result<Var> {
    for i in 0..enc.l_x {
        h = encoder_layer(g, s, &format!("enc.x{i}"), h, enc.h_x, enc.norm_mode, MacTag::ScoreX)?;
    }
    Ok(h)
}

/// Single-axis encoding of projected strips `[B, N_x, D_x]`.
pub fn encode_strips<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, enc: &EncoderConfig, f: Var) -> Result<Var> {
    let sf = g.shape(f).to_vec();
    if sf.len() != 3 {
        return Err(Error::Contract(format!("strip features must be [B, N_x, D_x], got {sf:?}")));
    }
    let pe = g.input(positional_encoding_flat(sf[1], sf[2]))?;
    let h = g.add(f, pe)?;
    x_stack(g, s, enc, h)
}

fn select_1d<T: Element>(t: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    Tensor::new(vec![idx.len()], idx.iter().map(|&i| t.data()[i]).collect()).expect("non-empty")
}

/// Row and column labelings of a BMI-initialised tensor of the portmanteau
/// model, by parameter name. Vectors (biases, norm gains) take the column
/// labeling. `None` for parameters outside the projection and encoder.
pub fn param_labels(
    name: &str,
    port: &PortConfig,
    enc: &EncoderConfig,
) -> Result<Option<(HalfLabeling, HalfLabeling)>> {
    let (ly, lx) = encoder_labels(port, enc)?;
    let [lp1, lp2] = crate::portmanteau::projection_labels(port)?;
    let layer = if name.starts_with("enc.y") {
        ly
    } else if name.starts_with("enc.x") {
        lx
    } else if name.starts_with("port.lp1.") {
        return Ok(Some(lp1));
    } else if name.starts_with("port.lp2.") {
        return Ok(Some(lp2));
    } else {
        return Ok(None);
    };
    let (model, inner) = layer;
    Ok(Some(if name.contains(".lb.fc1.") {
        (model, inner)
    } else if name.contains(".lb.fc2.") {
        (inner, model)
    } else {
        (model.clone(), model)
    }))
}

/// Copies the `half` block of every labelled tensor into a new store for a
/// half-width model.
pub fn split_half<T: Element>(
    s: &ParamStore<T>,
    port: &PortConfig,
    enc: &EncoderConfig,
    half: Half,
) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (name, t) in s.iter() {
        let Some((rows, cols)) = param_labels(name, port, enc)? else {
            continue;
        };
        let piece = if t.rank() == 2 {
            sub_block(t, &rows, &cols, half, half)
        } else {
            select_1d(t, &cols.indices(half))
        };
        out.insert(name, piece)?;
    }
    Ok(out)
}

/// The port configuration of one half-model: a single view with half widths.
pub fn half_port(port: &PortConfig) -> PortConfig {
    PortConfig {
        d_y: port.d_y / 2,
        d_lp: port.d_lp / 2,
        ..*port
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// One attention over all `N_x·N_y` patches at width `D_x`.
    Vit,
    /// Row and column attentions, both at width `D_x`.
    Axial,
    /// One x attention at width `D_x` plus `L_y` column attentions at width `D_y`.
    Davit,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 3] = [AttentionMode::Vit, AttentionMode::Axial, AttentionMode::Davit];

    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::Vit => "vit",
            AttentionMode::Axial => "axial",
            AttentionMode::Davit => "davit",
        }
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Self::Vit),
            "axial" => Ok(Self::Axial),
            "davit" => Ok(Self::Davit),
            other => Err(Error::Config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Attention problem size; `D_y = D_x / N_y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionShape {
    pub n_x: usize,
    pub n_y: usize,
    pub d_x: usize,
    pub l_y: usize,
}

impl AttentionShape {
    pub fn reference() -> Self {
        Self {
            n_x: 64,
            n_y: 8,
            d_x: 768,
            l_y: 2,
        }
    }

    pub fn d_y(&self) -> usize {
        self.d_x / self.n_y
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x == 0 || self.n_y == 0 || self.d_x == 0 || self.d_x % self.n_y != 0 {
            return Err(Error::Config(format!("infeasible attention shape {self:?}")));
        }
        Ok(())
    }
}

/// Closed-form per-product score MACs: `N²·D` for each attention, summed
/// over the attentions the mode performs.
pub fn closed_form_macs(shape: &AttentionShape, mode: AttentionMode) -> u64 {
    let (nx, ny, dx, ly) = (shape.n_x as u64, shape.n_y as u64, shape.d_x as u64, shape.l_y as u64);
    match mode {
        AttentionMode::Vit => nx * nx * ny * ny * dx,
        AttentionMode::Axial => nx * nx * dx * ny + ny * ny * dx * nx,
        AttentionMode::Davit => nx * nx * dx + ny * nx * dx * ly,
    }
}

/// One attention problem: projected `q, k, v` of shape `[batch, len, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionCall {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub tag: MacTag,
}

/// The attentions a mode performs for `shape`.
pub fn attention_calls(shape: &AttentionShape, mode: AttentionMode) -> Vec<AttentionCall> {
    let s = shape;
    let call = |batch, len, width, tag| AttentionCall { batch, len, width, tag };
    match mode {
        AttentionMode::Vit => vec![call(1, s.n_x * s.n_y, s.d_x, MacTag::ScoreX)],
        AttentionMode::Axial => vec![
            call(s.n_y, s.n_x, s.d_x, MacTag::ScoreX),
            call(s.n_x, s.n_y, s.d_x, MacTag::ScoreY),
        ],
        AttentionMode::Davit => {
            let mut v = vec![call(1, s.n_x, s.d_x, MacTag::ScoreX)];
            v.extend((0..s.l_y).map(|_| call(s.n_x, s.n_y, s.d_y(), MacTag::ScoreY)));
            v
        }
    }
}

/// Seeded random `q, k, v` inputs for one attention call.
pub fn attention_inputs<T: Element>(call: &AttentionCall, rng: &mut impl Rng) -> [Tensor<T>; 3] {
    let shape = [call.batch, call.len, call.width];
    [(); 3].map(|_| Tensor::from_fn(&shape, |_| c(rng.gen_range(-1.0..1.0))))
}

/// Score MACs of the attention products, counted by the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasuredMacs {
    /// `Q·Kᵀ` MACs (equal to the `attention·V` MACs).
    pub per_product: u64,
    pub score_x: u64,
    pub score_y: u64,
    /// Projection MACs of the corresponding full attention layers.
    pub projection: u64,
}

/// Runs every attention of `mode` on the tape and reads back the counters.
pub fn count_attention_macs(shape: &AttentionShape, mode: AttentionMode, seed: u64) -> Result<MeasuredMacs> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f32>::new();
    let mut projection = 0u64;
    for call in attention_calls(shape, mode) {
        let [q, k, v] = attention_inputs::<f32>(&call, &mut rng);
        let (q, k, v) = (g.input(q)?, g.input(k)?, g.input(v)?);
        scaled_dot_product(&mut g, q, k, v, 1, None, call.tag)?;
        projection += 4 * (call.batch * call.len * call.width * call.width) as u64;
    }
    let m = g.macs();
    Ok(MeasuredMacs {
        per_product: m.score() / 2,
        score_x: m.score_x,
        score_y: m.score_y,
        projection,
    })
}
