//! Portmanteau features: the padded and rectified views of a text image,
//! their joint patchification, and the block-matrix-initialised linear
//! projection whose two halves start out decoupled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::{c, xavier_bound, Element, Graph, MacTag, ParamStore, Tensor, Var};

/// Which view a feature index belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Half {
    /// Padded image.
    P,
    /// Rectified image.
    R,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HalfLabeling {
    labels: Vec<Half>,
}

impl HalfLabeling {
    /// `[P; d/2]` followed by `[R; d/2]`.
    pub fn grouped(d: usize) -> Result<Self> {
        if d == 0 || d % 2 != 0 {
            return Err(Error::Config(format!("labelled extent must be even and positive, got {d}")));
        }
        let labels = (0..d).map(|i| if i < d / 2 { Half::P } else { Half::R }).collect();
        Ok(Self { labels })
    }

    /// The grouped `d_y` pattern repeated `n_y` times, as produced by
    /// concatenating `n_y` column features of width `d_y`.
    pub fn interleaved(d_y: usize, n_y: usize) -> Result<Self> {
        let unit = Self::grouped(d_y)?;
        if n_y == 0 {
            return Err(Error::Config("n_y must be positive".into()));
        }
        Ok(Self {
            labels: unit.labels.repeat(n_y),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Half] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Half {
        self.labels[i]
    }

    pub fn indices(&self, half: Half) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == half).collect()
    }

    /// True when every one of `heads` contiguous slices carries one label.
    pub fn heads_are_pure(&self, heads: usize) -> bool {
        if heads == 0 || self.len() % heads != 0 {
            return false;
        }
        self.labels.chunks(self.len() / heads).all(|c| c.iter().all(|&l| l == c[0]))
    }
}

/// Block-matrix initialisation: entry `(i, j)` is drawn from Xavier uniform
/// with per-half fans when the labels agree and is exactly zero otherwise.
pub fn bmi_init<T: Element>(rows: &HalfLabeling, cols: &HalfLabeling, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let (r, k) = (rows.len(), cols.len());
    if r % 2 != 0 || k % 2 != 0 || r == 0 || k == 0 {
        return Err(Error::Config(format!("BMI extents must be even, got {r}x{k}")));
    }
    let a = xavier_bound(r / 2, k / 2);
    let mut data = Vec::with_capacity(r * k);
    for i in 0..r {
        for j in 0..k {
            data.push(if rows.get(i) == cols.get(j) {
                c(rng.gen_range(-a..=a))
            } else {
                T::zero()
            });
        }
    }
    Tensor::new(vec![r, k], data)
}

/// Number of label-mismatched entries that are not exactly zero.
pub fn bmi_violations<T: Element>(w: &Tensor<T>, rows: &HalfLabeling, cols: &HalfLabeling) -> usize {
    let k = cols.len();
    w.data()
        .iter()
        .enumerate()
        .filter(|&(idx, v)| rows.get(idx / k) != cols.get(idx % k) && *v != T::zero())
        .count()
}

/// Mean `|w|` over label-matched and label-mismatched entries.
pub fn bmi_block_means<T: Element>(w: &Tensor<T>, rows: &HalfLabeling, cols: &HalfLabeling) -> (f64, f64) {
    let k = cols.len();
    let (mut sm, mut nm, mut sx, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for (idx, v) in w.data().iter().enumerate() {
        let a = v.to_f64_lossy().abs();
        if rows.get(idx / k) == cols.get(idx % k) {
            sm += a;
            nm += 1;
        } else {
            sx += a;
            nx += 1;
        }
    }
    (sm / nm.max(1) as f64, sx / nx.max(1) as f64)
}

/// Extracts the sub-matrix with rows labelled `rh` and columns labelled `ch`,
/// preserving index order.
pub fn sub_block<T: Element>(w: &Tensor<T>, rows: &HalfLabeling, cols: &HalfLabeling, rh: Half, ch: Half) -> Tensor<T> {
    let ri = rows.indices(rh);
    let ci = cols.indices(ch);
    let k = cols.len();
    let d = w.data();
    let mut out = Vec::with_capacity(ri.len() * ci.len());
    for &i in &ri {
        out.extend(ci.iter().map(|&j| d[i * k + j]));
    }
    Tensor::new(vec![ri.len(), ci.len()], out).expect("non-empty halves")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortConfig {
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub d_y: usize,
    pub d_lp: usize,
}

impl PortConfig {
    pub fn reference() -> Self {
        Self {
            height: 32,
            width: 128,
            patch_h: 4,
            patch_w: 2,
            d_y: 96,
            d_lp: 2048,
        }
    }

    pub fn toy() -> Self {
        Self {
            height: 16,
            width: 32,
            patch_h: 2,
            patch_w: 2,
            d_y: 16,
            d_lp: 64,
        }
    }

    pub fn n_x(&self) -> usize {
        self.width / self.patch_w
    }

    pub fn n_y(&self) -> usize {
        self.height / self.patch_h
    }

    pub fn d_x(&self) -> usize {
        self.d_y * self.n_y()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w
    }

    pub fn strip_len(&self) -> usize {
        self.patch_w * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || self.height % self.patch_h != 0 || self.width % self.patch_w != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch_h, self.patch_w
            )));
        }
        if self.d_y == 0 || self.d_y % 2 != 0 || self.d_lp == 0 || self.d_lp % 2 != 0 {
            return Err(Error::Config(format!("d_y and d_lp must be even, got {} and {}", self.d_y, self.d_lp)));
        }
        Ok(())
    }
}

/// Aspect-preserving resize to `height`, then zero padding on the right (or
/// squeezing) to `width`.
pub fn reshape_pad(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    let w = ((img.width() as f64 * height as f64 / img.height() as f64).round() as usize).max(1);
    let scaled = img.resize(height, w)?;
    if w <= width {
        Ok(scaled.crop_columns(width))
    } else {
        scaled.resize(height, width)
    }
}

/// Plain bilinear resize; aspect ratio is not preserved.
pub fn reshape_resize(img: &GrayImage, height: usize, width: usize) -> Result<GrayImage> {
    img.resize(height, width)
}

fn check_image(img: &GrayImage, cfg: &PortConfig) -> Result<()> {
    if img.height() != cfg.height || img.width() != cfg.width {
        return Err(Error::shape(
            "patchify",
            &[img.height(), img.width()],
            &[cfg.height, cfg.width],
        ));
    }
    Ok(())
}

fn push_patch<T: Element>(out: &mut Vec<T>, img: &GrayImage, cfg: &PortConfig, px: usize, py: usize) {
    for r in 0..cfg.patch_h {
        for q in 0..cfg.patch_w {
            out.push(c(img.get(py * cfg.patch_h + r, px * cfg.patch_w + q) as f64));
        }
    }
}

/// Single-view patches `[N_x, N_y, P_h·P_w]`, each flattened row-major.
pub fn patchify<T: Element>(img: &GrayImage, cfg: &PortConfig) -> Result<Tensor<T>> {
    check_image(img, cfg)?;
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for px in 0..cfg.n_x() {
        for py in 0..cfg.n_y() {
            push_patch(&mut out, img, cfg, px, py);
        }
    }
    Tensor::new(vec![cfg.n_x(), cfg.n_y(), cfg.patch_len()], out)
}

/// Joint patches `[N_x, N_y, 2·P_h·P_w]`: the padded-view pixels of a patch
/// followed by the rectified-view pixels, both row-major.
pub fn concat_patchify<T: Element>(ip: &GrayImage, ir: &GrayImage, cfg: &PortConfig) -> Result<Tensor<T>> {
    check_image(ip, cfg)?;
    check_image(ir, cfg)?;
    let mut out = Vec::with_capacity(2 * cfg.height * cfg.width);
    for px in 0..cfg.n_x() {
        for py in 0..cfg.n_y() {
            push_patch(&mut out, ip, cfg, px, py);
            push_patch(&mut out, ir, cfg, px, py);
        }
    }
    Tensor::new(vec![cfg.n_x(), cfg.n_y(), 2 * cfg.patch_len()], out)
}

/// Inverse of [`concat_patchify`].
pub fn unpatchify<T: Element>(t: &Tensor<T>, cfg: &PortConfig) -> Result<(GrayImage, GrayImage)> {
    let pl = cfg.patch_len();
    if t.shape() != [cfg.n_x(), cfg.n_y(), 2 * pl] {
        return Err(Error::shape("unpatchify", t.shape(), &[cfg.n_x(), cfg.n_y(), 2 * pl]));
    }
    let mut ip = GrayImage::zeros(cfg.height, cfg.width);
    let mut ir = GrayImage::zeros(cfg.height, cfg.width);
    for (n, v) in t.data().chunks(2 * pl).enumerate() {
        let (px, py) = (n / cfg.n_y(), n % cfg.n_y());
        for k in 0..pl {
            let (y, x) = (py * cfg.patch_h + k / cfg.patch_w, px * cfg.patch_w + k % cfg.patch_w);
            ip.set(y, x, v[k].to_f64_lossy() as f32);
            ir.set(y, x, v[pl + k].to_f64_lossy() as f32);
        }
    }
    Ok((ip, ir))
}

/// Vertical strips `[N_x, P_w·H]`, each flattened row-major.
pub fn strips<T: Element>(img: &GrayImage, cfg: &PortConfig) -> Result<Tensor<T>> {
    check_image(img, cfg)?;
    let mut out = Vec::with_capacity(cfg.height * cfg.width);
    for px in 0..cfg.n_x() {
        for y in 0..cfg.height {
            for q in 0..cfg.patch_w {
                out.push(c(img.get(y, px * cfg.patch_w + q) as f64));
            }
        }
    }
    Tensor::new(vec![cfg.n_x(), cfg.strip_len()], out)
}

/// `x·W + b` over the last axis of `x`, with weights `{prefix}.weight` and
/// `{prefix}.bias`.
pub fn linear<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, x: Var, tag: MacTag) -> Result<Var> {
    let w = g.param(s, &format!("{prefix}.weight"))?;
    let b = g.param(s, &format!("{prefix}.bias"))?;
    let y = g.matmul_tagged(x, w, tag)?;
    g.add(y, b)
}

/// Inserts `{prefix}.weight` (BMI-masked when labels are given, Xavier
/// otherwise) and a zero `{prefix}.bias`.
pub fn init_linear<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    dims: (usize, usize),
    labels: Option<(&HalfLabeling, &HalfLabeling)>,
) -> Result<()> {
    let w = match labels {
        Some((r, k)) => {
            if (r.len(), k.len()) != dims {
                return Err(Error::shape("init_linear", &[r.len(), k.len()], &[dims.0, dims.1]));
            }
            bmi_init(r, k, rng)?
        }
        None => crate::tensor::xavier_uniform(rng, &[dims.0, dims.1], dims.0, dims.1),
    };
    s.insert(format!("{prefix}.weight"), w)?;
    s.insert(format!("{prefix}.bias"), Tensor::zeros(&[dims.1]))?;
    Ok(())
}

/// `LP(x) = (x·A1 + b1)·A2 + b2` applied per patch.
pub fn linear_projection<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str, patches: Var) -> Result<Var> {
    let h = linear(g, s, &format!("{prefix}.lp1"), patches, MacTag::Other)?;
    linear(g, s, &format!("{prefix}.lp2"), h, MacTag::Other)
}

/// Row and column labelings of the two projection layers for the joint patches.
pub fn projection_labels(cfg: &PortConfig) -> Result<[(HalfLabeling, HalfLabeling); 2]> {
    Ok([
        (HalfLabeling::grouped(2 * cfg.patch_len())?, HalfLabeling::grouped(cfg.d_lp)?),
        (HalfLabeling::grouped(cfg.d_lp)?, HalfLabeling::grouped(cfg.d_y)?),
    ])
}

pub fn init_projection<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    prefix: &str,
    d_in: usize,
    d_lp: usize,
    d_out: usize,
    labels: Option<&[(HalfLabeling, HalfLabeling); 2]>,
) -> Result<()> {
    let l = labels.map(|l| [(&l[0].0, &l[0].1), (&l[1].0, &l[1].1)]);
    init_linear(s, rng, &format!("{prefix}.lp1"), (d_in, d_lp), l.map(|l| l[0]))?;
    init_linear(s, rng, &format!("{prefix}.lp2"), (d_lp, d_out), l.map(|l| l[1]))
}
