//! Localization network that predicts the text-line geometry of a 100×100
//! down-sample, and the spatial transformer that uses the prediction to
//! warp a 300×300 input into a 32×128 rectified crop.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_warp, build_tps, legendre_to_monomial, segments_to_control_points, target_grid, LegendreCoeffs, LossWeights,
    SegmentModel, SegmentSet, DEFAULT_SEGMENTS,
};
use crate::image::GrayImage;
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{xavier_uniform, Element, Graph, ParamStore, Tensor, Var};

pub const STN_INPUT: usize = 300;
pub const RECTIFIED_HEIGHT: usize = 32;
pub const RECTIFIED_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub input_size: usize,
    pub channels: [usize; 4],
    pub fc_dim: usize,
    pub segments: usize,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl LocalizerConfig {
    pub fn reference() -> Self {
        Self {
            input_size: 100,
            channels: [32, 64, 32, 16],
            fc_dim: 512,
            segments: DEFAULT_SEGMENTS,
        }
    }

    /// Narrow variant for fitting experiments on one CPU core.
    pub fn toy() -> Self {
        Self {
            channels: [4, 8, 8, 4],
            fc_dim: 64,
            ..Self::reference()
        }
    }

    pub fn output_len(&self) -> usize {
        3 * self.segments + 5
    }

    pub fn final_extent(&self) -> usize {
        self.input_size >> 4
    }

    pub fn flat_len(&self) -> usize {
        self.channels[3] * self.final_extent().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 16 || self.channels.contains(&0) || self.fc_dim == 0 || self.segments < 2 {
            return Err(Error::Config(format!("invalid localizer config {self:?}")));
        }
        Ok(())
    }
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Maps a geometry to the raw output vector that decodes back to it.
pub fn encode_output(model: &SegmentModel) -> Vec<f64> {
    let s = &model.segments;
    let mut out = model.legendre.psi.to_vec();
    out.extend(s.phi().iter().map(|p| p.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh()));
    out.extend_from_slice(s.theta());
    out.extend(s.xi().iter().map(|&x| softplus_inv(x)));
    out
}

/// Segment order that sorts the squashed intersections; ties keep slot order.
fn phi_order(raw_phi: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..raw_phi.len()).collect();
    idx.sort_by(|&a, &b| raw_phi[a].tanh().total_cmp(&raw_phi[b].tanh()));
    idx
}

/// Splits a raw `3M + 5` vector into Legendre coefficients and segments.
/// Segments are reordered by their squashed intersection, carrying their
/// angle and length along.
pub fn decode_output(o: &[f64], segments: usize) -> Result<SegmentModel> {
    let m = segments;
    if o.len() != 3 * m + 5 {
        return Err(Error::shape("decode_output", &[3 * m + 5], &[o.len()]));
    }
    if o.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("localizer output".into()));
    }
    let order = phi_order(&o[5..5 + m]);
    let phi = order.iter().map(|&k| o[5 + k].tanh()).collect();
    let theta = order.iter().map(|&k| o[5 + m + k]).collect();
    let xi = order
        .iter()
        .map(|&k| crate::tensor::softplus(o[5 + 2 * m + k]))
        .collect();
    Ok(SegmentModel {
        legendre: LegendreCoeffs {
            psi: [o[0], o[1], o[2], o[3], o[4]],
        },
        segments: SegmentSet::from_prediction(phi, theta, xi)?,
    })
}

/// Geometry whose control points coincide with the target grid: a flat
/// centre line crossed by vertical segments spanning the margin.
pub fn identity_model(segments: usize) -> Result<SegmentModel> {
    let grid = target_grid(segments);
    let phi = (0..segments).map(|i| grid[3 * i + 1].x).collect();
    let xi = vec![grid[2].y - grid[0].y; segments];
    Ok(SegmentModel {
        legendre: LegendreCoeffs::default(),
        segments: SegmentSet::new(phi, vec![std::f64::consts::FRAC_PI_2; segments], xi)?,
    })
}

/// Weights under the prefix `stn.` with the geometry head set to the
/// identity warp (zero weights, identity bias).
pub fn init_localizer<T: Element>(cfg: &LocalizerConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let mut ci = 1;
    for (i, &co) in cfg.channels.iter().enumerate() {
        let p = format!("stn.conv{}", i + 1);
        s.insert(format!("{p}.weight"), xavier_uniform(&mut rng, &[co, ci, 3, 3], ci * 9, co * 9))?;
        s.insert(format!("{p}.bias"), Tensor::zeros(&[co]))?;
        insert_bn(&mut s, &format!("{p}.bn"), co)?;
        ci = co;
    }
    let flat = cfg.flat_len();
    s.insert("stn.fc1.weight", xavier_uniform(&mut rng, &[flat, cfg.fc_dim], flat, cfg.fc_dim))?;
    s.insert("stn.fc1.bias", Tensor::zeros(&[cfg.fc_dim]))?;
    insert_bn(&mut s, "stn.fc1.bn", cfg.fc_dim)?;
    s.insert("stn.fc2.weight", Tensor::zeros(&[cfg.fc_dim, cfg.output_len()]))?;
    let bias = encode_output(&identity_model(cfg.segments)?);
    s.insert(
        "stn.fc2.bias",
        Tensor::new(vec![bias.len()], bias.into_iter().map(T::from_f64_lossy).collect())?,
    )?;
    Ok(s)
}

fn insert_bn<T: Element>(s: &mut ParamStore<T>, p: &str, ch: usize) -> Result<()> {
    s.insert(format!("{p}.weight"), Tensor::full(&[ch], T::one()))?;
    s.insert(format!("{p}.bias"), Tensor::zeros(&[ch]))?;
    s.insert(format!("{p}.running_mean"), Tensor::zeros(&[ch]))?;
    s.insert(format!("{p}.running_var"), Tensor::full(&[ch], T::one()))?;
    Ok(())
}

fn bn<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, p: &str, x: Var) -> Result<Var> {
    let gamma = g.param(s, &format!("{p}.weight"))?;
    let beta = g.param(s, &format!("{p}.bias"))?;
    let buf = |n: &str| {
        s.get(&format!("{p}.{n}"))
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Contract(format!("missing buffer `{p}.{n}`")))
    };
    g.batch_norm(x, gamma, beta, &buf("running_mean")?, &buf("running_var")?)
}

/// Forward pass `[B, 1, S, S] -> [B, 3M + 5]`; also returns the output
/// shape of every conv block and fully connected layer.
pub fn localizer_forward<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &LocalizerConfig,
    x: Var,
) -> Result<(Var, Vec<Vec<usize>>)> {
    let sx = g.shape(x).to_vec();
    if sx.len() != 4 || sx[1] != 1 || sx[2] != cfg.input_size || sx[3] != cfg.input_size {
        return Err(Error::shape("localizer input", &sx, &[0, 1, cfg.input_size, cfg.input_size]));
    }
    let b = sx[0];
    let mut trace = Vec::with_capacity(6);
    let mut h = x;
    for i in 1..=4 {
        let p = format!("stn.conv{i}");
        let w = g.param(s, &format!("{p}.weight"))?;
        let bias = g.param(s, &format!("{p}.bias"))?;
        h = g.conv3x3(h, w, bias)?;
        h = bn(g, s, &format!("{p}.bn"), h)?;
        h = g.relu(h)?;
        h = g.max_pool2(h)?;
        trace.push(g.shape(h)[1..].to_vec());
    }
    let flat = g.shape(h)[1..].iter().product();
    h = g.reshape(h, &[b, flat])?;
    let w1 = g.param(s, "stn.fc1.weight")?;
    let b1 = g.param(s, "stn.fc1.bias")?;
    h = g.matmul(h, w1)?;
    h = g.add(h, b1)?;
    h = bn(g, s, "stn.fc1.bn", h)?;
    h = g.relu(h)?;
    trace.push(g.shape(h)[1..].to_vec());
    let w2 = g.param(s, "stn.fc2.weight")?;
    let b2 = g.param(s, "stn.fc2.bias")?;
    h = g.matmul(h, w2)?;
    h = g.add(h, b2)?;
    trace.push(g.shape(h)[1..].to_vec());
    Ok((h, trace))
}

fn image_batch<T: Element>(images: &[&GrayImage], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        let r = img.resize(size, size)?;
        data.extend(r.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

/// Weighted L1 geometry loss on raw localizer outputs `[B, 3M + 5]`,
/// averaged over the batch.
pub fn stn_loss_graph<T: Element>(
    g: &mut Graph<T>,
    out: Var,
    truth: &[SegmentModel],
    w: &LossWeights,
    segments: usize,
) -> Result<Var> {
    w.validate()?;
    let m = segments;
    let len = 3 * m + 5;
    let b = truth.len();
    if g.shape(out) != [b, len] {
        return Err(Error::shape("stn_loss", g.shape(out), &[b, len]));
    }
    if truth.iter().any(|t| t.segments.len() != m) {
        return Err(Error::Contract("ground-truth segment count differs from the localizer".into()));
    }
    let raw: Vec<f64> = g.value(out).data().iter().map(|v| v.to_f64_lossy()).collect();
    let flat = g.reshape(out, &[1, b * len])?;
    let mut idx: [Vec<usize>; 4] = Default::default();
    let mut tgt: [Vec<f64>; 5] = Default::default();
    for (bi, t) in truth.iter().enumerate() {
        let base = bi * len;
        idx[0].extend((0..5).map(|k| base + k));
        tgt[0].extend_from_slice(&t.legendre.psi);
        for k in phi_order(&raw[base + 5..base + 5 + m]) {
            idx[1].push(base + 5 + k);
            idx[2].push(base + 5 + m + k);
            idx[3].push(base + 5 + 2 * m + k);
        }
        let s = &t.segments;
        tgt[1].extend_from_slice(s.phi());
        tgt[2].extend(s.theta().iter().map(|v| v.cos()));
        tgt[3].extend(s.theta().iter().map(|v| v.sin()));
        tgt[4].extend_from_slice(s.xi());
    }
    let target = |g: &mut Graph<T>, v: &[f64]| {
        g.input(Tensor::new(vec![1, v.len()], v.iter().map(|&x| T::from_f64_lossy(x)).collect())?)
    };
    let mut terms = Vec::with_capacity(5);
    let psi = g.select(flat, &idx[0])?;
    terms.push((psi, target(g, &tgt[0])?, 1.0));
    let phi = g.select(flat, &idx[1])?;
    let phi = g.tanh(phi)?;
    terms.push((phi, target(g, &tgt[1])?, w.alpha));
    let theta = g.select(flat, &idx[2])?;
    let cos = g.cos(theta)?;
    terms.push((cos, target(g, &tgt[2])?, w.beta));
    let sin = g.sin(theta)?;
    terms.push((sin, target(g, &tgt[3])?, w.gamma));
    let xi = g.select(flat, &idx[3])?;
    let xi = g.softplus(xi)?;
    terms.push((xi, target(g, &tgt[4])?, w.delta));
    let mut total: Option<Var> = None;
    for (pred, t, weight) in terms {
        let d = g.sub(pred, t)?;
        let d = g.abs(d)?;
        let d = g.sum(d)?;
        let d = g.scale(d, weight)?;
        total = Some(match total {
            None => d,
            Some(acc) => g.add(acc, d)?,
        });
    }
    g.scale(total.expect("five terms"), 1.0 / b as f64)
}

#[derive(Clone, Debug)]
pub struct Rectified {
    pub image: GrayImage,
    pub model: SegmentModel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub adam: AdamConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 1e-3,
            batch_size: 8,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Localizer<T: Element> {
    pub cfg: LocalizerConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> Localizer<T> {
    pub fn new(cfg: LocalizerConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: init_localizer(&cfg, seed)?,
            cfg,
        })
    }

    /// Wraps loaded weights, checking every expected tensor's shape.
    pub fn from_params(cfg: LocalizerConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = init_localizer::<T>(&cfg, 0)?;
        for (name, t) in reference.iter() {
            match params.get(name) {
                None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Contract(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { cfg, params })
    }

    /// Writes `localizer.json` and the parameter manifest into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        fs::write(dir.join("localizer.json"), serde_json::to_vec_pretty(&self.cfg)?)?;
        Ok(())
    }

    /// Reads a directory written by [`Localizer::save_dir`]; without
    /// `localizer.json` the reference configuration is assumed.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("localizer.json");
        let cfg = if cfg_path.exists() {
            serde_json::from_slice(&fs::read(cfg_path)?)?
        } else {
            LocalizerConfig::reference()
        };
        Self::from_params(cfg, ParamStore::load_dir(dir)?)
    }

    /// Raw outputs for each image; inputs are resized to the localizer resolution.
    pub fn localize_batch(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input(image_batch(images, self.cfg.input_size)?)?;
        let (out, _) = localizer_forward(&mut g, &self.params, &self.cfg, x)?;
        Ok(g.value(out)
            .data()
            .chunks(self.cfg.output_len())
            .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
            .collect())
    }

    pub fn localize(&self, img: &GrayImage) -> Result<Vec<f64>> {
        Ok(self.localize_batch(&[img])?.remove(0))
    }

    pub fn predict(&self, img: &GrayImage) -> Result<SegmentModel> {
        decode_output(&self.localize(img)?, self.cfg.segments)
    }

    /// Resizes to 300×300, predicts geometry from the 100×100 down-sample
    /// and warps the 300×300 image into a 32×128 crop.
    pub fn rectify(&self, img: &GrayImage) -> Result<Rectified> {
        let big = img.resize(STN_INPUT, STN_INPUT)?;
        let small = big.resize(self.cfg.input_size, self.cfg.input_size)?;
        let model = self.predict(&small)?;
        let image = warp_with_model(&big, &model)?;
        Ok(Rectified { image, model })
    }

    /// Fits the localizer to ground-truth geometries with ADAM; returns the
    /// loss before each step.
    pub fn fit(&mut self, data: &[(GrayImage, SegmentModel)], opts: &FitOptions) -> Result<Vec<f64>> {
        if data.is_empty() || opts.batch_size == 0 {
            return Err(Error::Config("fitting needs data and a positive batch size".into()));
        }
        let inputs: Vec<Tensor<T>> = data
            .iter()
            .map(|(img, _)| image_batch(&[img], self.cfg.input_size))
            .collect::<Result<_>>()?;
        let mut state = AdamState::new();
        let mut losses = Vec::with_capacity(opts.steps);
        let plane = self.cfg.input_size * self.cfg.input_size;
        for step in 0..opts.steps {
            let picks: Vec<usize> = (0..opts.batch_size.min(data.len()))
                .map(|i| (step * opts.batch_size + i) % data.len())
                .collect();
            let mut xb = Vec::with_capacity(picks.len() * plane);
            for &p in &picks {
                xb.extend_from_slice(inputs[p].data());
            }
            let truth: Vec<SegmentModel> = picks.iter().map(|&p| data[p].1.clone()).collect();
            let mut g = Graph::new();
            let x = g.input(Tensor::new(
                vec![picks.len(), 1, self.cfg.input_size, self.cfg.input_size],
                xb,
            )?)?;
            let (out, _) = localizer_forward(&mut g, &self.params, &self.cfg, x)?;
            let loss = stn_loss_graph(&mut g, out, &truth, &opts.weights, self.cfg.segments)?;
            losses.push(g.value(loss).data()[0].to_f64_lossy());
            self.params.zero_grad();
            g.backward_into(loss, &mut self.params)?;
            adam_step(&mut self.params, &mut state, opts.lr, &opts.adam)?;
        }
        self.params.zero_grad();
        Ok(losses)
    }
}

/// Warps `img` (the STN-resolution input) with control points derived from `model`.
pub fn warp_with_model(img: &GrayImage, model: &SegmentModel) -> Result<GrayImage> {
    let curve = legendre_to_monomial(&model.legendre);
    let cps = segments_to_control_points(&curve, &model.segments);
    let warp = build_tps(&cps)?;
    Ok(apply_warp(&warp, img, RECTIFIED_HEIGHT, RECTIFIED_WIDTH))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::stn_loss;
    use crate::image::pixel_center;

    #[test]
    fn reference_shape_trace() {
        let cfg = LocalizerConfig::reference();
        let s: ParamStore<f32> = init_localizer(&cfg, 1).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 1, 100, 100])).unwrap();
        let (_, trace) = localizer_forward(&mut g, &s, &cfg, x).unwrap();
        let expect: Vec<Vec<usize>> = vec![
            vec![32, 50, 50],
            vec![64, 25, 25],
            vec![32, 12, 12],
            vec![16, 6, 6],
            vec![512],
            vec![35],
        ];
        assert_eq!(trace, expect);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cfg = LocalizerConfig::toy();
        let mut s: ParamStore<f64> = init_localizer(&cfg, 1).unwrap();
        let names: Vec<String> = s.trainable_names();
        for n in names {
            let t = s.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let loc = Localizer::from_params(cfg, s).unwrap();
        let img = GrayImage::from_fn(100, 100, |y, x| ((x + y) % 7) as f32 / 7.0);
        assert!(loc.localize(&img).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let loc = Localizer::<f32>::new(LocalizerConfig::toy(), 9).unwrap();
        let img = GrayImage::from_fn(100, 100, |y, x| ((3 * x + y) % 11) as f32 / 11.0);
        assert_eq!(loc.localize(&img).unwrap(), loc.localize(&img).unwrap());
    }

    #[test]
    fn decoding_zeros() {
        let m = decode_output(&[0.0; 35], 10).unwrap();
        assert_eq!(m.legendre.psi, [0.0; 5]);
        assert!(m.segments.phi().iter().all(|&p| p == 0.0));
        assert!(m.segments.xi().iter().all(|&x| (x - 2f64.ln()).abs() < 1e-15));
        assert!(decode_output(&[0.0; 34], 10).is_err());
    }

    #[test]
    fn decoding_sorts_descending_intersections() {
        let mut o = vec![0.0; 35];
        for k in 0..10 {
            o[5 + k] = 1.0 - 0.2 * k as f64;
            o[15 + k] = k as f64 * 0.1;
        }
        let m = decode_output(&o, 10).unwrap();
        assert!(m.segments.phi().windows(2).all(|w| w[0] < w[1]));
        assert!((m.segments.theta()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn encode_decode_keeps_psi() {
        let o: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let m = decode_output(&o, 10).unwrap();
        let back = encode_output(&m);
        assert_eq!(&back[..5], &o[..5]);
        assert_eq!(decode_output(&back, 10).unwrap().legendre, m.legendre);
    }

    #[test]
    fn identity_localizer_resizes_the_central_region() {
        let loc = Localizer::<f64>::new(LocalizerConfig::toy(), 3).unwrap();
        let img = GrayImage::from_fn(40, 90, |y, x| ((y * 5 + x * 3) % 17) as f32 / 17.0);
        let r = loc.rectify(&img).unwrap();
        assert_eq!((r.image.height(), r.image.width()), (32, 128));
        let big = img.resize(300, 300).unwrap();
        let mut worst = 0f32;
        for y in 0..32 {
            for x in 0..128 {
                let v = big.sample(pixel_center(x, 128), pixel_center(y, 32));
                worst = worst.max((v - r.image.get(y, x)).abs());
            }
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let cfg = LocalizerConfig::toy();
        let mut s: ParamStore<f64> = init_localizer(&cfg, 4).unwrap();
        let w2 = s.get_mut("stn.fc2.weight").unwrap();
        for (i, v) in w2.data_mut().iter_mut().enumerate() {
            *v = ((i * 7919) % 101) as f64 / 101.0 - 0.5;
        }
        let loc = Localizer::from_params(cfg, s).unwrap();
        let imgs: Vec<GrayImage> = (0..2)
            .map(|k| GrayImage::from_fn(100, 100, |y, x| ((x * (k + 2) + y) % 13) as f32 / 13.0))
            .collect();
        let truth = vec![identity_model(10).unwrap(), identity_model(10).unwrap()];
        let w = LossWeights {
            alpha: 2.0,
            beta: 0.5,
            gamma: 1.5,
            delta: 0.25,
        };
        let mut g = Graph::new();
        let x = g.input(image_batch(&[&imgs[0], &imgs[1]], 100).unwrap()).unwrap();
        let (out, _) = localizer_forward(&mut g, &loc.params, &cfg, x).unwrap();
        let l = stn_loss_graph(&mut g, out, &truth, &w, 10).unwrap();
        let mut expect = 0.0;
        for (row, t) in g.value(out).data().chunks(35).zip(&truth) {
            expect += stn_loss(&decode_output(row, 10).unwrap(), t, &w).unwrap();
        }
        assert!((g.value(l).data()[0] - expect / 2.0).abs() < 1e-12);
    }
}
