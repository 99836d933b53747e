//! Full recognisers: input views, projection, encoder, decoder and loss for
//! the four variants.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::davit::{encode, encode_strips, init_encoder, EncoderConfig, EncoderVariant};
use crate::decoder::{decode_greedy, decoder_forward, init_decoder, teacher_forcing, Decoded, DecoderConfig, MAX_DECODE_LEN};
use crate::error::{Error, Result};
use crate::geometry::{rectify_with_boxes, QuadBoxSet};
use crate::image::GrayImage;
use crate::portmanteau::{
    concat_patchify, init_projection, linear_projection, patchify, projection_labels, reshape_pad, reshape_resize, strips,
    PortConfig,
};
use crate::stn::Localizer;
use crate::tensor::{Element, Graph, ManifestEntry, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Padded and rectified views fused by BMI projection, dual-axes encoder.
    Port,
    /// Rectified view only.
    Stn,
    /// Padded view only.
    Plain,
    /// Padded view cut into vertical strips, x-encoder only.
    Savit,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Port, Variant::Stn, Variant::Plain, Variant::Savit];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Port => "port",
            Variant::Stn => "stn",
            Variant::Plain => "plain",
            Variant::Savit => "savit",
        }
    }

    pub fn needs_rectified(self) -> bool {
        matches!(self, Variant::Port | Variant::Stn)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (port, stn, plain, savit)")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub port: PortConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    fn assemble(variant: Variant, port: PortConfig, mut encoder: EncoderConfig, mut decoder: DecoderConfig) -> Self {
        encoder.variant = if variant == Variant::Savit {
            EncoderVariant::Savit
        } else {
            EncoderVariant::Davit
        };
        decoder.width = port.d_x();
        Self {
            variant,
            port,
            encoder,
            decoder,
        }
    }

    pub fn toy(variant: Variant) -> Self {
        Self::assemble(variant, PortConfig::toy(), EncoderConfig::toy(), DecoderConfig::toy())
    }

    pub fn reference(variant: Variant) -> Self {
        Self::assemble(variant, PortConfig::reference(), EncoderConfig::reference(), DecoderConfig::reference())
    }

    pub fn with_norm_mode(mut self, mode: crate::attention::NormMode) -> Self {
        self.encoder.norm_mode = mode;
        self.decoder.norm_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(&self.port)?;
        self.decoder.validate()?;
        if self.decoder.width != self.port.d_x() {
            return Err(Error::Config(format!(
                "decoder width {} differs from encoder memory width {}",
                self.decoder.width,
                self.port.d_x()
            )));
        }
        let savit = self.encoder.variant == EncoderVariant::Savit;
        if savit != (self.variant == Variant::Savit) {
            return Err(Error::Config("encoder variant does not match model variant".into()));
        }
        Ok(())
    }

    /// Feature length of one input token before projection.
    pub fn input_len(&self) -> usize {
        match self.variant {
            Variant::Port => 2 * self.port.patch_len(),
            Variant::Stn | Variant::Plain => self.port.patch_len(),
            Variant::Savit => self.port.strip_len(),
        }
    }

    /// Shape of one sample's input tensor.
    pub fn input_shape(&self) -> Vec<usize> {
        match self.variant {
            Variant::Savit => vec![self.port.n_x(), self.port.strip_len()],
            _ => vec![self.port.n_x(), self.port.n_y(), self.input_len()],
        }
    }
}

/// Parameters of a fresh model: `port.lp*`, `enc.*`, `dec.*`. Only the
/// portmanteau variant is BMI-initialised.
pub fn init_model<T: Element>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let p = &cfg.port;
    match cfg.variant {
        Variant::Port => {
            let labels = projection_labels(p)?;
            init_projection(&mut s, &mut rng, "port", cfg.input_len(), p.d_lp, p.d_y, Some(&labels))?;
        }
        Variant::Stn | Variant::Plain => init_projection(&mut s, &mut rng, "port", cfg.input_len(), p.d_lp, p.d_y, None)?,
        Variant::Savit => init_projection(&mut s, &mut rng, "port", cfg.input_len(), p.d_lp, p.d_x(), None)?,
    }
    init_encoder(&mut s, &mut rng, p, &cfg.encoder, cfg.variant == Variant::Port)?;
    init_decoder(&mut s, &mut rng, &cfg.decoder)?;
    Ok(s)
}

/// Source of the rectified view.
pub enum Rectifier<'a> {
    /// Ground-truth character boxes drive the control points.
    Boxes(&'a QuadBoxSet),
    Localizer(&'a Localizer<f32>),
    /// Plain resize, no geometry.
    Resize,
}

/// Rectified view at the model's input size.
pub fn rectified_view(img: &GrayImage, port: &PortConfig, rect: &Rectifier<'_>) -> Result<GrayImage> {
    let (h, w) = (port.height, port.width);
    match rect {
        Rectifier::Boxes(b) => rectify_with_boxes(img, b, h, w),
        Rectifier::Localizer(l) => reshape_resize(&l.rectify(img)?.image, h, w),
        Rectifier::Resize => reshape_resize(img, h, w),
    }
}

/// One sample's input tensor ([`ModelConfig::input_shape`]).
pub fn model_input<T: Element>(cfg: &ModelConfig, img: &GrayImage, rect: &Rectifier<'_>) -> Result<Tensor<T>> {
    let p = &cfg.port;
    match cfg.variant {
        Variant::Port => {
            let ip = reshape_pad(img, p.height, p.width)?;
            let ir = rectified_view(img, p, rect)?;
            concat_patchify(&ip, &ir, p)
        }
        Variant::Stn => patchify(&rectified_view(img, p, rect)?, p),
        Variant::Plain => patchify(&reshape_pad(img, p.height, p.width)?, p),
        Variant::Savit => strips(&reshape_pad(img, p.height, p.width)?, p),
    }
}

/// Stacks equal-shape tensors along a new leading axis.
pub fn stack<T: Element>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Contract("stack of nothing".into()))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", t.shape(), first.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([vec![items.len()], first.shape().to_vec()].concat(), data)
}

/// Encoder memory `[B, N_x, D_x]` of a batch of stacked inputs.
pub fn encode_inputs<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let f = linear_projection(g, s, "port", x)?;
    match cfg.variant {
        Variant::Savit => encode_strips(g, s, &cfg.encoder, f),
        v => encode(g, s, &cfg.port, &cfg.encoder, v == Variant::Port, f),
    }
}

/// Teacher-forced mean token cross-entropy of a batch.
pub fn model_loss<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, x: Var, texts: &[&str]) -> Result<Var> {
    let memory = encode_inputs(g, s, cfg, x)?;
    memory_loss(g, s, cfg, memory, texts)
}

/// Teacher-forced loss of the decoder on a given memory.
pub fn memory_loss<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &ModelConfig, memory: Var, texts: &[&str]) -> Result<Var> {
    let (inputs, targets, valid) = teacher_forcing(texts)?;
    let logits = decoder_forward(g, s, &cfg.decoder, &inputs, memory)?;
    g.cross_entropy(logits, &targets, &valid)
}

/// Model description stored beside trained weights.
pub const MODEL_FILE: &str = "model.json";

/// Parameter directory inside a weights directory: `params/` when the
/// directory is a training checkpoint, the directory itself otherwise.
pub fn params_dir(dir: &Path) -> PathBuf {
    let p = dir.join("params");
    if p.is_dir() {
        p
    } else {
        dir.to_path_buf()
    }
}

/// Element type recorded in a parameter manifest (`"f32"` or `"f64"`).
pub fn stored_dtype(params: &Path) -> Result<String> {
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(params.join("manifest.json"))?)?;
    manifest
        .first()
        .map(|e| e.dtype.clone())
        .ok_or_else(|| Error::Format(format!("{} lists no parameters", params.display())))
}

pub fn read_model_config(dir: &Path) -> Result<Option<ModelConfig>> {
    let path = dir.join(MODEL_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let cfg: ModelConfig = serde_json::from_slice(&fs::read(path)?)?;
    cfg.validate()?;
    Ok(Some(cfg))
}

pub fn write_model_config(dir: &Path, cfg: &ModelConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(MODEL_FILE), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

/// Greedy transcriptions of a batch of stacked inputs.
pub fn recognize_batch<T: Element>(s: &ParamStore<T>, cfg: &ModelConfig, x: &Tensor<T>) -> Result<Vec<Decoded>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let m = encode_inputs(&mut g, s, cfg, xv)?;
    let memory = g.value(m).clone();
    decode_greedy(s, &cfg.decoder, &memory, MAX_DECODE_LEN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render_sample, Distortion, ToyConfig};

    fn sample() -> crate::data::ToySample {
        render_sample("Ab3", &ToyConfig::default(), 5, 4, Distortion::None).unwrap()
    }

    #[test]
    fn input_shapes_per_variant() {
        let s = sample();
        for v in Variant::ALL {
            let cfg = ModelConfig::toy(v);
            let x: Tensor<f32> = model_input(&cfg, &s.image, &Rectifier::Boxes(&s.boxes)).unwrap();
            assert_eq!(x.shape(), cfg.input_shape().as_slice(), "{v}");
        }
        assert_eq!(ModelConfig::toy(Variant::Port).input_shape(), vec![16, 8, 8]);
        assert_eq!(ModelConfig::toy(Variant::Savit).input_shape(), vec![16, 32]);
    }

    #[test]
    fn fresh_models_have_uniform_loss() {
        let s = sample();
        for v in Variant::ALL {
            let cfg = ModelConfig::toy(v);
            let params = init_model::<f32>(&cfg, 0).unwrap();
            let x = model_input::<f32>(&cfg, &s.image, &Rectifier::Boxes(&s.boxes)).unwrap();
            let mut g = Graph::new();
            let xv = g.input(stack(&[&x, &x]).unwrap()).unwrap();
            let loss = model_loss(&mut g, &params, &cfg, xv, &["Ab3", "x"]).unwrap();
            assert!((g.value(loss).data()[0] as f64 - 100f64.ln()).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn only_port_is_block_initialised() {
        let port = init_model::<f64>(&ModelConfig::toy(Variant::Port), 1).unwrap();
        let plain = init_model::<f64>(&ModelConfig::toy(Variant::Plain), 1).unwrap();
        let zeros = |s: &ParamStore<f64>| s.get("enc.x0.attn.q.weight").unwrap().data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros(&port), 128 * 128 / 2);
        assert_eq!(zeros(&plain), 0);
        assert!(init_model::<f64>(&ModelConfig::toy(Variant::Savit), 1).unwrap().names().all(|n| !n.starts_with("enc.y")));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vit".parse::<Variant>().is_err());
    }
}
