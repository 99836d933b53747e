//! Finite-difference checks of every differentiable op and of a full model
//! loss, and block-structure statistics of trained BMI weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{causal_mask, scaled_dot_product};
use crate::davit::param_labels;
use crate::data::{render_sample, Distortion, ToyConfig};
use crate::decoder::VOCAB_SIZE;
use crate::error::Result;
use crate::geometry::{LossWeights, SegmentModel};
use crate::image::GrayImage;
use crate::model::{init_model, model_input, model_loss, stack, ModelConfig, Rectifier, Variant};
use crate::portmanteau::bmi_block_means;
use crate::tensor::{
    finite_diff_check, finite_diff_check_params, xavier_uniform, Element, GradcheckReport, Graph, MacTag, ParamStore,
    Tensor, Var,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const H: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: String,
}

impl OpCheck {
    fn new(name: &str, r: GradcheckReport) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst: r.worst,
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRADCHECK_TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values with magnitude in `[0.2, 1)`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(0.2..1.0) * if rng.gen() { 1.0 } else { -1.0 })
}

/// `Σ y ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn weighted(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.input(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// Every differentiable op of the tape, each with a seeded input.
pub fn gradcheck_ops(seed: u64) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ws = seed ^ 0x5eed;
    let m = uniform(r, &[4, 3], -1.0, 1.0);
    let bias = uniform(r, &[3], -1.0, 1.0);
    let same = uniform(r, &[2, 3], -1.0, 1.0);
    let gamma = uniform(r, &[4], 0.5, 1.5);
    let beta = uniform(r, &[4], -0.5, 0.5);
    let conv_w = uniform(r, &[2, 3, 3, 3], -0.5, 0.5);
    let conv_b = uniform(r, &[2], -0.5, 0.5);
    let table = uniform(r, &[5, 3], -1.0, 1.0);
    let kv = uniform(r, &[2, 4, 6], -1.0, 1.0);
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [0.5, 1.5, 1.0, 2.0];

    let c = |g: &mut Graph<f64>, t: &Tensor<f64>| g.input(t.clone());
    let cases: Vec<(&str, Tensor<f64>, OpFn)> = vec![
        ("matmul", uniform(r, &[2, 3, 4], -1.0, 1.0), {
            let m = m.clone();
            Box::new(move |g, x| {
                let b = c(g, &m)?;
                let y = g.matmul(x, b)?;
                weighted(g, y, ws)
            })
        }),
        ("matmul_rhs", uniform(r, &[4, 3], -1.0, 1.0), Box::new(move |g, x| {
            let a = g.input(Tensor::from_fn(&[2, 4], |i| (i as f64 * 0.37).sin()))?;
            let y = g.matmul(a, x)?;
            weighted(g, y, ws)
        })),
        ("add_broadcast", uniform(r, &[2, 3], -1.0, 1.0), {
            let bias = bias.clone();
            Box::new(move |g, x| {
                let b = g.variable(bias.clone())?;
                let y = g.add(x, b)?;
                let y = g.mul(y, y)?;
                weighted(g, y, ws)
            })
        }),
        ("add_broadcast_rhs", uniform(r, &[3], -1.0, 1.0), {
            let same = same.clone();
            Box::new(move |g, x| {
                let a = c(g, &same)?;
                let y = g.add(a, x)?;
                let y = g.mul(y, y)?;
                weighted(g, y, ws)
            })
        }),
        ("sub", uniform(r, &[2, 3], -1.0, 1.0), {
            let same = same.clone();
            Box::new(move |g, x| {
                let a = c(g, &same)?;
                let y = g.sub(a, x)?;
                let y = g.mul(y, y)?;
                weighted(g, y, ws)
            })
        }),
        ("mul", uniform(r, &[2, 3], -1.0, 1.0), {
            let same = same.clone();
            Box::new(move |g, x| {
                let a = c(g, &same)?;
                let y = g.mul(x, a)?;
                let y = g.mul(y, x)?;
                weighted(g, y, ws)
            })
        }),
        ("scale", uniform(r, &[5], -1.0, 1.0), Box::new(move |g, x| {
            let y = g.scale(x, -2.5)?;
            weighted(g, y, ws)
        })),
        ("relu", away_from_zero(r, &[8]), Box::new(move |g, x| {
            let y = g.relu(x)?;
            weighted(g, y, ws)
        })),
        ("tanh", uniform(r, &[6], -2.0, 2.0), Box::new(move |g, x| {
            let y = g.tanh(x)?;
            weighted(g, y, ws)
        })),
        ("softplus", uniform(r, &[6], -3.0, 3.0), Box::new(move |g, x| {
            let y = g.softplus(x)?;
            weighted(g, y, ws)
        })),
        ("abs", away_from_zero(r, &[6]), Box::new(move |g, x| {
            let y = g.abs(x)?;
            weighted(g, y, ws)
        })),
        ("cos", uniform(r, &[6], -3.0, 3.0), Box::new(move |g, x| {
            let y = g.cos(x)?;
            weighted(g, y, ws)
        })),
        ("sin", uniform(r, &[6], -3.0, 3.0), Box::new(move |g, x| {
            let y = g.sin(x)?;
            weighted(g, y, ws)
        })),
        ("softmax_last", uniform(r, &[2, 5], -2.0, 2.0), Box::new(move |g, x| {
            let y = g.softmax(x, 1)?;
            weighted(g, y, ws)
        })),
        ("softmax_inner", uniform(r, &[2, 3, 4], -2.0, 2.0), Box::new(move |g, x| {
            let y = g.softmax(x, 1)?;
            weighted(g, y, ws)
        })),
        ("layer_norm", uniform(r, &[3, 4], -1.0, 1.0), {
            let (gamma, beta) = (gamma.clone(), beta.clone());
            Box::new(move |g, x| {
                let (a, b) = (g.variable(gamma.clone())?, g.variable(beta.clone())?);
                let y = g.layer_norm(x, a, b)?;
                weighted(g, y, ws)
            })
        }),
        ("layer_norm_gain", gamma.clone(), Box::new(move |g, x| {
            let xi = g.input(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.91).cos()))?;
            let b = g.input(Tensor::zeros(&[4]))?;
            let y = g.layer_norm(xi, x, b)?;
            weighted(g, y, ws)
        })),
        ("batch_norm", uniform(r, &[2, 4, 2, 2], -1.0, 1.0), {
            let (gamma, beta) = (gamma.clone(), beta.clone());
            Box::new(move |g, x| {
                let (a, b) = (g.variable(gamma.clone())?, g.variable(beta.clone())?);
                let y = g.batch_norm(x, a, b, &mean, &var)?;
                weighted(g, y, ws)
            })
        }),
        ("reshape_permute", uniform(r, &[2, 3, 4], -1.0, 1.0), Box::new(move |g, x| {
            let y = g.reshape(x, &[6, 4])?;
            let y = g.reshape(y, &[2, 3, 2, 2])?;
            let y = g.permute(y, &[3, 0, 2, 1])?;
            let y = g.mul(y, y)?;
            weighted(g, y, ws)
        })),
        ("select", uniform(r, &[3, 5], -1.0, 1.0), Box::new(move |g, x| {
            let y = g.select(x, &[4, 0, 0, 2])?;
            let y = g.mul(y, y)?;
            weighted(g, y, ws)
        })),
        ("embedding", table, Box::new(move |g, x| {
            let y = g.embedding(x, &[1, 4, 1, 0])?;
            let y = g.mul(y, y)?;
            weighted(g, y, ws)
        })),
        ("conv3x3", uniform(r, &[1, 3, 5, 4], -1.0, 1.0), {
            let (w, b) = (conv_w.clone(), conv_b.clone());
            Box::new(move |g, x| {
                let (w, b) = (g.variable(w.clone())?, g.variable(b.clone())?);
                let y = g.conv3x3(x, w, b)?;
                weighted(g, y, ws)
            })
        }),
        ("conv3x3_weight", conv_w, Box::new(move |g, x| {
            let xi = g.input(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.53).sin()))?;
            let b = g.input(Tensor::zeros(&[2]))?;
            let y = g.conv3x3(xi, x, b)?;
            weighted(g, y, ws)
        })),
        ("max_pool2", Tensor::from_fn(&[1, 2, 5, 4], |i| ((i * 37 % 40) as f64) * 0.05 - 1.0), Box::new(move |g, x| {
            let y = g.max_pool2(x)?;
            weighted(g, y, ws)
        })),
        ("sum_mean", uniform(r, &[7], -1.0, 1.0), Box::new(move |g, x| {
            let y = g.mul(x, x)?;
            let a = g.sum(y)?;
            let b = g.mean(x)?;
            let s = g.add(a, b)?;
            g.mul(s, s)
        })),
        ("cross_entropy", uniform(r, &[3, 2, VOCAB_SIZE.min(7)], -2.0, 2.0), Box::new(move |g, x| {
            g.cross_entropy(x, &[0, 6, 3, 2, 1, 5], &[true, true, false, true, true, true])
        })),
        ("attention", uniform(r, &[2, 3, 6], -1.0, 1.0), {
            let kv = kv.clone();
            Box::new(move |g, x| {
                let k = g.variable(kv.clone())?;
                let y = scaled_dot_product(g, x, k, k, 2, None, MacTag::ScoreX)?;
                weighted(g, y, ws)
            })
        }),
        ("attention_masked", uniform(r, &[2, 4, 6], -1.0, 1.0), Box::new(move |g, x| {
            let mask = causal_mask(g, 4)?;
            let y = scaled_dot_product(g, x, x, x, 3, Some(mask), MacTag::ScoreY)?;
            weighted(g, y, ws)
        })),
        ("stn_loss", uniform(r, &[2, 35], -1.0, 1.0), Box::new(move |g, x| stn_loss_case(g, x))),
    ];
    cases
        .into_iter()
        .map(|(name, x, f)| Ok(OpCheck::new(name, finite_diff_check(|g, v| f(g, v), &x, H)?)))
        .collect()
}

fn stn_loss_case(g: &mut Graph<f64>, x: Var) -> Result<Var> {
    let truth = SegmentModel {
        legendre: crate::geometry::LegendreCoeffs {
            psi: [0.1, -0.2, 0.05, 0.0, 0.02],
        },
        segments: crate::stn::identity_model(10)?.segments,
    };
    crate::stn::stn_loss_graph(g, x, &[truth.clone(), truth], &LossWeights::default(), 10)
}

/// A toy model in f64 with a random (not zero) classifier, so every
/// parameter receives a gradient, and a two-sample batch on a textured
/// background (all-zero patches sit where layer norm is degenerate).
pub fn gradcheck_fixture(variant: Variant, seed: u64) -> Result<(ModelConfig, ParamStore<f64>, Tensor<f64>, Vec<String>)> {
    let cfg = ModelConfig::toy(variant);
    let mut s = init_model::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1a55);
    let d = cfg.decoder.width;
    s.set("dec.out.weight", xavier_uniform(&mut rng, &[d, VOCAB_SIZE], d, VOCAB_SIZE))?;
    let tc = ToyConfig::default();
    let texts = ["R2d", "Ok"];
    let inputs = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let d = Distortion::Sine {
                amplitude: 0.15,
                period: 3.0,
                phase: i as f64,
            };
            let smp = render_sample(t, &tc, 6 + 3 * i, 4, d)?;
            let img = GrayImage::from_fn(smp.image.height(), smp.image.width(), |y, x| {
                0.15 + 0.7 * smp.image.get(y, x) + 0.1 * ((y * 31 + x * 17 + i * 7) % 13) as f32 / 13.0
            });
            model_input::<f64>(&cfg, &img, &Rectifier::Boxes(&smp.boxes))
        })
        .collect::<Result<Vec<_>>>()?;
    let x = stack(&inputs.iter().collect::<Vec<_>>())?;
    Ok((cfg, s, x, texts.iter().map(|t| t.to_string()).collect()))
}

/// Checks `per_tensor` random coordinates of every trainable tensor of the
/// full teacher-forced loss.
pub fn gradcheck_model(variant: Variant, seed: u64, per_tensor: usize) -> Result<OpCheck> {
    let (cfg, s, x, texts) = gradcheck_fixture(variant, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords = Vec::new();
    for name in s.trainable_names() {
        let n = s.get(&name).expect("listed").numel();
        for _ in 0..per_tensor.min(n) {
            coords.push((name.clone(), rng.gen_range(0..n)));
        }
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let f = |g: &mut Graph<f64>, p: &ParamStore<f64>| {
        let xv = g.input(x.clone())?;
        model_loss(g, p, &cfg, xv, &refs)
    };
    let r = finite_diff_check_params(f, &s, &coords, H)?;
    Ok(OpCheck::new(&format!("model.{variant}"), r))
}

/// Every op plus the full toy portmanteau loss.
pub fn gradcheck_all(seed: u64) -> Result<Vec<OpCheck>> {
    let mut out = gradcheck_ops(seed)?;
    out.push(gradcheck_model(Variant::Port, seed, 3)?);
    Ok(out)
}

/// Mean |w| on label-matched and label-mismatched entries of one BMI weight.
#[derive(Clone, Debug, Serialize)]
pub struct BmiLayerStats {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub matched_mean_abs: f64,
    pub mismatched_mean_abs: f64,
}

impl BmiLayerStats {
    /// Mismatched over matched mean magnitude; 0 at initialisation.
    pub fn ratio(&self) -> f64 {
        self.mismatched_mean_abs / self.matched_mean_abs
    }
}

/// Statistics of every BMI-labelled weight matrix of a portmanteau model.
pub fn bmi_report<T: Element>(s: &ParamStore<T>, cfg: &ModelConfig) -> Result<Vec<BmiLayerStats>> {
    let mut out = Vec::new();
    for (name, t) in s.iter() {
        if t.rank() != 2 || !name.ends_with(".weight") {
            continue;
        }
        let Some((rows, cols)) = param_labels(name, &cfg.port, &cfg.encoder)? else {
            continue;
        };
        let (matched, mismatched) = bmi_block_means(t, &rows, &cols);
        out.push(BmiLayerStats {
            name: name.to_string(),
            rows: t.shape()[0],
            cols: t.shape()[1],
            matched_mean_abs: matched,
            mismatched_mean_abs: mismatched,
        });
    }
    Ok(out)
}

pub fn bmi_report_csv(stats: &[BmiLayerStats]) -> String {
    let mut out = String::from("layer,rows,cols,matched_mean_abs,mismatched_mean_abs,ratio\n");
    for s in stats {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.name,
            s.rows,
            s.cols,
            s.matched_mean_abs,
            s.mismatched_mean_abs,
            s.ratio()
        ));
    }
    out
}

/// `|w|` grid of one weight matrix as CSV, one matrix row per line.
pub fn abs_grid_csv<T: Element>(t: &Tensor<T>) -> String {
    let cols = t.shape()[1];
    let mut out = String::new();
    for row in t.data().chunks(cols) {
        let line: Vec<String> = row.iter().map(|v| v.to_f64_lossy().abs().to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
