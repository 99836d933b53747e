//! Multi-head attention, the position-wise linear block, post-norm encoder
//! and decoder sublayers, and sinusoidal position encodings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::portmanteau::{init_linear, linear, HalfLabeling};
use crate::tensor::{c, xavier_uniform, Element, Graph, MacTag, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Layer normalisation with learned gain and bias.
    #[default]
    Standard,
    /// The norm is skipped entirely.
    Identity,
}

/// `[len, d]` sinusoidal table: `sin(pos / 10000^(2i/d))` at even columns,
/// `cos` at odd ones.
pub fn sinusoid_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

fn weight<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    name: String,
    rows: usize,
    cols: usize,
    labels: Option<(&HalfLabeling, &HalfLabeling)>,
) -> Result<()> {
    let w = match labels {
        Some((r, k)) => crate::portmanteau::bmi_init(r, k, rng)?,
        None => xavier_uniform(rng, &[rows, cols], rows, cols),
    };
    s.insert(name, w)
}

/// Parameters `{p}.q/.k/.v/.o.weight`, each `[d, d]`, no biases.
pub fn init_attention<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    p: &str,
    d: usize,
    labels: Option<&HalfLabeling>,
) -> Result<()> {
    for m in ["q", "k", "v", "o"] {
        weight(s, rng, format!("{p}.{m}.weight"), d, d, labels.map(|l| (l, l)))?;
    }
    Ok(())
}

fn split_heads<T: Element>(g: &mut Graph<T>, x: Var, h: usize, perm: &[usize]) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = g.reshape(x, &[b, n, h, d / h])?;
    g.permute(r, perm)
}

/// Scaled dot-product attention of `q_in: [B, T, D]` over `kv_in: [B, N, D]`
/// with `h` heads taken as contiguous column slices. `mask`, if given, is
/// added to the `[T, N]` score matrix of every head.
pub fn multi_head_attention<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    p: &str,
    q_in: Var,
    kv_in: Var,
    h: usize,
    mask: Option<Var>,
    tag: MacTag,
) -> Result<Var> {
    let sq = g.shape(q_in).to_vec();
    let sk = g.shape(kv_in).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let d = sq[2];
    if h == 0 || d % h != 0 {
        return Err(Error::Config(format!("{h} heads do not divide width {d}")));
    }
    let wq = g.param(s, &format!("{p}.q.weight"))?;
    let wk = g.param(s, &format!("{p}.k.weight"))?;
    let wv = g.param(s, &format!("{p}.v.weight"))?;
    let wo = g.param(s, &format!("{p}.o.weight"))?;
    let q = g.matmul_tagged(q_in, wq, MacTag::Projection)?;
    let k = g.matmul_tagged(kv_in, wk, MacTag::Projection)?;
    let v = g.matmul_tagged(kv_in, wv, MacTag::Projection)?;
    let o = scaled_dot_product(g, q, k, v, h, mask, tag)?;
    g.matmul_tagged(o, wo, MacTag::Projection)
}

/// `softmax(Q·Kᵀ / √(D/h) + mask)·V` per head on already projected
/// `q: [B, T, D]`, `k, v: [B, N, D]`.
pub fn scaled_dot_product<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    h: usize,
    mask: Option<Var>,
    tag: MacTag,
) -> Result<Var> {
    let sq = g.shape(q).to_vec();
    let (b, t, d) = (sq[0], sq[1], sq[2]);
    let q = split_heads(g, q, h, &[0, 2, 1, 3])?;
    let kt = split_heads(g, k, h, &[0, 2, 3, 1])?;
    let v = split_heads(g, v, h, &[0, 2, 1, 3])?;
    let scores = g.matmul_tagged(q, kt, tag)?;
    let mut scores = g.scale(scores, 1.0 / ((d / h) as f64).sqrt())?;
    if let Some(m) = mask {
        scores = g.add(scores, m)?;
    }
    let att = g.softmax(scores, 3)?;
    let o = g.matmul_tagged(att, v, tag)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    g.reshape(o, &[b, t, d])
}

/// Causal mask `[t, t]`: 0 on and below the diagonal, -1e9 above.
pub fn causal_mask<T: Element>(g: &mut Graph<T>, t: usize) -> Result<Var> {
    g.input(Tensor::from_fn(&[t, t], |i| if i % t > i / t { c(-1e9) } else { T::zero() }))
}

/// `{p}.fc1` `[d, inner]` and `{p}.fc2` `[inner, d]`.
pub fn init_linear_block<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    p: &str,
    d: usize,
    inner: usize,
    labels: Option<(&HalfLabeling, &HalfLabeling)>,
) -> Result<()> {
    init_linear(s, rng, &format!("{p}.fc1"), (d, inner), labels)?;
    init_linear(s, rng, &format!("{p}.fc2"), (inner, d), labels.map(|(a, b)| (b, a)))
}

/// `max(0, x·A1 + b1)·A2 + b2`.
pub fn linear_block<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, p: &str, x: Var) -> Result<Var> {
    let h = linear(g, s, &format!("{p}.fc1"), x, MacTag::Other)?;
    let h = g.relu(h)?;
    linear(g, s, &format!("{p}.fc2"), h, MacTag::Other)
}

pub fn init_norm<T: Element>(s: &mut ParamStore<T>, p: &str, d: usize) -> Result<()> {
    s.insert(format!("{p}.weight"), Tensor::full(&[d], T::one()))?;
    s.insert(format!("{p}.bias"), Tensor::zeros(&[d]))
}

pub fn norm<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, p: &str, x: Var, mode: NormMode) -> Result<Var> {
    match mode {
        NormMode::Identity => Ok(x),
        NormMode::Standard => {
            let gain = g.param(s, &format!("{p}.weight"))?;
            let bias = g.param(s, &format!("{p}.bias"))?;
            g.layer_norm(x, gain, bias)
        }
    }
}

/// Shape of one encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerDims {
    pub d: usize,
    pub heads: usize,
    pub inner: usize,
}

/// Labelings for one encoder layer: model width and inner width.
pub type LayerLabels = (HalfLabeling, HalfLabeling);

pub fn init_encoder_layer<T: Element>(
    s: &mut ParamStore<T>,
    rng: &mut impl Rng,
    p: &str,
    dims: LayerDims,
    labels: Option<&LayerLabels>,
) -> Result<()> {
    init_attention(s, rng, &format!("{p}.attn"), dims.d, labels.map(|l| &l.0))?;
    init_norm(s, &format!("{p}.norm1"), dims.d)?;
    init_linear_block(s, rng, &format!("{p}.lb"), dims.d, dims.inner, labels.map(|l| (&l.0, &l.1)))?;
    init_norm(s, &format!("{p}.norm2"), dims.d)
}

/// Post-norm encoder layer over `[B, N, D]` sequences.
pub fn encoder_layer<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    p: &str,
    x: Var,
    heads: usize,
    mode: NormMode,
    tag: MacTag,
) -> Result<Var> {
    let a = multi_head_attention(g, s, &format!("{p}.attn"), x, x, heads, None, tag)?;
    let x = g.add(x, a)?;
    let x = norm(g, s, &format!("{p}.norm1"), x, mode)?;
    let f = linear_block(g, s, &format!("{p}.lb"), x)?;
    let x = g.add(x, f)?;
    norm(g, s, &format!("{p}.norm2"), x, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portmanteau::Half;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_attention(d: usize) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for m in ["q", "k", "v", "o"] {
            s.insert(format!("a.{m}.weight"), Tensor::identity(d)).unwrap();
        }
        s
    }

    #[test]
    fn single_position_returns_value_row() {
        let s = identity_attention(3);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 1, 3], vec![0.3, -1.0, 2.0]).unwrap()).unwrap();
        let y = multi_head_attention(&mut g, &s, "a", x, x, 1, None, MacTag::ScoreX).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.0, 2.0]);
    }

    #[test]
    fn uniform_keys_average_values() {
        let mut s = identity_attention(2);
        s.set("a.k.weight", Tensor::zeros(&[2, 2])).unwrap();
        let mut g = Graph::new();
        let q = g.input(Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap()).unwrap();
        let kv = g
            .input(Tensor::new(vec![1, 4, 2], vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 7.0, 6.0]).unwrap())
            .unwrap();
        let y = multi_head_attention(&mut g, &s, "a", q, kv, 2, None, MacTag::ScoreX).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 4.0).abs() < 1e-12 && (out[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_width() {
        let s = identity_attention(3);
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(multi_head_attention(&mut g, &s, "a", x, x, 2, None, MacTag::ScoreX).is_err());
    }

    fn perturbation_check(f: impl Fn(&mut Graph<f64>, Var) -> Var, d: usize, protect: Half, labels: &HalfLabeling) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Tensor::from_fn(&[1, 5, d], |_| rng.gen_range(-1.0..1.0));
        let mut changed = base.clone();
        for (i, v) in changed.data_mut().iter_mut().enumerate() {
            if labels.get(i % d) != protect {
                *v += rng.gen_range(-1.0..1.0);
            }
        }
        let run = |t: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.input(t).unwrap();
            let y = f(&mut g, x);
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(changed));
        let mut differs = false;
        for (i, (u, v)) in a.data().iter().zip(b.data()).enumerate() {
            if labels.get(i % d) == protect {
                assert_eq!(u.to_bits(), v.to_bits());
            } else {
                differs |= u != v;
            }
        }
        assert!(differs);
    }

    #[test]
    fn bmi_head_ignores_other_half() {
        let l = HalfLabeling::grouped(8).unwrap();
        let mut s = ParamStore::new();
        init_attention(&mut s, &mut ChaCha8Rng::seed_from_u64(1), "a", 8, Some(&l)).unwrap();
        perturbation_check(
            |g, x| multi_head_attention(g, &s, "a", x, x, 2, None, MacTag::ScoreX).unwrap(),
            8,
            Half::P,
            &l,
        );
    }

    #[test]
    fn linear_block_contracts() {
        let l = HalfLabeling::grouped(6).unwrap();
        let inner = HalfLabeling::grouped(10).unwrap();
        let mut s = ParamStore::new();
        init_linear_block(&mut s, &mut ChaCha8Rng::seed_from_u64(2), "lb", 6, 10, Some((&l, &inner))).unwrap();
        perturbation_check(|g, x| linear_block(g, &s, "lb", x).unwrap(), 6, Half::R, &l);

        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 6])).unwrap();
        let y = linear_block(&mut g, &s, "lb", x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let mut s2 = s.clone();
        s2.set("lb.fc1.bias", Tensor::full(&[10], -100.0)).unwrap();
        s2.set("lb.fc2.bias", Tensor::from_fn(&[6], |i| i as f64)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 6], 0.5)).unwrap();
        let y = linear_block(&mut g, &s2, "lb", x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn causal_mask_layout() {
        let mut g = Graph::<f64>::new();
        let m = causal_mask(&mut g, 3).unwrap();
        assert_eq!(g.value(m).data(), &[0.0, -1e9, -1e9, 0.0, 0.0, -1e9, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sinusoid_basics() {
        let t = sinusoid_table(4, 6);
        assert!((0..6).step_by(2).all(|i| t[i] == 0.0));
        assert!((1..6).step_by(2).all(|i| t[i] == 1.0));
        assert!(t[6..12] != t[12..18]);
    }

    #[test]
    fn zero_layer_with_identity_norm_is_identity() {
        let mut s = ParamStore::<f64>::new();
        let dims = LayerDims { d: 4, heads: 2, inner: 8 };
        init_encoder_layer(&mut s, &mut ChaCha8Rng::seed_from_u64(0), "e", dims, None).unwrap();
        for n in s.trainable_names() {
            s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut g = Graph::new();
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1);
        let x = g.input(t.clone()).unwrap();
        let y = encoder_layer(&mut g, &s, "e", x, 2, NormMode::Identity, MacTag::ScoreX).unwrap();
        assert_eq!(g.value(y), &t);
    }
}
