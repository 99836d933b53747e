//! Vocabulary, the masked autoregressive decoder with cross-attention to
//! the encoder memory, greedy decoding and the case-insensitive
//! alphanumeric evaluation protocol.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    causal_mask, init_attention, init_linear_block, init_norm, linear_block, multi_head_attention, norm, sinusoid_table,
    NormMode,
};
use crate::error::{Error, Result};
use crate::portmanteau::linear;
use crate::tensor::{c, xavier_uniform, Element, Graph, MacTag, ParamStore, Tensor, Var};

pub const VOCAB_SIZE: usize = 100;
pub const START: usize = 97;
pub const END: usize = 98;
pub const PAD: usize = 99;
pub const MAX_DECODE_LEN: usize = 30;

const PUNCTUATION: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~ €£";

/// Token table.
///
/// | index  | tokens                 |
/// |--------|------------------------|
/// | 0..10  | `0`-`9`                |
/// | 10..36 | `a`-`z`                |
/// | 36..62 | `A`-`Z`                |
/// | 62..97 | ASCII punctuation, space, `€`, `£` |
/// | 97     | START                  |
/// | 98     | END                    |
/// | 99     | PAD                    |
#[derive(Debug)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl Vocabulary {
    pub fn get() -> &'static Vocabulary {
        static V: OnceLock<Vocabulary> = OnceLock::new();
        V.get_or_init(|| {
            let chars: Vec<char> = ('0'..='9').chain('a'..='z').chain('A'..='Z').chain(PUNCTUATION.chars()).collect();
            let index = chars.iter().enumerate().map(|(i, &ch)| (ch, i)).collect();
            Vocabulary { chars, index }
        })
    }

    pub fn len(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.index.get(&ch).copied()
    }

    /// Printable character of a token; `None` for START, END and PAD.
    pub fn char_of(&self, token: usize) -> Option<char> {
        self.chars.get(token).copied()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|ch| {
                self.index_of(ch)
                    .ok_or_else(|| Error::Contract(format!("character {ch:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Text of a token stream up to the first END; START and PAD are skipped.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .take_while(|&&t| t != END)
            .filter_map(|&t| self.char_of(t))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Model width; must equal the encoder memory width.
    pub width: usize,
    pub heads: usize,
    pub inner: usize,
    pub norm_mode: NormMode,
}

impl DecoderConfig {
    pub fn reference() -> Self {
        Self {
            layers: 4,
            width: 768,
            heads: 16,
            inner: 2048,
            norm_mode: NormMode::Standard,
        }
    }

    pub fn toy() -> Self {
        Self {
            layers: 1,
            width: 128,
            heads: 8,
            inner: 256,
            norm_mode: NormMode::Standard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.inner == 0 {
            return Err(Error::Config(format!("degenerate decoder {self:?}")));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        Ok(())
    }
}

/// Inserts `dec.embed`, `dec.l{i}.*` and a zero-initialised `dec.out`
/// classifier, so a fresh decoder predicts the uniform distribution.
pub fn init_decoder<T: Element>(s: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &DecoderConfig) -> Result<()> {
    cfg.validate()?;
    let d = cfg.width;
    s.insert("dec.embed", xavier_uniform(rng, &[VOCAB_SIZE, d], VOCAB_SIZE, d))?;
    for i in 0..cfg.layers {
        let p = format!("dec.l{i}");
        init_attention(s, rng, &format!("{p}.self"), d, None)?;
        init_norm(s, &format!("{p}.norm1"), d)?;
        init_attention(s, rng, &format!("{p}.cross"), d, None)?;
        init_norm(s, &format!("{p}.norm2"), d)?;
        init_linear_block(s, rng, &format!("{p}.lb"), d, cfg.inner, None)?;
        init_norm(s, &format!("{p}.norm3"), d)?;
    }
    s.insert("dec.out.weight", Tensor::zeros(&[d, VOCAB_SIZE]))?;
    s.insert("dec.out.bias", Tensor::zeros(&[VOCAB_SIZE]))
}

/// One post-norm decoder layer: masked self-attention, cross-attention to
/// `memory`, linear block.
pub fn decoder_layer<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    p: &str,
    x: Var,
    memory: Var,
    heads: usize,
    mask: Var,
    mode: NormMode,
) -> Result<Var> {
    let (sx, sm) = (g.shape(x).to_vec(), g.shape(memory).to_vec());
    if sx.len() != 3 || sm.len() != 3 || sx[2] != sm[2] || sx[0] != sm[0] {
        return Err(Error::shape("decoder_layer", &sx, &sm));
    }
    let a = multi_head_attention(g, s, &format!("{p}.self"), x, x, heads, Some(mask), MacTag::Other)?;
    let x = g.add(x, a)?;
    let x = norm(g, s, &format!("{p}.norm1"), x, mode)?;
    let a = multi_head_attention(g, s, &format!("{p}.cross"), x, memory, heads, None, MacTag::Other)?;
    let x = g.add(x, a)?;
    let x = norm(g, s, &format!("{p}.norm2"), x, mode)?;
    let f = linear_block(g, s, &format!("{p}.lb"), x)?;
    let x = g.add(x, f)?;
    norm(g, s, &format!("{p}.norm3"), x, mode)
}

/// `√D·embed(tokens) + PE`, for `B` equal-length token rows.
pub fn embed_tokens<T: Element>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &DecoderConfig, tokens: &[Vec<usize>]) -> Result<Var> {
    let b = tokens.len();
    let t = tokens.first().map_or(0, Vec::len);
    if b == 0 || t == 0 || tokens.iter().any(|r| r.len() != t) {
        return Err(Error::Contract("token rows must be non-empty and of equal length".into()));
    }
    let d = cfg.width;
    let table = g.param(s, "dec.embed")?;
    let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
    let e = g.embedding(table, &ids)?;
    let e = g.scale(e, (d as f64).sqrt())?;
    let e = g.reshape(e, &[b, t, d])?;
    let pe = sinusoid_table(t, d);
    let pe = g.input(Tensor::from_fn(&[t, d], |i| c(pe[i])))?;
    g.add(e, pe)
}

/// Logits `[B, T, 100]` for token rows `[B][T]` against `memory: [B, N, D]`.
pub fn decoder_forward<T: Element>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &DecoderConfig,
    tokens: &[Vec<usize>],
    memory: Var,
) -> Result<Var> {
    let sm = g.shape(memory).to_vec();
    if sm.len() != 3 || sm[2] != cfg.width || sm[0] != tokens.len() {
        return Err(Error::shape("decoder_forward", &sm, &[tokens.len(), 0, cfg.width]));
    }
    let mut x = embed_tokens(g, s, cfg, tokens)?;
    let mask = causal_mask(g, tokens[0].len())?;
    for i in 0..cfg.layers {
        x = decoder_layer(g, s, &format!("dec.l{i}"), x, memory, cfg.heads, mask, cfg.norm_mode)?;
    }
    linear(g, s, "dec.out", x, MacTag::Other)
}

/// Teacher-forcing inputs and targets for a batch of transcriptions:
/// inputs `START c1..cn PAD..`, targets `c1..cn END PAD..`, and the mask of
/// non-PAD targets.
pub fn teacher_forcing(texts: &[&str]) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<bool>)> {
    let v = Vocabulary::get();
    let enc: Vec<Vec<usize>> = texts.iter().map(|t| v.encode(t)).collect::<Result<_>>()?;
    let t = enc.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let (mut inputs, mut targets, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for e in &enc {
        let mut row = vec![START];
        row.extend(e);
        row.resize(t, PAD);
        inputs.push(row);
        for k in 0..t {
            let tgt = match k.cmp(&e.len()) {
                std::cmp::Ordering::Less => e[k],
                std::cmp::Ordering::Equal => END,
                std::cmp::Ordering::Greater => PAD,
            };
            targets.push(tgt);
            valid.push(tgt != PAD);
        }
    }
    Ok((inputs, targets, valid))
}

/// Result of greedy decoding for one memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub text: String,
    /// START followed by every emitted token, END included when emitted.
    pub tokens: Vec<usize>,
    /// Number of emitted tokens.
    pub steps: usize,
    /// Logits of every step.
    #[serde(skip)]
    pub logits: Vec<Vec<f64>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding of a batch `memory: [B, N, D]`: every row starts at
/// START and takes the argmax token (lowest index on ties) until END or
/// `max_len` emitted tokens.
pub fn decode_greedy<T: Element>(s: &ParamStore<T>, cfg: &DecoderConfig, memory: &Tensor<T>, max_len: usize) -> Result<Vec<Decoded>> {
    let b = memory.shape()[0];
    let mut rows: Vec<Vec<usize>> = vec![vec![START]; b];
    let mut done = vec![false; b];
    let mut logits: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let active: Vec<usize> = (0..b).filter(|&i| !done[i]).collect();
        let n = memory.numel() / b;
        let sub = Tensor::new(
            [vec![active.len()], memory.shape()[1..].to_vec()].concat(),
            active.iter().flat_map(|&i| memory.data()[i * n..(i + 1) * n].iter().copied()).collect(),
        )?;
        let toks: Vec<Vec<usize>> = active.iter().map(|&i| rows[i].clone()).collect();
        let mut g = Graph::new();
        let m = g.input(sub)?;
        let out = decoder_forward(&mut g, s, cfg, &toks, m)?;
        let out = g.value(out);
        let t = toks[0].len();
        for (k, &i) in active.iter().enumerate() {
            let off = (k * t + t - 1) * VOCAB_SIZE;
            let row: Vec<f64> = out.data()[off..off + VOCAB_SIZE].iter().map(|v| v.to_f64_lossy()).collect();
            let tok = argmax(&row);
            logits[i].push(row);
            rows[i].push(tok);
            if tok == END {
                done[i] = true;
            }
        }
    }
    let v = Vocabulary::get();
    Ok(rows
        .into_iter()
        .zip(logits)
        .map(|(tokens, logits)| Decoded {
            text: v.decode(&tokens[1..]),
            steps: tokens.len() - 1,
            tokens,
            logits,
        })
        .collect())
}

/// Lower-cased alphanumerics only.
pub fn normalize_37(s: &str) -> String {
    s.chars().filter(char::is_ascii_alphanumeric).map(|c| c.to_ascii_lowercase()).collect()
}

/// Fraction of exact matches after [`normalize_37`] on both sides.
pub fn evaluate_accuracy<S: AsRef<str>>(preds: &[S], truths: &[S]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("accuracy of an empty list".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!("{} predictions for {} truths", preds.len(), truths.len())));
    }
    let ok = preds
        .iter()
        .zip(truths)
        .filter(|(p, t)| normalize_37(p.as_ref()) == normalize_37(t.as_ref()))
        .count();
    Ok(ok as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> DecoderConfig {
        DecoderConfig {
            layers: 2,
            width: 16,
            heads: 4,
            inner: 32,
            norm_mode: NormMode::Standard,
        }
    }

    fn store(cfg: &DecoderConfig, seed: u64) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        init_decoder(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), cfg).unwrap();
        s
    }

    fn memory(b: usize, n: usize, d: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, n, d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn vocabulary_table() {
        let v = Vocabulary::get();
        assert_eq!(v.chars.len(), 97);
        assert_eq!(v.index.len(), 97);
        assert_eq!(v.index_of('0'), Some(0));
        assert_eq!(v.index_of('a'), Some(10));
        assert_eq!(v.index_of('A'), Some(36));
        assert_eq!(v.index_of('£'), Some(96));
        assert_eq!(v.char_of(START), None);
        assert_eq!(v.decode(&v.encode("It's 5€").unwrap()), "It's 5€");
        assert!(v.encode("é").is_err());
    }

    #[test]
    fn accuracy_protocol() {
        assert_eq!(evaluate_accuracy(&["LASER"], &["laser"]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&["it's"], &["its"]).unwrap(), 1.0);
        assert_eq!(evaluate_accuracy(&["CASER"], &["LASER"]).unwrap(), 0.0);
        assert_eq!(evaluate_accuracy(&["a", "b"], &["a", "c"]).unwrap(), 0.5);
        assert!(evaluate_accuracy::<&str>(&[], &[]).is_err());
        assert!(evaluate_accuracy(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn uniform_classifier_loss_is_ln_100() {
        let cfg = small();
        let s = store(&cfg, 1);
        let (inp, tgt, valid) = teacher_forcing(&["ab1", "Z"]).unwrap();
        let mut g = Graph::new();
        let m = g.input(memory(2, 5, 16, 2)).unwrap();
        let logits = decoder_forward(&mut g, &s, &cfg, &inp, m).unwrap();
        let loss = g.cross_entropy(logits, &tgt, &valid).unwrap();
        assert!((g.value(loss).data()[0] as f64 - 100f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn teacher_forcing_layout() {
        let (inp, tgt, valid) = teacher_forcing(&["ab", "c"]).unwrap();
        assert_eq!(inp, vec![vec![START, 10, 11], vec![START, 12, PAD]]);
        assert_eq!(tgt, vec![10, 11, END, 12, END, PAD]);
        assert_eq!(valid, vec![true, true, true, true, true, false]);
    }

    #[test]
    fn causality() {
        let cfg = small();
        let mut s = store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Tensor::from_fn(&[16, VOCAB_SIZE], |_| rng.gen_range(-1.0..1.0));
        s.set("dec.out.weight", w).unwrap();
        let mem = memory(1, 6, 16, 5);
        let run = |toks: Vec<usize>| {
            let mut g = Graph::new();
            let m = g.input(mem.clone()).unwrap();
            let l = decoder_forward(&mut g, &s, &cfg, &[toks], m).unwrap();
            g.value(l).clone()
        };
        let base: Vec<usize> = (0..10).map(|i| (i * 7) % 97).collect();
        let a = run(base.clone());
        let mut changed = base;
        for tok in changed.iter_mut().skip(5) {
            *tok = (*tok + 31) % 97;
        }
        let b = run(changed);
        let cut = 5 * VOCAB_SIZE;
        let diff = a.data()[..cut].iter().zip(&b.data()[..cut]).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff <= 1e-6, "{diff}");
        assert!(a.data()[cut..] != b.data()[cut..]);
    }

    #[test]
    fn zero_layers_identity_norm_pass_embedding_through() {
        let cfg = DecoderConfig {
            norm_mode: NormMode::Identity,
            ..small()
        };
        let mut s = store(&cfg, 6);
        let names: Vec<String> = s.names().filter(|n| n.starts_with("dec.l")).map(String::from).collect();
        for n in names {
            let shape = s.get(&n).unwrap().shape().to_vec();
            s.set(&n, Tensor::zeros(&shape)).unwrap();
        }
        let toks = vec![vec![START, 3, 4]];
        let mut g = Graph::new();
        let e = embed_tokens(&mut g, &s, &cfg, &toks).unwrap();
        let m = g.input(memory(1, 4, 16, 7)).unwrap();
        let mask = causal_mask(&mut g, 3).unwrap();
        let y = decoder_layer(&mut g, &s, "dec.l0", e, m, 4, mask, NormMode::Identity).unwrap();
        assert_eq!(g.value(y).data(), g.value(e).data());
    }

    fn rig(s: &mut ParamStore<f32>, token: usize, width: usize) {
        let mut b = Tensor::zeros(&[VOCAB_SIZE]);
        b.data_mut()[token] = 10.0;
        s.set("dec.out.bias", b).unwrap();
        s.set("dec.out.weight", Tensor::zeros(&[width, VOCAB_SIZE])).unwrap();
    }

    #[test]
    fn rigged_end_stops_after_one_token() {
        let cfg = small();
        let mut s = store(&cfg, 8);
        rig(&mut s, END, 16);
        let d = decode_greedy(&s, &cfg, &memory(2, 4, 16, 9), MAX_DECODE_LEN).unwrap();
        for r in d {
            assert_eq!(r.text, "");
            assert_eq!(r.steps, 1);
            assert_eq!(r.tokens, vec![START, END]);
        }
    }

    #[test]
    fn never_end_caps_at_thirty() {
        let cfg = small();
        let mut s = store(&cfg, 10);
        rig(&mut s, 12, 16);
        let d = decode_greedy(&s, &cfg, &memory(1, 4, 16, 11), MAX_DECODE_LEN).unwrap();
        assert_eq!(d[0].steps, 30);
        assert_eq!(d[0].text, "c".repeat(30));
        for row in &d[0].logits {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_decoder_ties_break_to_lowest_index() {
        let cfg = small();
        let s = store(&cfg, 12);
        let d = decode_greedy(&s, &cfg, &memory(1, 4, 16, 13), 3).unwrap();
        assert_eq!(d[0].tokens, vec![START, 0, 0, 0]);
        assert_eq!(d[0].text, "000");
    }

    #[test]
    fn width_mismatch_errors() {
        let cfg = small();
        let s = store(&cfg, 14);
        let mut g = Graph::new();
        let m = g.input(memory(1, 4, 8, 15)).unwrap();
        assert!(decoder_forward(&mut g, &s, &cfg, &[vec![START]], m).is_err());
    }
}
