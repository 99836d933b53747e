//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line
//! straight to stderr (visible without `--nocapture`); the test fails if
//! any criterion does.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use portmanteau_core::attention::NormMode;
use portmanteau_core::bench::{fit_scaling_exponent, scaling_series, Term};
use portmanteau_core::data::{generate_dataset, DistortionKind, ToyConfig};
use portmanteau_core::davit::{
    closed_form_macs, count_attention_macs, encode, half_port, init_encoder, param_labels, split_half, AttentionMode,
    AttentionShape, EncoderConfig,
};
use portmanteau_core::decoder::{decode_greedy, decoder_forward, init_decoder, DecoderConfig, MAX_DECODE_LEN, VOCAB_SIZE};
use portmanteau_core::diagnostics::{bmi_report, gradcheck_all, GRADCHECK_TOLERANCE};
use portmanteau_core::geometry::{
    build_tps, extract_key_points, fit_center_polynomial, geometry_from_boxes, legendre_distance_study,
    legendre_l2_distance_sq, legendre_to_monomial, monomial_to_legendre, segments_to_control_points, Point,
    DEFAULT_SEGMENTS,
};
use portmanteau_core::model::{init_model, model_input, model_loss, stack, ModelConfig, Rectifier, Variant};
use portmanteau_core::optim::{LrSchedule, ScheduleMode};
use portmanteau_core::portmanteau::{
    bmi_init, init_projection, linear_projection, projection_labels, sub_block, Half, HalfLabeling, PortConfig,
};
use portmanteau_core::stn::{decode_output, init_localizer, localizer_forward, LocalizerConfig};
use portmanteau_core::tensor::{Element, Graph, ParamStore, Tensor};
use portmanteau_core::train::{train, TrainConfig};

type Outcome = Result<String, String>;

fn report(id: usize, name: &str, t0: Instant, r: &Outcome) {
    let secs = t0.elapsed().as_secs_f64();
    let line = match r {
        Ok(detail) => format!("PASS [{id:>2}] {name} ({secs:.1}s): {detail}"),
        Err(detail) => format!("FAIL [{id:>2}] {name} ({secs:.1}s): {detail}"),
    };
    let _ = writeln!(std::io::stderr(), "{line}");
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e(err: portmanteau_core::Error) -> String {
    err.to_string()
}

/// Every BMI weight of a preset with its row and column labelings.
fn bmi_layers(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, HalfLabeling, HalfLabeling)>, String> {
    let s = init_model::<f32>(cfg, 0).map_err(e)?;
    let mut out = Vec::new();
    for (name, t) in s.iter() {
        if t.rank() != 2 {
            continue;
        }
        if let Some((r, c)) = param_labels(name, &cfg.port, &cfg.encoder).map_err(e)? {
            out.push((name.to_string(), t.shape().to_vec(), r, c));
        }
    }
    Ok(out)
}

fn criterion_1() -> Outcome {
    let mut layers = bmi_layers(&ModelConfig::toy(Variant::Port))?;
    layers.extend(bmi_layers(&ModelConfig::reference(Variant::Port))?);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut compared = 0usize;
    for draw in 0..100 {
        let (name, shape, rows, cols) = &layers[draw % layers.len()];
        let w: Tensor<f64> = bmi_init(rows, cols, &mut rng).map_err(e)?;
        let b = Tensor::from_fn(&[shape[1]], |_| rng.gen_range(-0.5..0.5));
        let n = rng.gen_range(1..=6);
        let x = Tensor::from_fn(&[n, shape[0]], |_| rng.gen_range(-2.0..2.0));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.input(x.clone()).map_err(e)?, g.input(w.clone()).map_err(e)?, g.input(b.clone()).map_err(e)?);
        let y = g.matmul(xv, wv).map_err(e)?;
        let y = g.add(y, bv).map_err(e)?;
        let joint = g.value(y).clone();
        for h in [Half::P, Half::R] {
            let (ri, ci) = (rows.indices(h), cols.indices(h));
            let xh = Tensor::from_fn(&[n, ri.len()], |i| x.data()[(i / ri.len()) * shape[0] + ri[i % ri.len()]]);
            let wh = sub_block(&w, rows, cols, h, h);
            let bh = Tensor::from_fn(&[ci.len()], |i| b.data()[ci[i]]);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(xh).map_err(e)?, g.input(wh).map_err(e)?, g.input(bh).map_err(e)?);
            let yh = g.matmul(xv, wv).map_err(e)?;
            let yh = g.add(yh, bv).map_err(e)?;
            let yh = g.value(yh);
            for r in 0..n {
                for (k, &c) in ci.iter().enumerate() {
                    let (a, bb) = (joint.at(&[r, c]), yh.at(&[r, k]));
                    ensure(a.to_bits() == bb.to_bits(), || format!("draw {draw} {name} row {r} col {c}: {a:e} vs {bb:e}"))?;
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("100 draws over {} BMI layers, {compared} outputs bit-identical (f64)", layers.len()))
}

/// Max |joint − half| over the two half-encoders built from a BMI encoder.
fn separation_gap<T: Element>(port: &PortConfig, enc: &EncoderConfig, batch: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::<T>::new();
    let labels = projection_labels(port).map_err(e)?;
    let input_len = 2 * port.patch_len();
    init_projection(&mut s, &mut rng, "port", input_len, port.d_lp, port.d_y, Some(&labels)).map_err(e)?;
    init_encoder(&mut s, &mut rng, port, enc, true).map_err(e)?;
    let (nx, ny, dx) = (port.n_x(), port.n_y(), port.d_x());
    let x = Tensor::<T>::from_fn(&[batch, nx, ny, input_len], |_| T::from_f64_lossy(rng.gen_range(0.0..1.0)));
    let mut g = Graph::new();
    let xi = g.input(x.clone()).map_err(e)?;
    let f = linear_projection(&mut g, &s, "port", xi).map_err(e)?;
    let m = encode(&mut g, &s, port, enc, true, f).map_err(e)?;
    let joint = g.value(m).clone();
    drop(g);
    let (hp, he) = (half_port(port), enc.half().map_err(e)?);
    let lx = HalfLabeling::interleaved(port.d_y, ny).map_err(e)?;
    let half_len = port.patch_len();
    let mut worst = 0.0f64;
    for (half, offset) in [(Half::P, 0), (Half::R, half_len)] {
        let hs = split_half(&s, port, enc, half).map_err(e)?;
        let xh = Tensor::from_fn(&[batch, nx, ny, half_len], |i| x.data()[(i / half_len) * input_len + offset + i % half_len]);
        let mut g = Graph::new();
        let xi = g.input(xh).map_err(e)?;
        let f = linear_projection(&mut g, &hs, "port", xi).map_err(e)?;
        let m = encode(&mut g, &hs, &hp, &he, false, f).map_err(e)?;
        let out = g.value(m).data();
        let idx = lx.indices(half);
        for r in 0..batch * nx {
            for (k, &j) in idx.iter().enumerate() {
                let d = (joint.data()[r * dx + j].to_f64_lossy() - out[r * (dx / 2) + k].to_f64_lossy()).abs();
                worst = worst.max(d);
            }
        }
    }
    Ok(worst)
}

fn criterion_2() -> Outcome {
    let mut parts = Vec::new();
    for (preset, port, enc, batch) in [
        ("toy", PortConfig::toy(), EncoderConfig::toy(), 2),
        ("reference", PortConfig::reference(), EncoderConfig::reference(), 1),
    ] {
        let enc = EncoderConfig {
            norm_mode: NormMode::Identity,
            ..enc
        };
        let g64 = separation_gap::<f64>(&port, &enc, batch, 11)?;
        ensure(g64 <= 1e-10, || format!("{preset} f64 gap {g64:e} > 1e-10"))?;
        let g32 = separation_gap::<f32>(&port, &enc, batch, 11)?;
        ensure(g32 <= 1e-4, || format!("{preset} f32 gap {g32:e} > 1e-4"))?;
        parts.push(format!("{preset}: f64 {g64:.1e}, f32 {g32:.1e}"));
    }
    Ok(parts.join("; "))
}

fn criterion_3() -> Outcome {
    let cfg = ModelConfig::reference(Variant::Port);
    let s = init_model::<f32>(&cfg, 5).map_err(e)?;
    let checks = [
        (cfg.encoder.h_x, HalfLabeling::interleaved(96, 8).map_err(e)?, "x"),
        (cfg.encoder.h_y, HalfLabeling::grouped(96).map_err(e)?, "y"),
    ];
    for (heads, l, axis) in &checks {
        ensure(l.heads_are_pure(*heads), || format!("{axis} labeling is not head-pure for {heads} heads"))?;
    }
    let mut matrices = 0;
    let mut slices = 0;
    for (name, w) in s.iter() {
        if !name.starts_with("enc.") || !name.contains(".attn.") || !name.ends_with(".weight") {
            continue;
        }
        let (rows, cols) = param_labels(name, &cfg.port, &cfg.encoder).map_err(e)?.ok_or(format!("{name} has no labels"))?;
        let heads = if name.starts_with("enc.x") { cfg.encoder.h_x } else { cfg.encoder.h_y };
        let (nr, nc) = (w.shape()[0], w.shape()[1]);
        let slice = nc / heads;
        for h in 0..heads {
            let label = cols.get(h * slice);
            for c in h * slice..(h + 1) * slice {
                ensure(cols.get(c) == label, || format!("{name} head {h} mixes column labels"))?;
                for r in 0..nr {
                    let v = w.data()[r * nc + c];
                    ensure(rows.get(r) == label || v == 0.0, || format!("{name} head {h} reads row {r} of the other half"))?;
                }
            }
            slices += 1;
        }
        matrices += 1;
    }
    ensure(matrices == 4 * (cfg.encoder.l_x + cfg.encoder.l_y), || format!("found {matrices} attention matrices"))?;
    Ok(format!("{matrices} attention matrices, {slices} head slices single-labeled (h_x=16/D_x=768, h_y=2/D_y=96)"))
}

fn criterion_4() -> Outcome {
    let checks = gradcheck_all(1).map_err(e)?;
    let worst = checks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).ok_or("no checks")?;
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| format!("{} {:.2e}", c.name, c.max_rel_error)).collect();
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    let model = checks.last().ok_or("no model check")?;
    Ok(format!(
        "{} checks <= {GRADCHECK_TOLERANCE:e}; worst {} {:.2e}; {} {:.2e} over {} coords",
        checks.len(),
        worst.name,
        worst.max_rel_error,
        model.name,
        model.max_rel_error,
        model.checked
    ))
}

fn criterion_5() -> Outcome {
    let mut points = 0;
    for mode in AttentionMode::ALL {
        for n_x in [8, 16, 32] {
            for n_y in [2, 4, 8] {
                for d_x in [32, 64, 128] {
                    let shape = AttentionShape { n_x, n_y, d_x, l_y: 2 };
                    let m = count_attention_macs(&shape, mode, 0).map_err(e)?;
                    let cf = closed_form_macs(&shape, mode);
                    ensure(m.per_product == cf, || format!("{} {shape:?}: counted {} vs {cf}", mode.name(), m.per_product))?;
                    points += 1;
                }
            }
        }
    }
    let base = AttentionShape { n_x: 8, n_y: 4, d_x: 64, l_y: 2 };
    let n_xs = [8, 16, 32, 64, 128];
    let mut fits = Vec::new();
    for mode in AttentionMode::ALL {
        let (xs, ys) = scaling_series(mode, base, |s, v| AttentionShape { n_x: v, ..s }, &n_xs, Term::X).map_err(e)?;
        let k = fit_scaling_exponent(&xs, &ys).map_err(e)?;
        ensure((k - 2.0).abs() <= 0.05, || format!("{} N_x exponent {k:.4}", mode.name()))?;
        fits.push(format!("{} N_x^{k:.3}", mode.name()));
    }
    let (xs, ys) = scaling_series(AttentionMode::Davit, base, |s, v| AttentionShape { n_y: v, ..s }, &[1, 2, 4, 8, 16], Term::Y)
        .map_err(e)?;
    let k = fit_scaling_exponent(&xs, &ys).map_err(e)?;
    ensure((k - 1.0).abs() <= 0.05, || format!("davit y-term N_y exponent {k:.4}"))?;
    fits.push(format!("davit y N_y^{k:.3}"));
    let r = AttentionShape::reference();
    let davit = count_attention_macs(&r, AttentionMode::Davit, 0).map_err(e)?.per_product;
    let vit = count_attention_macs(&r, AttentionMode::Vit, 0).map_err(e)?.per_product;
    ensure(davit == 3_932_160 && vit == 201_326_592, || format!("reference davit {davit}, vit {vit}"))?;
    Ok(format!("{points} grid points exact; {}; reference davit {davit} vs vit {vit}", fits.join(", ")))
}

/// `∫₋₁¹ (f − g)²` by exact integration of monomials.
fn exact_l2_sq(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut total = 0.0;
    for (i, di) in d.iter().enumerate() {
        for (j, dj) in d.iter().enumerate() {
            if (i + j) % 2 == 0 {
                total += di * dj * 2.0 / (i + j + 1) as f64;
            }
        }
    }
    total
}

fn criterion_6() -> Outcome {
    let r = legendre_distance_study(20, 201, 7).map_err(e)?;
    ensure(r.rows.len() == 400, || format!("{} pairs", r.rows.len()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..400 {
        let a = [(); 5].map(|_| rng.gen_range(-1.0..=1.0));
        let b = [(); 5].map(|_| rng.gen_range(-1.0..=1.0));
        let la = monomial_to_legendre(&portmanteau_core::geometry::PolyCurve::new(a));
        let lb = monomial_to_legendre(&portmanteau_core::geometry::PolyCurve::new(b));
        worst = worst.max((legendre_l2_distance_sq(&la, &lb) - exact_l2_sq(&a, &b)).abs());
    }
    let detail = format!(
        "r_legendre {:.4}, r_monomial {:.4}, quadrature identity max err {worst:.1e}",
        r.pearson_legendre, r.pearson_monomial
    );
    ensure(worst <= 1e-9, || format!("{detail}: identity error above 1e-9"))?;
    ensure(r.pearson_legendre >= r.pearson_monomial, || format!("{detail}: Legendre r below monomial r"))?;
    ensure(r.pearson_legendre >= 0.95, || format!("{detail}: Legendre r below 0.95"))?;
    Ok(detail)
}

fn abs_shape_sum(psi: &[f64; 5]) -> f64 {
    psi[1..].iter().map(|v| v.abs()).sum()
}

fn criterion_7() -> Outcome {
    let cfg = ToyConfig {
        distortion: DistortionKind::Sine,
        ..ToyConfig::default()
    };
    let samples = generate_dataset(50, &cfg, 7).map_err(e)?;
    let mut straightened = 0;
    let mut ratios = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let geo = geometry_from_boxes(&s.boxes, DEFAULT_SEGMENTS).map_err(|err| format!("sample {i}: {err}"))?;
        let warp = build_tps(&geo.control_points).map_err(e)?;
        let keys = extract_key_points(&s.boxes).map_err(e)?;
        let mut mapped = Vec::with_capacity(keys.centers.len());
        for &q in &keys.centers {
            let start = Point::new(q.x, 0.0);
            mapped.push(warp.invert(q, start).map_err(|err| format!("sample {i}: {err}"))?);
        }
        let before = abs_shape_sum(&geo.model.legendre.psi);
        let after = abs_shape_sum(&monomial_to_legendre(&fit_center_polynomial(&mapped).map_err(e)?).psi);
        let ratio = after / before;
        ratios.push(ratio);
        if after <= 0.5 * before {
            straightened += 1;
        }
    }
    ratios.sort_by(f64::total_cmp);
    let detail = format!("{straightened}/50 samples reduced >= 50% (median after/before {:.3})", ratios[25]);
    ensure(straightened >= 45, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let cfg = LocalizerConfig::reference();
    let s: ParamStore<f32> = init_localizer(&cfg, 1).map_err(e)?;
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = g.input(Tensor::from_fn(&[1, 1, 100, 100], |_| rng.gen_range(0.0..1.0f32))).map_err(e)?;
    let (out, trace) = localizer_forward(&mut g, &s, &cfg, x).map_err(e)?;
    let expect: Vec<Vec<usize>> = vec![vec![32, 50, 50], vec![64, 25, 25], vec![32, 12, 12], vec![16, 6, 6], vec![512], vec![35]];
    ensure(trace == expect, || format!("trace {trace:?}"))?;
    let raw: Vec<f64> = g.value(out).data().iter().map(|v| *v as f64).collect();
    let model = decode_output(&raw, cfg.segments).map_err(e)?;
    let cps = segments_to_control_points(&legendre_to_monomial(&model.legendre), &model.segments);
    ensure(cps.source.len() == 30 && cps.target.len() == 30, || format!("{} control points", cps.source.len()))?;
    Ok("100x100 -> 32x50x50 -> 64x25x25 -> 32x12x12 -> 16x6x6 -> 512 -> 35 -> 30 control points".into())
}

fn criterion_9(port_params: &mut Option<(ModelConfig, ParamStore<f32>)>) -> Outcome {
    let mut parts = Vec::new();
    let mut short = Vec::new();
    for (v, need) in [(Variant::Port, 1.0), (Variant::Plain, 0.95), (Variant::Stn, 0.95)] {
        let cfg = TrainConfig::toy(v);
        let out = train::<f32>(&cfg).map_err(e)?;
        parts.push(format!("{v} {:.1}% in {} steps", 100.0 * out.final_accuracy, out.steps));
        if out.final_accuracy < need || out.steps > 2000 {
            short.push(format!("{v} reached {:.4} (needs {need})", out.final_accuracy));
        }
        if v == Variant::Port {
            *port_params = Some((cfg.model, out.params));
        }
    }
    ensure(short.is_empty(), || format!("{}; {}", parts.join(", "), short.join(", ")))?;
    Ok(parts.join(", "))
}

fn criterion_10() -> Outcome {
    let cfg = DecoderConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut s = ParamStore::<f32>::new();
    init_decoder(&mut s, &mut rng, &cfg).map_err(e)?;
    let fresh = s.clone();
    let w = Tensor::from_fn(&[cfg.width, VOCAB_SIZE], |_| rng.gen_range(-0.5..0.5f32));
    s.set("dec.out.weight", w).map_err(e)?;
    let memory = Tensor::from_fn(&[2, 16, cfg.width], |_| rng.gen_range(-1.0..1.0f32));

    let run = |toks: Vec<Vec<usize>>| -> Result<Tensor<f32>, String> {
        let mut g = Graph::new();
        let m = g.input(memory.clone()).map_err(e)?;
        let l = decoder_forward(&mut g, &s, &cfg, &toks, m).map_err(e)?;
        Ok(g.value(l).clone())
    };
    let mut gap = 0.0f32;
    for cut in [1, 4, 9] {
        let base: Vec<Vec<usize>> = (0..2).map(|b| (0..12).map(|i| (i * 13 + b * 5) % 97).collect()).collect();
        let mut changed = base.clone();
        for row in changed.iter_mut() {
            for t in row.iter_mut().skip(cut) {
                *t = (*t + 41) % 97;
            }
        }
        let (a, b) = (run(base)?, run(changed)?);
        for bi in 0..2 {
            let lo = bi * 12 * VOCAB_SIZE;
            let hi = lo + cut * VOCAB_SIZE;
            for (x, y) in a.data()[lo..hi].iter().zip(&b.data()[lo..hi]) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    ensure(gap <= 1e-6, || format!("future tokens moved past logits by {gap:e}"))?;

    let mut longest = 0;
    for (store, label) in [(&fresh, "fresh"), (&s, "random")] {
        for d in decode_greedy(store, &cfg, &memory, MAX_DECODE_LEN).map_err(e)? {
            ensure(d.steps <= 30 && d.tokens.len() <= 31, || format!("{label} decoder emitted {} tokens", d.steps))?;
            longest = longest.max(d.steps);
        }
    }

    let mcfg = ModelConfig::toy(Variant::Port);
    let params = init_model::<f64>(&mcfg, 0).map_err(e)?;
    let data = generate_dataset(4, &ToyConfig::default(), 3).map_err(e)?;
    let inputs: Vec<Tensor<f64>> = data
        .iter()
        .map(|d| model_input(&mcfg, &d.image, &Rectifier::Boxes(&d.boxes)))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let texts: Vec<&str> = data.iter().map(|d| d.text.as_str()).collect();
    let mut g = Graph::new();
    let x = g.input(stack(&inputs.iter().collect::<Vec<_>>()).map_err(e)?).map_err(e)?;
    let loss = model_loss(&mut g, &params, &mcfg, x, &texts).map_err(e)?;
    let l0 = g.value(loss).data()[0];
    ensure((l0 - 100f64.ln()).abs() <= 0.05, || format!("step-0 loss {l0}"))?;
    Ok(format!("causal gap {gap:.1e}; longest greedy decode {longest} tokens; step-0 loss {l0:.5} (ln 100 = 4.60517)"))
}

fn criterion_11(port: &Option<(ModelConfig, ParamStore<f32>)>) -> Outcome {
    let (cfg, params) = port.as_ref().ok_or("no trained port model (criterion 9 did not run)")?;
    let stats = bmi_report(params, cfg).map_err(e)?;
    ensure(!stats.is_empty(), || "no BMI layers".into())?;
    let _ = writeln!(std::io::stderr(), "       {:<26} {:>10} {:>10} {:>8}", "layer", "matched", "mismatched", "ratio");
    for s in &stats {
        let _ = writeln!(
            std::io::stderr(),
            "       {:<26} {:>10.5} {:>10.5} {:>8.4}",
            s.name,
            s.matched_mean_abs,
            s.mismatched_mean_abs,
            s.ratio()
        );
    }
    let mean_ratio = stats.iter().map(|s| s.ratio()).sum::<f64>() / stats.len() as f64;
    ensure(mean_ratio.is_finite(), || "non-finite ratio".into())?;
    Ok(format!("report-only: {} layers, mean mismatched/matched |w| ratio {mean_ratio:.4}", stats.len()))
}

fn criterion_12() -> Outcome {
    let s = LrSchedule {
        base_lr: 0.02,
        warmup: 6000,
        mode: ScheduleMode::Multiply,
    };
    let at = |t: u64| s.at(t).map_err(e);
    let v = at(6000)?;
    let expect = 0.02 * 6000f64.powf(-0.5);
    ensure((v - expect).abs() <= 1e-12, || format!("lr(6000) = {v:e}, expected {expect:e}"))?;
    let (w, t) = (6000f64, 6000f64);
    let (a, b) = (t.powf(-0.5), t * w.powf(-1.5));
    ensure((a - b).abs() <= 1e-15, || format!("branches differ at warmup: {a:e} vs {b:e}"))?;
    let mut prev = at(1)?;
    for t in 2..=6000 {
        let cur = at(t)?;
        ensure(cur >= prev, || format!("decreases during warmup at {t}"))?;
        prev = cur;
    }
    for t in 6001..=60_000 {
        let cur = at(t)?;
        ensure(cur <= prev, || format!("increases after warmup at {t}"))?;
        prev = cur;
    }
    Ok(format!("lr(6000) = {v:.6e}; branches meet at warmup; non-decreasing to 6000, non-increasing to 60000"))
}

#[test]
fn acceptance() {
    let _ = writeln!(std::io::stderr());
    let mut failures = Vec::new();
    let mut port = None;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let r = f();
        report(id, name, t0, &r);
        if r.is_err() {
            failures.push(id);
        }
    };
    run(1, "BMI block product exactness", &mut criterion_1);
    run(2, "encoder separation at init", &mut criterion_2);
    run(3, "head-label purity", &mut criterion_3);
    run(4, "gradient oracle", &mut criterion_4);
    run(5, "attention complexity", &mut criterion_5);
    run(6, "Legendre coefficient study", &mut criterion_6);
    run(7, "rectification straightening", &mut criterion_7);
    run(8, "localizer shape contract", &mut criterion_8);
    run(9, "toy overfit", &mut || criterion_9(&mut port));
    run(10, "decoder contracts", &mut criterion_10);
    run(11, "BMI persistence report", &mut || criterion_11(&port));
    run(12, "learning-rate schedule", &mut criterion_12);
    assert!(failures.is_empty(), "failed criteria: {failures:?}");
}
