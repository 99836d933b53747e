use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use portmanteau_core::bench::{grid, sweep, sweep_csv};
use portmanteau_core::data::{generate_dataset, write_dataset, DistortionKind, ToyConfig};
use portmanteau_core::davit::AttentionMode;
use portmanteau_core::diagnostics::{abs_grid_csv, bmi_report, bmi_report_csv, gradcheck_model, gradcheck_ops, OpCheck};
use portmanteau_core::geometry::{legendre_distance_study, rectify_with_boxes, QuadBoxSet};
use portmanteau_core::image::GrayImage;
use portmanteau_core::model::{
    init_model, model_input, params_dir, read_model_config, recognize_batch, stack, stored_dtype, write_model_config,
    ModelConfig, Rectifier, Variant,
};
use portmanteau_core::stn::{Localizer, RECTIFIED_HEIGHT, RECTIFIED_WIDTH};
use portmanteau_core::tensor::{Element, ParamStore};
use portmanteau_core::train::{metrics_csv, Trainer, TrainConfig};

#[derive(Parser)]
#[command(name = "portmanteau", version, about = "Portmanteau-feature text recognition toolkit")]
struct Cli {
    /// JSON object of option values for the command; flags given on the
    /// command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rectify one image with ground-truth boxes or a trained localizer.
    Rectify(RectifyArgs),
    /// Transcribe images with trained weights; prints JSON lines.
    Recognize(RecognizeArgs),
    /// Train a recognizer on generated toy data.
    TrainToy(TrainArgs),
    /// Count attention MACs and time the score path over a shape grid.
    BenchAttn(BenchArgs),
    /// Finite-difference checks of every op and of a full model loss.
    Gradcheck(GradcheckArgs),
    /// Export |w| grids and block statistics of the BMI layers.
    InspectBmi(InspectArgs),
    /// Compare monomial and Legendre coefficient distances of random curves.
    LegendreStudy(LegendreArgs),
    /// Render a toy dataset: PGMs, box JSON and labels.tsv.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Preset {
    Toy,
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Serialize, Deserialize)]
struct RectifyArgs {
    /// Input image (PGM or PPM).
    #[arg(long = "in", value_name = "IMAGE")]
    input: Option<PathBuf>,
    /// Character boxes JSON.
    #[arg(long)]
    boxes: Option<PathBuf>,
    /// Localizer weights directory, used when no boxes are given.
    #[arg(long, value_name = "DIR")]
    stn: Option<PathBuf>,
    /// Output PGM.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = RECTIFIED_HEIGHT)]
    height: usize,
    #[arg(long, default_value_t = RECTIFIED_WIDTH)]
    width: usize,
}

#[derive(Args, Serialize, Deserialize)]
struct RecognizeArgs {
    /// Input images; a sibling `<stem>.boxes.json` drives rectification when present.
    #[arg(long = "in", value_name = "IMAGE", num_args = 1..)]
    input: Vec<PathBuf>,
    /// Weights directory written by `train-toy`.
    #[arg(long, value_name = "DIR")]
    weights: Option<PathBuf>,
    /// Model variant; defaults to the one recorded with the weights.
    #[arg(long)]
    variant: Option<Variant>,
    /// Preset used when the weights carry no model description.
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    /// Localizer weights; defaults to `<weights>/stn` when it exists.
    #[arg(long, value_name = "DIR")]
    stn: Option<PathBuf>,
    /// Write JSON lines here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long, default_value_t = Variant::Port)]
    variant: Variant,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iteration budget (preset default otherwise).
    #[arg(long)]
    iters: Option<u64>,
    /// Number of generated training samples.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    /// Keep training after reaching 100% training accuracy.
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Checkpoint directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "vit,axial,davit")]
    modes: Vec<AttentionMode>,
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    n_x: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
    n_y: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256")]
    d_x: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    l_y: usize,
    /// Timed runs per point; the median is reported.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Model whose full loss is checked.
    #[arg(long, default_value_t = Variant::Port)]
    variant: Variant,
    /// Coordinates probed per parameter tensor.
    #[arg(long, default_value_t = 3)]
    per_tensor: usize,
    /// CSV output of the table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct InspectArgs {
    /// Weights directory; a fresh initialisation is inspected otherwise.
    #[arg(long, value_name = "DIR")]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = Variant::Port)]
    variant: Variant,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `summary.csv` and one grid CSV per layer.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct LegendreArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    polys: usize,
    /// Evenly spaced sample points on [-1, 1].
    #[arg(long, default_value_t = 201)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize, Deserialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_parser = parse_serde::<DistortionKind>, default_value = "mixed")]
    distortion: DistortionKind,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|e| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<portmanteau_core::Error> for Failure {
    fn from(e: portmanteau_core::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

/// Prefixes a runtime error with the path it concerns.
fn at<T, E: Into<Failure>>(r: Result<T, E>, path: &Path) -> CliResult<T> {
    r.map_err(|e| match e.into() {
        Failure::Runtime(m) => Failure::Runtime(format!("{}: {m}", path.display())),
        u => u,
    })
}

/// `println!` that tolerates a closed stdout.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| Failure::Usage(format!("missing required option --{flag}")))
}

/// Overlays config-file values onto every option not given on the command line.
fn resolve<A: Serialize + DeserializeOwned>(args: A, m: &ArgMatches, config: Option<&Map<String, Value>>) -> CliResult<(A, Value)> {
    let mut v = serde_json::to_value(&args)?;
    if let Some(cfg) = config {
        let fields = v.as_object_mut().expect("options serialise as an object");
        for (k, val) in cfg {
            if !fields.contains_key(k) {
                return Err(Failure::Usage(format!("unknown option `{k}` in config file")));
            }
            if m.value_source(k) != Some(ValueSource::CommandLine) {
                fields.insert(k.clone(), val.clone());
            }
        }
    }
    let args = serde_json::from_value(v.clone()).map_err(|e| Failure::Usage(format!("config file: {e}")))?;
    Ok((args, v))
}

/// Writes `bytes` to `path`, creating missing parent directories.
fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        at(fs::create_dir_all(parent), parent)?;
    }
    at(fs::write(path, bytes), path)
}

fn write_run_json(dir: &Path, command: &str, options: &Value, resolved: Value) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let record = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "options": options,
        "resolved": resolved,
    });
    fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&record)?)?;
    Ok(())
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn preset_model(preset: Preset, variant: Variant) -> ModelConfig {
    match preset {
        Preset::Toy => ModelConfig::toy(variant),
        Preset::Reference => ModelConfig::reference(variant),
    }
}

/// Model description stored with the weights, or the preset for `variant`.
fn weights_model(dir: &Path, variant: Option<Variant>, preset: Preset) -> CliResult<ModelConfig> {
    let Some(cfg) = at(read_model_config(dir), dir)? else {
        return Ok(preset_model(preset, variant.unwrap_or(Variant::Port)));
    };
    match variant {
        Some(v) if v != cfg.variant => Err(Failure::Usage(format!(
            "weights in {} are a {} model, not {v}",
            dir.display(),
            cfg.variant
        ))),
        _ => Ok(cfg),
    }
}

fn cmd_rectify(a: &RectifyArgs, options: &Value) -> CliResult<()> {
    let input = required(&a.input, "in")?;
    let out = required(&a.out, "out")?;
    let img = at(GrayImage::read_pnm(input), input)?;
    let rect = match (&a.boxes, &a.stn) {
        (Some(b), _) => rectify_with_boxes(&img, &at(QuadBoxSet::read_json(b), b)?, a.height, a.width)?,
        (None, Some(dir)) => at(Localizer::<f32>::load_dir(dir), dir)?.rectify(&img)?.image.resize(a.height, a.width)?,
        (None, None) => return Err(Failure::Usage("rectify needs --boxes or --stn".into())),
    };
    write_file(out, rect.encode_pgm())?;
    let source = if a.boxes.is_some() { "boxes" } else { "localizer" };
    write_run_json(&parent_dir(out), "rectify", options, json!({ "source": source }))?;
    say!("{} ({}x{})", out.display(), rect.height(), rect.width());
    Ok(())
}

fn boxes_beside(path: &Path) -> Option<PathBuf> {
    let p = path.with_extension("boxes.json");
    p.exists().then_some(p)
}

fn recognize_images<T: Element>(
    cfg: &ModelConfig,
    params_dir: &Path,
    localizer: Option<&Localizer<f32>>,
    paths: &[PathBuf],
) -> CliResult<Vec<Value>> {
    let params = at(ParamStore::<T>::load_dir(params_dir), params_dir)?;
    let mut inputs = Vec::with_capacity(paths.len());
    for p in paths {
        let img = at(GrayImage::read_pnm(p), p)?;
        let boxes = boxes_beside(p).map(|b| at(QuadBoxSet::read_json(&b), &b)).transpose()?;
        let rect = match (&boxes, localizer) {
            (Some(b), _) => Rectifier::Boxes(b),
            (None, Some(l)) => Rectifier::Localizer(l),
            (None, None) => Rectifier::Resize,
        };
        inputs.push(model_input::<T>(cfg, &img, &rect)?);
    }
    let batch = stack(&inputs.iter().collect::<Vec<_>>())?;
    let decoded = recognize_batch(&params, cfg, &batch)?;
    Ok(paths
        .iter()
        .zip(decoded)
        .map(|(p, d)| json!({ "path": p, "text": d.text, "tokens": d.tokens, "steps": d.steps }))
        .collect())
}

fn cmd_recognize(a: &RecognizeArgs, options: &Value) -> CliResult<()> {
    let weights = required(&a.weights, "weights")?;
    if a.input.is_empty() {
        return Err(Failure::Usage("missing required option --in".into()));
    }
    let cfg = weights_model(weights, a.variant, a.preset)?;
    let stn_dir = a.stn.clone().or_else(|| Some(weights.join("stn")).filter(|d| d.is_dir()));
    let localizer = match (&stn_dir, cfg.variant.needs_rectified()) {
        (Some(d), true) => Some(at(Localizer::load_dir(d), d)?),
        _ => None,
    };
    let pdir = params_dir(weights);
    let lines = match at(stored_dtype(&pdir), &pdir)?.as_str() {
        "f64" => recognize_images::<f64>(&cfg, &pdir, localizer.as_ref(), &a.input)?,
        _ => recognize_images::<f32>(&cfg, &pdir, localizer.as_ref(), &a.input)?,
    };
    let mut text = String::new();
    for l in &lines {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    match &a.out {
        Some(out) => write_file(out, &text)?,
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    let run_dir = a.out.as_deref().map(parent_dir).unwrap_or_else(|| PathBuf::from("."));
    write_run_json(&run_dir, "recognize", options, json!({ "model": cfg, "stn": stn_dir }))?;
    Ok(())
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    let mut cfg = match a.preset {
        Preset::Toy => TrainConfig::toy(a.variant),
        Preset::Reference => TrainConfig::reference(a.variant),
    };
    cfg.seed = a.seed;
    if let Some(v) = a.iters {
        cfg.iterations = v;
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.schedule.base_lr = v;
    }
    if let Some(v) = a.warmup {
        cfg.schedule.warmup = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if a.no_early_stop {
        cfg.stop_when_perfect = false;
    }
    cfg
}

fn train_into<T: Element>(cfg: &TrainConfig, out: &Path) -> CliResult<Value> {
    let samples = generate_dataset(cfg.samples, &cfg.data, cfg.seed)?;
    let mut t = Trainer::<T>::new(cfg.clone(), &samples)?;
    let rows = t.run(|r| {
        if let Some(acc) = r.seq_acc {
            eprintln!("step {:>5}  loss {:.5}  lr {:.6}  seq_acc {:.4}", r.step, r.loss, r.lr, acc);
        }
    })?;
    t.save_checkpoint(out)?;
    write_model_config(out, &cfg.model)?;
    fs::write(out.join("metrics.csv"), metrics_csv(&rows))?;
    let acc = match rows.last().and_then(|r| r.seq_acc) {
        Some(a) => a,
        None => t.accuracy()?,
    };
    say!(
        "{} steps, final loss {:.6}, training sequence accuracy {:.4}",
        t.step(),
        rows.last().map_or(f64::NAN, |r| r.loss),
        acc
    );
    Ok(json!({ "steps": t.step(), "seq_acc": acc }))
}

fn cmd_train(a: &TrainArgs, options: &Value) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let cfg = train_config(a);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    fs::create_dir_all(out)?;
    let summary = match a.precision {
        Precision::F32 => train_into::<f32>(&cfg, out)?,
        Precision::F64 => train_into::<f64>(&cfg, out)?,
    };
    write_run_json(out, "train-toy", options, json!({ "train": cfg, "outcome": summary }))?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, options: &Value) -> CliResult<()> {
    let shapes = grid(&a.n_x, &a.n_y, &a.d_x, a.l_y);
    let s = sweep(&a.modes, &shapes, a.repeats, a.seed)?;
    for msg in &s.skipped {
        eprintln!("skipped: {msg}");
    }
    let csv = sweep_csv(&s.points);
    let mismatched = s.points.iter().filter(|p| p.score_macs != p.closed_form).count();
    match &a.out {
        Some(out) => {
            write_file(out, &csv)?;
            say!("{} points written to {}", s.points.len(), out.display());
        }
        None => {
            let _ = std::io::stdout().write_all(csv.as_bytes());
        }
    }
    let run_dir = a.out.as_deref().map(parent_dir).unwrap_or_else(|| PathBuf::from("."));
    write_run_json(
        &run_dir,
        "bench-attn",
        options,
        json!({ "points": s.points.len(), "skipped": s.skipped, "closed_form_mismatches": mismatched }),
    )?;
    if mismatched > 0 {
        return Err(Failure::Runtime(format!("{mismatched} points disagree with the closed form")));
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, options: &Value) -> CliResult<()> {
    let mut checks: Vec<OpCheck> = gradcheck_ops(a.seed)?;
    checks.push(gradcheck_model(a.variant, a.seed, a.per_tensor)?);
    let mut csv = String::from("name,checked,max_rel_error,passed\n");
    say!("{:<28} {:>8} {:>14}  result", "check", "coords", "max rel err");
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        say!("{:<28} {:>8} {:>14.3e}  {verdict}", c.name, c.checked, c.max_rel_error);
        csv.push_str(&format!("{},{},{:e},{}\n", c.name, c.checked, c.max_rel_error, c.passed()));
    }
    if let Some(out) = &a.out {
        write_file(out, &csv)?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let run_dir = a.out.as_deref().map(parent_dir).unwrap_or_else(|| PathBuf::from("."));
    write_run_json(&run_dir, "gradcheck", options, json!({ "checks": checks.len(), "failed": failed }))?;
    if !failed.is_empty() {
        return Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn inspect_store<T: Element>(s: &ParamStore<T>, cfg: &ModelConfig, out: &Path) -> CliResult<Value> {
    let stats = bmi_report(s, cfg)?;
    fs::write(out.join("summary.csv"), bmi_report_csv(&stats))?;
    say!("{:<28} {:>12} {:>12} {:>8}", "layer", "matched", "mismatched", "ratio");
    for st in &stats {
        let w = s
            .get(&st.name)
            .ok_or_else(|| Failure::Runtime(format!("missing parameter {}", st.name)))?;
        fs::write(out.join(format!("{}.csv", st.name)), abs_grid_csv(w))?;
        say!(
            "{:<28} {:>12.5} {:>12.5} {:>8.4}",
            st.name,
            st.matched_mean_abs,
            st.mismatched_mean_abs,
            st.ratio()
        );
    }
    Ok(json!({ "layers": stats.len() }))
}

fn cmd_inspect(a: &InspectArgs, options: &Value) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    fs::create_dir_all(out)?;
    let (cfg, summary) = match &a.weights {
        Some(dir) => {
            let cfg = weights_model(dir, Some(a.variant), a.preset)?;
            let pdir = params_dir(dir);
            let summary = match at(stored_dtype(&pdir), &pdir)?.as_str() {
                "f64" => inspect_store(&at(ParamStore::<f64>::load_dir(&pdir), &pdir)?, &cfg, out)?,
                _ => inspect_store(&at(ParamStore::<f32>::load_dir(&pdir), &pdir)?, &cfg, out)?,
            };
            (cfg, summary)
        }
        None => {
            let cfg = preset_model(a.preset, a.variant);
            let s = init_model::<f64>(&cfg, a.seed)?;
            (cfg, inspect_store(&s, &cfg, out)?)
        }
    };
    write_run_json(out, "inspect-bmi", options, json!({ "model": cfg, "report": summary }))?;
    Ok(())
}

fn cmd_legendre(a: &LegendreArgs, options: &Value) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let r = legendre_distance_study(a.polys, a.points, a.seed)?;
    write_file(out, r.to_csv())?;
    say!("pairs             {}", r.rows.len());
    say!("pearson_monomial  {:.6}", r.pearson_monomial);
    say!("pearson_legendre  {:.6}", r.pearson_legendre);
    write_run_json(
        &parent_dir(out),
        "legendre-study",
        options,
        json!({ "pairs": r.rows.len(), "pearson_monomial": r.pearson_monomial, "pearson_legendre": r.pearson_legendre }),
    )?;
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs, options: &Value) -> CliResult<()> {
    let out = required(&a.out, "out")?;
    let d = ToyConfig::default();
    let cfg = ToyConfig {
        height: a.height.unwrap_or(d.height),
        width: a.width.unwrap_or(d.width),
        min_len: a.min_len.unwrap_or(d.min_len),
        max_len: a.max_len.unwrap_or(d.max_len),
        distortion: a.distortion,
        ..d
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let samples = generate_dataset(a.n, &cfg, a.seed)?;
    write_dataset(out, &samples)?;
    say!("{} samples written to {}", samples.len(), out.display());
    write_run_json(out, "gen-data", options, json!({ "data": cfg }))?;
    Ok(())
}

fn load_config(path: &Path) -> CliResult<Map<String, Value>> {
    let bytes = fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_slice(&bytes) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Failure::Usage(format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(Failure::Usage(format!("{}: {e}", path.display()))),
    }
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> CliResult<()> {
    let config = cli.config.as_deref().map(load_config).transpose()?;
    let config = config.as_ref();
    let (_, m) = matches.subcommand().expect("subcommand is required");
    macro_rules! run {
        ($args:expr, $f:ident) => {{
            let (a, options) = resolve($args, m, config)?;
            $f(&a, &options)
        }};
    }
    match cli.command {
        Command::Rectify(a) => run!(a, cmd_rectify),
        Command::Recognize(a) => run!(a, cmd_recognize),
        Command::TrainToy(a) => run!(a, cmd_train),
        Command::BenchAttn(a) => run!(a, cmd_bench),
        Command::Gradcheck(a) => run!(a, cmd_gradcheck),
        Command::InspectBmi(a) => run!(a, cmd_inspect),
        Command::LegendreStudy(a) => run!(a, cmd_legendre),
        Command::GenData(a) => run!(a, cmd_gen_data),
    }
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
