//! `agf`: explanations and evaluation harnesses for ModelPack CNNs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric or
//! invariant failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use agf_core::eval::{
    default_fractions, load_image, negative_perturbation, render_heatmap, segmentation_eval, Dataset, PerturbationMode,
};
use agf_core::{
    load_modelpack, selftest, ssl_explain, AgfConfig, Error, Method, Model64, NeighborFusion, ResidualMode, SslGallery,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "agf", version, about = "Class attribution maps for small sequential CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Explain one image and write the heatmap.
    Explain(ExplainArgs),
    /// Negative perturbation curve over a labelled dataset.
    Perturb(PerturbArgs),
    /// Score heatmaps as segmentations against dataset masks.
    Segeval(SegevalArgs),
    /// Explain a feature extractor through its nearest gallery neighbour.
    SslExplain(SslArgs),
    /// Run the invariant and oracle suite.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodName {
    Agf,
    Lrp,
    Clrp,
    Gradcam,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Residual {
    Guided,
    Gradcam,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Predicted,
    Target,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Subtract,
    Add,
    Ignore,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value = "agf")]
    method: MethodName,
    /// Grad-CAM layer, counted from the output.
    #[arg(long)]
    gradcam_layer: Option<usize>,
    /// AGF components to switch off: a, fx, fgrad, m, gate.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long, value_enum)]
    residual: Option<Residual>,
    /// Seed for `--method random`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Class to explain; defaults to the prediction.
    #[arg(long)]
    class: Option<usize>,
    #[command(flatten)]
    method: MethodArgs,
    /// PGM preview.
    #[arg(long)]
    out: PathBuf,
    /// Raw float heatmap.
    #[arg(long)]
    raw: Option<PathBuf>,
}

#[derive(Args)]
struct PerturbArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, value_enum, default_value = "predicted")]
    mode: Mode,
    /// Comma-separated, strictly increasing; default 0.1,…,0.9.
    #[arg(long, value_delimiter = ',')]
    fractions: Vec<f64>,
    /// `fraction,accuracy` CSV.
    #[arg(long)]
    out: PathBuf,
    /// JSON summary; defaults to the CSV path with a `.json` extension.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct SegevalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SslArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, value_enum, default_value = "subtract")]
    fusion: Fusion,
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    raw: Option<PathBuf>,
    /// Neighbour and pseudo-class as JSON.
    #[arg(long)]
    info: Option<PathBuf>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Fixture root with `models/` and `data/`; random networks otherwise.
    #[arg(long)]
    fixtures: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::ClassOutOfRange { .. } | Error::LayerOutOfRange { .. } => Failure::Usage(e.to_string()),
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Data(msg) | Failure::Numeric(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}

fn run(command: Command) -> CmdResult {
    match command {
        Command::Explain(a) => explain(a),
        Command::Perturb(a) => perturb(a),
        Command::Segeval(a) => segeval(a),
        Command::SslExplain(a) => ssl(a),
        Command::Selftest(a) => run_selftest(a),
    }
}

fn agf_config(ablate: &[String], residual: Option<Residual>) -> Result<AgfConfig, Failure> {
    let names: Vec<&str> = ablate.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    let mut cfg = AgfConfig::full()
        .ablate(&names)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(Residual::Gradcam) = residual {
        cfg.residual = ResidualMode::GradCam;
    }
    Ok(cfg)
}

fn method(a: &MethodArgs) -> Result<Method, Failure> {
    let agf_only = !a.ablate.is_empty() || a.residual.is_some();
    if agf_only && !matches!(a.method, MethodName::Agf) {
        return Err(Failure::Usage(
            "--ablate and --residual apply to --method agf only".into(),
        ));
    }
    if a.gradcam_layer.is_some() && !matches!(a.method, MethodName::Gradcam) {
        return Err(Failure::Usage(
            "--gradcam-layer applies to --method gradcam only".into(),
        ));
    }
    Ok(match a.method {
        MethodName::Agf => Method::Agf(agf_config(&a.ablate, a.residual)?),
        MethodName::Lrp => Method::Lrp,
        MethodName::Clrp => Method::Clrp,
        MethodName::Gradcam => Method::GradCam(a.gradcam_layer),
        MethodName::Random => Method::Random(a.seed),
    })
}

/// Prefixes I/O and decoding errors with the offending path.
fn at(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| match e {
        Error::Io(_) | Error::Image(_) | Error::Load(_) | Error::Json(_) => {
            Failure::Data(format!("{}: {e}", path.display()))
        }
        e => e.into(),
    }
}

fn load_model(path: &Path) -> Result<Model64, Failure> {
    let model: Model64 = load_modelpack(path).map_err(at(path))?;
    if model.input_shape().len() != 3 {
        return Err(Failure::Data(format!(
            "{}: expected a C×H×W input, model takes {:?}",
            path.display(),
            model.input_shape()
        )));
    }
    Ok(model)
}

fn explain(a: ExplainArgs) -> CmdResult {
    let m = method(&a.method)?;
    let model = load_model(&a.model)?;
    let image = load_image(&a.image, model.input_shape()[0]).map_err(at(&a.image))?;
    let trace = model.forward(&image)?;
    let class = a.class.unwrap_or_else(|| trace.logits().argmax());
    let hm = m.heatmap(&model, &trace, class, 0)?;
    render_heatmap(&hm, &a.out, a.raw.as_deref()).map_err(at(&a.out))?;
    println!("{} class {class} -> {}", m.name(), a.out.display());
    Ok(())
}

fn perturb(a: PerturbArgs) -> CmdResult {
    let m = method(&a.method)?;
    let fractions = if a.fractions.is_empty() {
        default_fractions()
    } else {
        a.fractions.clone()
    };
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::Usage(
            "--fractions must be strictly increasing values in [0, 1]".into(),
        ));
    }
    let model = load_model(&a.model)?;
    let data = Dataset::<f64>::load(&a.data, model.input_shape()[0]).map_err(at(&a.data))?;
    let mode = match a.mode {
        Mode::Predicted => PerturbationMode::Predicted,
        Mode::Target => PerturbationMode::Target,
    };
    let curve = negative_perturbation(
        &model,
        &data,
        |s, trace, class| m.heatmap(&model, trace, class, s as u64),
        &fractions,
        mode,
    )?;
    let mut csv = String::from("fraction,accuracy\n");
    for (f, acc) in curve.fractions.iter().zip(&curve.accuracy) {
        writeln!(csv, "{f},{acc}").expect("writing to a String");
    }
    std::fs::write(&a.out, csv).map_err(|e| at(&a.out)(e.into()))?;
    let summary = json!({
        "method": m.name(),
        "mode": mode,
        "samples": data.samples().len(),
        "fractions": curve.fractions,
        "accuracy": curve.accuracy,
        "auc": curve.auc,
    });
    let summary_path = a.summary.unwrap_or_else(|| a.out.with_extension("json"));
    write_json(&summary_path, &summary)?;
    println!(
        "{} {} auc {:.4}",
        m.name(),
        serde_json::to_value(mode)
            .expect("mode serializes")
            .as_str()
            .unwrap_or("?"),
        curve.auc
    );
    Ok(())
}

fn segeval(a: SegevalArgs) -> CmdResult {
    let m = method(&a.method)?;
    let model = load_model(&a.model)?;
    let data = Dataset::<f64>::load(&a.data, model.input_shape()[0]).map_err(at(&a.data))?;
    let (mut heatmaps, mut masks, mut names) = (Vec::new(), Vec::new(), Vec::new());
    for (s, (i, label)) in data.samples().into_iter().enumerate() {
        let img = &data.images()[i];
        let Some(mask) = img.mask(label) else { continue };
        let trace = model.forward(&img.image)?;
        heatmaps.push(m.heatmap(&model, &trace, label, s as u64)?);
        masks.push(mask.clone());
        names.push(json!({ "image": img.name, "label": label }));
    }
    if heatmaps.is_empty() {
        return Err(Failure::Data(format!("{}: no masks found", a.data.display())));
    }
    let report = segmentation_eval(&heatmaps, &masks, m.polarity())?;
    let per_image: Vec<_> = names
        .into_iter()
        .zip(&report.per_image)
        .map(|(mut n, r)| {
            n["pixel_accuracy"] = json!(r.pixel_accuracy);
            n["average_precision"] = json!(r.average_precision);
            n
        })
        .collect();
    let out = json!({
        "method": m.name(),
        "polarity": format!("{:?}", m.polarity()),
        "pixel_accuracy": report.pixel_accuracy,
        "map": report.map,
        "per_image": per_image,
    });
    write_json(&a.out, &out)?;
    println!(
        "{} pixel accuracy {:.4} mAP {:.4}",
        m.name(),
        report.pixel_accuracy,
        report.map
    );
    Ok(())
}

fn ssl(a: SslArgs) -> CmdResult {
    let cfg = agf_config(&a.ablate, None)?;
    let features: Model64 = load_model(&a.features)?;
    let head: Model64 = load_modelpack(&a.head).map_err(at(&a.head))?;
    let gallery = SslGallery::load_jsonl(&a.gallery).map_err(at(&a.gallery))?;
    let image = load_image(&a.image, features.input_shape()[0]).map_err(at(&a.image))?;
    let fusion = match a.fusion {
        Fusion::Subtract => NeighborFusion::Subtract,
        Fusion::Add => NeighborFusion::Add,
        Fusion::Ignore => NeighborFusion::Ignore,
    };
    let e = ssl_explain(&features, &head, &image, &gallery, &cfg, fusion)?;
    render_heatmap(&e.explanation.heatmap, &a.out, a.raw.as_deref()).map_err(at(&a.out))?;
    if let Some(info) = &a.info {
        let j = json!({
            "neighbor": e.neighbor,
            "neighbor_id": e.neighbor_id,
            "pseudo_class": e.explanation.target,
            "head_logits": e.head_logits,
        });
        write_json(info, &j)?;
    }
    println!(
        "neighbour {} pseudo-class {} -> {}",
        e.neighbor_id,
        e.explanation.target,
        a.out.display()
    );
    Ok(())
}

fn run_selftest(a: SelftestArgs) -> CmdResult {
    let report = selftest::run(a.fixtures.as_deref())?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Numeric("self-test failed".into()))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| at(path)(e.into()))? + "\n";
    std::fs::write(path, text).map_err(|e| at(path)(e.into()))?;
    Ok(())
}
