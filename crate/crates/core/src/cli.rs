//! Command-line front end.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::baselines::{BaselineKind, Rescale, DEFAULT_LRP_EPSILON};
use crate::error::{Error, Result};
use crate::experiment::{
    ablation_methods, collect_evals, load_corpus, run_batch, select_kernels, CorpusImage, ImageSource, Job,
    Method, RunOutput, ABLATION_VARIANTS,
};
use crate::image_io::{generate_color_probe, render_feature_map, to_image};
use crate::interpret::{write_history_csv, Init, OptimConfig};
use crate::metrics::{aggregate_report, export_joint, read_evals_csv, write_evals_csv, Grouping, KernelEval};
use crate::model_io::{fixture_from_forward, load_model, save_fixture, save_model, verify_fixture};
use crate::net::{build_toy_color_net, build_toy_deep_net, KernelRef, NetworkSpec};
use crate::tensor::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::DegenerateDenominator(_) | Error::DeadKernel { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "klens", version, about = "Kernel interpretation by input optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize inputs that keep one kernel's response and silence its siblings.
    Interpret(InterpretArgs),
    /// Deconv / GBP / LRP estimates, re-fed and scored.
    Baselines(BaselineArgs),
    /// Aggregate every evals CSV under a results directory.
    EvalTable(EvalTableArgs),
    /// One optimization per β value.
    SweepBeta(SweepArgs),
    /// Write the toy models, the color probe and self-check fixtures.
    MakeFixtures(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToyModel {
    Color,
    Deep,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model manifest JSON.
    #[arg(long, conflicts_with = "toy")]
    pub model_manifest: Option<PathBuf>,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long, requires = "model_manifest")]
    pub model_blob: Option<PathBuf>,
    /// Use a built-in toy model instead of a manifest.
    #[arg(long, value_enum)]
    pub toy: Option<ToyModel>,
    /// Weight seed of the deep toy model.
    #[arg(long, default_value_t = 0)]
    pub toy_seed: u64,
    /// Override the network input height and width.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Image paths, `probe:SIZE` or `noise-probe:SIZE:SEED[:COUNT]`.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub images: Vec<String>,
    /// Conv layers to probe.
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub layer: Vec<String>,
    /// Explicit kernel indices, applied to every layer.
    #[arg(long, num_args = 1.., value_delimiter = ',', conflicts_with = "random_kernels")]
    pub kernel: Vec<usize>,
    /// Draw this many distinct kernels per layer.
    #[arg(long)]
    pub random_kernels: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub plateau_window: Option<usize>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    /// Start from the zero tensor instead of the original image.
    #[arg(long)]
    pub init_zeros: bool,
    /// Let iterates leave the valid pixel range.
    #[arg(long)]
    pub no_clamp: bool,
}

impl OptimArgs {
    pub fn config(&self) -> Result<OptimConfig> {
        let d = OptimConfig::default();
        let cfg = OptimConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            beta: self.beta.unwrap_or(d.beta),
            lr0: self.lr0.unwrap_or(d.lr0),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            decay: self.decay.unwrap_or(d.decay),
            plateau_window: self.plateau_window.unwrap_or(d.plateau_window),
            min_lr: self.min_lr.unwrap_or(d.min_lr),
            init: if self.init_zeros { Init::Zeros } else { Init::FromOriginal },
            clamp_to_input_range: !self.no_clamp,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct InterpretArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    /// Run the full loss and both single-term ablations.
    #[arg(long)]
    pub ablation: bool,
}

#[derive(Debug, Clone, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "deconv,gbp,lrp")]
    pub baselines: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_LRP_EPSILON)]
    pub lrp_epsilon: f64,
    /// `minmax` or `none`.
    #[arg(long, default_value = "minmax")]
    pub rescale: String,
}

#[derive(Debug, Clone, Args)]
pub struct EvalTableArgs {
    pub results: PathBuf,
    /// Report only the ablation variants and require all three per kernel.
    #[arg(long)]
    pub ablation: bool,
    /// Group by method only instead of (layer, method).
    #[arg(long)]
    pub by_method: bool,
    /// Where to write the reports; defaults to the results directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds the deep toy model and the fixture input.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Bounds the global rayon pool by `KLENS_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KLENS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("KLENS_THREADS must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (repeated calls in one process) is fine.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Interpret(a) => {
            let methods = if a.ablation {
                ablation_methods(&a.optim.config()?)
            } else {
                vec![Method::ours(a.optim.config()?)]
            };
            dispatch(&a.common, "interpret", &methods, &BTreeMap::new())
        }
        Command::Baselines(a) => {
            let rescale: Rescale = a.rescale.parse()?;
            if !(a.lrp_epsilon > 0.0) {
                return Err(Error::Config("--lrp-epsilon must be positive".into()));
            }
            let mut methods = Vec::new();
            for name in &a.baselines {
                let kind = match name.parse::<BaselineKind>()? {
                    BaselineKind::Lrp { .. } => BaselineKind::Lrp { epsilon: a.lrp_epsilon },
                    k => k,
                };
                methods.push(Method::Baseline { kind, rescale });
            }
            dispatch(&a.common, "baselines", &methods, &BTreeMap::new())
        }
        Command::SweepBeta(a) => {
            let base = a.optim.config()?;
            let methods: Vec<Method> = a
                .betas
                .iter()
                .map(|&beta| Method::Ours {
                    name: format!("beta_{beta:e}"),
                    cfg: OptimConfig { beta, ..base.clone() },
                })
                .collect();
            for m in &methods {
                if let Method::Ours { cfg, .. } = m {
                    cfg.validate()?;
                }
            }
            let mut extra = BTreeMap::new();
            extra.insert("betas".to_string(), json!(a.betas));
            dispatch(&a.common, "sweep-beta", &methods, &extra)
        }
        Command::EvalTable(a) => eval_table(&a),
        Command::MakeFixtures(a) => make_fixtures(&a.out, a.seed),
    }
}

fn load_network(c: &CommonArgs) -> Result<NetworkSpec<f32>> {
    let net = match (&c.model_manifest, c.toy) {
        (Some(manifest), _) => {
            let blob = c.model_blob.clone().unwrap_or_else(|| manifest.with_extension("bin"));
            load_model(manifest, &blob)?
        }
        (None, Some(ToyModel::Color)) => build_toy_color_net(),
        (None, Some(ToyModel::Deep)) => build_toy_deep_net(c.toy_seed),
        (None, None) => return Err(Error::Config("pass --model-manifest or --toy".into())),
    };
    match c.input_size {
        Some(s) => net.with_input_shape([net.input_shape()[0], s, s]),
        None => Ok(net),
    }
}

fn dispatch(c: &CommonArgs, command: &str, methods: &[Method], extra: &BTreeMap<String, Value>) -> Result<()> {
    let net = load_network(c)?;
    match c.precision {
        Precision::F32 => execute(&net, c, command, methods, extra),
        Precision::F64 => execute(&net.cast::<f64>(), c, command, methods, extra),
    }
}

fn kernels_for<T: Real>(net: &NetworkSpec<T>, c: &CommonArgs) -> Result<Vec<KernelRef>> {
    let mut out = Vec::new();
    for layer in &c.layer {
        match c.random_kernels {
            Some(n) => out.extend(select_kernels(net, layer, n, c.seed)?),
            None if c.kernel.is_empty() => {
                return Err(Error::Config("pass --kernel or --random-kernels".into()));
            }
            None => {
                for &i in &c.kernel {
                    let k = KernelRef::new(layer.clone(), i);
                    net.kernel_site(&k)?;
                    out.push(k);
                }
            }
        }
    }
    Ok(out)
}

fn execute<T: Real>(
    net: &NetworkSpec<T>,
    c: &CommonArgs,
    command: &str,
    methods: &[Method],
    extra: &BTreeMap<String, Value>,
) -> Result<()> {
    let mut sources = Vec::new();
    for spec in &c.images {
        sources.extend(ImageSource::parse(spec)?);
    }
    let kernels = kernels_for(net, c)?;
    let images = load_corpus(&sources, net)?;
    fs::create_dir_all(&c.out)?;

    let results = run_batch(net, &images, &kernels, methods, c.seed);
    for (job, r) in &results {
        if let Ok(out) = r {
            write_item(net, &c.out, &images[job.image], job, &methods[job.method], out)?;
        }
    }
    let evals = collect_evals(&results, &images);
    let failed = results.len() - evals.len();
    if evals.is_empty() {
        // Every item failed; surface the first failure.
        if let Some((_, Err(e))) = results.into_iter().find(|(_, r)| r.is_err()) {
            return Err(e);
        }
    }
    let evals_name = format!("evals_{}.csv", command.replace('-', "_"));
    write_evals_csv(&c.out.join(&evals_name), &evals)?;

    let mut manifest = BTreeMap::new();
    manifest.insert("command".to_string(), json!(command));
    manifest.insert("seed".to_string(), json!(c.seed));
    manifest.insert("precision".to_string(), json!(format!("{:?}", c.precision).to_lowercase()));
    manifest.insert(
        "model".to_string(),
        match (&c.model_manifest, c.toy) {
            (Some(m), _) => json!({"manifest": m, "blob": c.model_blob.clone().unwrap_or_else(|| m.with_extension("bin"))}),
            (None, t) => json!({"toy": format!("{t:?}").to_lowercase(), "toy_seed": c.toy_seed}),
        },
    );
    manifest.insert("input_shape".to_string(), json!(net.input_shape()));
    manifest.insert("images".to_string(), json!(images.iter().map(|i| &i.id).collect::<Vec<_>>()));
    manifest.insert("image_specs".to_string(), json!(c.images));
    manifest.insert(
        "kernels".to_string(),
        json!(kernels.iter().map(|k| json!({"layer": k.layer, "index": k.index})).collect::<Vec<_>>()),
    );
    manifest.insert(
        "kernel_selection".to_string(),
        match c.random_kernels {
            Some(n) => json!({"random_per_layer": n, "seed": c.seed}),
            None => json!({"explicit": c.kernel}),
        },
    );
    manifest.insert("methods".to_string(), Value::Array(methods.iter().map(method_json).collect()));
    manifest.insert("evals".to_string(), json!(evals_name));
    manifest.insert("completed".to_string(), json!(evals.len()));
    manifest.insert("failed".to_string(), json!(failed));
    for (k, v) in extra {
        manifest.insert(k.clone(), v.clone());
    }
    write_json(&c.out.join(format!("run_{}.json", command.replace('-', "_"))), &json!(manifest))?;
    log::info!("{command}: {} evaluations written to {}", evals.len(), c.out.display());
    Ok(())
}

fn method_json(m: &Method) -> Value {
    match m {
        Method::Ours { name, cfg } => json!({"name": name, "config": cfg}),
        Method::Baseline { kind, rescale } => {
            let mut v = json!({"name": kind.name(), "rescale": rescale});
            if let BaselineKind::Lrp { epsilon } = kind {
                v["epsilon"] = json!(epsilon);
            }
            v
        }
    }
}

/// Pretty JSON with sorted keys and a trailing newline.
fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn item_dir(out: &Path, image: &str, kernel: &KernelRef, method: &str) -> PathBuf {
    out.join(image).join(format!("{}_k{}", kernel.layer, kernel.index)).join(method)
}

fn write_item<T: Real>(
    net: &NetworkSpec<T>,
    out: &Path,
    image: &CorpusImage<T>,
    job: &Job,
    method: &Method,
    r: &RunOutput<T>,
) -> Result<()> {
    let dir = item_dir(out, &image.id, &job.kernel, method.name());
    fs::create_dir_all(&dir)?;
    let norm = net.normalization();
    let stem = if matches!(method, Method::Baseline { .. }) { "estimate" } else { "x_hat" };
    to_image(&r.input, norm, false)?.save(&dir.join(format!("{stem}.png")))?;
    to_image(&r.input, norm, true)?.save(&dir.join(format!("{stem}_stretched.png")))?;
    render_feature_map(&r.f_selected, &dir.join("fmap_original.png"))?;
    render_feature_map(&r.f_hat_selected, &dir.join("fmap_optimized.png"))?;
    let diff = r.f_hat_selected.zip_map(&r.f_selected, "diff", |a, b| (a - b).abs())?;
    render_feature_map(&diff, &dir.join("fmap_diff.png"))?;
    if !r.history.is_empty() {
        write_history_csv(&dir.join("history.csv"), &r.history)?;
    }
    let original = dir.parent().expect("item dir has a parent").join("original.png");
    if !original.exists() {
        to_image(&image.x, norm, false)?.save(&original)?;
    }
    Ok(())
}

fn find_evals(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_evals(&p, found)?;
        } else if p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("evals") && n.ends_with(".csv"))
        {
            found.push(p);
        }
    }
    Ok(())
}

fn eval_table(a: &EvalTableArgs) -> Result<()> {
    if !a.results.is_dir() {
        return Err(Error::Config(format!("results directory {} does not exist", a.results.display())));
    }
    let mut files = Vec::new();
    find_evals(&a.results, &mut files)?;
    let mut evals: Vec<KernelEval> = Vec::new();
    for f in &files {
        evals.extend(read_evals_csv(f)?);
    }
    if a.ablation {
        evals.retain(|e| ABLATION_VARIANTS.contains(&e.method.as_str()));
        let mut per_kernel: BTreeMap<(String, String, usize), BTreeSet<String>> = BTreeMap::new();
        for e in &evals {
            per_kernel
                .entry((e.image_id.clone(), e.layer.clone(), e.kernel))
                .or_default()
                .insert(e.method.clone());
        }
        for ((image, layer, kernel), variants) in &per_kernel {
            if variants.len() != ABLATION_VARIANTS.len() {
                return Err(Error::Validation(format!(
                    "{image} / {layer}#{kernel} has variants {variants:?}; ablation needs {ABLATION_VARIANTS:?}"
                )));
            }
        }
    }
    if evals.is_empty() {
        return Err(Error::Validation(format!("no evaluations found under {}", a.results.display())));
    }
    let grouping = if a.by_method { Grouping::Method } else { Grouping::LayerAndMethod };
    let report = aggregate_report(&evals, grouping)?;
    let out = a.out.clone().unwrap_or_else(|| a.results.clone());
    fs::create_dir_all(&out)?;
    let stem = if a.ablation { "ablation" } else { "table" };
    let text = report.to_text();
    fs::write(out.join(format!("{stem}.txt")), &text)?;
    report.write_csv(&out.join(format!("{stem}.csv")))?;
    export_joint(&evals, &out.join(format!("{stem}_joint.csv")))?;
    print!("{text}");
    Ok(())
}

fn make_fixtures(out: &Path, seed: u64) -> Result<()> {
    fs::create_dir_all(out)?;
    let color = build_toy_color_net();
    let deep = build_toy_deep_net(seed);
    save_model(&color, &out.join("color_net.json"), &out.join("color_net.bin"))?;
    save_model(&deep, &out.join("deep_net.json"), &out.join("deep_net.bin"))?;
    let probe = generate_color_probe(64)?;
    probe.save(&out.join("probe.png"))?;

    let x = crate::image_io::preprocess::<f32>(&probe, &color)?;
    save_fixture(&out.join("color_fixture.json"), "color_fixture.bin", &fixture_from_forward(&color, &x)?)?;
    let noise = crate::image_io::generate_noise_probe(64, seed)?;
    let x = crate::image_io::preprocess::<f32>(&noise, &deep)?;
    save_fixture(&out.join("deep_fixture.json"), "deep_fixture.bin", &fixture_from_forward(&deep, &x)?)?;

    for (net, name) in [(&color, "color_fixture.json"), (&deep, "deep_fixture.json")] {
        let report = verify_fixture(net, &out.join(name))?;
        if !report.passed() {
            return Err(Error::Validation(format!("self fixture {name} failed: {:?}", report.flagged())));
        }
    }
    write_json(&out.join("fixtures.json"), &json!({"seed": seed, "probe_size": 64}))?;
    Ok(())
}
