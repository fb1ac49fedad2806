//! Corpus assembly and batched (image, kernel, method) evaluation.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::baselines::{evaluate_baseline, BaselineKind, Rescale};
use crate::error::{Error, Result};
use crate::image_io::{generate_color_probe, generate_noise_probe, preprocess, ImageBuffer};
use crate::interpret::{optimize_with_target, IterRecord, OptimConfig, Target, Termination};
use crate::metrics::KernelEval;
use crate::net::{KernelRef, NetworkSpec};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Where an input image comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    File(PathBuf),
    Probe(usize),
    NoiseProbe { size: usize, seed: u64 },
}

impl ImageSource {
    /// Parses one `--images` entry. Accepted forms are a file path,
    /// `probe:SIZE` and `noise-probe:SIZE:SEED[:COUNT]`; the last expands to
    /// COUNT images with consecutive seeds.
    pub fn parse(spec: &str) -> Result<Vec<ImageSource>> {
        let bad = |why: &str| Error::Config(format!("image spec `{spec}`: {why}"));
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad(&format!("`{s}` is not a non-negative integer")));
        if let Some(rest) = spec.strip_prefix("probe:") {
            return Ok(vec![ImageSource::Probe(num(rest)? as usize)]);
        }
        if let Some(rest) = spec.strip_prefix("noise-probe:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let (size, seed, count) = match parts.as_slice() {
                [size, seed] => (num(size)?, num(seed)?, 1),
                [size, seed, count] => (num(size)?, num(seed)?, num(count)?),
                _ => return Err(bad("expected noise-probe:SIZE:SEED[:COUNT]")),
            };
            if count == 0 {
                return Err(bad("count must be positive"));
            }
            return Ok((0..count)
                .map(|i| ImageSource::NoiseProbe {
                    size: size as usize,
                    seed: seed + i,
                })
                .collect());
        }
        let path = PathBuf::from(spec);
        if !path.is_file() {
            return Err(bad("no such file"));
        }
        Ok(vec![ImageSource::File(path)])
    }

    pub fn id(&self) -> String {
        match self {
            ImageSource::File(p) => p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned()),
            ImageSource::Probe(size) => format!("probe{size}"),
            ImageSource::NoiseProbe { size, seed } => format!("noiseprobe{size}_s{seed}"),
        }
    }

    pub fn load(&self) -> Result<ImageBuffer> {
        match self {
            ImageSource::File(p) => ImageBuffer::load(p),
            ImageSource::Probe(size) => generate_color_probe(*size),
            ImageSource::NoiseProbe { size, seed } => generate_noise_probe(*size, *seed),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusImage<T: Real = f32> {
    pub id: String,
    pub x: Tensor<T>,
}

/// Loads and preprocesses every source. Duplicate ids are rejected because
/// ids name output directories.
pub fn load_corpus<T: Real>(sources: &[ImageSource], net: &NetworkSpec<T>) -> Result<Vec<CorpusImage<T>>> {
    let mut out: Vec<CorpusImage<T>> = Vec::with_capacity(sources.len());
    for s in sources {
        let id = s.id();
        if out.iter().any(|c| c.id == id) {
            return Err(Error::Config(format!("image id `{id}` appears twice")));
        }
        out.push(CorpusImage {
            id,
            x: preprocess(&s.load()?, net)?,
        });
    }
    Ok(out)
}

/// `count` distinct kernels of `layer`, drawn from a generator seeded by
/// `seed` and the layer's position so that layers get independent draws.
pub fn select_kernels<T: Real>(net: &NetworkSpec<T>, layer: &str, count: usize, seed: u64) -> Result<Vec<KernelRef>> {
    let site = net.kernel_site(&KernelRef::new(layer, 0))?;
    if count == 0 || count > site.channels {
        return Err(Error::Config(format!(
            "cannot draw {count} kernels from `{layer}`, which has {}",
            site.channels
        )));
    }
    let mut rng = SplitMix64::new(seed ^ (site.conv_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked = rng.choose_distinct(site.channels, count);
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| KernelRef::new(layer, i)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Ours { name: String, cfg: OptimConfig },
    Baseline { kind: BaselineKind, rescale: Rescale },
}

impl Method {
    pub fn ours(cfg: OptimConfig) -> Self {
        Method::Ours { name: "ours".into(), cfg }
    }

    pub fn name(&self) -> &str {
        match self {
            Method::Ours { name, .. } => name,
            Method::Baseline { kind, .. } => kind.name(),
        }
    }
}

pub const ABLATION_VARIANTS: [&str; 3] = ["full", "no_ls", "no_lr"];

/// The full loss plus the two single-term ablations (`alpha = 0`, `beta = 0`).
pub fn ablation_methods(cfg: &OptimConfig) -> Vec<Method> {
    let with = |name: &str, alpha: f64, beta: f64| Method::Ours {
        name: name.into(),
        cfg: OptimConfig { alpha, beta, ..cfg.clone() },
    };
    vec![
        with(ABLATION_VARIANTS[0], cfg.alpha, cfg.beta),
        with(ABLATION_VARIANTS[1], 0.0, cfg.beta),
        with(ABLATION_VARIANTS[2], cfg.alpha, 0.0),
    ]
}

#[derive(Debug, Clone)]
pub struct RunOutput<T: Real = f32> {
    pub eval: KernelEval,
    /// Optimized input or re-fed baseline estimate.
    pub input: Tensor<T>,
    pub f_selected: Tensor<T>,
    pub f_hat_selected: Tensor<T>,
    /// Empty for baselines.
    pub history: Vec<IterRecord>,
    pub terminated_by: Option<Termination>,
}

pub fn run_method<T: Real>(
    net: &NetworkSpec<T>,
    image: &CorpusImage<T>,
    kernel: &KernelRef,
    method: &Method,
    seed: u64,
) -> Result<RunOutput<T>> {
    // The target also screens out dead kernels for the baselines.
    let target = Target::new(net, &image.x, kernel)?;
    let site = target.site;
    let f = net.forward_through(&image.x, site.act_index)?.output_at(site.act_index).clone();
    let (input, history, terminated_by) = match method {
        Method::Ours { cfg, .. } => {
            let r = optimize_with_target(net, &image.x, &target, cfg)?;
            (r.x_hat, r.history, Some(r.terminated_by))
        }
        Method::Baseline { kind, rescale } => {
            let e = evaluate_baseline(net, &image.x, kernel, *kind, *rescale)?;
            (e.estimate, Vec::new(), None)
        }
    };
    let f_hat = net.forward_through(&input, site.act_index)?.output_at(site.act_index).clone();
    let eval = KernelEval::from_maps(method.name(), &image.id, &kernel.layer, kernel.index, seed, &f_hat, &f)?;
    Ok(RunOutput {
        eval,
        input,
        f_selected: f.channel(site.channel)?,
        f_hat_selected: f_hat.channel(site.channel)?,
        history,
        terminated_by,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Job {
    pub image: usize,
    pub kernel: KernelRef,
    pub method: usize,
}

/// Runs every (image, kernel, method) combination on the current rayon
/// pool. Results come back in job order regardless of scheduling.
pub fn run_batch<T: Real>(
    net: &NetworkSpec<T>,
    images: &[CorpusImage<T>],
    kernels: &[KernelRef],
    methods: &[Method],
    seed: u64,
) -> Vec<(Job, Result<RunOutput<T>>)> {
    let mut jobs = Vec::with_capacity(images.len() * kernels.len() * methods.len());
    for image in 0..images.len() {
        for kernel in kernels {
            for method in 0..methods.len() {
                jobs.push(Job {
                    image,
                    kernel: kernel.clone(),
                    method,
                });
            }
        }
    }
    jobs.into_par_iter()
        .map(|job| {
            let r = run_method(net, &images[job.image], &job.kernel, &methods[job.method], seed);
            (job, r)
        })
        .collect()
}

/// Successful evaluations of a batch; failures are logged and skipped.
pub fn collect_evals<T: Real>(results: &[(Job, Result<RunOutput<T>>)], images: &[CorpusImage<T>]) -> Vec<KernelEval> {
    let mut evals = Vec::with_capacity(results.len());
    for (job, r) in results {
        match r {
            Ok(out) => evals.push(out.eval.clone()),
            Err(e) => log::warn!(
                "skipping {} / {}#{}: {e}",
                images[job.image].id,
                job.kernel.layer,
                job.kernel.index
            ),
        }
    }
    evals
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::build_toy_deep_net;

    #[test]
    fn image_specs() {
        assert_eq!(ImageSource::parse("probe:32").unwrap(), vec![ImageSource::Probe(32)]);
        let many = ImageSource::parse("noise-probe:16:5:3").unwrap();
        assert_eq!(many.len(), 3);
        assert_eq!(many[2].id(), "noiseprobe16_s7");
        assert!(ImageSource::parse("noise-probe:16").is_err());
        assert!(ImageSource::parse("probe:x").is_err());
        assert!(ImageSource::parse("/definitely/not/here.png").is_err());
    }

    #[test]
    fn kernel_selection_is_seeded_and_distinct() {
        let net = build_toy_deep_net(0);
        let a = select_kernels(&net, "conv2_2", 4, 11).unwrap();
        assert_eq!(a, select_kernels(&net, "conv2_2", 4, 11).unwrap());
        let mut idx: Vec<usize> = a.iter().map(|k| k.index).collect();
        idx.dedup();
        assert_eq!(idx.len(), 4);
        assert!(select_kernels(&net, "conv2_2", 17, 0).is_err());
        assert!(select_kernels(&net, "pool1", 1, 0).is_err());
    }

    #[test]
    fn batch_is_ordered_and_deterministic() {
        let net = build_toy_deep_net(0).with_input_shape([3, 16, 16]).unwrap();
        let images = load_corpus(&ImageSource::parse("noise-probe:16:1:2").unwrap(), &net).unwrap();
        let kernels = select_kernels(&net, "conv1_2", 2, 3).unwrap();
        let cfg = OptimConfig {
            beta: 1e-4,
            lr0: 3e4,
            max_iters: 20,
            ..Default::default()
        };
        let mut methods = ablation_methods(&cfg);
        methods.push(Method::Baseline {
            kind: BaselineKind::Gbp,
            rescale: Rescale::MinMax,
        });
        let a = run_batch(&net, &images, &kernels, &methods, 9);
        let b = run_batch(&net, &images, &kernels, &methods, 9);
        assert_eq!(a.len(), 2 * 2 * 4);
        let ea = collect_evals(&a, &images);
        assert_eq!(ea, collect_evals(&b, &images));
        assert_eq!(ea[0].method, "full");
        assert_eq!(ea[3].method, "gbp");
        assert!(ea.iter().all(|e| e.seed == 9));
        assert_eq!(a[1].1.as_ref().unwrap().history.len(), 20);
    }
}
