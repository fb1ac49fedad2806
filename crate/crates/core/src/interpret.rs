//! Kernel interpretation by input optimization.
//!
//! Given a frozen network, an input `X` and a kernel `i` at some conv layer,
//! search for `X̂` minimizing
//!
//! ```text
//! L = Lp + alpha * Ls + beta * Lr
//! Lp = ||F̂_i - F_i||_2 / (W·H·||F_i||_2)
//! Ls = Σ_{j≠i} ||F̂_j||_1 / (W·H·Σ_{j≠i} ||F_j||_1)
//! Lr = ||X̂||_1 / (W0·H0)
//! ```
//!
//! where `F` are the layer's post-ReLU maps on `X`, `F̂` the maps on `X̂`,
//! `W×H` the map size and `W0×H0` the input's spatial size (the `Lr` sum runs
//! over all channels). Both normalizers come from `X` and stay fixed for the
//! whole run.
//!
//! The minimizer is plain gradient descent with a plateau-decayed step size.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{KernelRef, KernelSite, NetworkSpec};
use crate::tensor::{norms, ReluRule, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Start from the original input, so `Lp` starts at zero.
    FromOriginal,
    /// Start from the all-zero tensor (the normalized mean image).
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimConfig {
    /// Weight of the suppression term.
    pub alpha: f64,
    /// Weight of the input-L1 regularizer.
    pub beta: f64,
    pub lr0: f64,
    /// Factor applied to the step size on each plateau.
    pub decay: f64,
    pub plateau_window: usize,
    pub plateau_rel_tol: f64,
    pub max_iters: usize,
    pub min_lr: f64,
    pub clamp_to_input_range: bool,
    pub init: Init,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            alpha: 1.0,
            beta: 1.0,
            lr0: 10.0,
            decay: 0.5,
            plateau_window: 50,
            plateau_rel_tol: 1e-4,
            max_iters: 10_000,
            min_lr: 1e-3,
            clamp_to_input_range: true,
            init: Init::FromOriginal,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("alpha={} and beta={} must be finite and >= 0", self.alpha, self.beta));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return bad(format!("decay={} must lie in (0, 1)", self.decay));
        }
        if !(self.min_lr > 0.0 && self.lr0 > self.min_lr && self.lr0.is_finite()) {
            return bad(format!("need lr0 > min_lr > 0, got lr0={} min_lr={}", self.lr0, self.min_lr));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if self.plateau_window == 0 || !(self.plateau_rel_tol >= 0.0) {
            return bad("plateau_window must be >= 1 and plateau_rel_tol >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub lp: f64,
    pub ls: f64,
    pub lr: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn combine(lp: f64, ls: f64, lr: f64, cfg: &OptimConfig) -> Self {
        LossBreakdown {
            lp,
            ls,
            lr,
            total: lp + cfg.alpha * ls + cfg.beta * lr,
        }
    }
}

fn l2_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = (x - y).as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn l1<T: Real>(a: &[T]) -> f64 {
    a.iter().map(|v| v.abs().as_f64()).sum()
}

fn spatial(shape: &[usize]) -> Result<f64> {
    match shape {
        [.., h, w] if shape.len() >= 2 => Ok((h * w) as f64),
        _ => Err(Error::shape("loss", format!("expected a map with spatial axes, got {shape:?}"))),
    }
}

/// `||f̂ - f||_2 / (W·H·||f||_2)` for `[H, W]` maps.
pub fn preservation_loss<T: Real>(f_hat: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    f_hat.expect_same_shape(f, "preservation_loss")?;
    let wh = spatial(f.shape())?;
    let reference = norms(f).l2.as_f64();
    if reference == 0.0 {
        return Err(Error::DegenerateDenominator(
            "selected kernel's original map is all zero (dead kernel)".into(),
        ));
    }
    Ok(l2_distance(f_hat.data(), f.data()) / (wh * reference))
}

/// `Σ||f̂_j||_1 / (W·H·Σ||f_j||_1)` for `[N-1, H, W]` stacks.
pub fn suppression_loss<T: Real>(f_hat_others: &Tensor<T>, f_others: &Tensor<T>) -> Result<f64> {
    f_hat_others.expect_same_shape(f_others, "suppression_loss")?;
    let wh = spatial(f_others.shape())?;
    let reference = l1(f_others.data());
    if reference == 0.0 {
        return Err(Error::DegenerateDenominator(
            "every other kernel's original map is all zero".into(),
        ));
    }
    Ok(l1(f_hat_others.data()) / (wh * reference))
}

/// `||x̂||_1 / (W0·H0)` for a `[C, H0, W0]` input.
pub fn regularization_loss<T: Real>(x_hat: &Tensor<T>) -> Result<f64> {
    let (_, h, w) = x_hat.dims3("regularization_loss")?;
    Ok(l1(x_hat.data()) / (h * w) as f64)
}

/// Everything about the original input that the loss needs, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct Target<T = f32> {
    pub kernel: KernelRef,
    pub site: KernelSite,
    /// `F_i`, `[H, W]`.
    pub selected: Tensor<T>,
    /// `F_j` for `j ≠ i`, `[N-1, H, W]`.
    pub others: Tensor<T>,
    /// `||F_i||_2`
    pub selected_l2: f64,
    /// `Σ_j ||F_j||_1`
    pub others_l1: f64,
}

impl<T: Real> Target<T> {
    pub fn new(net: &NetworkSpec<T>, x: &Tensor<T>, kernel: &KernelRef) -> Result<Self> {
        let site = net.kernel_site(kernel)?;
        let trace = net.forward_through(x, site.act_index)?;
        let maps = trace.output_at(site.act_index);
        let selected = maps.channel(site.channel)?;
        let selected_l2 = norms(&selected).l2.as_f64();
        if selected_l2 == 0.0 {
            return Err(Error::DeadKernel {
                layer: kernel.layer.clone(),
                index: kernel.index,
            });
        }
        if site.channels < 2 {
            return Err(Error::DegenerateDenominator(format!(
                "layer `{}` has a single kernel, nothing to suppress",
                kernel.layer
            )));
        }
        let others = maps.channels_except(site.channel)?;
        let others_l1 = l1(others.data());
        if others_l1 == 0.0 {
            return Err(Error::DegenerateDenominator(format!(
                "all other kernels of `{}` are dead on this input",
                kernel.layer
            )));
        }
        Ok(Target {
            kernel: kernel.clone(),
            site,
            selected,
            others,
            selected_l2,
            others_l1,
        })
    }

    fn map_area(&self) -> f64 {
        (self.site.height * self.site.width) as f64
    }
}

/// The combined objective bound to one network, target and configuration.
pub struct Objective<'a, T: Real> {
    net: &'a NetworkSpec<T>,
    target: &'a Target<T>,
    cfg: &'a OptimConfig,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(net: &'a NetworkSpec<T>, target: &'a Target<T>, cfg: &'a OptimConfig) -> Self {
        Objective { net, target, cfg }
    }

    fn breakdown(&self, x_hat: &Tensor<T>, maps: &Tensor<T>) -> Result<LossBreakdown> {
        let t = self.target;
        let (n, h, w) = maps.dims3("total_loss")?;
        let plane = h * w;
        let area = t.map_area();
        let i = t.site.channel;
        let sel = &maps.data()[i * plane..(i + 1) * plane];
        let lp = l2_distance(sel, t.selected.data()) / (area * t.selected_l2);
        let others_l1: f64 = (0..n).filter(|&j| j != i).map(|j| l1(&maps.data()[j * plane..(j + 1) * plane])).sum();
        let ls = others_l1 / (area * t.others_l1);
        let lr = regularization_loss(x_hat)?;
        Ok(LossBreakdown::combine(lp, ls, lr, self.cfg))
    }

    pub fn evaluate(&self, x_hat: &Tensor<T>) -> Result<LossBreakdown> {
        let trace = self.net.forward_through(x_hat, self.target.site.act_index)?;
        self.breakdown(x_hat, trace.output_at(self.target.site.act_index))
    }

    /// Loss and its gradient with respect to `x_hat` (plain backprop; the
    /// subgradient of every norm is taken as zero at its kink).
    pub fn evaluate_with_gradient(&self, x_hat: &Tensor<T>) -> Result<(LossBreakdown, Tensor<T>)> {
        let t = self.target;
        let act = t.site.act_index;
        let trace = self.net.forward_through(x_hat, act)?;
        let maps = trace.output_at(act);
        let loss = self.breakdown(x_hat, maps)?;

        let (n, h, w) = maps.dims3("total_loss_gradient")?;
        let plane = h * w;
        let area = t.map_area();
        let i = t.site.channel;
        let mut seed = Tensor::<T>::zeros(&[n, h, w]);
        {
            let s = seed.data_mut();
            let m = maps.data();
            let dist = l2_distance(&m[i * plane..(i + 1) * plane], t.selected.data());
            if dist > 0.0 {
                let k = T::of(1.0 / (dist * area * t.selected_l2));
                for (p, (&fh, &f)) in m[i * plane..(i + 1) * plane].iter().zip(t.selected.data()).enumerate() {
                    s[i * plane + p] = (fh - f) * k;
                }
            }
            if self.cfg.alpha != 0.0 {
                let k = T::of(self.cfg.alpha / (area * t.others_l1));
                for j in (0..n).filter(|&j| j != i) {
                    for p in j * plane..(j + 1) * plane {
                        s[p] = sign(m[p]) * k;
                    }
                }
            }
        }
        let mut grad = self.net.backward(&trace, vec![(act, seed)], ReluRule::Plain)?;
        if self.cfg.beta != 0.0 {
            let (_, h0, w0) = x_hat.dims3("total_loss_gradient")?;
            let k = T::of(self.cfg.beta / (h0 * w0) as f64);
            for (g, &x) in grad.data_mut().iter_mut().zip(x_hat.data()) {
                *g += sign(x) * k;
            }
        }
        Ok((loss, grad))
    }
}

#[inline]
fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub fn total_loss<T: Real>(
    net: &NetworkSpec<T>,
    x_hat: &Tensor<T>,
    target: &Target<T>,
    cfg: &OptimConfig,
) -> Result<LossBreakdown> {
    Objective::new(net, target, cfg).evaluate(x_hat)
}

pub fn total_loss_gradient<T: Real>(
    net: &NetworkSpec<T>,
    x_hat: &Tensor<T>,
    target: &Target<T>,
    cfg: &OptimConfig,
) -> Result<Tensor<T>> {
    Ok(Objective::new(net, target, cfg).evaluate_with_gradient(x_hat)?.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    MaxIters,
    MinLr,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::MaxIters => "max_iters",
            Termination::MinLr => "min_lr",
        })
    }
}

/// Loss of one iterate and the step size used to leave it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult<T = f32> {
    /// Lowest-loss iterate seen.
    pub x_hat: Tensor<T>,
    pub best_loss: LossBreakdown,
    pub best_iteration: usize,
    pub history: Vec<IterRecord>,
    pub iterations_run: usize,
    pub terminated_by: Termination,
}

impl<T> OptimResult<T> {
    pub fn initial_loss(&self) -> LossBreakdown {
        self.history[0].loss
    }
}

fn clamp_channels<T: Real>(x: &mut Tensor<T>, bounds: &[(T, T)]) {
    let plane = x.shape()[1] * x.shape()[2];
    for (c, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        let (lo, hi) = bounds[c];
        for v in chunk {
            *v = v.max(lo).min(hi);
        }
    }
}

/// Minimizes the combined loss starting from `cfg.init`.
///
/// Each iteration evaluates loss and gradient at the current iterate, steps
/// `x ← x − lr·g` and, if enabled, clamps each channel to the normalized
/// image of `[0, 1]`. The step size is multiplied by `decay` whenever the
/// best loss has not improved by a relative `plateau_rel_tol` for
/// `plateau_window` iterations; the run ends at `max_iters` or once the step
/// size drops below `min_lr`.
pub fn optimize_input<T: Real>(
    net: &NetworkSpec<T>,
    x_original: &Tensor<T>,
    kernel: &KernelRef,
    cfg: &OptimConfig,
) -> Result<OptimResult<T>> {
    cfg.validate()?;
    let target = Target::new(net, x_original, kernel)?;
    optimize_with_target(net, x_original, &target, cfg)
}

/// [`optimize_input`] with a precomputed target.
pub fn optimize_with_target<T: Real>(
    net: &NetworkSpec<T>,
    x_original: &Tensor<T>,
    target: &Target<T>,
    cfg: &OptimConfig,
) -> Result<OptimResult<T>> {
    cfg.validate()?;
    let objective = Objective::new(net, target, cfg);
    let bounds: Vec<(T, T)> = net.input_range().into_iter().map(|(lo, hi)| (T::of(lo), T::of(hi))).collect();

    let mut x = match cfg.init {
        Init::FromOriginal => x_original.clone(),
        Init::Zeros => Tensor::zeros(x_original.shape()),
    };
    if cfg.clamp_to_input_range {
        clamp_channels(&mut x, &bounds);
    }

    let mut lr = cfg.lr0;
    let mut history = Vec::with_capacity(cfg.max_iters.min(100_000));
    let mut best: Option<(LossBreakdown, Tensor<T>, usize)> = None;
    let mut plateau_ref = f64::INFINITY;
    let mut stalled = 0usize;
    let mut terminated_by = Termination::MaxIters;

    for it in 0..cfg.max_iters {
        let (loss, grad) = objective.evaluate_with_gradient(&x)?;
        if !loss.total.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "iteration {it} of `{}` kernel {} (loss {:?})",
                target.kernel.layer, target.kernel.index, loss
            )));
        }
        history.push(IterRecord {
            iteration: it,
            loss,
            step_size: lr,
        });
        if best.as_ref().is_none_or(|(b, _, _)| loss.total < b.total) {
            best = Some((loss, x.clone(), it));
        }
        let best_total = best.as_ref().map(|(b, _, _)| b.total).expect("set above");
        if best_total < plateau_ref * (1.0 - cfg.plateau_rel_tol) {
            plateau_ref = best_total;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= cfg.plateau_window {
                lr *= cfg.decay;
                stalled = 0;
                if lr < cfg.min_lr {
                    terminated_by = Termination::MinLr;
                    break;
                }
            }
        }
        if it + 1 == cfg.max_iters {
            break;
        }
        let step = T::of(lr);
        for (v, &g) in x.data_mut().iter_mut().zip(grad.data()) {
            *v -= step * g;
        }
        if cfg.clamp_to_input_range {
            clamp_channels(&mut x, &bounds);
        }
    }

    let (best_loss, x_hat, best_iteration) = best.expect("max_iters >= 1");
    Ok(OptimResult {
        x_hat,
        best_loss,
        best_iteration,
        iterations_run: history.len(),
        history,
        terminated_by,
    })
}

/// One optimization per `beta`, all from the same starting point.
#[derive(Debug)]
pub struct SweepRun<T = f32> {
    pub beta: f64,
    pub result: Result<OptimResult<T>>,
}

pub fn beta_sweep<T: Real>(
    net: &NetworkSpec<T>,
    x: &Tensor<T>,
    kernel: &KernelRef,
    cfg: &OptimConfig,
    betas: &[f64],
) -> Result<Vec<SweepRun<T>>> {
    if betas.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta".into()));
    }
    let target = Target::new(net, x, kernel)?;
    Ok(betas
        .iter()
        .map(|&beta| {
            let cfg = OptimConfig { beta, ..cfg.clone() };
            SweepRun {
                beta,
                result: optimize_with_target(net, x, &target, &cfg),
            }
        })
        .collect())
}

/// Writes `iteration,lp,ls,lr_loss,total,step_size` rows.
pub fn write_history_csv(path: &Path, history: &[IterRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "lp", "ls", "lr_loss", "total", "step_size"])?;
    for r in history {
        w.write_record([
            r.iteration.to_string(),
            r.loss.lp.to_string(),
            r.loss.ls.to_string(),
            r.loss.lr.to_string(),
            r.loss.total.to_string(),
            r.step_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
