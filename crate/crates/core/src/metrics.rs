//! SSIM / MSE evaluation of optimized inputs and Table-style aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Global single-window SSIM between two equally shaped maps.
///
/// Population statistics over all elements; `C1 = (0.01·L)²`,
/// `C2 = (0.03·L)²` with dynamic range `L = max(max a, max b, 1e-12)`.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let n = a.len();
    if n < 2 {
        return Err(Error::shape("ssim", format!("need at least 2 elements, got {n}")));
    }
    let nf = n as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    let mut range = 1e-12f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        sa += x;
        sb += y;
        range = range.max(x).max(y);
    }
    let (ma, mb) = (sa / nf, sb / nf);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x.as_f64() - ma, y.as_f64() - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / nf, vb / nf, cov / nf);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// Mean of squared values over every element of the stack.
pub fn mse_others<T: Real>(f_hat_others: &Tensor<T>) -> f64 {
    if f_hat_others.is_empty() {
        return 0.0;
    }
    f_hat_others.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / f_hat_others.len() as f64
}

pub fn mse_selected<T: Real>(f_hat: &Tensor<T>, f: &Tensor<T>) -> Result<f64> {
    f_hat.expect_same_shape(f, "mse_selected")?;
    if f.is_empty() {
        return Ok(0.0);
    }
    Ok(f_hat
        .data()
        .iter()
        .zip(f.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / f.len() as f64)
}

/// One (image, kernel, method) evaluation. Also the row type of the shared
/// `evals.csv` schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEval {
    pub method: String,
    pub image_id: String,
    pub layer: String,
    pub kernel: usize,
    pub seed: u64,
    pub ssim_selected: f64,
    pub mse_selected: f64,
    pub mse_others: f64,
}

impl KernelEval {
    /// Scores re-fed maps `f_hat` (`[N, H, W]`) against the original maps `f`.
    pub fn from_maps<T: Real>(
        method: &str,
        image_id: &str,
        layer: &str,
        kernel: usize,
        seed: u64,
        f_hat: &Tensor<T>,
        f: &Tensor<T>,
    ) -> Result<Self> {
        f_hat.expect_same_shape(f, "KernelEval::from_maps")?;
        let sel_hat = f_hat.channel(kernel)?;
        let sel = f.channel(kernel)?;
        Ok(KernelEval {
            method: method.to_string(),
            image_id: image_id.to_string(),
            layer: layer.to_string(),
            kernel,
            seed,
            ssim_selected: ssim(&sel_hat, &sel)?,
            mse_selected: mse_selected(&sel_hat, &sel)?,
            mse_others: mse_others(&f_hat.channels_except(kernel)?),
        })
    }

    fn sort_key(&self) -> (&str, &str, &str, usize) {
        (&self.method, &self.image_id, &self.layer, self.kernel)
    }
}

pub fn sort_evals(evals: &mut [KernelEval]) {
    evals.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub fn write_evals_csv(path: &Path, evals: &[KernelEval]) -> Result<()> {
    let mut rows = evals.to_vec();
    sort_evals(&mut rows);
    let mut w = csv::Writer::from_path(path)?;
    // Header is written explicitly so an empty file still carries it.
    w.write_record([
        "method",
        "image_id",
        "layer",
        "kernel",
        "seed",
        "ssim_selected",
        "mse_selected",
        "mse_others",
    ])?;
    for e in &rows {
        w.write_record([
            e.method.clone(),
            e.image_id.clone(),
            e.layer.clone(),
            e.kernel.to_string(),
            e.seed.to_string(),
            e.ssim_selected.to_string(),
            e.mse_selected.to_string(),
            e.mse_others.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_evals_csv(path: &Path) -> Result<Vec<KernelEval>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Mean and sample standard deviation (divisor `n-1`, zero for `n == 1`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("cannot summarize an empty group".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Summary {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    LayerAndMethod,
    Method,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    /// Empty when grouping by method only.
    pub layer: String,
    pub method: String,
    pub ssim_selected: Summary,
    pub mse_others: Summary,
    pub mse_selected: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

pub fn aggregate_report(evals: &[KernelEval], grouping: Grouping) -> Result<MetricsReport> {
    if evals.is_empty() {
        return Err(Error::Config("no evaluations to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String), Vec<&KernelEval>> = BTreeMap::new();
    for e in evals {
        let layer = match grouping {
            Grouping::LayerAndMethod => e.layer.clone(),
            Grouping::Method => String::new(),
        };
        groups.entry((layer, e.method.clone())).or_default().push(e);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((layer, method), members) in groups {
        let col = |f: fn(&KernelEval) -> f64| Summary::of(&members.iter().map(|e| f(e)).collect::<Vec<_>>());
        rows.push(ReportRow {
            layer,
            method,
            ssim_selected: col(|e| e.ssim_selected)?,
            mse_others: col(|e| e.mse_others)?,
            mse_selected: col(|e| e.mse_selected)?,
        });
    }
    Ok(MetricsReport { rows })
}

impl MetricsReport {
    pub fn row(&self, layer: &str, method: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.layer == layer && r.method == method)
    }

    pub fn total_count(&self) -> usize {
        self.rows.iter().map(|r| r.ssim_selected.count).sum()
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let lw = self.rows.iter().map(|r| r.layer.len()).max().unwrap_or(0).max(5);
        let mw = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
        let _ = writeln!(
            s,
            "{:<lw$}  {:<mw$}  {:>5}  {:>19}  {:>23}",
            "layer", "method", "n", "SSIM(selected)", "MSE(others)"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<lw$}  {:<mw$}  {:>5}  {:>9.4} ± {:<7.4}  {:>11.4e} ± {:<9.3e}",
                r.layer,
                r.method,
                r.ssim_selected.count,
                r.ssim_selected.mean,
                r.ssim_selected.std,
                r.mse_others.mean,
                r.mse_others.std
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "layer",
            "method",
            "count",
            "ssim_selected_mean",
            "ssim_selected_std",
            "mse_others_mean",
            "mse_others_std",
            "mse_selected_mean",
            "mse_selected_std",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.layer.clone(),
                r.method.clone(),
                r.ssim_selected.count.to_string(),
                r.ssim_selected.mean.to_string(),
                r.ssim_selected.std.to_string(),
                r.mse_others.mean.to_string(),
                r.mse_others.std.to_string(),
                r.mse_selected.mean.to_string(),
                r.mse_selected.std.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Joint `(mse_selected, mse_others)` export, one row per evaluation,
/// ordered by (method, image_id, kernel).
pub fn export_joint(evals: &[KernelEval], path: &Path) -> Result<()> {
    let mut rows: Vec<&KernelEval> = evals.iter().collect();
    rows.sort_by(|a, b| {
        (&a.method, &a.image_id, a.kernel, &a.layer).cmp(&(&b.method, &b.image_id, b.kernel, &b.layer))
    });
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "image_id", "layer", "kernel", "mse_selected", "mse_others"])?;
    for e in rows {
        w.write_record([
            e.method.clone(),
            e.image_id.clone(),
            e.layer.clone(),
            e.kernel.to_string(),
            e.mse_selected.to_string(),
            e.mse_others.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
