use super::task::{instantiate, ModelSpec, SyntheticTask, TaskInstance};
use super::{evaluate, Metric};
use crate::compensation::{RidgeConfig, DEFAULT_ALPHA};
use crate::error::{GrailError, Result};
use crate::pipeline::{compress_graph, CompressionPlan, Method};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

pub const SWEEP_HEADER: &str =
    "method,ratio,seed,calib_size,metric_original,metric_compressed,metric_compensated,t_calib_s,t_comp_s";

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_ratios() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn ablation_seeds() -> Vec<u64> {
    (0..10).collect()
}

fn default_sizes() -> Vec<usize> {
    vec![128]
}

fn ablation_sizes() -> Vec<usize> {
    vec![8, 16, 32, 64, 128, 256]
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_ratio() -> f64 {
    0.5
}

fn default_method() -> Method {
    Method::Wanda
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_sizes")]
    pub calib_sizes: Vec<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl SweepConfig {
    /// Default grids around a task.
    pub fn new(task: SyntheticTask, model: ModelSpec) -> Self {
        Self {
            task,
            model,
            methods: all_methods(),
            ratios: default_ratios(),
            seeds: default_seeds(),
            calib_sizes: default_sizes(),
            alpha: default_alpha(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate(&self.model)?;
        RidgeConfig::new(self.alpha)?;
        let bad = |m: String| Err(GrailError::InvalidArgument(m));
        if self.methods.is_empty() || self.ratios.is_empty() || self.seeds.is_empty() || self.calib_sizes.is_empty() {
            return bad("methods, ratios, seeds and calib_sizes must all be non-empty".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("ratio {r} outside [0, 1)"));
        }
        if let Some(s) = self.calib_sizes.iter().find(|&&s| s == 0 || s > self.task.n_train) {
            return bad(format!("calibration size {s} outside 1..={}", self.task.n_train));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.methods.len() * self.ratios.len() * self.seeds.len() * self.calib_sizes.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub method: Method,
    pub ratio: f64,
    pub seed: u64,
    pub calib_size: usize,
    pub metric_original: f64,
    pub metric_compressed: f64,
    pub metric_compensated: f64,
    pub t_calib_s: f64,
    pub t_comp_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub metric: Metric,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// CSV with a header line. Timing columns are written as zero unless
    /// `timings` is set, so repeated runs give identical bytes.
    pub fn to_csv(&self, timings: bool) -> String {
        let mut out = String::from(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            let (tc, tk) = if timings { (r.t_calib_s, r.t_comp_s) } else { (0.0, 0.0) };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                fmt_sig9(r.ratio),
                r.seed,
                r.calib_size,
                fmt_sig9(r.metric_original),
                fmt_sig9(r.metric_compressed),
                fmt_sig9(r.metric_compensated),
                fmt_sig9(tc),
                fmt_sig9(tk),
            );
        }
        out
    }

    /// Rows matching a method and ratio.
    pub fn cell(&self, method: Method, ratio: f64) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(move |r| r.method == method && r.ratio == ratio)
    }
}

/// `%.9g`: nine significant digits, trailing zeros dropped.
pub fn fmt_sig9(v: f64) -> String {
    const P: i32 = 9;
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim_zeros(mantissa), sign, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

struct Cell {
    instance: usize,
    method: Method,
    ratio: f64,
    seed: u64,
    calib_size: usize,
}

fn run_cell(inst: &TaskInstance, original: f64, cell: &Cell, alpha: f64) -> Result<SweepRow> {
    let calib = inst.calibration(cell.calib_size)?;
    let n = inst.model.len();
    let plain = CompressionPlan::uniform(n, cell.method, cell.ratio, false, alpha, cell.seed);
    let compressed = compress_graph(&inst.model, &calib, &plain)?;
    let ridge = CompressionPlan::uniform(n, cell.method, cell.ratio, true, alpha, cell.seed);
    let compensated = compress_graph(&inst.model, &calib, &ridge)?;
    Ok(SweepRow {
        method: cell.method,
        ratio: cell.ratio,
        seed: cell.seed,
        calib_size: cell.calib_size,
        metric_original: original,
        metric_compressed: evaluate(&compressed.graph, &inst.eval)?,
        metric_compensated: evaluate(&compensated.graph, &inst.eval)?,
        t_calib_s: compensated.reports.iter().map(|r| r.t_calib_s).sum(),
        t_comp_s: compensated.reports.iter().map(|r| r.t_comp_s).sum(),
    })
}

#[cfg(feature = "parallel")]
fn map_ordered<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_ordered<T, U>(items: &[T], f: impl Fn(&T) -> Result<U>) -> Result<Vec<U>> {
    items.iter().map(f).collect()
}

/// Every `(method, ratio, seed, calib_size)` cell, in that nesting order.
/// Each seed gets its own model and data; cells may run in parallel but the
/// report does not depend on scheduling.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let instances = map_ordered(&cfg.seeds, |&seed| {
        let inst = instantiate(&cfg.task, &cfg.model, seed)?;
        let original = evaluate(&inst.model, &inst.eval)?;
        Ok((inst, original))
    })?;
    let mut cells = Vec::with_capacity(cfg.n_cells());
    for &method in &cfg.methods {
        for &ratio in &cfg.ratios {
            for (instance, &seed) in cfg.seeds.iter().enumerate() {
                for &calib_size in &cfg.calib_sizes {
                    cells.push(Cell {
                        instance,
                        method,
                        ratio,
                        seed,
                        calib_size,
                    });
                }
            }
        }
    }
    let rows = map_ordered(&cells, |c| {
        let (inst, original) = &instances[c.instance];
        run_cell(inst, *original, c, cfg.alpha)
    })?;
    Ok(SweepReport {
        metric: cfg.task.metric(),
        rows,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "ablation_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "ablation_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

impl AblationConfig {
    pub fn new(task: SyntheticTask, model: ModelSpec) -> Self {
        Self {
            task,
            model,
            method: default_method(),
            ratio: default_ratio(),
            sizes: ablation_sizes(),
            seeds: ablation_seeds(),
            alpha: default_alpha(),
        }
    }

    fn sweep(&self) -> SweepConfig {
        SweepConfig {
            task: self.task.clone(),
            model: self.model.clone(),
            methods: vec![self.method],
            ratios: vec![self.ratio],
            seeds: self.seeds.clone(),
            calib_sizes: self.sizes.clone(),
            alpha: self.alpha,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationPoint {
    pub calib_size: usize,
    /// Mean over seeds of the compensated-over-compressed gain.
    pub mean_improvement: f64,
    /// Per-seed gains, in seed order.
    pub improvements: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub metric: Metric,
    pub points: Vec<AblationPoint>,
    pub sweep: SweepReport,
}

impl AblationReport {
    pub fn point(&self, size: usize) -> Option<&AblationPoint> {
        self.points.iter().find(|p| p.calib_size == size)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("calib_size,mean_improvement,min_improvement,max_improvement,n_seeds\n");
        for p in &self.points {
            let min = p.improvements.iter().copied().fold(f64::INFINITY, f64::min);
            let max = p.improvements.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                p.calib_size,
                fmt_sig9(p.mean_improvement),
                fmt_sig9(min),
                fmt_sig9(max),
                p.improvements.len()
            );
        }
        out
    }
}

/// Compensation gain as a function of calibration-set size.
pub fn calib_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let sweep = run_sweep(&cfg.sweep())?;
    let metric = sweep.metric;
    let points = cfg
        .sizes
        .iter()
        .map(|&size| {
            let improvements: Vec<f64> = sweep
                .rows
                .iter()
                .filter(|r| r.calib_size == size)
                .map(|r| metric.improvement(r.metric_compressed, r.metric_compensated))
                .collect();
            AblationPoint {
                calib_size: size,
                mean_improvement: improvements.iter().sum::<f64>() / improvements.len() as f64,
                improvements,
            }
        })
        .collect();
    Ok(AblationReport { metric, points, sweep })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_matches_printf_g() {
        assert_eq!(fmt_sig9(0.1), "0.1");
        assert_eq!(fmt_sig9(1.0), "1");
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456789.0), "123456789");
        assert_eq!(fmt_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(fmt_sig9(0.0001), "0.0001");
        assert_eq!(fmt_sig9(0.00001234), "1.234e-05");
        assert_eq!(fmt_sig9(-2.5), "-2.5");
        assert_eq!(fmt_sig9(9.9999999999), "10");
    }
}
