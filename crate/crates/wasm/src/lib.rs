//! Browser bindings. Every export takes and returns a JSON string so the page
//! needs no generated TypeScript types.

use grail_core::calibration::GramStats;
use grail_core::compensation::{compress_block, Compensation, RidgeConfig};
use grail_core::eval::{calib_ablation, run_sweep, AblationConfig, ModelFamily, ModelSpec, SweepConfig, SyntheticTask};
use grail_core::model::{Activation, Block, DenseBlock};
use grail_core::pipeline::{kept_units, Method};
use grail_core::rng::gaussian_matrix;
use grail_core::selectors::select_magnitude;
use grail_core::selectors::Norm;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn default_family() -> ModelFamily {
    ModelFamily::Mlp
}

fn default_method() -> Method {
    Method::Wanda
}

fn default_redundancy() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    1e-3
}

/// Knobs shared by the curve exports.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoParams {
    #[serde(default = "default_family")]
    pub family: ModelFamily,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_redundancy")]
    pub redundancy: f64,
    #[serde(default)]
    pub dup_noise: Option<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn parse<T: for<'de> Deserialize<'de>>(json: &str) -> Result<T, String> {
    serde_json::from_str(json).map_err(|e| format!("bad parameters: {e}"))
}

fn small_task(p: &DemoParams) -> (SyntheticTask, ModelSpec) {
    let task = SyntheticTask {
        n_train: 256,
        n_eval: 128,
        ..SyntheticTask::regression(12, p.seed)
    };
    let mut model = ModelSpec::family(p.family);
    model.hidden = 24;
    model.redundancy = p.redundancy;
    if let Some(n) = p.dup_noise {
        model.dup_noise = n;
    }
    model.seq_len = 4;
    model.spatial = 4;
    (task, model)
}

#[derive(Debug, Serialize)]
pub struct RatioCurve {
    pub metric: &'static str,
    pub ratios: Vec<f64>,
    pub original: Vec<f64>,
    pub compressed: Vec<f64>,
    pub compensated: Vec<f64>,
}

/// Metric against removal ratio, with and without compensation, averaged over three seeds.
pub fn ratio_curve_json(params: &str) -> Result<String, String> {
    let p: DemoParams = parse(params)?;
    let (task, model) = small_task(&p);
    let mut cfg = SweepConfig::new(task, model);
    cfg.methods = vec![p.method];
    cfg.ratios = (0..9).map(|i| i as f64 / 10.0).collect();
    cfg.seeds = vec![0, 1, 2];
    cfg.calib_sizes = vec![256];
    cfg.alpha = p.alpha;
    let report = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let mean = |r: f64, f: fn(&grail_core::eval::SweepRow) -> f64| {
        let v: Vec<f64> = report.cell(p.method, r).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let curve = RatioCurve {
        metric: report.metric.name(),
        original: cfg.ratios.iter().map(|&r| mean(r, |x| x.metric_original)).collect(),
        compressed: cfg.ratios.iter().map(|&r| mean(r, |x| x.metric_compressed)).collect(),
        compensated: cfg.ratios.iter().map(|&r| mean(r, |x| x.metric_compensated)).collect(),
        ratios: cfg.ratios,
    };
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[derive(Debug, Serialize)]
pub struct AblationCurve {
    pub metric: &'static str,
    pub sizes: Vec<usize>,
    pub mean_improvement: Vec<f64>,
}

fn default_ratio() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
struct AblationParams {
    #[serde(flatten)]
    base: DemoParams,
    #[serde(default = "default_ratio")]
    ratio: f64,
}

/// Mean improvement from compensation against calibration size.
pub fn ablation_curve_json(params: &str) -> Result<String, String> {
    let p: AblationParams = parse(params)?;
    let (task, model) = small_task(&p.base);
    let mut cfg = AblationConfig::new(task, model);
    cfg.method = p.base.method;
    cfg.ratio = p.ratio;
    cfg.sizes = vec![2, 4, 8, 16, 32, 64, 128, 256];
    cfg.seeds = vec![0, 1, 2, 3];
    cfg.alpha = p.base.alpha;
    let report = calib_ablation(&cfg).map_err(|e| e.to_string())?;
    let curve = AblationCurve {
        metric: report.metric.name(),
        sizes: report.points.iter().map(|q| q.calib_size).collect(),
        mean_improvement: report.points.iter().map(|q| q.mean_improvement).collect(),
    };
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlphaParams {
    #[serde(default = "default_ratio")]
    ratio: f64,
    /// Number of calibration rows.
    #[serde(default = "default_rows")]
    n: usize,
    #[serde(default)]
    seed: u64,
}

fn default_rows() -> usize {
    64
}

#[derive(Debug, Serialize)]
pub struct AlphaCurve {
    pub alphas: Vec<f64>,
    pub lambdas: Vec<f64>,
    /// Consumer output error on the calibration rows, relative to the uncompensated error.
    pub relative_error: Vec<f64>,
    pub kept: usize,
    pub width: usize,
}

/// Calibration error of one dense block across the ridge strength.
pub fn alpha_curve_json(params: &str) -> Result<String, String> {
    let p: AlphaParams = parse(params)?;
    if !(0.0..1.0).contains(&p.ratio) || p.n == 0 {
        return Err("ratio must lie in [0, 1) and n must be positive".into());
    }
    let (c, h, o) = (8, 24, 8);
    let block = Block::Dense(DenseBlock {
        w_producer: gaussian_matrix(h, c, p.seed).scale(1.0 / (c as f64).sqrt()),
        b_producer: gaussian_matrix(1, h, p.seed + 1).reshape(vec![h]).unwrap().scale(0.1),
        activation: Activation::Relu,
        w_consumer: gaussian_matrix(o, h, p.seed + 2).scale(1.0 / (h as f64).sqrt()),
        b_consumer: grail_core::Tensor::zeros(&[o]),
    });
    let x = gaussian_matrix(p.n, c, p.seed + 3);
    let (_, cap) = block.forward(&x, true).map_err(|e| e.to_string())?;
    let gram = GramStats::from_rows(&cap.expect("captured"), None).map_err(|e| e.to_string())?;
    let Block::Dense(d) = &block else { unreachable!() };
    let k = kept_units(h, p.ratio);
    let decision = select_magnitude(&d.w_producer, k, Norm::L2).map_err(|e| e.to_string())?;
    let alphas: Vec<f64> = (0..=24).map(|i| 10f64.powf(-6.0 + 5.9 * i as f64 / 24.0)).collect();
    let mut lambdas = Vec::new();
    let mut rel = Vec::new();
    for &a in &alphas {
        let cfg = RidgeConfig::new(a).map_err(|e| e.to_string())?;
        let (_, r) = compress_block(&block, &decision, &gram, Compensation::Ridge(cfg)).map_err(|e| e.to_string())?;
        lambdas.push(r.lambda_used);
        rel.push(if r.calib_error_before > 0.0 { r.calib_error_after / r.calib_error_before } else { 0.0 });
    }
    let curve = AlphaCurve {
        alphas,
        lambdas,
        relative_error: rel,
        kept: k,
        width: h,
    };
    Ok(serde_json::to_string(&curve).expect("curve serializes"))
}

#[wasm_bindgen]
pub fn ratio_curve(params: &str) -> Result<String, JsError> {
    ratio_curve_json(params).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn ablation_curve(params: &str) -> Result<String, JsError> {
    ablation_curve_json(params).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn alpha_curve(params: &str) -> Result<String, JsError> {
    alpha_curve_json(params).map_err(|e| JsError::new(&e))
}
