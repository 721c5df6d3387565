use crate::args::{CompressArgs, ConfigArgs, EvalArgs, GramDumpArgs, InspectArgs, SynthArgs};
use crate::error::{CliError, Result};
use grail_core::calibration::gram_file::GRAM_MAGIC;
use grail_core::calibration::{accumulate_gram, decode_gram, save_gram};
use grail_core::compensation::DEFAULT_ALPHA;
use grail_core::eval::{
    calib_ablation, evaluate, instantiate, run_sweep, AblationConfig, Dataset, ModelSpec, SweepConfig, SyntheticTask,
    Targets,
};
use grail_core::model::format::{decode_calibration, decode_model, manifest_of, CALIB_MAGIC, MODEL_MAGIC};
use grail_core::model::{load_calibration, load_model, save_calibration, save_model, Block, BlockGraph};
use grail_core::pipeline::{compress_graph, BlockPlan, CompressionPlan};
use grail_core::{FormatError, Tensor};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Options shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: Option<u64>,
    pub timings: bool,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|source| CliError::Write {
            path: PathBuf::from("<stdout>"),
            source,
        })
}

fn emit_json(value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    emit(&s)
}

/// Parses a JSON config, reporting the path to the offending key.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = e.path().to_string();
        CliError::Config {
            path: path.to_path_buf(),
            pointer,
            message: e.into_inner().to_string(),
        }
    })
}

fn load_batch(path: &Path) -> Result<Tensor> {
    info!("reading {}", path.display());
    Ok(load_calibration(path)?)
}

fn load_graph(path: &Path) -> Result<BlockGraph> {
    info!("reading {}", path.display());
    Ok(load_model(path)?)
}

pub fn compress(args: &CompressArgs, g: Globals) -> Result<()> {
    let graph = load_graph(&args.model)?;
    let mut plan = match &args.plan {
        Some(p) => load_config::<CompressionPlan>(p)?,
        None => {
            let method = args
                .method
                .ok_or_else(|| CliError::Usage("--method is required without --plan".into()))?;
            let ratio = args
                .ratio
                .ok_or_else(|| CliError::Usage("--ratio is required without --plan".into()))?;
            let blocks = args.blocks.clone().unwrap_or_else(|| (0..graph.len()).collect());
            CompressionPlan {
                blocks: blocks
                    .into_iter()
                    .map(|block| BlockPlan {
                        block,
                        method,
                        ratio,
                        compensate: args.compensate,
                    })
                    .collect(),
                alpha: args.alpha.unwrap_or(DEFAULT_ALPHA),
                seed: 0,
                calib: None,
            }
        }
    };
    if let Some(seed) = g.seed {
        plan.seed = seed;
    }
    let calib_path = match (&args.calib, &plan.calib) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(CliError::Usage("no calibration file: pass --calib or set `calib` in the plan".into())),
    };
    let calib = load_batch(&calib_path)?;
    let outcome = compress_graph(&graph, &calib, &plan)?;
    save_model(&outcome.graph, &args.out)?;
    info!("wrote {}", args.out.display());
    let mut reports = outcome.reports;
    if !g.timings {
        for r in reports.iter_mut() {
            r.t_calib_s = 0.0;
            r.t_comp_s = 0.0;
        }
    }
    emit_json(&json!({
        "model": args.out.display().to_string(),
        "alpha": plan.alpha,
        "seed": plan.seed,
        "blocks": reports,
    }))
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let graph = load_graph(&args.model)?;
    let data = Dataset::from_tensors(load_batch(&args.data)?, load_batch(&args.targets)?)?;
    let metric = data.metric();
    let value = evaluate(&graph, &data)?;
    emit_json(&json!({
        "metric": metric.name(),
        "value": value,
        "n_samples": data.inputs.shape()[0],
    }))
}

fn write_or_emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            write(p, text.as_bytes())?;
            info!("wrote {}", p.display());
            Ok(())
        }
        None => emit(text),
    }
}

pub fn sweep(args: &ConfigArgs, g: Globals) -> Result<()> {
    let mut cfg: SweepConfig = load_config(&args.config)?;
    if let Some(seed) = g.seed {
        cfg.task.seed = seed;
    }
    info!("sweep over {} cells", cfg.n_cells());
    let report = run_sweep(&cfg)?;
    write_or_emit(&args.out, &report.to_csv(g.timings))
}

pub fn ablate(args: &ConfigArgs, g: Globals) -> Result<()> {
    let mut cfg: AblationConfig = load_config(&args.config)?;
    if let Some(seed) = g.seed {
        cfg.task.seed = seed;
    }
    info!("ablation over {} sizes x {} seeds", cfg.sizes.len(), cfg.seeds.len());
    let report = calib_ablation(&cfg)?;
    write_or_emit(&args.out, &report.to_csv())
}

pub fn gram_dump(args: &GramDumpArgs) -> Result<()> {
    let graph = load_graph(&args.model)?;
    let calib = load_batch(&args.calib)?;
    let stats = accumulate_gram(&graph, &calib, args.block)?;
    save_gram(&stats, &args.out)?;
    info!("wrote {}", args.out.display());
    emit_json(&json!({
        "block": args.block,
        "width": stats.width(),
        "n_samples": stats.n_samples(),
        "trace": stats.g().trace(),
        "out": args.out.display().to_string(),
    }))
}

fn parameter_count(graph: &BlockGraph) -> usize {
    graph
        .blocks()
        .iter()
        .map(|b| match b {
            Block::Dense(d) => d.w_producer.len() + d.b_producer.len() + d.w_consumer.len() + d.b_consumer.len(),
            Block::Conv(c) => c.w_producer.len() + c.b_producer.len() + c.w_consumer.len() + c.b_consumer.len(),
            Block::Ffn(f) => f.w_fc.len() + f.b_fc.len() + f.w_proj.len() + f.b_proj.len(),
            Block::Attention(a) => a.w_q.len() + a.w_k.len() + a.w_v.len() + a.w_o.len(),
        })
        .sum()
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let bytes = read(&args.path)?;
    let magic = &bytes[..bytes.len().min(4)];
    let value = if magic == MODEL_MAGIC {
        let graph = decode_model(&bytes)?;
        json!({
            "format": "grlw",
            "parameters": parameter_count(&graph),
            "manifest": manifest_of(&graph),
        })
    } else if magic == CALIB_MAGIC {
        let t = decode_calibration(&bytes)?;
        json!({ "format": "grlc", "shape": t.shape() })
    } else if magic == GRAM_MAGIC {
        let s = decode_gram(&bytes)?;
        json!({
            "format": "grlg",
            "width": s.width(),
            "n_samples": s.n_samples(),
            "trace": s.g().trace(),
        })
    } else {
        return Err(grail_core::GrailError::from(FormatError::BadMagic {
            expected: "GRLW, GRLC or GRLG".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        })
        .into());
    };
    emit_json(&value)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub task: SyntheticTask,
    #[serde(default)]
    pub model: ModelSpec,
}

pub fn synth(args: &SynthArgs, g: Globals) -> Result<()> {
    let cfg: SynthConfig = load_config(&args.config)?;
    let seed = g.seed.unwrap_or(0);
    let inst = instantiate(&cfg.task, &cfg.model, seed)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|source| CliError::Write {
        path: args.out_dir.clone(),
        source,
    })?;
    let path = |name: &str| args.out_dir.join(name);
    save_model(&inst.model, path("model.grlw"))?;
    save_calibration(&inst.train, path("calib.grlc"))?;
    save_calibration(&inst.eval.inputs, path("eval_inputs.grlc"))?;
    let targets = match &inst.eval.targets {
        Targets::Labels(l) => Tensor::vector(l.iter().map(|&c| c as f64).collect()),
        Targets::Values(t) => t.clone(),
    };
    save_calibration(&targets, path("eval_targets.grlc"))?;
    info!("wrote synthetic task to {}", args.out_dir.display());
    emit_json(&json!({
        "seed": seed,
        "metric": inst.metric.name(),
        "metric_original": evaluate(&inst.model, &inst.eval)?,
        "model": path("model.grlw").display().to_string(),
        "calib": path("calib.grlc").display().to_string(),
        "eval_inputs": path("eval_inputs.grlc").display().to_string(),
        "eval_targets": path("eval_targets.grlc").display().to_string(),
    }))
}
