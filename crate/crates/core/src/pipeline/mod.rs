//! The four subcommands behind the `semmem` binary.

pub mod artifacts;
pub mod config;
pub mod eval;
pub mod predict;

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::persist;

use artifacts::{load_inputs, SpatialArtifacts, TemporalArtifacts};
use config::RunConfig;
use eval::{evaluate, EvalReport};
use predict::{predict_scenario, predict_stream, SplitFilter, StepReport};

pub const STEP_REPORTS: &str = "step_reports.jsonl";
pub const PREDICT_CATALOG: &str = "predict_catalog.json";
pub const EVAL_REPORT: &str = "eval_report.json";

/// Config file (or defaults) with the seed override applied.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = cfg.with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

pub fn train_spatial(inputs: &[PathBuf], cfg: &RunConfig, out: &Path) -> Result<SpatialArtifacts> {
    let (scenarios, digests) = load_inputs(inputs)?;
    let spatial = SpatialArtifacts::train(&scenarios, digests, cfg)?;
    spatial.write(out)?;
    Ok(spatial)
}

pub fn train_temporal(
    inputs: &[PathBuf],
    spatial_dir: &Path,
    cfg: &RunConfig,
    out: &Path,
) -> Result<TemporalArtifacts> {
    let spatial = SpatialArtifacts::load(spatial_dir)?;
    let (scenarios, digests) = load_inputs(inputs)?;
    let temporal = TemporalArtifacts::train(&scenarios, &spatial, digests, cfg)?;
    temporal.write(out)?;
    Ok(temporal)
}

/// Where `predict` reads time steps from.
pub enum PredictInput {
    /// A scenario file; episodes are filtered by split.
    Scenario(PathBuf, SplitFilter),
    /// Line-delimited step records from a file.
    StreamFile(PathBuf),
    /// Line-delimited step records from standard input.
    Stdin,
}

impl PredictInput {
    /// `-` is stdin, `*.jsonl` a step stream, anything else a scenario file.
    pub fn from_arg(arg: &str, split: SplitFilter) -> Self {
        if arg == "-" {
            PredictInput::Stdin
        } else if arg.ends_with(".jsonl") {
            PredictInput::StreamFile(arg.into())
        } else {
            PredictInput::Scenario(arg.into(), split)
        }
    }
}

pub fn predict(
    input: PredictInput,
    artifacts_dir: &Path,
    cfg: &RunConfig,
    out: Option<&Path>,
    sink: &mut dyn Write,
) -> Result<Vec<StepReport>> {
    let spatial = SpatialArtifacts::load(artifacts_dir)?;
    let temporal = TemporalArtifacts::load(artifacts_dir)?;
    let (reports, catalog) = match input {
        PredictInput::Scenario(path, filter) => {
            let (scenarios, _) = load_inputs(&[path])?;
            predict_scenario(&scenarios[0], filter, &spatial, &temporal, cfg, sink)?
        }
        PredictInput::StreamFile(path) => {
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            predict_stream(&mut BufReader::new(file), &spatial, &temporal, cfg, sink)?
        }
        PredictInput::Stdin => {
            let stdin = io::stdin();
            let mut lock: Box<dyn BufRead> = Box::new(stdin.lock());
            predict_stream(&mut lock, &spatial, &temporal, cfg, sink)?
        }
    };
    if let Some(dir) = out {
        let mut lines = String::new();
        for r in &reports {
            lines.push_str(&serde_json::to_string(r).expect("reports serialize"));
            lines.push('\n');
        }
        persist::write_text(&dir.join(STEP_REPORTS), &lines)?;
        persist::write_text(&dir.join(PREDICT_CATALOG), &catalog.to_json())?;
    }
    Ok(reports)
}

/// Evaluates each fixture. With `artifacts_dir` every fixture is checked
/// against the same trained artifacts; otherwise each fixture is trained
/// on alone, in memory.
pub fn eval(
    inputs: &[PathBuf],
    artifacts_dir: Option<&Path>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<EvalReport> {
    let (scenarios, digests) = load_inputs(inputs)?;
    let loaded = match artifacts_dir {
        Some(dir) => Some((SpatialArtifacts::load(dir)?, TemporalArtifacts::load(dir)?)),
        None => None,
    };
    let mut results = Vec::with_capacity(scenarios.len());
    for (scenario, digest) in scenarios.iter().zip(digests) {
        let eval = match &loaded {
            Some((spatial, temporal)) => evaluate(scenario, spatial, temporal, cfg)?,
            None => {
                let one = std::slice::from_ref(scenario);
                let spatial = SpatialArtifacts::train(one, vec![digest.clone()], cfg)?;
                let temporal = TemporalArtifacts::train(one, &spatial, vec![digest], cfg)?;
                evaluate(scenario, &spatial, &temporal, cfg)?
            }
        };
        results.push(eval);
    }
    let report = EvalReport::new(cfg.clone(), results);
    if let Some(dir) = out {
        persist::write_text(&dir.join(EVAL_REPORT), &persist::to_json(&report))?;
    }
    Ok(report)
}
