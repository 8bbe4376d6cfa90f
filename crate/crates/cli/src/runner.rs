//! Command orchestration. Every command follows the same shape: load and
//! validate the config, load or generate the world, compute all artifacts in
//! memory, then write them to a fresh output directory together with a
//! manifest of checksums. Nothing is written until the computation has
//! succeeded, so a failed run leaves no partial result tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::PathBuf;

use geolevels_core::analysis::{
    correlation, evaluate, gini, inequality_eval, median_of, r_squared, robustness_curve,
    transfer_eval, zipf_fit, CorrelationKind, EvalConfig,
};
use geolevels_core::rng;
use geolevels_core::scaling::train_pipeline_with_report;
use geolevels_core::synthworld::dataset::{export_dataset, load_dataset};
use geolevels_core::synthworld::{generate_world, DistrictId, World};
use serde::Serialize;

use crate::checkpoint::{load_model, model_bytes};
use crate::config::{ResolvedConfig, RunConfig, ZipfTarget};
use crate::error::CliError;
use crate::sha256_hex;
use crate::table::{render, Cell};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Gen,
    Train,
    Predict,
    Evaluate,
    Robustness,
    Transfer,
    Inequality,
    Zipf,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Evaluate => "evaluate",
            Command::Robustness => "robustness",
            Command::Transfer => "transfer",
            Command::Inequality => "inequality",
            Command::Zipf => "zipf",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// A finished artifact: file name and exact bytes.
type Artifact = (&'static str, Vec<u8>);

const TAG_RUN_TRANSFER: u64 = 0x434c_0001;
const TAG_RUN_WORLD_TRAIN: u64 = 0x434c_0002;

pub fn run(inv: &Invocation) -> Result<String, CliError> {
    validate_thread_env()?;
    let resolved = RunConfig::load(&inv.config_path)?.resolve(inv.seed, inv.out.clone())?;
    let artifacts = execute(inv.command, &resolved)?;
    write_run_dir(inv.command, &resolved, &artifacts)
}

/// The only environment knob. The reference implementation runs sequentially,
/// so the value is validated and recorded in the manifest but drives nothing.
fn validate_thread_env() -> Result<(), CliError> {
    match std::env::var("GEOLEVELS_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(()),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(CliError::Config("GEOLEVELS_THREADS is not valid unicode".into()))
        }
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(CliError::Config(format!(
                "GEOLEVELS_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn execute(command: Command, rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    match command {
        Command::Gen => cmd_gen(rc),
        Command::Train => cmd_train(rc),
        Command::Predict => cmd_predict(rc),
        Command::Evaluate => cmd_evaluate(rc),
        Command::Robustness => cmd_robustness(rc),
        Command::Transfer => cmd_transfer(rc),
        Command::Inequality => cmd_inequality(rc),
        Command::Zipf => cmd_zipf(rc),
    }
}

fn load_world(rc: &ResolvedConfig) -> Result<World, CliError> {
    if let Some(path) = &rc.config.world.dataset {
        Ok(load_dataset(path)?)
    } else {
        let spec = rc.config.world.spec.as_ref().expect("config validation settled the source");
        let seed = rc.config.world.seed.unwrap_or(rc.seed);
        Ok(generate_world(spec, seed)?)
    }
}

/// Commands that build worlds per seed regenerate from the spec; a fixed
/// dataset cannot provide them.
fn require_spec(rc: &ResolvedConfig, command: &str) -> Result<(), CliError> {
    if rc.config.world.spec.is_none() {
        return Err(CliError::Config(format!("{command} generates worlds; it needs [world.spec]")));
    }
    Ok(())
}

fn eval_config(rc: &ResolvedConfig) -> EvalConfig {
    EvalConfig {
        pipeline: rc.config.pipeline.clone(),
        train_fraction: rc.config.evaluate.train_fraction,
        repetitions: rc.config.evaluate.repetitions,
        share_stage12: rc.config.evaluate.share_stage12,
    }
}

fn district_ids(world: &World) -> Vec<DistrictId> {
    world.districts().iter().map(|d| d.id).collect()
}

fn oracle_tile_truths(world: &World) -> Vec<f64> {
    world.tiles().iter().map(|t| t.true_score.max(0.0) * world.factor(t.district)).collect()
}

fn summary_artifact<T: Serialize>(value: &T) -> Result<Artifact, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::Io(format!("summary serialization: {e}")))?;
    bytes.push(b'\n');
    Ok(("summary.json", bytes))
}

/// Pearson across harness-level aggregates; None when one side is constant.
fn corr_opt(a: &[f64], b: &[f64]) -> Option<f64> {
    correlation(a, b, CorrelationKind::Pearson).ok()
}

fn cmd_gen(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    require_spec(rc, "gen")?;
    let world = load_world(rc)?;
    let mut dataset = Vec::new();
    export_dataset(&world, &mut dataset)?;
    let summary = serde_json::json!({
        "world_seed": world.seed(),
        "districts": world.districts().len(),
        "tiles": world.tiles().len(),
        "indicators": world.spec().indicators.keys().collect::<Vec<_>>(),
        "dataset": "world.jsonl",
    });
    Ok(vec![("world.jsonl", dataset), summary_artifact(&summary)?])
}

fn cmd_train(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let world = load_world(rc)?;
    let ids = district_ids(&world);
    let (model, report) = train_pipeline_with_report(
        &world,
        &rc.config.indicator,
        &ids,
        &rc.config.pipeline,
        rc.seed,
    )?;
    let summary = serde_json::json!({
        "train_districts": ids.len(),
        "augmented_entries": report.entries,
        "guarded_targets": report.guarded_targets,
        "checkpoint": "model.ckpt",
    });
    Ok(vec![("model.ckpt", model_bytes(&model)?), summary_artifact(&summary)?])
}

fn cmd_predict(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let Some(path) = &rc.config.predict.checkpoint else {
        return Err(CliError::Config("predict needs predict.checkpoint".into()));
    };
    let world = load_world(rc)?;
    let model = load_model(path)?;
    let truth = world.ground_truth(&rc.config.indicator)?;
    let mut rows = Vec::new();
    let mut t = Vec::new();
    let mut p = Vec::new();
    for district in world.districts() {
        let predicted = model.predict_district(district, &world)?;
        rows.push(vec![
            Cell::from(district.id.0),
            Cell::from(district.tiles.len()),
            Cell::from(truth[&district.id]),
            Cell::from(predicted),
        ]);
        t.push(truth[&district.id]);
        p.push(predicted);
    }
    let table = render(&["district", "tiles", "truth", "prediction"], &rows);
    let summary = serde_json::json!({
        "districts": rows.len(),
        "r_squared": r_squared(&t, &p)?,
        "pearson": corr_opt(&t, &p),
        "spearman": correlation(&t, &p, CorrelationKind::Spearman).ok(),
    });
    Ok(vec![("predictions.csv", table.into_bytes()), summary_artifact(&summary)?])
}

fn cmd_evaluate(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let world = load_world(rc)?;
    let report = evaluate(&world, &rc.config.indicator, &eval_config(rc), rc.seed)?;
    let rows: Vec<Vec<Cell>> = report
        .r_squared
        .iter()
        .zip(&report.guarded_targets)
        .enumerate()
        .map(|(i, (&r2, &guarded))| vec![Cell::from(i), Cell::from(r2), Cell::from(guarded)])
        .collect();
    let table = render(&["repetition", "r_squared", "guarded_targets"], &rows);
    let summary = serde_json::json!({
        "repetitions": report.r_squared.len(),
        "mean": report.mean,
        "std_dev": report.std_dev,
        "median": report.median(),
        "fingerprint": report.fingerprint,
    });
    Ok(vec![("evaluate.csv", table.into_bytes()), summary_artifact(&summary)?])
}

fn cmd_robustness(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let world = load_world(rc)?;
    let base = eval_config(rc);
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for augmented in [true, false] {
        let points = robustness_curve(
            &world,
            &rc.config.indicator,
            &rc.config.robustness.fractions,
            augmented,
            &base,
            rc.seed,
        )?;
        for point in points {
            for (i, &r2) in point.report.r_squared.iter().enumerate() {
                rows.push(vec![
                    Cell::from(point.fraction),
                    Cell::from(augmented),
                    Cell::from(i),
                    Cell::from(r2),
                ]);
            }
            curves.push(serde_json::json!({
                "fraction": point.fraction,
                "augmented": augmented,
                "median": point.report.median(),
                "mean": point.report.mean,
            }));
        }
    }
    let table = render(&["fraction", "augmented", "repetition", "r_squared"], &rows);
    let summary = serde_json::json!({ "curves": curves });
    Ok(vec![("robustness.csv", table.into_bytes()), summary_artifact(&summary)?])
}

fn cmd_transfer(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    require_spec(rc, "transfer")?;
    let seeds = &rc.config.transfer.world_seeds;
    if seeds.is_empty() {
        return Err(CliError::Config("transfer needs at least one transfer.world_seeds entry".into()));
    }
    let spec = rc.config.world.spec.as_ref().expect("require_spec passed");
    let worlds: Vec<World> =
        seeds.iter().map(|&s| generate_world(spec, s)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (i, source) in worlds.iter().enumerate() {
        // one training seed per source, so every target sees the same model
        let train_seed = rng::derive_seed(rc.seed, TAG_RUN_TRANSFER ^ (i as u64));
        let mut diagonal = f64::NAN;
        let mut off_diagonal = Vec::new();
        for (j, target) in worlds.iter().enumerate() {
            let spearman =
                transfer_eval(source, target, &rc.config.indicator, &rc.config.pipeline, train_seed)?;
            rows.push(vec![
                Cell::from(seeds[i]),
                Cell::from(seeds[j]),
                Cell::from(spearman),
            ]);
            if i == j {
                diagonal = spearman;
            } else {
                off_diagonal.push(spearman);
            }
        }
        summaries.push(serde_json::json!({
            "source_seed": seeds[i],
            "self_spearman": diagonal,
            "off_diagonal_median": median_of(&off_diagonal),
        }));
    }
    let table = render(&["source_seed", "target_seed", "spearman"], &rows);
    let summary = serde_json::json!({ "sources": summaries });
    Ok(vec![("transfer.csv", table.into_bytes()), summary_artifact(&summary)?])
}

fn cmd_inequality(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let seeds = &rc.config.inequality.world_seeds;
    let worlds: Vec<World> = if seeds.is_empty() {
        vec![load_world(rc)?]
    } else {
        require_spec(rc, "inequality with world_seeds")?;
        let spec = rc.config.world.spec.as_ref().expect("require_spec passed");
        seeds.iter().map(|&s| generate_world(spec, s)).collect::<Result<_, _>>()?
    };

    let mut rows = Vec::new();
    let mut district_rows = Vec::new();
    let mut adjusted = Vec::new();
    let mut scores = Vec::new();
    let mut factors = Vec::new();
    let mut oracle = Vec::new();
    for (i, world) in worlds.iter().enumerate() {
        let train_seed = rng::derive_seed(rc.seed, TAG_RUN_WORLD_TRAIN ^ (i as u64));
        let ids = district_ids(world);
        let (model, _) = train_pipeline_with_report(
            world,
            &rc.config.indicator,
            &ids,
            &rc.config.pipeline,
            train_seed,
        )?;
        let eval = inequality_eval(world, &model, rc.config.inequality.factor_per_tile)?;
        let oracle_gini = gini(&oracle_tile_truths(world))?;
        rows.push(vec![
            Cell::from(world.seed()),
            Cell::from(eval.national_score_gini),
            Cell::from(eval.national_factor_gini),
            Cell::from(eval.national_adjusted_gini),
            Cell::from(oracle_gini),
        ]);
        for (id, g) in &eval.district_gini {
            let truths: Vec<f64> = world
                .district_tiles(*id)
                .map(|t| t.true_score.max(0.0) * world.factor(*id))
                .collect();
            district_rows.push(vec![
                Cell::from(world.seed()),
                Cell::from(id.0),
                Cell::from(*g),
                Cell::from(gini(&truths)?),
            ]);
        }
        adjusted.push(eval.national_adjusted_gini);
        scores.push(eval.national_score_gini);
        factors.push(eval.national_factor_gini);
        oracle.push(oracle_gini);
    }

    let table = render(
        &["world_seed", "score_gini", "factor_gini", "adjusted_gini", "oracle_gini"],
        &rows,
    );
    let district_table =
        render(&["world_seed", "district", "gini", "oracle_gini"], &district_rows);
    let summary = serde_json::json!({
        "worlds": worlds.len(),
        "adjusted_vs_oracle": corr_opt(&adjusted, &oracle),
        "score_vs_oracle": corr_opt(&scores, &oracle),
        "factor_vs_oracle": corr_opt(&factors, &oracle),
    });
    Ok(vec![
        ("inequality.csv", table.into_bytes()),
        ("district_gini.csv", district_table.into_bytes()),
        summary_artifact(&summary)?,
    ])
}

fn cmd_zipf(rc: &ResolvedConfig) -> Result<Vec<Artifact>, CliError> {
    let world = load_world(rc)?;
    let values: Vec<f64> = match rc.config.zipf.target {
        ZipfTarget::Labels => {
            world.ground_truth(&rc.config.indicator)?.values().copied().collect()
        }
        ZipfTarget::Factors => world.factors().to_vec(),
    };
    let fit = zipf_fit(&values, rc.config.zipf.top_quantile)?;
    let rows: Vec<Vec<Cell>> = fit
        .points
        .iter()
        .enumerate()
        .map(|(k, &(ln_rank, ln_value))| {
            vec![Cell::from(k + 1), Cell::from(ln_rank), Cell::from(ln_value)]
        })
        .collect();
    let table = render(&["rank", "ln_rank", "ln_value"], &rows);
    let summary = serde_json::json!({
        "target": rc.config.zipf.target,
        "slope": fit.slope,
        "intercept": fit.intercept,
        "r_squared": fit.r_squared,
        "points": fit.points.len(),
    });
    Ok(vec![("zipf.csv", table.into_bytes()), summary_artifact(&summary)?])
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn write_run_dir(
    command: Command,
    rc: &ResolvedConfig,
    artifacts: &[Artifact],
) -> Result<String, CliError> {
    let out = &rc.out;
    if out.exists() {
        if !out.is_dir() {
            return Err(CliError::Io(format!("{} exists and is not a directory", out.display())));
        }
        if fs::read_dir(out).map_err(io_err)?.next().is_some() {
            return Err(CliError::Io(format!(
                "{} is not empty; output directories are write-once",
                out.display()
            )));
        }
    } else {
        fs::create_dir_all(out).map_err(io_err)?;
    }
    let mut checksums = BTreeMap::new();
    for (name, bytes) in artifacts {
        fs::write(out.join(name), bytes).map_err(io_err)?;
        checksums.insert((*name).to_string(), sha256_hex(bytes));
    }
    // the output location does not affect results; normalizing it (and the
    // seed, which the manifest records at top level) keeps manifests of
    // identical runs byte-identical across run directories
    let mut config = rc.config.clone();
    config.out = None;
    config.seed = None;
    let manifest = serde_json::json!({
        "tool": "geolevels",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": rc.seed,
        "threads": thread_count(),
        "config": config,
        "artifacts": checksums,
    });
    let mut manifest_bytes = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
    manifest_bytes.push(b'\n');
    fs::write(out.join("manifest.json"), &manifest_bytes).map_err(io_err)?;
    Ok(format!("{command}: wrote {} artifacts to {}", artifacts.len() + 1, out.display()))
}

fn thread_count() -> u64 {
    std::env::var("GEOLEVELS_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(1)
}
