use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use benchsynth::analysis::{self, MeasureSettings, Metric, SweepParam};
use benchsynth::config::{EmbeddingConfig, PipelineConfig};
use benchsynth::corpus::{load_dataset, DatasetManifest, ImportAdapter};
use benchsynth::embedding::{embed_dataset, EmbedOptions, EmbeddingMatrix, EmbeddingRow};
use benchsynth::metrics::MetricReport;
use benchsynth::pipeline::{self, Services};
use benchsynth::projection::{ProjectionConfig, ProjectionMethod};
use benchsynth::verify::{evaluate_testtaker, TesttakerReport};

use crate::error::CliError;
use crate::{AnalysisArgs, EvaluateArgs, GenerateArgs, ImportFormat, MeasureArgs, MethodArg, MetricArg, ParamArg, SweepArgs};

pub const ARTIFACT_INDEX: &str = "artifacts.json";

fn fingerprint(value: &impl Serialize) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Records the fingerprint next to every file a command wrote, with a
/// content hash per file.
fn write_index(dir: &Path, fingerprint: &str, command: &str, files: &[&str]) -> Result<(), CliError> {
    let mut entries = serde_json::Map::new();
    for f in files {
        let p = dir.join(f);
        if let Ok(bytes) = fs::read(&p) {
            entries.insert((*f).to_string(), Value::String(hex::encode(Sha256::digest(&bytes))));
        }
    }
    let index = json!({ "command": command, "config_fingerprint": fingerprint, "files": entries });
    write(&dir.join(ARTIFACT_INDEX), serde_json::to_string_pretty(&index).expect("json") + "\n")
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.evolve.seed = seed;
    }
    let seeds = match args.import {
        None => load_dataset(&args.seeds)?,
        Some(ImportFormat::Mbpp) => ImportAdapter::mbpp().import(&args.seeds, None)?,
    };
    let gateway = config.build_gateway()?;
    let sandbox = config.sandbox.build();
    let embedder = if config.evolve.kfn_enabled { Some(config.embedding.build()?) } else { None };
    create_dir(&args.out)?;
    let checkpoint_dir = args.checkpoint_dir.clone().unwrap_or_else(|| args.out.join("checkpoints"));
    let services = Services {
        gateway: &gateway,
        sandbox: sandbox.as_ref(),
        embedder,
        checkpoint_dir: Some(checkpoint_dir),
    };
    let out = pipeline::generate(&config, &seeds, &services)?;
    pipeline::write_outputs(&out, &args.out, config.verify.include_failed)?;
    write_index(
        &args.out,
        &out.report.config_fingerprint,
        "generate",
        &[
            pipeline::FINAL_FILE,
            pipeline::PREFILTER_FILE,
            pipeline::FAILED_FILE,
            pipeline::REPORT_FILE,
            pipeline::OUTCOMES_FILE,
            pipeline::DEDUP_LOG_FILE,
            pipeline::TOPICS_FILE,
        ],
    )?;
    println!("{}", serde_json::to_string_pretty(&out.report).expect("report serializes"));
    if let Some(c) = out.report.colonies.iter().find(|c| c.error.is_some()) {
        return Err(CliError::External(format!(
            "colony {} stopped early ({}); rerun the same command to resume from checkpoints",
            c.colony_id,
            c.error.as_deref().unwrap_or_default()
        )));
    }
    Ok(())
}

fn projection_config(a: &AnalysisArgs) -> Result<ProjectionConfig, CliError> {
    let method = match a.method {
        MethodArg::LinearPca => ProjectionMethod::LinearPca,
        MethodArg::RandomProjection => ProjectionMethod::RandomProjection,
        MethodArg::ExternalReducer => {
            let cmd = a.reducer.as_deref().ok_or_else(|| CliError::Usage("--method external-reducer needs --reducer".into()))?;
            ProjectionMethod::ExternalReducer { command: cmd.split_whitespace().map(str::to_owned).collect() }
        }
        MethodArg::PrecomputedImport => {
            let path = a
                .coordinates
                .clone()
                .ok_or_else(|| CliError::Usage("--method precomputed-import needs --coordinates".into()))?;
            ProjectionMethod::PrecomputedImport { path }
        }
    };
    let p = ProjectionConfig {
        method,
        target_dim: a.dim,
        n_neighbors: a.n_neighbors,
        min_dist: a.min_dist,
        runs: a.runs,
        seed: a.seed,
    };
    p.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(p)
}

fn settings(a: &AnalysisArgs) -> Result<MeasureSettings, CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    Ok(MeasureSettings {
        projection: projection_config(a)?,
        k: a.k,
        subsample: a.subsample,
        trials: a.trials,
        seed: a.seed,
    })
}

enum Input {
    Records(DatasetManifest),
    Matrix(EmbeddingMatrix),
}

fn read_input(path: &Path, import: Option<ImportFormat>) -> Result<Input, CliError> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: EmbeddingMatrix = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
        m.check().map_err(|e| CliError::io(path, e))?;
        return Ok(Input::Matrix(m));
    }
    Ok(Input::Records(match import {
        None => load_dataset(path)?,
        Some(ImportFormat::Mbpp) => ImportAdapter::mbpp().import(path, None)?,
    }))
}

/// Two halves of one dataset, split by a seeded shuffle.
fn split_halves(m: &DatasetManifest, seed: u64) -> [DatasetManifest; 2] {
    let mut records = m.records.clone();
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let second = records.split_off(records.len() / 2);
    [
        DatasetManifest::new(format!("{}-half-a", m.name), records),
        DatasetManifest::new(format!("{}-half-b", m.name), second),
    ]
}

fn embedding_config(a: &AnalysisArgs) -> Result<EmbeddingConfig, CliError> {
    Ok(match &a.config {
        Some(p) => PipelineConfig::load(p)?.embedding,
        None => EmbeddingConfig::default(),
    })
}

/// Turn inputs into matrices. With imported coordinates only ids matter.
fn matrices(inputs: Vec<Input>, a: &AnalysisArgs) -> Result<Vec<EmbeddingMatrix>, CliError> {
    let ec = embedding_config(a)?;
    let imported = a.method == MethodArg::PrecomputedImport;
    let provider = if imported { None } else { Some(ec.build()?) };
    let cache = ec.cache()?;
    inputs
        .into_iter()
        .map(|input| match input {
            Input::Matrix(m) => Ok(m),
            Input::Records(d) if imported => {
                let rows = d.records.iter().map(|r| EmbeddingRow { id: r.id.clone(), vector: Vec::new() }).collect();
                Ok(EmbeddingMatrix::new(d.name, "imported", 0, rows))
            }
            Input::Records(d) => {
                let provider = provider.as_ref().expect("built unless importing");
                Ok(embed_dataset(&d, provider.as_ref(), &cache, &EmbedOptions::default())?)
            }
        })
        .collect()
}

fn analysis_record(command: &str, metric: MetricArg, a: &AnalysisArgs, datasets: &[EmbeddingMatrix]) -> Value {
    json!({
        "command": command,
        "metric": metric_name(metric),
        "k": a.k,
        "dim": a.dim,
        "runs": a.runs,
        "n_neighbors": a.n_neighbors,
        "min_dist": a.min_dist,
        "N": a.subsample,
        "T": a.trials,
        "method": format!("{:?}", projection_config(a).map(|p| p.method).ok()),
        "seed": a.seed,
        "datasets": datasets.iter().map(|m| (m.dataset_name.clone(), m.model_id.clone(), m.len())).collect::<Vec<_>>(),
    })
}

fn metric_name(m: MetricArg) -> &'static str {
    match m {
        MetricArg::Novelty => "novelty",
        MetricArg::Diversity => "diversity",
    }
}

pub fn measure(args: &MeasureArgs) -> Result<(), CliError> {
    let a = &args.analysis;
    let settings = settings(a)?;
    let mut inputs = Vec::new();
    if let Some(b) = &args.baseline {
        if args.metric != MetricArg::Novelty {
            return Err(CliError::Usage("--baseline only applies to novelty".into()));
        }
        inputs.push(read_input(b, a.import)?);
    }
    for p in &a.datasets {
        inputs.push(read_input(p, a.import)?);
    }
    if args.split_half {
        let [Input::Records(only)] = inputs.as_slice() else {
            return Err(CliError::Usage("--split-half takes exactly one problem-record dataset".into()));
        };
        let [x, y] = split_halves(only, a.seed);
        inputs = vec![Input::Records(x), Input::Records(y)];
    }
    let mats = matrices(inputs, a)?;
    let reports = match args.metric {
        MetricArg::Novelty => {
            let (baseline, candidates) =
                mats.split_first().ok_or_else(|| CliError::Usage("novelty needs a baseline and a candidate".into()))?;
            analysis::measure_novelty(candidates, baseline, &settings)?
        }
        MetricArg::Diversity => analysis::measure_diversity(&mats, &settings)?,
    };
    let fp = fingerprint(&analysis_record("measure", args.metric, a, &mats));
    let doc = json!({ "config_fingerprint": fp, "reports": reports });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(&dir.join("measure.json"), serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
        let mut buf = Vec::new();
        MetricReport::write_trials_csv(&reports, &mut buf).map_err(|e| CliError::Data(e.to_string()))?;
        write(&dir.join("trials.csv"), buf)?;
        write_index(dir, &fp, "measure", &["measure.json", "trials.csv"])?;
    }
    Ok(())
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let a = &args.analysis;
    let grid: Vec<f64> = args
        .grid
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<f64>().map_err(|_| CliError::Usage(format!("bad grid value {v:?}"))))
        .collect::<Result<_, _>>()?;
    if grid.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let settings = settings(a)?;
    let inputs = a.datasets.iter().map(|p| read_input(p, a.import)).collect::<Result<Vec<_>, _>>()?;
    let mats = matrices(inputs, a)?;
    let param = match args.param {
        ParamArg::K => SweepParam::K,
        ParamArg::NNeighbors => SweepParam::NNeighbors,
        ParamArg::MinDist => SweepParam::MinDist,
    };
    let metric = match args.metric {
        MetricArg::Novelty => Metric::Novelty,
        MetricArg::Diversity => Metric::Diversity,
    };
    let rows = analysis::sweep(param, &grid, metric, &mats, &settings)?;
    let mut record = analysis_record("sweep", args.metric, a, &mats);
    record["param"] = json!(param.as_str());
    record["grid"] = json!(grid);
    let fp = fingerprint(&record);
    let mut buf = Vec::new();
    analysis::write_sweep_csv(&rows, &mut buf).map_err(|e| CliError::Data(e.to_string()))?;
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            write(&dir.join("sweep.csv"), &buf)?;
            let doc = json!({ "config_fingerprint": fp, "settings": record, "rows": rows });
            write(&dir.join("sweep.json"), serde_json::to_string_pretty(&doc).expect("json") + "\n")?;
            write_index(dir, &fp, "sweep", &["sweep.csv", "sweep.json"])?;
        }
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluationDoc<'a> {
    config_fingerprint: String,
    seed: Option<u64>,
    #[serde(flatten)]
    report: &'a TesttakerReport,
}

pub fn evaluate(args: &EvaluateArgs) -> Result<(), CliError> {
    let config = PipelineConfig::load(&args.config)?;
    let dataset = load_dataset(&args.dataset)?;
    let gateway = config.build_gateway()?;
    let sandbox = config.sandbox.build();
    let report = evaluate_testtaker(&gateway, sandbox.as_ref(), &args.model, &dataset, config.verify.timeout_s)?;
    let fp = fingerprint(&json!({
        "config": config.fingerprint(),
        "model": args.model,
        "dataset": dataset.name,
        "dataset_fingerprint": dataset.config_fingerprint,
    }));
    create_dir(&args.out)?;
    let doc = EvaluationDoc { config_fingerprint: fp.clone(), seed: args.seed, report: &report };
    let text = serde_json::to_string_pretty(&doc).expect("json");
    write(&args.out.join("evaluation.json"), text.clone() + "\n")?;
    write(
        &args.out.join("evaluation.csv"),
        format!("{}\n{}\n", TesttakerReport::csv_header(), report.csv_row()),
    )?;
    write_index(&args.out, &fp, "evaluate", &["evaluation.json", "evaluation.csv"])?;
    println!("{text}");
    if report.evaluated == 0 && report.excluded > 0 {
        return Err(CliError::External(format!("all {} model calls failed", report.excluded)));
    }
    Ok(())
}
