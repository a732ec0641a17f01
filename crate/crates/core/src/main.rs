//! Command-line front end: scenario generation, model training, and
//! detection runs that emit campaign graphs.

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use aptcorr::asdc::{export_graph, run_asdc, AsdcInputs, DetStatus, GraphFormat};
use aptcorr::features::FeatureStage;
use aptcorr::ml::{
    kfold_cv, precision_recall, train_pipeline, ConfusionMatrix, Dataset, Hyperparams, TrainedModel,
};
use aptcorr::ml::{ForestParams, SvmParams};
use aptcorr::model::EngineConfig;
use aptcorr::scenario::{
    gen_benign_bundle, gen_campaign, gen_discovery_mixed_dataset, gen_fieldbus_mixed_dataset,
    load_bundle, write_bundle,
};

const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

// Exit codes for `detect`, chosen for scriptability.
const EXIT_CLEAN: u8 = 0;
const EXIT_FULL_CHAIN: u8 = 10;
const EXIT_PARTIAL_CHAIN: u8 = 20;

#[derive(Parser)]
#[command(
    name = "aptcorr",
    version,
    about = "Multi-stage intrusion campaign detection for IIoT networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario bundle (traces, logs, alerts, ground truth).
    Gen(GenArgs),
    /// Train a stage classifier and report held-out metrics.
    Train(TrainArgs),
    /// Run detection and correlation over a bundle, writing graph files.
    ///
    /// Exit codes: 0 = clean run with an empty graph, 10 = full campaign
    /// chain (APT_DET_STOP), 20 = partial chain (APT_DET_START with a
    /// non-empty graph).
    Detect(DetectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Campaign id (1, 2 or 3). Mutually exclusive with --benign.
    #[arg(long, conflicts_with = "benign")]
    campaign: Option<u32>,
    /// Generate a fully benign bundle.
    #[arg(long)]
    benign: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory for the bundle.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Discovery,
    Fieldbus,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Rforest,
    Svm,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long, value_enum, default_value = "rforest")]
    model: ModelArg,
    /// Labeled feature CSV. When omitted, a generated dataset is used.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Windows per class when generating the dataset.
    #[arg(long, default_value_t = 300)]
    windows_per_class: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output path for the trained model (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Append a `dataset,model,precision,recall` row to this CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Dot,
    Structured,
}

#[derive(Args)]
struct DetectArgs {
    /// Bundle directory holding captures, auth log and alerts.
    #[arg(long)]
    bundle: PathBuf,
    /// Engine configuration; defaults to the bundle's config.toml.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    discovery_model: PathBuf,
    #[arg(long)]
    fieldbus_model: PathBuf,
    /// Output directory for graph files, audit log and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Graph format printed to stdout (both files are always written).
    #[arg(long, value_enum, default_value = "dot")]
    format: FormatArg,
}

#[derive(Serialize)]
struct RunManifest {
    engine_version: String,
    command: String,
    config_path: Option<PathBuf>,
    input_paths: Vec<PathBuf>,
    model_paths: Vec<PathBuf>,
    seed: Option<u64>,
    out_dir: PathBuf,
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<(), String> {
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_gen(args: &GenArgs) -> Result<u8, String> {
    let bundle = if let Some(id) = args.campaign {
        gen_campaign(id, args.seed).map_err(|e| e.to_string())?
    } else if args.benign {
        gen_benign_bundle(args.seed).map_err(|e| e.to_string())?
    } else {
        return Err("one of --campaign or --benign is required".into());
    };
    write_bundle(&bundle, &args.out).map_err(|e| e.to_string())?;
    write_manifest(
        &args.out,
        &RunManifest {
            engine_version: ENGINE_VERSION.into(),
            command: if args.benign {
                "gen --benign".into()
            } else {
                format!("gen --campaign {}", args.campaign.unwrap())
            },
            config_path: None,
            input_paths: Vec::new(),
            model_paths: Vec::new(),
            seed: Some(args.seed),
            out_dir: args.out.clone(),
        },
    )?;
    println!("bundle written to {}", args.out.display());
    Ok(0)
}

fn cmd_train(args: &TrainArgs) -> Result<u8, String> {
    let stage = match args.stage {
        StageArg::Discovery => FeatureStage::Discovery,
        StageArg::Fieldbus => FeatureStage::Fieldbus,
    };
    let (dataset, dataset_name) = match &args.data {
        Some(path) => (
            Dataset::from_csv_file(path).map_err(|e| e.to_string())?,
            path.display().to_string(),
        ),
        None => {
            let d = match stage {
                FeatureStage::Discovery => {
                    gen_discovery_mixed_dataset(args.windows_per_class, args.seed)
                }
                FeatureStage::Fieldbus => {
                    gen_fieldbus_mixed_dataset(args.windows_per_class, args.seed)
                }
            };
            (d, format!("generated-{}", stage_name(stage)))
        }
    };
    let (train, test) = dataset.train_test_split(0.8, args.seed);
    let grid: Vec<Hyperparams> = match args.model {
        ModelArg::Rforest => [15usize, 25]
            .iter()
            .flat_map(|&n_trees| {
                [8usize, 12].iter().map(move |&max_depth| {
                    Hyperparams::Forest(ForestParams {
                        n_trees,
                        max_depth,
                        min_leaf: 2,
                        seed: args.seed,
                    })
                })
            })
            .collect(),
        ModelArg::Svm => [0.5, 1.0, 2.0]
            .iter()
            .map(|&c| {
                Hyperparams::Svm(SvmParams {
                    c,
                    epochs: 60,
                    seed: args.seed,
                })
            })
            .collect(),
    };
    let (best, cv_score) = kfold_cv(&train, 10, &grid, stage).map_err(|e| e.to_string())?;
    let model = train_pipeline(&train, stage, &best).map_err(|e| e.to_string())?;
    let preds: Vec<u8> = test.x.iter().map(|row| model.predict_raw(row)).collect();
    let cm = ConfusionMatrix::from_pairs(&test.y, &preds);
    let (pr, rc) = precision_recall(&cm);
    model.save(&args.out).map_err(|e| e.to_string())?;
    let model_name = match args.model {
        ModelArg::Rforest => "rforest",
        ModelArg::Svm => "svm",
    };
    let row = format!(
        "{dataset_name},{model_name},{:.4},{:.4}\n",
        pr.value, rc.value
    );
    if let Some(path) = &args.metrics {
        let mut text = if path.exists() {
            std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?
        } else {
            "dataset,model,precision,recall\n".to_string()
        };
        text.push_str(&row);
        std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    println!(
        "trained {model_name} on {dataset_name}: cv accuracy {cv_score:.4}, \
         held-out precision {:.4}, recall {:.4}",
        pr.value, rc.value
    );
    println!("model written to {}", args.out.display());
    Ok(0)
}

fn stage_name(stage: FeatureStage) -> &'static str {
    match stage {
        FeatureStage::Discovery => "discovery",
        FeatureStage::Fieldbus => "fieldbus",
    }
}

fn load_model(path: &Path, expected: FeatureStage) -> Result<TrainedModel, String> {
    let model = TrainedModel::load(path).map_err(|e| e.to_string())?;
    if model.stage != expected {
        return Err(format!(
            "{} holds a {} model, expected {}",
            path.display(),
            stage_name(model.stage),
            stage_name(expected)
        ));
    }
    Ok(model)
}

fn cmd_detect(args: &DetectArgs) -> Result<u8, String> {
    // Models are validated before any trace parsing starts.
    let discovery_model = load_model(&args.discovery_model, FeatureStage::Discovery)?;
    let fieldbus_model = load_model(&args.fieldbus_model, FeatureStage::Fieldbus)?;

    let mut bundle = load_bundle(&args.bundle).map_err(|e| e.to_string())?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        bundle.config =
            EngineConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    let windows = bundle.windows();
    let inputs = AsdcInputs {
        windows: &windows,
        auth_events: &bundle.auth_events,
        alerts: &bundle.alerts,
        discovery_model: &discovery_model,
        fieldbus_model: &fieldbus_model,
        cfg: &bundle.config,
    };
    let outcome = run_asdc(&inputs).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let dot = export_graph(&outcome.graph, GraphFormat::Dot);
    let structured = export_graph(&outcome.graph, GraphFormat::Structured);
    let dot_path = args.out.join("graph.dot");
    std::fs::write(&dot_path, &dot).map_err(|e| format!("{}: {e}", dot_path.display()))?;
    let json_path = args.out.join("graph.json");
    std::fs::write(&json_path, &structured).map_err(|e| format!("{}: {e}", json_path.display()))?;
    let audit_path = args.out.join("audit.jsonl");
    let audit_text: String = outcome
        .audit
        .iter()
        .map(|e| serde_json::to_string(e).expect("audit entry serializes") + "\n")
        .collect();
    std::fs::write(&audit_path, audit_text)
        .map_err(|e| format!("{}: {e}", audit_path.display()))?;

    let mut input_paths: Vec<PathBuf> = bundle
        .host_packets
        .keys()
        .map(|ip: &Ipv4Addr| args.bundle.join(format!("host_{ip}.pcap")))
        .collect();
    input_paths.push(args.bundle.join("auth.log"));
    input_paths.push(args.bundle.join("alerts.log"));
    write_manifest(
        &args.out,
        &RunManifest {
            engine_version: ENGINE_VERSION.into(),
            command: "detect".into(),
            config_path: args.config.clone(),
            input_paths,
            model_paths: vec![args.discovery_model.clone(), args.fieldbus_model.clone()],
            seed: None,
            out_dir: args.out.clone(),
        },
    )?;

    match args.format {
        FormatArg::Dot => print!("{dot}"),
        FormatArg::Structured => print!("{structured}"),
    }
    let code = match (outcome.det_status, outcome.graph.is_empty()) {
        (DetStatus::AptDetStop, _) => EXIT_FULL_CHAIN,
        (DetStatus::AptDetStart, false) => EXIT_PARTIAL_CHAIN,
        (DetStatus::AptDetStart, true) => EXIT_CLEAN,
    };
    eprintln!(
        "status: {}, accepted stages: {}, exit code {code}",
        match outcome.det_status {
            DetStatus::AptDetStop => "APT_DET_STOP",
            DetStatus::AptDetStart => "APT_DET_START",
        },
        outcome.stages.len()
    );
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Detect(args) => cmd_detect(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
