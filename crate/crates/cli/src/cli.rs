//! Command-line front end. Exit codes: 0 success, 1 validation findings,
//! 2 errors (including usage errors).

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use sentinel_core::analytics::{
    cluster_dataset, correlation_dot, correlation_report, correlogram_svg, dendrogram_svg, min_components_for,
    similarity_histogram_csv, similarity_histogram_svg, similarity_stats, DEFAULT_EVR_TARGET,
};
use sentinel_core::cohortgen::{generate, measure, GenConfig};
use sentinel_core::schema::{read_incidents_csv, read_survey_csv, validate_dataset, write_survey_csv, ValidationReport};
use sentinel_core::scoring::{ModelFile, TrainConfig};
use sentinel_core::syncsim::{run as run_simulation, SimConfig};
use sentinel_core::{Dataset, FeatureSchema};

use crate::gateway::{AgentTemplate, Gateway};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FINDINGS: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

/// Environment variable naming the gateway's persistence root.
pub const DATA_DIR_ENV: &str = "SENTINEL_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Vulnerability scoring, alerting and survey analytics for outreach field agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// PCA, Ward clustering, similarity and correlation reports for a survey CSV.
    Analyze(AnalyzeArgs),
    /// Draw a synthetic cohort (defaults to the shipped calibration).
    Generate(GenerateArgs),
    /// Run the multi-agent synchronization simulator.
    Simulate(SimulateArgs),
    /// Check a survey CSV (and optional incidents CSV) against a schema.
    Validate(ValidateArgs),
    /// Serve the JSON-over-HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Survey CSV: subject_id,locality_id,collected_at,<feature ids...>
    #[arg(long)]
    pub data: PathBuf,
    /// Schema JSON (default: the built-in 32-feature schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Incidents CSV: subject_id,outcome,observed_at
    #[arg(long)]
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Output directory for reports and charts.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of flat clusters cut from the Ward tree.
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    /// Principal components used for clustering (default: enough for 85%).
    #[arg(long)]
    pub dims: Option<usize>,
    /// Minimum correlation drawn in the positive-correlation graph.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Generator config JSON (default: the shipped calibrated config).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's record count.
    #[arg(long)]
    pub n: Option<usize>,
    /// Survey CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the measured calibration report (JSON) here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also write the schema (JSON) here.
    #[arg(long)]
    pub schema_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Simulation config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for report.json, trace.jsonl and divergence.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Persistence root for agent snapshots.
    #[arg(long, env = DATA_DIR_ENV, default_value = "sentinel-data")]
    pub data_dir: PathBuf,
    /// Schema for newly created agents.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Model file (heuristic, learned, policy) for newly created agents.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Seed for the retraining shuffle of newly created agents.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Retrain after this many new labels.
    #[arg(long, default_value_t = 1)]
    pub retrain_every: usize,
}

type CmdResult = Result<i32, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn load_schema(path: Option<&Path>) -> Result<FeatureSchema, String> {
    match path {
        Some(p) => FeatureSchema::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(FeatureSchema::default_schema()),
    }
}

fn load_dataset(args: &DataArgs) -> Result<Dataset, String> {
    let schema = load_schema(args.schema.as_deref())?;
    let file = fs::File::open(&args.data).map_err(|e| format!("{}: {e}", args.data.display()))?;
    let records = read_survey_csv(file, &schema).map_err(|e| format!("{}: {e}", args.data.display()))?;
    let labels = match &args.labels {
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()))?;
            read_incidents_csv(file).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => Vec::new(),
    };
    Ok(Dataset { schema, records, labels })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), String> {
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn pretty(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn validate(args: &ValidateArgs) -> CmdResult {
    let data = load_dataset(&args.input)?;
    let report = validate_dataset(&data);
    let text = pretty(&report);
    match &args.out {
        Some(p) => write(p, text)?,
        None => print!("{text}"),
    }
    if report.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} invalid records, {} label issues", report.flagged_record_count(), report.labels.len());
        Ok(EXIT_FINDINGS)
    }
}

fn analyze(args: &AnalyzeArgs) -> CmdResult {
    let data = load_dataset(&args.input)?;
    let validation: ValidationReport = validate_dataset(&data);
    let valid = data.valid_only();
    fs::create_dir_all(&args.out).map_err(err)?;
    let out = |name: &str| args.out.join(name);
    write(&out("validation.json"), pretty(&validation))?;

    let analysis = cluster_dataset(&valid, args.dims, args.clusters).map_err(err)?;
    let p = &analysis.pca;
    let components: Vec<Vec<f64>> = (0..p.dim()).map(|j| p.components.column(j).iter().copied().collect()).collect();
    write(
        &out("pca.json"),
        pretty(&json!({
            "feature_ids": valid.schema.feature_ids(),
            "eigenvalues": p.eigenvalues,
            "explained_variance_ratio": p.explained_variance_ratio,
            "components": components,
            "constant_features": p.constant_features,
            "components_for_85": min_components_for(DEFAULT_EVR_TARGET, p),
            "clustering_dims": analysis.dims,
        })),
    )?;

    let ids: Vec<String> = valid.records.iter().map(|r| r.subject_id.clone()).collect();
    write(&out("merges.txt"), analysis.tree.to_merge_list())?;
    write(&out("dendrogram.svg"), dendrogram_svg(&analysis.tree, Some(&ids)))?;
    let mut clusters = String::from("subject_id,locality_id,cluster\n");
    for (r, label) in valid.records.iter().zip(&analysis.labels) {
        clusters.push_str(&format!("{},{},{label}\n", r.subject_id, r.locality_id));
    }
    write(&out("clusters.csv"), clusters)?;

    let sim = similarity_stats(&valid).map_err(err)?;
    write(&out("similarity.json"), pretty(&sim))?;
    write(&out("similarity_histogram.csv"), similarity_histogram_csv(&sim))?;
    write(&out("similarity_histogram.svg"), similarity_histogram_svg(&sim))?;

    let corr = correlation_report(&valid, args.tau).map_err(err)?;
    write(&out("correlation.json"), pretty(&corr))?;
    write(&out("correlogram.svg"), correlogram_svg(&corr))?;
    write(&out("correlation.dot"), correlation_dot(&corr))?;

    let summary = json!({
        "records": data.records.len(),
        "valid_records": valid.records.len(),
        "invalid_records": validation.flagged_record_count(),
        "label_issues": validation.labels.len(),
        "duplicate_partner_fraction": sim.duplicate_partner_fraction,
        "low_similarity_pair_fraction_70": sim.low_similarity_pair_fraction(0.70),
        "first_pc_evr": p.explained_variance_ratio.first(),
        "components_for_85": min_components_for(DEFAULT_EVR_TARGET, p),
        "clusters": args.clusters,
    });
    write(&out("summary.json"), pretty(&summary))?;
    print!("{}", pretty(&summary));
    Ok(if validation.is_empty() { EXIT_OK } else { EXIT_FINDINGS })
}

fn generate_cmd(args: &GenerateArgs) -> CmdResult {
    let mut config = match &args.config {
        Some(p) => GenConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => GenConfig::calibrated(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n {
        config.n_records = n;
    }
    let data = generate(&config).map_err(err)?;
    let file = fs::File::create(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    write_survey_csv(file, &data.schema, &data.records).map_err(err)?;
    if let Some(p) = &args.schema_out {
        write(p, data.schema.to_json())?;
    }
    if let Some(p) = &args.report {
        write(p, pretty(&measure(&data).map_err(err)?))?;
    }
    eprintln!("wrote {} records to {}", data.records.len(), args.out.display());
    Ok(EXIT_OK)
}

fn simulate(args: &SimulateArgs) -> CmdResult {
    let mut config = SimConfig::load(&args.config).map_err(|e| format!("{}: {e}", args.config.display()))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = run_simulation(&config).map_err(err)?;
    report.write_to(&args.out).map_err(err)?;
    eprintln!("{} events, disagreement rate {}", report.events_processed, report.disagreement_rate);
    Ok(EXIT_OK)
}

fn serve(args: &ServeArgs) -> CmdResult {
    let schema = load_schema(args.schema.as_deref())?;
    let models = match &args.models {
        Some(p) => ModelFile::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ModelFile::default_for(schema.len()),
    };
    let template = AgentTemplate { schema, models, train: TrainConfig { seed: args.seed, ..TrainConfig::default() }, retrain_every: args.retrain_every };
    // Fail fast on an inconsistent template rather than on first request.
    template.instantiate("probe").map_err(err)?;
    let gateway = Arc::new(Gateway::new(&args.data_dir, template).map_err(|e| format!("{}: {e}", args.data_dir.display()))?);
    let runtime = tokio::runtime::Runtime::new().map_err(err)?;
    runtime
        .block_on(crate::server::serve(gateway, args.bind, |addr| {
            println!("listening on http://{addr}");
            let _ = std::io::stdout().flush();
        }))
        .map_err(err)?;
    Ok(EXIT_OK)
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Validate(a) => validate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(code) => code,
        Err(message) => {
            eprintln!("error: {message}");
            EXIT_ERROR
        }
    }
}
