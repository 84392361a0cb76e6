//! Command-line front end: `weights`, `fit`, `predict`, `simulate`, `reconstruct`.
//!
//! Every run writes its outputs atomically and a `<out>.manifest.json`
//! recording input digests, seed, version and duration. Validation failures
//! exit with status 2 and one JSON object per line on standard error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_births, load_counts, load_panel, SpatialStructure, SurveillancePanel};
use crate::error::{Error, Result};
use crate::inference::{
    attach_posterior, fit_map, prediction_bands, Band, FitOptions, FitResult, McmcOptions, PredictSource, PriorSpec,
};
use crate::io::write_atomic;
use crate::model::{EeSpec, Model, ModelSpec, TsirSpec};
use crate::par::{set_threads, Execution};
use crate::simulate::{simulate_replicates, TsirSimOptions};
use crate::underreporting::{fit_reporting, scale_counts, ReportingOptions, Weighting};
use crate::weights::{build_weights, WeightScheme};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "epicount", version, about = "Spatio-temporal infectious disease count models")]
pub struct Cli {
    /// Worker threads for replicates, starts and chains.
    #[arg(long, global = true, env = "EPICOUNT_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a neighbourhood weight matrix.
    Weights(WeightsArgs),
    /// Fit a model by MAP, optionally followed by posterior sampling.
    Fit(FitArgs),
    /// One-step prediction bands from a saved fit.
    Predict(PredictArgs),
    /// Simulate replicate panels from a model.
    Simulate(SimulateArgs),
    /// Estimate the reporting factor and rescale counts.
    Reconstruct(ReconstructArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Uniform,
    Binary,
    Distance,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    Tsir,
    Ee,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    Ols,
    CumulativeVariance,
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    #[arg(long, value_enum)]
    pub scheme: SchemeArg,
    /// Decay parameter in (0, 1) for the power-law schemes.
    #[arg(long)]
    pub theta: Option<f64>,
    #[arg(long)]
    pub spatial: PathBuf,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Long-format counts `area,time,count`.
    #[arg(long)]
    pub counts: PathBuf,
    /// `area,population` or `area,time,population`.
    #[arg(long)]
    pub populations: PathBuf,
    /// JSON with `areas` and `distances` and/or `adjacency`.
    #[arg(long)]
    pub spatial: PathBuf,
    /// Observations per year.
    #[arg(long, default_value_t = 52)]
    pub period: u32,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, value_enum)]
    pub model: Family,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Posterior sampling after the MAP fit.
    #[arg(long, num_args = 3, value_names = ["DRAWS", "BURNIN", "CHAINS"])]
    pub mcmc: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: u64,
    /// Number of optimiser starts (overrides the config).
    #[arg(long)]
    pub starts: Option<usize>,
    /// Posterior draws stored in the fit for later prediction.
    #[arg(long, default_value_t = 1000)]
    pub keep_draws: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Single time point `2 <= t <= T + 1`; all when absent.
    #[arg(long)]
    pub time: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub model: Family,
    /// Model spec, parameters (`params`) and simulation options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Take parameters from a saved fit instead of the config.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub reps: usize,
    #[arg(long)]
    pub seed: u64,
    /// Horizon; defaults to the number of time points in the counts.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub counts: PathBuf,
    /// Long-format births `area,time,births`.
    #[arg(long)]
    pub births: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub maternal_lag: usize,
    #[arg(long, value_enum, default_value = "cumulative-variance")]
    pub weighting: WeightingArg,
    #[arg(long, default_value_t = 200)]
    pub bootstrap: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 52)]
    pub period: u32,
    /// JSON report; scaled counts go to `<stem>.scaled.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Optional run configuration read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub spec: Option<ModelSpec>,
    #[serde(default)]
    pub priors: Option<PriorSpec>,
    /// Named parameters: fit starts, or the simulation truth.
    #[serde(default)]
    pub params: Option<BTreeMap<String, f64>>,
    #[serde(default)]
    pub fit: Option<FitOptions>,
    #[serde(default)]
    pub simulation: Option<TsirSimOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: Option<String>,
    pub inputs: BTreeMap<String, FileDigest>,
    pub outputs: BTreeMap<String, FileDigest>,
    pub seed: Option<u64>,
    pub duration_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

struct Run {
    command: &'static str,
    started: Instant,
    inputs: BTreeMap<String, FileDigest>,
    outputs: BTreeMap<String, FileDigest>,
    config_sha256: Option<String>,
    seed: Option<u64>,
}

impl Run {
    fn new(command: &'static str, seed: Option<u64>) -> Self {
        Self {
            command,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config_sha256: None,
            seed,
        }
    }

    fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.insert(
            role.into(),
            FileDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(bytes)
    }

    fn config(&mut self, path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = self.input("config", p)?;
                self.config_sha256 = Some(sha256_hex(&bytes));
                Ok(serde_json::from_slice(&bytes)?)
            }
        }
    }

    fn write(&mut self, role: &str, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.insert(
            role.into(),
            FileDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(())
    }

    fn manifest(&self) -> RunManifest {
        RunManifest {
            command: self.command.into(),
            tool_version: VERSION.into(),
            config_sha256: self.config_sha256.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            seed: self.seed,
            duration_seconds: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Writes `<primary>.manifest.json`, or prints it to stderr when the
    /// primary output went to standard output.
    fn finish(self, primary: Option<&Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest())?;
        match primary {
            Some(p) => write_atomic(&manifest_path(p), json.as_bytes()),
            None => {
                eprintln!("{}", serde_json::json!({ "level": "info", "manifest": self.manifest() }));
                Ok(())
            }
        }
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// `fit.json` -> `fit.<suffix>`.
pub fn sidecar_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn load_data(run: &mut Run, data: &DataArgs) -> Result<(SurveillancePanel, SpatialStructure)> {
    run.input("counts", &data.counts)?;
    run.input("populations", &data.populations)?;
    let spatial_bytes = run.input("spatial", &data.spatial)?;
    let panel = load_panel(&data.counts, &data.populations, data.period)?;
    let text = String::from_utf8(spatial_bytes).map_err(|e| Error::Spatial(e.to_string()))?;
    let spatial = SpatialStructure::from_json_str(&text)?;
    Ok((panel, spatial))
}

fn spec_for(family: Family, config: &RunConfig) -> Result<ModelSpec> {
    let spec = match (&config.spec, family) {
        (Some(s), _) => s.clone(),
        (None, Family::Ee) => ModelSpec::Ee(EeSpec::default()),
        (None, Family::Tsir) => ModelSpec::Tsir(TsirSpec::default()),
    };
    let matches = matches!(
        (&spec, family),
        (ModelSpec::Ee(_), Family::Ee) | (ModelSpec::Tsir(_), Family::Tsir)
    );
    if !matches {
        return Err(Error::InvalidParameter(format!(
            "--model {} does not match the {} spec in the config",
            match family {
                Family::Ee => "ee",
                Family::Tsir => "tsir",
            },
            spec.name()
        )));
    }
    Ok(spec)
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn bands_csv(bands: &[Band]) -> String {
    let mut s = String::from("area,time,q025,q50,q975,observed,pred025,pred975\n");
    for b in bands {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            csv_field(&b.area),
            b.time,
            fmt_f64(b.q025),
            fmt_f64(b.q50),
            fmt_f64(b.q975),
            b.observed.map(|o| o.to_string()).unwrap_or_default(),
            b.pred025,
            b.pred975
        );
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn run_weights(args: &WeightsArgs) -> Result<()> {
    let mut run = Run::new("weights", None);
    let bytes = run.input("spatial", &args.spatial)?;
    let spatial = SpatialStructure::from_json_str(&String::from_utf8_lossy(&bytes))?;
    let scheme = match (args.scheme, args.theta) {
        (SchemeArg::Uniform, _) => WeightScheme::Uniform,
        (SchemeArg::Binary, _) => WeightScheme::BinaryContiguity,
        (SchemeArg::Distance, Some(theta)) => WeightScheme::DistancePowerLaw { theta },
        (SchemeArg::Graph, Some(theta)) => WeightScheme::GraphPowerLaw { theta },
        (_, None) => return Err(Error::InvalidParameter("power-law schemes need --theta".into())),
    };
    scheme.validate()?;
    let w = build_weights(&scheme, &spatial)?;
    for warning in &w.warnings {
        eprintln!("{}", serde_json::json!({ "level": "warning", "message": warning }));
    }
    let csv = w.to_csv(spatial.areas());
    match &args.out {
        Some(out) => run.write("weights", out, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    run.finish(args.out.as_deref())
}

fn run_fit(args: &FitArgs, exec: Execution) -> Result<()> {
    let mut run = Run::new("fit", Some(args.seed));
    let config = run.config(args.config.as_deref())?;
    let (panel, spatial) = load_data(&mut run, &args.data)?;
    let spec = spec_for(args.model, &config)?;
    let model = Model::new(spec, panel, &spatial)?;
    let mut opts = config.fit.unwrap_or_default();
    opts.seed = args.seed;
    if let Some(s) = args.starts {
        opts.starts = s;
    }
    let start = match &config.params {
        Some(p) => Some(model.params_from_named(p)?.values),
        None => None,
    };
    let priors = config.priors.unwrap_or_default();
    let mut fit = fit_map(&model, priors, start.as_deref(), &opts, exec)?;
    if let Some(m) = &args.mcmc {
        let mcmc = McmcOptions {
            draws: m[0],
            burnin: m[1],
            chains: m[2],
            seed: args.seed,
            ..Default::default()
        };
        attach_posterior(&model, &mut fit, &mcmc, args.keep_draws, exec)?;
    }
    let t_len = model.panel().n_times();
    let observed: Vec<Band> = fit.bands.iter().filter(|b| b.time <= t_len).cloned().collect();
    let json = serde_json::to_string_pretty(&fit)?;
    run.write("fit", &args.out, json.as_bytes())?;
    run.write("bands", &sidecar_path(&args.out, "bands.csv"), bands_csv(&observed).as_bytes())?;
    if !fit.converged {
        eprintln!(
            "{}",
            serde_json::json!({ "level": "warning", "message": "optimiser did not reach the gradient tolerance", "gradient_norm": fit.gradient_norm })
        );
    }
    run.finish(Some(&args.out))
}

fn load_fit(run: &mut Run, path: &Path) -> Result<FitResult> {
    let bytes = run.input("fit", path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn run_predict(args: &PredictArgs, exec: Execution) -> Result<()> {
    let mut run = Run::new("predict", None);
    let fit = load_fit(&mut run, &args.fit)?;
    let (panel, spatial) = load_data(&mut run, &args.data)?;
    if panel.areas() != fit.areas.as_slice() {
        return Err(Error::Shape("counts areas differ from those of the fit".into()));
    }
    let model = Model::new(fit.spec.clone(), panel, &spatial)?;
    if fit.map_estimate.names != model.layout().names {
        return Err(Error::Shape("fit parameters do not match the model layout".into()));
    }
    let draws = fit.prediction_draws();
    let mut bands = prediction_bands(&model, PredictSource::Draws(&draws), exec)?;
    if let Some(t) = args.time {
        model.check_time(t)?;
        bands.retain(|b| b.time == t);
    }
    run.write("bands", &args.out, bands_csv(&bands).as_bytes())?;
    run.finish(Some(&args.out))
}

fn run_simulate(args: &SimulateArgs, exec: Execution) -> Result<()> {
    let mut run = Run::new("simulate", Some(args.seed));
    let config = run.config(args.config.as_deref())?;
    let (panel, spatial) = load_data(&mut run, &args.data)?;
    let (spec, x) = match &args.fit {
        Some(path) => {
            let fit = load_fit(&mut run, path)?;
            let model = Model::new(fit.spec.clone(), panel.clone(), &spatial)?;
            spec_for(args.model, &RunConfig {
                spec: Some(fit.spec.clone()),
                ..Default::default()
            })?;
            (model.spec().clone(), fit.map_estimate.values.clone())
        }
        None => {
            let spec = spec_for(args.model, &config)?;
            let model = Model::new(spec.clone(), panel.clone(), &spatial)?;
            let named = config
                .params
                .as_ref()
                .ok_or_else(|| Error::InvalidParameter("simulation needs `params` in the config or --fit".into()))?;
            (spec, model.params_from_named(named)?.values)
        }
    };
    let model = Model::new(spec, panel, &spatial)?;
    let steps = args.steps.unwrap_or(model.panel().n_times());
    let tsir = config.simulation.unwrap_or_default();
    let sims = simulate_replicates(&model, &x, steps, args.reps, args.seed, &tsir, exec)?;
    let mut csv = String::from("rep,area,time,count\n");
    for (r, sim) in sims.iter().enumerate() {
        for (i, row) in sim.counts.iter().enumerate() {
            for (t, c) in row.iter().enumerate() {
                let _ = writeln!(csv, "{},{},{},{}", r + 1, csv_field(&model.panel().areas()[i]), t + 1, c);
            }
        }
    }
    run.write("simulations", &args.out, csv.as_bytes())?;
    run.finish(Some(&args.out))
}

#[derive(Debug, Serialize)]
struct ReconstructReport<'a> {
    fit: &'a crate::underreporting::ReportingFit,
    scaled_counts: String,
}

fn run_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let mut run = Run::new("reconstruct", Some(args.seed));
    run.input("counts", &args.counts)?;
    run.input("births", &args.births)?;
    let panel = load_counts(&args.counts, args.period)?;
    let panel = load_births(panel, &args.births, args.maternal_lag)?;
    let opts = ReportingOptions {
        weighting: match args.weighting {
            WeightingArg::Ols => Weighting::Ols,
            WeightingArg::CumulativeVariance => Weighting::CumulativeVariance,
        },
        bootstrap: args.bootstrap,
        seed: args.seed,
    };
    let fit = fit_reporting(&panel, &opts)?;
    let scaled = scale_counts(&panel, &fit)?;
    let scaled_path = sidecar_path(&args.out, "scaled.csv");
    let mut csv = String::from("area,time,count\n");
    for (i, row) in scaled.counts().iter().enumerate() {
        for (t, c) in row.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{}", csv_field(&scaled.areas()[i]), t + 1, c);
        }
    }
    let report = ReconstructReport {
        fit: &fit,
        scaled_counts: scaled_path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    };
    run.write("report", &args.out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    run.write("scaled_counts", &scaled_path, csv.as_bytes())?;
    run.finish(Some(&args.out))
}

fn diagnostic(kind: &str, message: &str) -> String {
    serde_json::json!({ "level": "error", "kind": kind, "message": message }).to_string()
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let text = e.render().to_string();
                    let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
                    eprintln!("{}", diagnostic("usage", first));
                    2
                }
            };
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("{}", diagnostic("usage", "--threads must be >= 1"));
            return 2;
        }
        set_threads(n);
    }
    let exec = Execution::Parallel;
    let result = match &cli.command {
        Command::Weights(a) => run_weights(a),
        Command::Fit(a) => run_fit(a, exec),
        Command::Predict(a) => run_predict(a, exec),
        Command::Simulate(a) => run_simulate(a, exec),
        Command::Reconstruct(a) => run_reconstruct(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", diagnostic(e.kind(), &e.to_string()));
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_for_sidecars() {
        assert_eq!(manifest_path(Path::new("out/fit.json")), PathBuf::from("out/fit.json.manifest.json"));
        assert_eq!(sidecar_path(Path::new("out/fit.json"), "bands.csv"), PathBuf::from("out/fit.bands.csv"));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["epicount", "fit", "--bogus"]), 2);
        assert_eq!(run(["epicount", "weights", "--scheme", "uniform", "--spatial", "/nonexistent.json"]), 2);
    }

    #[test]
    fn config_rejects_unknown_fields() {
        let bad = r#"{"spec": {"model": "ee"}, "prior": {}}"#;
        assert!(serde_json::from_str::<RunConfig>(bad).is_err());
        let good = r#"{"spec": {"model": "ee", "random_effects": ["en"]}, "params": {"phi": 2.0}}"#;
        let cfg: RunConfig = serde_json::from_str(good).unwrap();
        assert!(matches!(cfg.spec, Some(ModelSpec::Ee(_))));
    }
}
