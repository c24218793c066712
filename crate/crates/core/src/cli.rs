//! The `sigdrift` command line.
//!
//! Every command reads an optional flat `key = value` configuration file
//! (`--config`), then applies `--set key=value` overrides, then dedicated
//! flags. The effective configuration is echoed into every JSON output.
//! Exit codes: 0 success (and "no change"/"noise" from `detect`), 2 change
//! detected, 1 any error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::cpd::{self, AnomalyFlag, EventConfig};
use crate::datagen::{self, BaselineMap, CorpusConfig, CorpusManifest, ManifestEntry};
use crate::detect::{DetectionContext, DetectorRegistry, SnrMode};
use crate::error::{Error, Result};
use crate::eval::{self, ExperimentConfig};
use crate::model::{self, TimeGrid};
use crate::noisegen::{self, NoiseProfile, NoiseSpec, ProfileAggregation};
use crate::seed;
use crate::signature;
use crate::similarity::SimilarityMethod;

pub const SEED_ENV: &str = "SIGDRIFT_SEED";
pub const DEFAULT_SEED: u64 = 42;
/// Default free-trial length T_f, in grid timestamps.
pub const DEFAULT_EVENT_WINDOW: usize = 30;
pub const DEFAULT_LEVELS: [f64; 3] = [0.5, 0.25, 0.0];

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CHANGE: i32 = 2;

/// Everything a run can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub experiment: ExperimentConfig,
    pub event_window: usize,
    pub frequency_threshold: usize,
    pub similarity: SimilarityMethod,
    pub levels: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            experiment: ExperimentConfig::default(),
            event_window: DEFAULT_EVENT_WINDOW,
            frequency_threshold: 1,
            similarity: SimilarityMethod::Pcc,
            levels: DEFAULT_LEVELS.to_vec(),
        }
    }
}

/// Keys accepted in configuration files and by `--set`.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "n_changed",
    "n_noisy",
    "distortion_fraction",
    "attenuation_share",
    "no_attenuation",
    "segment_length",
    "spike_width",
    "spike_magnitude",
    "distortion_db",
    "attenuation_min",
    "attenuation_max",
    "pcc_threshold",
    "rmse_threshold",
    "attenuation_ceiling",
    "window",
    "cusum_k",
    "cusum_h",
    "snr_mode",
    "segments",
    "aggregation",
    "monitoring_fraction",
    "repeats",
    "sample_sizes",
    "detectors",
    "grid_length",
    "trace_nodes",
    "trace_length",
    "trace_seed",
    "event_window",
    "frequency_threshold",
    "similarity",
    "levels",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::invalid(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_aggregation(value: &str) -> Result<ProfileAggregation> {
    match value.split_once(':') {
        None if value == "min" => Ok(ProfileAggregation::Min),
        Some(("quantile", q)) => {
            let q: f64 = parse("aggregation", q)?;
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid("aggregation quantile must lie in [0, 1]"));
            }
            Ok(ProfileAggregation::Quantile { q })
        }
        _ => Err(Error::invalid(format!(
            "bad aggregation `{value}`: expected `min` or `quantile:<q>`"
        ))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let e = &mut self.experiment;
        let c = &mut e.corpus;
        let th = &mut e.settings.thresholds;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "n_changed" => c.n_changed = parse(key, value)?,
            "n_noisy" => c.n_noisy = parse(key, value)?,
            "distortion_fraction" => c.distortion_fraction = parse(key, value)?,
            "attenuation_share" => c.attenuation_share = parse(key, value)?,
            "no_attenuation" => c.no_attenuation = parse(key, value)?,
            "segment_length" => c.segment_length = parse(key, value)?,
            "spike_width" => c.spike_width = parse(key, value)?,
            "spike_magnitude" => c.spike_magnitude = parse(key, value)?,
            "distortion_db" => c.distortion_db = parse(key, value)?,
            "attenuation_min" => c.attenuation_range.0 = parse(key, value)?,
            "attenuation_max" => c.attenuation_range.1 = parse(key, value)?,
            "pcc_threshold" => th.s_p = parse(key, value)?,
            "rmse_threshold" => th.s_r = parse(key, value)?,
            "attenuation_ceiling" => th.t_d = parse(key, value)?,
            "window" => th.window = parse(key, value)?,
            "cusum_k" => e.settings.cusum.k = parse(key, value)?,
            "cusum_h" => e.settings.cusum.h = parse(key, value)?,
            "snr_mode" => e.settings.snr_mode = value.parse()?,
            "segments" => e.segments = parse(key, value)?,
            "aggregation" => e.aggregation = parse_aggregation(value)?,
            "monitoring_fraction" => e.monitoring_fraction = parse(key, value)?,
            "repeats" => e.repeats = parse(key, value)?,
            "sample_sizes" => e.sample_sizes = parse_list(key, value)?,
            "detectors" => e.detectors = parse_list(key, value)?,
            "grid_length" => e.grid_length = parse(key, value)?,
            "trace_nodes" => e.trace_nodes = parse(key, value)?,
            "trace_length" => e.trace_length = parse(key, value)?,
            "trace_seed" => e.trace_seed = parse(key, value)?,
            "event_window" => self.event_window = parse(key, value)?,
            "frequency_threshold" => self.frequency_threshold = parse(key, value)?,
            "similarity" => self.similarity = value.parse()?,
            "levels" => self.levels = parse_list(key, value)?,
            other => {
                return Err(Error::invalid(format!(
                    "unknown config key `{other}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, i + 1, "expected `key = value`"))?;
            self.set(key.trim(), value)
                .map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }
}

const DEFAULTS_HELP: &str = "\
Experiment defaults:
  corpus       3000 changed + 3000 noisy pairs; noisy = spike (width 3) and 20 dB AWGN,
               distortion fraction 0.5, plus a 0.1 attenuation share
  evaluation   sample sizes 1000,2000,3000,4000,5000; 30 repeats; seed 42 (or $SIGDRIFT_SEED)
  detectors    S^P 0.6, S^R 0.2, T^D 0.5, W 6; SNR segments d 12 (min aggregation);
               CUSUM k 0.5, h 5
  events       T_f 30, F_thresh 1 unless calibrated";

#[derive(Debug, Parser)]
#[command(
    name = "sigdrift",
    version,
    about = "Change detection for IaaS performance signatures",
    after_help = DEFAULTS_HELP
)]
pub struct Cli {
    /// Flat `key = value` configuration file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base seed [default: config `seed`, else $SIGDRIFT_SEED, else 42].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: available cores].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Override a config key, e.g. `--set segments=6`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate provider profiles, signatures, a labeled corpus, its manifest and SNR noise profiles.
    #[command(after_help = DEFAULTS_HELP)]
    GenData(GenDataArgs),
    /// Build a signature from trial experiences (`user_id,parameter,start,v0,...`).
    #[command(after_help = DEFAULTS_HELP)]
    GenSignature(GenSignatureArgs),
    /// Inject spike, attenuation or distortion noise into a signature.
    #[command(after_help = DEFAULTS_HELP)]
    Inject(InjectArgs),
    /// Decide whether a recomputed signature changed; JSON on stdout, exit 2 on change.
    #[command(after_help = DEFAULTS_HELP)]
    Detect(DetectArgs),
    /// Calibrate the anomaly threshold T_S and frequency threshold F_thresh from past trials.
    #[command(after_help = DEFAULTS_HELP)]
    Calibrate(CalibrateArgs),
    /// Detect change points in an anomaly flag stream (`index,flag,similarity`).
    #[command(after_help = DEFAULTS_HELP)]
    Events(EventsArgs),
    /// Run the detector benchmark and write a metric report.
    #[command(after_help = DEFAULTS_HELP)]
    Evaluate(EvaluateArgs),
    /// Repeat the benchmark at several distortion levels.
    #[command(after_help = DEFAULTS_HELP)]
    Sensitivity(SensitivityArgs),
}

#[derive(Debug, Args, Default)]
pub struct CorpusFlags {
    /// Changed pairs in the corpus [default: 3000].
    #[arg(long)]
    pub n_changed: Option<usize>,
    /// Noisy pairs in the corpus [default: 3000].
    #[arg(long)]
    pub n_noisy: Option<usize>,
    /// Share of noisy pairs carrying 20 dB AWGN distortion [default: 0.5].
    #[arg(long)]
    pub distortion_fraction: Option<f64>,
    /// Spike and AWGN noise only: drop the attenuation share [default: off].
    #[arg(long)]
    pub no_attenuation: bool,
    /// Length of the donor segment in changed pairs [default: 90].
    #[arg(long)]
    pub segment_length: Option<usize>,
    /// Spike width in timestamps [default: 3].
    #[arg(long)]
    pub spike_width: Option<usize>,
    /// Spike height in row standard deviations [default: 6].
    #[arg(long)]
    pub spike_magnitude: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct DetectorFlags {
    /// PCC threshold S^P [default: 0.6].
    #[arg(long)]
    pub pcc_threshold: Option<f64>,
    /// RMSE threshold S^R [default: 0.2].
    #[arg(long)]
    pub rmse_threshold: Option<f64>,
    /// Attenuation RMSE ceiling T^D [default: 0.5].
    #[arg(long)]
    pub attenuation_ceiling: Option<f64>,
    /// Sliding-window size W [default: 6].
    #[arg(long)]
    pub window: Option<usize>,
    /// CUSUM slack k [default: 0.5].
    #[arg(long)]
    pub cusum_k: Option<f64>,
    /// CUSUM decision interval h [default: 5].
    #[arg(long)]
    pub cusum_h: Option<f64>,
    /// SNR comparison: `per_segment` or `aggregate` [default: per_segment].
    #[arg(long)]
    pub snr_mode: Option<SnrMode>,
}

#[derive(Debug, Args, Default)]
pub struct ExperimentFlags {
    /// Simulation repeats [default: 30].
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated sample sizes [default: 1000,2000,3000,4000,5000].
    #[arg(long, value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
    /// Comma-separated detector names [default: sw,snr,cusum].
    #[arg(long, value_delimiter = ',')]
    pub detectors: Option<Vec<String>>,
    /// Noise-profile segments d [default: 12].
    #[arg(long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Workload trace CSV (`node_id,timestamp,cores_requested,cores_total`)
    /// [default: seeded synthetic trace, 31 nodes × 6486 samples].
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusFlags,
    /// Noise-profile segments d [default: 12].
    #[arg(long)]
    pub segments: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenSignatureArgs {
    /// Trial experiences CSV.
    #[arg(long)]
    pub experiences: PathBuf,
    /// Output signature CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Provider id [default: output file stem].
    #[arg(long)]
    pub provider: Option<String>,
    /// Grid length [default: 360].
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InjectArgs {
    /// Input signature CSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Output signature CSV (not re-normalized).
    #[arg(long)]
    pub out: PathBuf,
    /// Noise spec JSON, e.g. `{"kind":"spike","position":10}`, or `@file`.
    /// Spike width defaults to 3 and magnitude to 5; distortion to 20 dB.
    #[arg(long)]
    pub spec: String,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Existing signature CSV.
    #[arg(long)]
    pub existing: PathBuf,
    /// Recomputed signature CSV, read as stored.
    #[arg(long)]
    pub recomputed: PathBuf,
    /// Detector: sw, snr or cusum.
    #[arg(long)]
    pub method: String,
    /// Noise profile JSON (required by `snr`).
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Signature CSV.
    #[arg(long)]
    pub signature: PathBuf,
    /// Past trial experiences CSV.
    #[arg(long)]
    pub experiences: PathBuf,
    /// Similarity measure: pcc, ed, cs or rmse [default: pcc].
    #[arg(long)]
    pub measure: Option<SimilarityMethod>,
    /// Free-trial length T_f [default: 30].
    #[arg(long)]
    pub event_window: Option<usize>,
    /// Current trials to classify against the calibrated threshold.
    #[arg(long, requires = "flags_out")]
    pub current: Option<PathBuf>,
    /// Where to write anomaly flags for `--current`.
    #[arg(long, requires = "current")]
    pub flags_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EventsArgs {
    /// Anomaly flag CSV (`index,flag,similarity`, sorted by index).
    #[arg(long)]
    pub flags: PathBuf,
    /// Window length T_f [default: 30].
    #[arg(long)]
    pub event_window: Option<usize>,
    /// F_thresh; an event needs strictly more anomalies [default: 1].
    #[arg(long)]
    pub frequency_threshold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional plot-ready CSV path.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusFlags,
    #[command(flatten)]
    pub experiment: ExperimentFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// Output JSON path (one report per level).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated distortion levels [default: 0.5,0.25,0].
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    #[command(flatten)]
    pub corpus: CorpusFlags,
    #[command(flatten)]
    pub experiment: ExperimentFlags,
    #[command(flatten)]
    pub detector: DetectorFlags,
}

impl CorpusFlags {
    fn apply(&self, c: &mut CorpusConfig) {
        if let Some(v) = self.n_changed {
            c.n_changed = v;
        }
        if let Some(v) = self.n_noisy {
            c.n_noisy = v;
        }
        if let Some(v) = self.distortion_fraction {
            c.distortion_fraction = v;
        }
        if self.no_attenuation {
            c.no_attenuation = true;
        }
        if let Some(v) = self.segment_length {
            c.segment_length = v;
        }
        if let Some(v) = self.spike_width {
            c.spike_width = v;
        }
        if let Some(v) = self.spike_magnitude {
            c.spike_magnitude = v;
        }
    }
}

impl DetectorFlags {
    fn apply(&self, e: &mut ExperimentConfig) {
        let s = &mut e.settings;
        let pairs = [
            (self.pcc_threshold, &mut s.thresholds.s_p),
            (self.rmse_threshold, &mut s.thresholds.s_r),
            (self.attenuation_ceiling, &mut s.thresholds.t_d),
            (self.cusum_k, &mut s.cusum.k),
            (self.cusum_h, &mut s.cusum.h),
        ];
        for (flag, slot) in pairs {
            if let Some(v) = flag {
                *slot = v;
            }
        }
        if let Some(w) = self.window {
            s.thresholds.window = w;
        }
        if let Some(m) = self.snr_mode {
            s.snr_mode = m;
        }
    }
}

impl ExperimentFlags {
    fn apply(&self, e: &mut ExperimentConfig) {
        if let Some(v) = self.repeats {
            e.repeats = v;
        }
        if let Some(v) = &self.sample_sizes {
            e.sample_sizes = v.clone();
        }
        if let Some(v) = &self.detectors {
            e.detectors = v.clone();
        }
        if let Some(v) = self.segments {
            e.segments = v;
        }
    }
}

/// Config file, then `--set`, then seed resolution; dedicated flags are
/// applied per command afterwards.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seed_from_file = false;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        config.apply_text(&text, path)?;
        seed_from_file = text
            .lines()
            .any(|l| l.split('#').next().unwrap_or_default().trim_start().starts_with("seed"));
    }
    for item in &cli.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got `{item}`")))?;
        config.set(key.trim(), value)?;
        seed_from_file |= key.trim() == "seed";
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    } else if !seed_from_file {
        if let Ok(env) = std::env::var(SEED_ENV) {
            config.seed = parse(SEED_ENV, &env)?;
        }
    }
    Ok(config)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn cmd_gen_data(args: &GenDataArgs, mut config: RunConfig) -> Result<i32> {
    args.corpus.apply(&mut config.experiment.corpus);
    if let Some(d) = args.segments {
        config.experiment.segments = d;
    }
    let e = &config.experiment;
    e.corpus.validate()?;
    let out = &args.out;
    fs::create_dir_all(out).map_err(|err| Error::io(out, err))?;

    let profiles = datagen::shipped_profiles();
    let baseline = BaselineMap::shipped();
    let trace = match &args.trace {
        Some(path) => datagen::load_trace(path)?,
        None => datagen::synthesize_trace(e.trace_nodes, e.trace_length, e.trace_seed)?,
    };
    let grid = TimeGrid::days(e.grid_length)?;
    let bases = datagen::build_provider_signatures(&profiles, &trace, &grid, &baseline, seed::derive(e.trace_seed, 1))?;

    write_file(&out.join("baseline_map.json"), to_json(&baseline))?;
    for p in &profiles {
        write_file(
            &out.join("profiles").join(format!("{}.json", p.provider_id)),
            to_json(p),
        )?;
    }
    for b in &bases {
        write_file(
            &out.join("signatures").join(format!("{}.csv", b.provider_id())),
            model::format_signature(b),
        )?;
    }
    log::info!("wrote {} provider signatures", bases.len());

    let corpus = datagen::build_corpus(&bases, &e.corpus, seed::derive(config.seed, 0))?;
    let pairs_dir = out.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|err| Error::io(&pairs_dir, err))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for pair in &corpus {
        let name = format!("pairs/{:06}.csv", pair.provenance.index);
        write_file(&out.join(&name), model::format_signature(&pair.recomputed))?;
        entries.push(ManifestEntry {
            label: pair.label,
            provenance: pair.provenance.clone(),
            existing_path: format!("signatures/{}.csv", pair.provenance.base_provider),
            recomputed_path: name,
        });
    }
    log::info!("wrote {} corpus pairs", entries.len());
    let manifest = CorpusManifest {
        seed: config.seed,
        config: e.corpus.clone(),
        pairs: entries,
    };
    write_file(&out.join("manifest.json"), to_json(&manifest))?;

    let monitoring = eval::monitoring_corpus(&bases, e, seed::derive(config.seed, 1))?;
    for (provider, profile) in eval::learn_profiles(&monitoring, e.segments, e.aggregation)? {
        let name = if provider.is_empty() {
            "pooled".to_string()
        } else {
            provider
        };
        write_file(
            &out.join("noise_profiles").join(format!("{name}.json")),
            to_json(&profile),
        )?;
    }
    write_file(&out.join("config.json"), to_json(&config))?;
    Ok(EXIT_OK)
}

fn cmd_gen_signature(args: &GenSignatureArgs, config: RunConfig) -> Result<i32> {
    let cohorts = signature::read_cohorts(&args.experiences)?;
    let length = args.length.unwrap_or(config.experiment.grid_length);
    let provider = args.provider.clone().unwrap_or_else(|| {
        args.out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let sig = signature::generate_signature(provider, &cohorts, &TimeGrid::days(length)?)?;
    write_file(&args.out, model::format_signature(&sig))?;
    Ok(EXIT_OK)
}

fn cmd_inject(args: &InjectArgs, config: RunConfig) -> Result<i32> {
    let text = match args.spec.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => args.spec.clone(),
    };
    let spec: NoiseSpec = serde_json::from_str(&text)?;
    let sig = model::read_signature(&args.input)?.signature;
    let noisy = noisegen::inject(&sig, &spec, config.seed)?;
    write_file(&args.out, model::format_signature(&noisy))?;
    Ok(EXIT_OK)
}

fn cmd_detect(args: &DetectArgs, mut config: RunConfig, out: &mut dyn Write) -> Result<i32> {
    args.detector.apply(&mut config.experiment);
    let settings = config.experiment.settings;
    settings.thresholds.validate()?;
    let detector = DetectorRegistry::default().build(&args.method, &settings)?;
    let profile = args.profile.as_deref().map(NoiseProfile::read).transpose()?;
    if detector.needs_noise_profile() && profile.is_none() {
        return Err(Error::invalid(format!("method `{}` needs --profile", args.method)));
    }
    let existing = model::read_signature(&args.existing)?.signature;
    let recomputed = model::read_signature_raw(&args.recomputed)?;
    let ctx = DetectionContext {
        noise_profile: profile.as_ref(),
    };
    let outcome = detector.detect(&existing, &recomputed, &ctx)?;
    let mut json: serde_json::Value = serde_json::from_str(&outcome.to_json())?;
    json["method"] = args.method.clone().into();
    json["config"] = serde_json::to_value(settings)?;
    write_stdout(out, &to_json(&json))?;
    Ok(if outcome.verdict.is_change() {
        EXIT_CHANGE
    } else {
        EXIT_OK
    })
}

#[derive(Serialize)]
struct Calibration {
    similarity_threshold: cpd::AnomalyThreshold,
    event_window: usize,
    frequency_threshold: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    anomalies: Option<usize>,
}

fn cmd_calibrate(args: &CalibrateArgs, config: RunConfig, out: &mut dyn Write) -> Result<i32> {
    let method = args.measure.unwrap_or(config.similarity);
    let window = args.event_window.unwrap_or(config.event_window);
    let sig = model::read_signature(&args.signature)?.signature;
    let past = signature::read_experiences(&args.experiences)?;
    let threshold = cpd::calibrate_similarity_threshold(&past, &sig, method)?;
    let frequency = cpd::calibrate_frequency_threshold(&past, &sig, &threshold, window)?;
    let mut anomalies = None;
    if let (Some(current), Some(flags_out)) = (&args.current, &args.flags_out) {
        let mut flags = signature::read_experiences(current)?
            .iter()
            .map(|e| {
                let (flag, similarity) = cpd::is_anomalous(e, &sig, &threshold)?;
                Ok(AnomalyFlag {
                    index: e.trial_start,
                    flag,
                    similarity,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        flags.sort_by_key(|f| f.index);
        anomalies = Some(flags.iter().filter(|f| f.flag).count());
        let mut buf = Vec::new();
        cpd::write_flags(&flags, &mut buf).map_err(|e| Error::io(flags_out, e))?;
        write_file(flags_out, buf)?;
    }
    let report = Calibration {
        similarity_threshold: threshold,
        event_window: window,
        frequency_threshold: frequency.frequency_threshold,
        anomalies,
    };
    write_stdout(out, &to_json(&report))?;
    Ok(EXIT_OK)
}

fn cmd_events(args: &EventsArgs, config: RunConfig, out: &mut dyn Write) -> Result<i32> {
    let event = EventConfig::new(
        args.event_window.unwrap_or(config.event_window),
        args.frequency_threshold.unwrap_or(config.frequency_threshold),
    )?;
    let flags = cpd::read_flags(&args.flags)?;
    let stream: Vec<(usize, bool)> = flags.iter().map(|f| (f.index, f.flag)).collect();
    let change_points = cpd::detect_events(&stream, &event);
    let json = serde_json::json!({ "config": event, "change_points": change_points });
    write_stdout(out, &to_json(&json))?;
    Ok(EXIT_OK)
}

fn experiment_config(
    mut config: RunConfig,
    corpus: &CorpusFlags,
    experiment: &ExperimentFlags,
    detector: &DetectorFlags,
) -> RunConfig {
    corpus.apply(&mut config.experiment.corpus);
    experiment.apply(&mut config.experiment);
    detector.apply(&mut config.experiment);
    config
}

fn cmd_evaluate(args: &EvaluateArgs, config: RunConfig) -> Result<i32> {
    let config = experiment_config(config, &args.corpus, &args.experiment, &args.detector);
    let report = eval::run_experiment(&config.experiment, config.seed)?;
    write_file(&args.out, report.to_json() + "\n")?;
    if let Some(csv) = &args.csv {
        write_file(csv, report.to_csv())?;
    }
    log::info!("report written to {}", args.out.display());
    Ok(EXIT_OK)
}

fn cmd_sensitivity(args: &SensitivityArgs, config: RunConfig) -> Result<i32> {
    let mut config = experiment_config(config, &args.corpus, &args.experiment, &args.detector);
    if let Some(levels) = &args.levels {
        config.levels = levels.clone();
    }
    let points = eval::sensitivity_analysis(&config.experiment, &config.levels, config.seed)?;
    write_file(&args.out, to_json(&points))?;
    Ok(EXIT_OK)
}

fn write_stdout(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::GenSignature(_) => "gen-signature",
            Command::Inject(_) => "inject",
            Command::Detect(_) => "detect",
            Command::Calibrate(_) => "calibrate",
            Command::Events(_) => "events",
            Command::Evaluate(_) => "evaluate",
            Command::Sensitivity(_) => "sensitivity",
        }
    }
}

fn dispatch(cli: &Cli, out: &mut Vec<u8>) -> Result<i32> {
    let config = base_config(cli)?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, config),
        Command::GenSignature(a) => cmd_gen_signature(a, config),
        Command::Inject(a) => cmd_inject(a, config),
        Command::Detect(a) => cmd_detect(a, config, out),
        Command::Calibrate(a) => cmd_calibrate(a, config, out),
        Command::Events(a) => cmd_events(a, config, out),
        Command::Evaluate(a) => cmd_evaluate(a, config),
        Command::Sensitivity(a) => cmd_sensitivity(a, config),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Payloads go to `out`; diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{e}");
                    EXIT_ERROR
                }
            };
        }
    };
    // Payloads are buffered so the worker pool never holds the stdout lock.
    let mut buf = Vec::new();
    let result = match cli.jobs {
        Some(0) => Err(Error::invalid("--jobs must be ≥ 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))
            .and_then(|pool| pool.install(|| dispatch(&cli, &mut buf))),
        None => dispatch(&cli, &mut buf),
    };
    let result = result.and_then(|code| {
        out.write_all(&buf)
            .and_then(|_| out.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
        Ok(code)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::UnknownDetector { .. }) {
                use clap::CommandFactory;
                let mut cmd = Cli::command();
                cmd.build();
                let name = cli.command.name();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    eprintln!("{}", sub.render_usage());
                }
            }
            EXIT_ERROR
        }
    }
}
