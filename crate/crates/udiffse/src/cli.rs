//! Command-line front end: corpus synthesis, prior training, enhancement,
//! evaluation, and benchmarking.
//!
//! Configuration is flat `key = value` text; command-line flags override
//! file values. Run reports start with the same key-value section followed
//! by a `metrics:` block, so a report can be fed back through `--config` to
//! reproduce its run.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::av_fusion::{load_visual_embedding, write_visual_embedding, VisualEmbedding};
use crate::corpus::{
    gen_synthetic_scene, read_manifest, scene_prior, write_manifest, ManifestEntry, NoiseKind,
    SceneSpec, SourceKind,
};
use crate::error::Error;
use crate::metrics::{rtf, si_sdr};
use crate::nmf::{NmfModel, DEFAULT_EPS, DEFAULT_RANK};
use crate::sampler::{
    run_udiffse, run_udiffse_plus, EnhanceOutcome, PosteriorCadence, SamplerConfig,
};
use crate::score::{load_prior, save_prior, train_dsm, GaussianPrior, ScoreModel, TrainConfig};
use crate::sde::DiffusionSchedule;
use crate::spectral::{istft_with_len, read_wav, stft, write_wav, StftConfig};

/// Exit codes: 1 internal, 2 bad configuration, 3 unreadable input file,
/// 4 prior/embedding/input incompatibility, 5 sampler divergence.
#[derive(Debug)]
pub enum CliError {
    BadConfig(String),
    UnreadableInput(String),
    Mismatch(String),
    Divergence(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::BadConfig(_) => 2,
            CliError::UnreadableInput(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Divergence(_) => 5,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::BadConfig(m) => write!(f, "bad config: {m}"),
            CliError::UnreadableInput(m) => write!(f, "unreadable input: {m}"),
            CliError::Mismatch(m) => write!(f, "incompatible inputs: {m}"),
            CliError::Divergence(m) => write!(f, "sampler diverged: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn classify_run_error(e: Error) -> CliError {
    match e {
        Error::Divergence { .. } | Error::NonFiniteState { .. } => {
            CliError::Divergence(e.to_string())
        }
        Error::ShapeMismatch { .. } | Error::LengthMismatch { .. } | Error::MissingVisual => {
            CliError::Mismatch(e.to_string())
        }
        other => CliError::Other(other.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algo {
    Udiffse,
    UdiffsePlus,
}

impl FromStr for Algo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "udiffse" => Ok(Self::Udiffse),
            "udiffse+" => Ok(Self::UdiffsePlus),
            other => Err(format!("unknown algo '{other}' (expected udiffse or udiffse+)")),
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Udiffse => "udiffse",
            Self::UdiffsePlus => "udiffse+",
        })
    }
}

fn cadence_to_str(c: PosteriorCadence) -> &'static str {
    match c {
        PosteriorCadence::EvenSteps => "even",
        PosteriorCadence::Never => "never",
    }
}

fn cadence_from_str(s: &str) -> std::result::Result<PosteriorCadence, String> {
    match s {
        "even" => Ok(PosteriorCadence::EvenSteps),
        "never" => Ok(PosteriorCadence::Never),
        other => Err(format!("unknown cadence '{other}' (expected even or never)")),
    }
}

/// Full enhancement-run configuration. Paths stay optional until validation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algo: Algo,
    pub seed: u64,
    pub gamma: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub n_steps: usize,
    pub lambda: f64,
    pub corrector_snr: f64,
    pub em_iterations: usize,
    pub m_step_iterations: usize,
    pub nmf_rank: usize,
    pub nmf_eps: f64,
    pub posterior_cadence: PosteriorCadence,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub visual: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub verbose: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = DiffusionSchedule::default();
        let samp = SamplerConfig::default();
        Self {
            algo: Algo::UdiffsePlus,
            seed: 0,
            gamma: sched.gamma,
            sigma_min: sched.sigma_min,
            sigma_max: sched.sigma_max,
            n_steps: sched.n_steps,
            lambda: samp.likelihood_weight,
            corrector_snr: samp.corrector_snr,
            em_iterations: samp.em_iterations,
            m_step_iterations: samp.m_step_iterations,
            nmf_rank: DEFAULT_RANK,
            nmf_eps: DEFAULT_EPS,
            posterior_cadence: PosteriorCadence::EvenSteps,
            input: None,
            output: None,
            prior: None,
            visual: None,
            reference: None,
            report: None,
            verbose: false,
        }
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    if value == "-" {
        None
    } else {
        Some(PathBuf::from(value))
    }
}

impl RunConfig {
    /// Parse a flat `key = value` file. Lines after a `metrics:` marker are
    /// ignored, which lets run reports double as config files. `-` clears a
    /// path value.
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::BadConfig(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "metrics:" {
                break;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::BadConfig(format!(
                    "{}:{}: expected 'key = value', found '{raw}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim()).map_err(|m| {
                CliError::BadConfig(format!("{}:{}: {m}", path.display(), lineno + 1))
            })?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse '{value}' for key '{key}'"))
        }
        match key {
            "command" => {} // informational in reports
            "algo" => self.algo = value.parse()?,
            "seed" => self.seed = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "sigma_min" => self.sigma_min = num(key, value)?,
            "sigma_max" => self.sigma_max = num(key, value)?,
            "n_steps" => self.n_steps = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "corrector_snr" => self.corrector_snr = num(key, value)?,
            "em_iterations" => self.em_iterations = num(key, value)?,
            "m_step_iterations" => self.m_step_iterations = num(key, value)?,
            "nmf_rank" => self.nmf_rank = num(key, value)?,
            "nmf_eps" => self.nmf_eps = num(key, value)?,
            "posterior_cadence" => self.posterior_cadence = cadence_from_str(value)?,
            "input" => self.input = parse_path(value),
            "output" => self.output = parse_path(value),
            "prior" => self.prior = parse_path(value),
            "visual" => self.visual = parse_path(value),
            "reference" => self.reference = parse_path(value),
            "report" => self.report = parse_path(value),
            "verbose" => self.verbose = num(key, value)?,
            other => return Err(format!("unknown config key '{other}'")),
        }
        Ok(())
    }

    fn schedule(&self) -> CliResult<DiffusionSchedule> {
        DiffusionSchedule::new(self.gamma, self.sigma_min, self.sigma_max, self.n_steps)
            .map_err(|e| CliError::BadConfig(e.to_string()))
    }

    fn sampler(&self) -> CliResult<SamplerConfig> {
        let cfg = SamplerConfig {
            n_steps: self.n_steps,
            corrector_snr: self.corrector_snr,
            likelihood_weight: self.lambda,
            em_iterations: self.em_iterations,
            posterior_cadence: self.posterior_cadence,
            nmf_updates: true,
            m_step_iterations: self.m_step_iterations,
            seed: self.seed,
            record_trace: self.verbose,
        };
        cfg.validate().map_err(|e| CliError::BadConfig(e.to_string()))?;
        Ok(cfg)
    }

    fn config_section(&self, command: &str) -> String {
        let path_or_dash =
            |p: &Option<PathBuf>| p.as_ref().map_or("-".to_string(), |p| p.display().to_string());
        let mut out = String::new();
        out.push_str(&format!("command = {command}\n"));
        out.push_str(&format!("algo = {}\n", self.algo));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("gamma = {}\n", self.gamma));
        out.push_str(&format!("sigma_min = {}\n", self.sigma_min));
        out.push_str(&format!("sigma_max = {}\n", self.sigma_max));
        out.push_str(&format!("n_steps = {}\n", self.n_steps));
        out.push_str(&format!("lambda = {}\n", self.lambda));
        out.push_str(&format!("corrector_snr = {}\n", self.corrector_snr));
        out.push_str(&format!("em_iterations = {}\n", self.em_iterations));
        out.push_str(&format!("m_step_iterations = {}\n", self.m_step_iterations));
        out.push_str(&format!("nmf_rank = {}\n", self.nmf_rank));
        out.push_str(&format!("nmf_eps = {}\n", self.nmf_eps));
        out.push_str(&format!(
            "posterior_cadence = {}\n",
            cadence_to_str(self.posterior_cadence)
        ));
        out.push_str(&format!("input = {}\n", path_or_dash(&self.input)));
        out.push_str(&format!("output = {}\n", path_or_dash(&self.output)));
        out.push_str(&format!("prior = {}\n", path_or_dash(&self.prior)));
        out.push_str(&format!("visual = {}\n", path_or_dash(&self.visual)));
        out.push_str(&format!("reference = {}\n", path_or_dash(&self.reference)));
        out.push_str(&format!("report = {}\n", path_or_dash(&self.report)));
        out.push_str(&format!("verbose = {}\n", self.verbose));
        out
    }
}

#[derive(Parser, Debug)]
#[command(name = "udiffse", version, about = "Unsupervised diffusion speech enhancement")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Enhance a noisy recording with a trained prior.
    Enhance(EnhanceArgs),
    /// Generate a synthetic corpus of scenes.
    Synth(SynthArgs),
    /// Train a Gaussian prior with denoising score matching.
    TrainPrior(TrainPriorArgs),
    /// Score an estimate against a reference.
    Eval(EvalArgs),
    /// Compare both enhancement algorithms on synthetic scenes.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
struct EnhanceArgs {
    /// Config file (or a previous run report).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = Algo::from_str)]
    algo: Option<Algo>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Visual embedding file (required when the prior is conditional).
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Clean reference for SI-SDR reporting.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Report path (default: <output>.report.txt).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long)]
    n_steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    corrector_snr: Option<f64>,
    #[arg(long)]
    em_iterations: Option<usize>,
    #[arg(long)]
    m_step_iterations: Option<usize>,
    #[arg(long)]
    nmf_rank: Option<usize>,
    #[arg(long)]
    nmf_eps: Option<f64>,
    /// Observation-consistency cadence: even | never.
    #[arg(long, value_parser = cadence_from_str)]
    posterior_cadence: Option<PosteriorCadence>,
    /// Record per-step diagnostics and NMF factors in the report.
    #[arg(long)]
    verbose: bool,
}

impl EnhanceArgs {
    fn into_config(self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.algo {
            cfg.algo = v;
        }
        if let Some(v) = self.input {
            cfg.input = Some(v);
        }
        if let Some(v) = self.output {
            cfg.output = Some(v);
        }
        if let Some(v) = self.prior {
            cfg.prior = Some(v);
        }
        if let Some(v) = self.visual {
            cfg.visual = Some(v);
        }
        if let Some(v) = self.reference {
            cfg.reference = Some(v);
        }
        if let Some(v) = self.report {
            cfg.report = Some(v);
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.sigma_min {
            cfg.sigma_min = v;
        }
        if let Some(v) = self.sigma_max {
            cfg.sigma_max = v;
        }
        if let Some(v) = self.n_steps {
            cfg.n_steps = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.corrector_snr {
            cfg.corrector_snr = v;
        }
        if let Some(v) = self.em_iterations {
            cfg.em_iterations = v;
        }
        if let Some(v) = self.m_step_iterations {
            cfg.m_step_iterations = v;
        }
        if let Some(v) = self.nmf_rank {
            cfg.nmf_rank = v;
        }
        if let Some(v) = self.nmf_eps {
            cfg.nmf_eps = v;
        }
        if let Some(v) = self.posterior_cadence {
            cfg.posterior_cadence = v;
        }
        if self.verbose {
            cfg.verbose = true;
        }
        Ok(cfg)
    }
}

/// Everything `enhance` produced, returned for programmatic use and tests.
pub struct EnhanceReport {
    pub config: RunConfig,
    pub outcome: EnhanceOutcome,
    pub rtf: f64,
    pub si_sdr_in: Option<f64>,
    pub si_sdr_out: Option<f64>,
}

/// Run the `enhance` pipeline: read, transform, sample, reconstruct, report.
pub fn enhance(cfg: &RunConfig) -> CliResult<EnhanceReport> {
    let mut cfg = cfg.clone();
    let input = cfg
        .input
        .clone()
        .ok_or_else(|| CliError::BadConfig("missing input path".into()))?;
    let output = cfg
        .output
        .clone()
        .ok_or_else(|| CliError::BadConfig("missing output path".into()))?;
    let prior_path = cfg
        .prior
        .clone()
        .ok_or_else(|| CliError::BadConfig("missing prior path".into()))?;
    if cfg.report.is_none() {
        let mut p = output.clone().into_os_string();
        p.push(".report.txt");
        cfg.report = Some(PathBuf::from(p));
    }
    let sched = cfg.schedule()?;
    let samp = cfg.sampler()?;
    if cfg.nmf_rank == 0 {
        return Err(CliError::BadConfig("nmf_rank must be positive".into()));
    }
    if cfg.nmf_eps <= 0.0 || cfg.nmf_eps.is_nan() {
        return Err(CliError::BadConfig("nmf_eps must be positive".into()));
    }

    let noisy = read_wav(&input)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", input.display())))?;
    let stft_cfg = StftConfig::default();
    let x = stft(&noisy, &stft_cfg)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", input.display())))?;

    let prior = load_prior(&prior_path)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", prior_path.display())))?;
    if prior.conditional() && cfg.visual.is_none() {
        return Err(CliError::BadConfig(
            "prior is conditional but no visual embedding was provided".into(),
        ));
    }
    let visual: Option<VisualEmbedding> = match &cfg.visual {
        Some(path) => Some(
            load_visual_embedding(path)
                .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", path.display())))?,
        ),
        None => None,
    };
    if (prior.f(), prior.t()) != (x.f(), x.t()) {
        return Err(CliError::Mismatch(format!(
            "prior is {}x{} but the input spectrogram is {}x{}",
            prior.f(),
            prior.t(),
            x.f(),
            x.t()
        )));
    }
    if let (Some(p), Some(v)) = (prior.embed_dim(), visual.as_ref()) {
        if v.p() != p {
            return Err(CliError::Mismatch(format!(
                "prior expects embedding dim {p} but the file has {}",
                v.p()
            )));
        }
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(1);
    let nmf_init = NmfModel::init_from_mixture(&x, cfg.nmf_rank, cfg.nmf_eps, &mut init_rng)
        .map_err(classify_run_error)?;

    let outcome = match cfg.algo {
        Algo::UdiffsePlus => {
            run_udiffse_plus(&x, &prior, visual.as_ref(), &nmf_init, &sched, &samp)
        }
        Algo::Udiffse => run_udiffse(&x, &prior, visual.as_ref(), &nmf_init, &sched, &samp),
    }
    .map_err(classify_run_error)?;

    let enhanced = istft_with_len(&outcome.s_hat, noisy.len())
        .map_err(|e| CliError::Other(e.to_string()))?;
    write_wav(&output, &enhanced)
        .map_err(|e| CliError::Other(format!("{}: {e}", output.display())))?;

    let mut stats = outcome.stats;
    stats.audio_duration = noisy.duration_seconds();
    let rtf_value = rtf(&stats).map_err(|e| CliError::Other(e.to_string()))?;

    let (si_in, si_out) = match &cfg.reference {
        Some(ref_path) => {
            let reference = read_wav(ref_path)
                .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", ref_path.display())))?;
            let si_in = si_sdr(&noisy, &reference).map_err(classify_run_error)?;
            let si_out = si_sdr(&enhanced, &reference).map_err(classify_run_error)?;
            (Some(si_in), Some(si_out))
        }
        None => (None, None),
    };

    let mut outcome = outcome;
    outcome.stats = stats;
    let report = EnhanceReport {
        config: cfg.clone(),
        outcome,
        rtf: rtf_value,
        si_sdr_in: si_in,
        si_sdr_out: si_out,
    };
    write_report(cfg.report.as_ref().expect("defaulted above"), &report)?;
    Ok(report)
}

fn write_report(path: &Path, report: &EnhanceReport) -> CliResult<()> {
    let mut text = report.config.config_section("enhance");
    text.push_str("metrics:\n");
    let stats = &report.outcome.stats;
    text.push_str(&format!("score_evaluations = {}\n", stats.score_evaluations));
    text.push_str(&format!("nmf_updates = {}\n", stats.nmf_updates));
    text.push_str(&format!("wall_time_s = {:.6}\n", stats.wall_time));
    text.push_str(&format!("audio_duration_s = {}\n", stats.audio_duration));
    text.push_str(&format!("rtf = {:.6}\n", report.rtf));
    if let (Some(si_in), Some(si_out)) = (report.si_sdr_in, report.si_sdr_out) {
        text.push_str(&format!("si_sdr_in_db = {si_in:.4}\n"));
        text.push_str(&format!("si_sdr_out_db = {si_out:.4}\n"));
    }
    if report.config.verbose {
        text.push_str("trace:\n");
        for rec in &report.outcome.trace {
            text.push_str(&format!(
                "step i={} tau={:.6} residual_norm={:.6e} posterior={}\n",
                rec.i, rec.tau, rec.residual_norm, rec.posterior_applied
            ));
        }
        text.push_str("nmf_w:\n");
        for row in report.outcome.nmf.w().rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
        text.push_str("nmf_h:\n");
        for row in report.outcome.nmf.h().rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            text.push_str(&cells.join(" "));
            text.push('\n');
        }
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 2.04)]
    duration: f64,
    #[arg(long, default_value_t = 0.0)]
    snr: f64,
    #[arg(long, default_value = "harmonic")]
    source: String,
    #[arg(long, default_value = "white")]
    noise: String,
    /// Base seed; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the prior that gaussian-prior-draw scenes sample from.
    #[arg(long)]
    prior_out: Option<PathBuf>,
    /// Generate scenes on worker threads (scenes are seeded independently,
    /// so the written files are identical either way).
    #[arg(long)]
    parallel: bool,
}

fn synth_scene(args: &SynthArgs, source: SourceKind, noise: NoiseKind, i: usize) -> CliResult<ManifestEntry> {
    let spec = SceneSpec {
        duration: args.duration,
        snr_db: args.snr,
        source_kind: source,
        noise_kind: noise,
        seed: args.seed + i as u64,
    };
    let scene = gen_synthetic_scene(&spec).map_err(classify_run_error)?;
    let clean = args.out_dir.join(format!("clean_{i:03}.wav"));
    let noisy = args.out_dir.join(format!("noisy_{i:03}.wav"));
    let visual = args.out_dir.join(format!("visual_{i:03}.emb"));
    write_wav(&clean, &scene.clean).map_err(|e| CliError::Other(e.to_string()))?;
    write_wav(&noisy, &scene.noisy).map_err(|e| CliError::Other(e.to_string()))?;
    write_visual_embedding(&visual, &scene.visual)
        .map_err(|e| CliError::Other(e.to_string()))?;
    Ok(ManifestEntry {
        name: format!("scene_{i:03}"),
        clean,
        noisy,
        visual,
        seed: spec.seed,
        snr_db: spec.snr_db,
    })
}

fn synth(args: &SynthArgs) -> CliResult<()> {
    let source: SourceKind = args
        .source
        .parse()
        .map_err(|e: Error| CliError::BadConfig(e.to_string()))?;
    let noise: NoiseKind = args
        .noise
        .parse()
        .map_err(|e: Error| CliError::BadConfig(e.to_string()))?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Other(format!("{}: {e}", args.out_dir.display())))?;

    let mut entries = Vec::with_capacity(args.count);
    if args.parallel && args.count > 1 {
        let workers = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(args.count);
        let chunk = args.count.div_ceil(workers);
        let indices: Vec<usize> = (0..args.count).collect();
        let mut results: Vec<CliResult<ManifestEntry>> = std::thread::scope(|scope| {
            let handles: Vec<_> = indices
                .chunks(chunk)
                .map(|ids| {
                    scope.spawn(move || {
                        ids.iter()
                            .map(|&i| synth_scene(args, source, noise, i))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("scene worker panicked"))
                .collect()
        });
        for r in results.drain(..) {
            entries.push(r?);
        }
    } else {
        for i in 0..args.count {
            entries.push(synth_scene(args, source, noise, i)?);
        }
    }
    write_manifest(args.out_dir.join("manifest.txt"), &entries)
        .map_err(|e| CliError::Other(e.to_string()))?;

    if let Some(prior_out) = &args.prior_out {
        let cfg = StftConfig::default();
        let len = (args.duration * crate::spectral::DEFAULT_SAMPLE_RATE as f64).round() as usize;
        let prior = scene_prior(&cfg, cfg.n_frames(len));
        save_prior(prior_out, &prior).map_err(|e| CliError::Other(e.to_string()))?;
    }
    println!("wrote {} scenes to {}", args.count, args.out_dir.display());
    Ok(())
}

#[derive(Args, Debug)]
struct TrainPriorArgs {
    /// Manifest produced by `synth`; clean (and optionally visual) files are
    /// read from it.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Learn a visual-conditioned mean shift as well.
    #[arg(long)]
    conditional: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
}

fn train_prior(args: &TrainPriorArgs) -> CliResult<()> {
    let entries = read_manifest(&args.manifest)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", args.manifest.display())))?;
    if entries.is_empty() {
        return Err(CliError::BadConfig("manifest lists no scenes".into()));
    }
    let stft_cfg = StftConfig::default();
    let mut data = Vec::with_capacity(entries.len());
    let mut visuals = Vec::with_capacity(entries.len());
    for e in &entries {
        let w = read_wav(&e.clean)
            .map_err(|err| CliError::UnreadableInput(format!("{}: {err}", e.clean.display())))?;
        let s = stft(&w, &stft_cfg).map_err(classify_run_error)?;
        data.push(s);
        if args.conditional {
            let v = load_visual_embedding(&e.visual).map_err(|err| {
                CliError::UnreadableInput(format!("{}: {err}", e.visual.display()))
            })?;
            visuals.push(v);
        }
    }
    let (f, t) = (data[0].f(), data[0].t());
    if data.iter().any(|s| (s.f(), s.t()) != (f, t)) {
        return Err(CliError::Mismatch(
            "training spectrograms must share one shape; trim clips to equal length".into(),
        ));
    }

    let mut sched = DiffusionSchedule::default();
    if let Some(v) = args.gamma {
        sched.gamma = v;
    }
    if let Some(v) = args.sigma_min {
        sched.sigma_min = v;
    }
    if let Some(v) = args.sigma_max {
        sched.sigma_max = v;
    }
    sched.validate().map_err(|e| CliError::BadConfig(e.to_string()))?;

    let mut init = GaussianPrior::flat(f, t, stft_cfg);
    if args.conditional {
        let p = visuals[0].p();
        init = init
            .with_conditioning(ndarray::Array2::zeros((f * t, p)))
            .map_err(classify_run_error)?;
    }
    let train_cfg = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        batch_size: args.batch_size,
        momentum: args.momentum,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let vs = if args.conditional { Some(visuals.as_slice()) } else { None };
    let outcome =
        train_dsm(&init, &data, vs, &sched, &train_cfg, &mut rng).map_err(classify_run_error)?;
    save_prior(&args.out, &outcome.prior).map_err(|e| CliError::Other(e.to_string()))?;

    let first = outcome.loss_history.first().copied().unwrap_or(0.0);
    let last = outcome.loss_history.last().copied().unwrap_or(0.0);
    println!(
        "trained {} steps on {} clips ({}x{}); loss {first:.4} -> {last:.4}; wrote {}",
        args.steps,
        data.len(),
        f,
        t,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    estimate: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Optional mixture; when given, the improvement over it is printed too.
    #[arg(long)]
    mixture: Option<PathBuf>,
}

fn eval(args: &EvalArgs) -> CliResult<()> {
    let estimate = read_wav(&args.estimate)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", args.estimate.display())))?;
    let reference = read_wav(&args.reference)
        .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", args.reference.display())))?;
    let value = si_sdr(&estimate, &reference).map_err(classify_run_error)?;
    println!("si_sdr_db = {value:.4}");
    if let Some(mix_path) = &args.mixture {
        let mixture = read_wav(mix_path)
            .map_err(|e| CliError::UnreadableInput(format!("{}: {e}", mix_path.display())))?;
        let base = si_sdr(&mixture, &reference).map_err(classify_run_error)?;
        println!("si_sdr_input_db = {base:.4}");
        println!("si_sdr_improvement_db = {:.4}", value - base);
    }
    Ok(())
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    #[arg(long, default_value_t = 2.04)]
    duration: f64,
    #[arg(long, default_value_t = 0.0)]
    snr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    n_steps: usize,
    /// EM rounds for the multi-pass algorithm.
    #[arg(long, default_value_t = 5)]
    em: usize,
}

/// One table row per (algo, N, em) cell.
struct BenchRow {
    algo: Algo,
    n_steps: usize,
    em: usize,
    rtf: f64,
    si_sdr_in: f64,
    si_sdr_out: f64,
}

fn bench(args: &BenchArgs) -> CliResult<()> {
    if args.scenes == 0 {
        return Err(CliError::BadConfig("need at least one scene".into()));
    }
    let stft_cfg = StftConfig::default();
    let sched = DiffusionSchedule { n_steps: args.n_steps, ..DiffusionSchedule::default() };
    sched.validate().map_err(|e| CliError::BadConfig(e.to_string()))?;

    let mut rows: Vec<BenchRow> = Vec::new();
    for (algo, em) in [(Algo::Udiffse, args.em), (Algo::UdiffsePlus, 1)] {
        let mut rtf_sum = 0.0;
        let mut si_in_sum = 0.0;
        let mut si_out_sum = 0.0;
        for i in 0..args.scenes {
            let spec = SceneSpec {
                duration: args.duration,
                snr_db: args.snr,
                source_kind: SourceKind::GaussianPriorDraw,
                noise_kind: NoiseKind::White,
                seed: args.seed + i as u64,
            };
            let scene = gen_synthetic_scene(&spec).map_err(classify_run_error)?;
            let x = stft(&scene.noisy, &stft_cfg).map_err(classify_run_error)?;
            let prior = scene_prior(&stft_cfg, x.t());
            let mut init_rng = ChaCha8Rng::seed_from_u64(spec.seed);
            init_rng.set_stream(1);
            let nmf_init = NmfModel::init_from_mixture(&x, DEFAULT_RANK, DEFAULT_EPS, &mut init_rng)
                .map_err(classify_run_error)?;
            let samp = SamplerConfig {
                n_steps: args.n_steps,
                em_iterations: em,
                seed: spec.seed,
                ..SamplerConfig::default()
            };
            let outcome = match algo {
                Algo::Udiffse => run_udiffse(&x, &prior, None, &nmf_init, &sched, &samp),
                Algo::UdiffsePlus => {
                    run_udiffse_plus(&x, &prior, None, &nmf_init, &sched, &samp)
                }
            }
            .map_err(classify_run_error)?;
            let enhanced = istft_with_len(&outcome.s_hat, scene.noisy.len())
                .map_err(classify_run_error)?;
            let mut stats = outcome.stats;
            stats.audio_duration = scene.noisy.duration_seconds();
            rtf_sum += rtf(&stats).map_err(classify_run_error)?;
            si_in_sum += si_sdr(&scene.noisy, &scene.clean).map_err(classify_run_error)?;
            si_out_sum += si_sdr(&enhanced, &scene.clean).map_err(classify_run_error)?;
        }
        let n = args.scenes as f64;
        rows.push(BenchRow {
            algo,
            n_steps: args.n_steps,
            em,
            rtf: rtf_sum / n,
            si_sdr_in: si_in_sum / n,
            si_sdr_out: si_out_sum / n,
        });
    }

    let mut out = std::io::stdout().lock();
    writeln!(out, "{:<10} {:>7} {:>4} {:>9} {:>11} {:>12}",
        "algo", "n_steps", "em", "rtf", "si_sdr_in", "si_sdr_out")
        .ok();
    for r in &rows {
        writeln!(
            out,
            "{:<10} {:>7} {:>4} {:>9.4} {:>11.3} {:>12.3}",
            r.algo.to_string(),
            r.n_steps,
            r.em,
            r.rtf,
            r.si_sdr_in,
            r.si_sdr_out
        )
        .ok();
    }
    Ok(())
}

/// Execute a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: CliResult<()> = match cli.command {
        Command::Enhance(args) => args.into_config().and_then(|cfg| enhance(&cfg).map(|_| ())),
        Command::Synth(args) => synth(&args),
        Command::TrainPrior(args) => train_prior(&args),
        Command::Eval(args) => eval(&args),
        Command::Bench(args) => bench(&args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
