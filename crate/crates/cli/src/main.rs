//! `c2fpl`: command-line front end for the pseudo-labelling pipeline.
//!
//! Failures print one line to stderr,
//! `error: code=<exit> kind=<tag> msg=<text>`, and exit with
//! 2 (usage), 3 (I/O), 4 (data invariant) or 5 (numeric/degenerate).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c2fpl_core::detector::{read_checkpoint, train, write_checkpoint, TrainConfig};
use c2fpl_core::eval::{
    frame_auc_from_frames, read_frame_scores_csv, score_bundle, write_frame_scores_csv,
};
use c2fpl_core::features::{read_bundle, write_bundle, FeatureBundle, TruthManifest};
use c2fpl_core::fpl::{generate_fine_labels, FineLabels};
use c2fpl_core::pipeline::{
    coarse_stage, run, sweep, write_sweep_csv, AblationMode, PipelineConfig, SweepParam,
};
use c2fpl_core::synth::{generate, SynthConfig};
use c2fpl_core::{Error, ErrorKind};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "c2fpl",
    version,
    about = "Coarse-to-fine pseudo-labelling for video anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature bundle and its ground truth.
    Synth(SynthArgs),
    /// Coarse and fine pseudo-labels for a bundle.
    Labels(LabelsArgs),
    /// Train the detector on a bundle and fine labels.
    Train(TrainArgs),
    /// Score every frame of a bundle with a trained model (CSV).
    Score(ScoreArgs),
    /// Frame-level AUC of a score CSV against ground truth.
    Eval(EvalArgs),
    /// Run the whole pipeline in one ablation mode.
    Run(RunArgs),
    /// Run several ablation modes and tabulate their AUCs.
    Ablate(AblateArgs),
    /// Sweep eta or beta over a grid (CSV).
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Generator config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON path [default: <out>.truth.json].
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct LabelsArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 0.2)]
    beta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Upper bound on divisive clustering iterations.
    #[arg(long, default_value_t = 50)]
    max_cpl_iters: usize,
    /// Fine labels JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write the coarse video labels here.
    #[arg(long)]
    coarse_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Fine labels JSON, as written by `labels`.
    #[arg(long)]
    labels: PathBuf,
    /// Training config JSON; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Frame score CSV, as written by `score`.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Output metrics JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Training bundle.
    #[arg(long)]
    bundle: PathBuf,
    /// Ground truth for the training bundle.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Held-out bundle to evaluate on instead of the training bundle.
    #[arg(long, requires = "test_truth")]
    test_bundle: Option<PathBuf>,
    #[arg(long, requires = "test_bundle")]
    test_truth: Option<PathBuf>,
    /// Pipeline config JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "full")]
    mode: String,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated modes [default: all].
    #[arg(long, value_delimiter = ',')]
    modes: Vec<String>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output JSON table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// eta or beta.
    #[arg(long)]
    param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Io => 3,
        ErrorKind::DataInvariant => 4,
        ErrorKind::Numeric => 5,
    }
}

fn fail(code: u8, tag: &str, msg: &str) -> ExitCode {
    let msg = msg
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ");
    eprintln!("error: code={code} kind={tag} msg={msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            return fail(2, "usage", first);
        }
    };
    if let Err(e) = configure_threads() {
        return fail(2, e.tag(), &e.to_string());
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(exit_code(e.kind()), e.tag(), &e.to_string()),
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var("C2FPL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "C2FPL_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::Labels(a) => cmd_labels(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(a) => cmd_run(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn check_beta(beta: f64) -> Result<(), Error> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--beta must lie in (0, 1), got {beta}")))
    }
}

fn check_eta(eta: f64) -> Result<(), Error> {
    if eta > 0.0 && eta.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--eta must be positive, got {eta}")))
    }
}

/// The output's parent directory must exist and the path must not be an
/// input of the same command.
fn check_output(out: &Path, inputs: &[&Path]) -> Result<(), Error> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(usage(format!(
                "output directory {} does not exist",
                parent.display()
            )));
        }
    }
    if out.is_dir() {
        return Err(usage(format!("output {} is a directory", out.display())));
    }
    for input in inputs {
        if same_file(out, input) {
            return Err(usage(format!(
                "output {} would overwrite an input",
                out.display()
            )));
        }
    }
    Ok(())
}

fn check_output_dir(dir: &Path, inputs: &[&Path]) -> Result<(), Error> {
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!(
            "{} exists and is not a directory",
            dir.display()
        )));
    }
    for input in inputs {
        if input.parent().is_some_and(|p| same_file(p, dir)) {
            let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if RUN_OUTPUTS.contains(&name) {
                return Err(usage(format!(
                    "input {} would be overwritten",
                    input.display()
                )));
            }
        }
    }
    Ok(())
}

fn same_file(a: &Path, b: &Path) -> bool {
    if a == b {
        return true;
    }
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn truth_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("bundle");
    out.with_file_name(format!("{stem}.truth.json"))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let mut config = match &a.config {
        Some(p) => SynthConfig::read(p)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let truth_out = a
        .truth_out
        .clone()
        .unwrap_or_else(|| truth_path_for(&a.out));
    let inputs: Vec<&Path> = a.config.iter().map(PathBuf::as_path).collect();
    check_output(&a.out, &inputs)?;
    check_output(&truth_out, &inputs)?;
    if same_file(&a.out, &truth_out) {
        return Err(usage("--out and --truth-out must differ"));
    }

    let (bundle, truth) = generate(&config)?;
    write_bundle(&bundle, &a.out)?;
    truth.write(&truth_out)?;
    Ok(())
}

fn cmd_labels(a: LabelsArgs) -> Result<(), Error> {
    check_eta(a.eta)?;
    check_beta(a.beta)?;
    check_output(&a.out, &[&a.bundle])?;
    if let Some(c) = &a.coarse_out {
        check_output(c, &[&a.bundle, &a.out])?;
    }
    let bundle = read_bundle(&a.bundle)?;
    let config = PipelineConfig {
        eta: a.eta,
        beta: a.beta,
        max_cpl_iters: a.max_cpl_iters,
        seed: a.seed,
        ..PipelineConfig::default()
    };
    let coarse = coarse_stage(&bundle, &config)?;
    let fine = generate_fine_labels(&bundle, &coarse, a.beta)?;
    fine.write(&a.out)?;
    if let Some(c) = &a.coarse_out {
        coarse.write(c)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let mut config: TrainConfig = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    let mut inputs = vec![a.bundle.as_path(), a.labels.as_path()];
    inputs.extend(a.config.as_deref());
    check_output(&a.out, &inputs)?;

    let bundle = read_bundle(&a.bundle)?;
    let fine = FineLabels::read(&a.labels)?;
    let report = train(&bundle, &fine, &config)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_checkpoint(&report.model, &config, &a.out)
}

fn cmd_score(a: ScoreArgs) -> Result<(), Error> {
    check_output(&a.out, &[&a.model, &a.bundle])?;
    let (model, _) = read_checkpoint(&a.model)?;
    let bundle = read_bundle(&a.bundle)?;
    let scored = score_bundle(&model, &bundle)?;
    write_frame_scores_csv(&scored, &a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    check_output(&a.out, &[&a.scores, &a.truth])?;
    let frames = read_frame_scores_csv(&a.scores)?;
    let truth = TruthManifest::read(&a.truth)?;
    let (roc, warnings) = frame_auc_from_frames(
        frames.iter().map(|(id, s)| (id.as_str(), s.as_slice())),
        &truth,
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    roc.write(&a.out)
}

struct Loaded {
    config: PipelineConfig,
    bundle: FeatureBundle,
    truth: Option<TruthManifest>,
    test: Option<(FeatureBundle, TruthManifest)>,
}

impl PipelineArgs {
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.bundle.as_path()];
        v.extend(self.truth.as_deref());
        v.extend(self.test_bundle.as_deref());
        v.extend(self.test_truth.as_deref());
        v.extend(self.config.as_deref());
        v
    }

    /// Resolve the config and validate flags without touching the filesystem.
    fn config(&self, mode: AblationMode) -> Result<PipelineConfig, Error> {
        let mut config = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(eta) = self.eta {
            config.eta = eta;
        }
        if let Some(beta) = self.beta {
            config.beta = beta;
        }
        if let Some(epochs) = self.epochs {
            config.train.epochs = epochs;
        }
        config.mode = mode;
        config.seed = self.seed;
        check_eta(config.eta)?;
        check_beta(config.beta)?;
        config.effective_train_config().validate()?;
        if mode.needs_ground_truth() && self.truth.is_none() {
            return Err(usage(format!("mode {mode} needs --truth")));
        }
        Ok(config)
    }

    fn load(&self, mode: AblationMode) -> Result<Loaded, Error> {
        let config = self.config(mode)?;
        let bundle = read_bundle(&self.bundle)?;
        let truth = self.truth.as_ref().map(TruthManifest::read).transpose()?;
        let test = match (&self.test_bundle, &self.test_truth) {
            (Some(b), Some(t)) => Some((read_bundle(b)?, TruthManifest::read(t)?)),
            _ => None,
        };
        Ok(Loaded {
            config,
            bundle,
            truth,
            test,
        })
    }
}

impl Loaded {
    fn eval(&self) -> Option<(&FeatureBundle, &TruthManifest)> {
        self.test.as_ref().map(|(b, t)| (b, t))
    }
}

const RUN_OUTPUTS: [&str; 7] = [
    "labels.json",
    "coarse_labels.json",
    "model.bin",
    "scores.csv",
    "metrics.json",
    "manifest.json",
    "config.json",
];

fn parse_mode(s: &str) -> Result<AblationMode, Error> {
    s.parse().map_err(|_| {
        let all: Vec<&str> = AblationMode::ALL.iter().map(|m| m.as_str()).collect();
        usage(format!(
            "unknown mode {s:?}; expected one of {}",
            all.join(", ")
        ))
    })
}

fn cmd_run(a: RunArgs) -> Result<(), Error> {
    let mode = parse_mode(&a.mode)?;
    a.pipeline.config(mode)?;
    check_output_dir(&a.out, &a.pipeline.inputs())?;
    let loaded = a.pipeline.load(mode)?;
    let out = run(
        &loaded.bundle,
        loaded.truth.as_ref(),
        loaded.eval(),
        &loaded.config,
    )?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }

    let dir = &a.out;
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let config_text =
        serde_json::to_string_pretty(&loaded.config).map_err(|e| usage(e.to_string()))?;
    std::fs::write(dir.join("config.json"), config_text + "\n").map_err(|e| Error::Io {
        path: dir.join("config.json"),
        source: e,
    })?;
    out.fine.write(dir.join("labels.json"))?;
    if let Some(coarse) = &out.coarse {
        coarse.write(dir.join("coarse_labels.json"))?;
    }
    if let Some(model) = &out.model {
        write_checkpoint(model, &out.train_config, dir.join("model.bin"))?;
    }
    if !out.scored.is_empty() {
        write_frame_scores_csv(&out.scored, dir.join("scores.csv"))?;
    }
    if let Some(roc) = &out.roc {
        roc.write(dir.join("metrics.json"))?;
        println!("auc={:.6}", roc.auc);
    }
    out.manifest(&loaded.config, &loaded.bundle)
        .write(dir.join("manifest.json"))
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Error> {
    let modes: Vec<AblationMode> = if a.modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        a.modes
            .iter()
            .map(|m| parse_mode(m))
            .collect::<Result<_, _>>()?
    };
    if a.pipeline.truth.is_none() {
        return Err(usage("ablate needs --truth"));
    }
    for &mode in &modes {
        a.pipeline.config(mode)?;
    }
    check_output(&a.out, &a.pipeline.inputs())?;

    let loaded = a.pipeline.load(AblationMode::Full)?;
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let config = PipelineConfig {
            mode,
            ..loaded.config.clone()
        };
        let out = run(
            &loaded.bundle,
            loaded.truth.as_ref(),
            loaded.eval(),
            &config,
        )?;
        let roc = out.roc.expect("truth supplied");
        eprintln!("{mode}: auc={:.6}", roc.auc);
        rows.push(serde_json::json!({
            "mode": mode,
            "auc": roc.auc,
            "num_positive": roc.num_positive,
            "num_negative": roc.num_negative,
            "positive_segments": out.fine.num_positive(),
        }));
    }
    let text = serde_json::to_string_pretty(&rows).map_err(|e| usage(e.to_string()))?;
    std::fs::write(&a.out, text + "\n").map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Error> {
    let param: SweepParam = a.param.parse().map_err(|e: Error| usage(e.to_string()))?;
    let config = a.pipeline.config(AblationMode::Full)?;
    for &v in &a.grid {
        match param {
            SweepParam::Eta => check_eta(v)?,
            SweepParam::Beta => check_beta(v)?,
        }
    }
    let truth_path = a
        .pipeline
        .truth
        .as_ref()
        .ok_or_else(|| usage("sweep needs --truth"))?;
    check_output(&a.out, &a.pipeline.inputs())?;

    let bundle = read_bundle(&a.pipeline.bundle)?;
    let truth = TruthManifest::read(truth_path)?;
    let test = match (&a.pipeline.test_bundle, &a.pipeline.test_truth) {
        (Some(b), Some(t)) => Some((read_bundle(b)?, TruthManifest::read(t)?)),
        _ => None,
    };
    let points = sweep(
        &bundle,
        &truth,
        test.as_ref().map(|(b, t)| (b, t)),
        &config,
        param,
        &a.grid,
    )?;
    write_sweep_csv(&points, &a.out)
}
