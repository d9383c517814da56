//! `dirdp`: train, attack, evaluate and run experiments from a TOML config.
//!
//! Exit codes: 0 success, 1 a check failed (`verify`, `check-grad`),
//! 2 configuration error, 3 data error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dirdp_core::attack::{attack_example, AttackMethod, HvpMode};
use dirdp_core::data::{Dataset, SynthSpec};
use dirdp_core::experiment::{
    emit_report, format_real, pgm_channel_bytes, pgm_strip_bytes, read_records, run_experiment, verify_records,
    write_atomically, ExperimentConfig, ModelSpec,
};
use dirdp_core::nn::gradcheck::check_gradients;
use dirdp_core::nn::{checkpoint, NetworkParams};
use dirdp_core::noise::vmf_sample_with;
use dirdp_core::sphere::normalize;
use dirdp_core::training::{evaluate, train, Mechanism, TrainingStreams};
use dirdp_core::{Error, FlatVector, Result, RngStream, UnitVector, VmfParams};

#[derive(Parser)]
#[command(name = "dirdp", version, about = "Directional privacy for gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint and a JSON-lines trace.
    Train(TrainArgs),
    /// Test accuracy and top-k of a checkpoint.
    Eval(EvalArgs),
    /// Reconstruct one training image from its (optionally noised) gradient.
    Attack(AttackArgs),
    /// Run every cell of an experiment, then write the report.
    Run(RunArgs),
    /// CSV tables and PGM strips from a results file.
    Report(ReportArgs),
    /// Re-run every record in a results file and compare.
    Verify(VerifyArgs),
    /// Dump VMF samples as CSV.
    SampleVmf(SampleArgs),
    /// Compare backprop with central finite differences on a random network.
    CheckGrad(CheckGradArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismKind {
    None,
    Gaussian,
    Vmf,
}

#[derive(Args)]
struct MechanismArgs {
    /// Defaults to the config's first mechanism.
    #[arg(long, value_enum)]
    mechanism: Option<MechanismKind>,
    /// Gaussian noise scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// VMF concentration.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    halve_epsilon: bool,
}

impl MechanismArgs {
    fn resolve(&self, cfg: &ExperimentConfig) -> Result<Mechanism> {
        let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| Error::Config(format!("--{flag} is required")));
        let m = match self.mechanism {
            None => *cfg.mechanisms.first().ok_or_else(|| Error::Config("no mechanism configured".into()))?,
            Some(MechanismKind::None) => Mechanism::None,
            Some(MechanismKind::Gaussian) => Mechanism::Gaussian { sigma: need(self.sigma, "sigma")? },
            Some(MechanismKind::Vmf) => {
                Mechanism::Vmf { epsilon_v: need(self.epsilon, "epsilon")?, halve_epsilon: self.halve_epsilon }
            }
        };
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.seed = Some(self.seed);
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    expected_batch: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Output directory for `params.bin` and `trace.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Dlg,
    Iga,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum HvpArg {
    #[value(alias = "finite-diff")]
    FiniteDiff,
    #[value(alias = "analytic-mlp")]
    AnalyticMlp,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    base: ConfigArgs,
    #[command(flatten)]
    mechanism: MechanismArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Training-set index of the attacked image.
    #[arg(long, default_value_t = 0)]
    image: usize,
    /// Attack these parameters instead of the seeded initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    alpha_tv: Option<f64>,
    #[arg(long, value_enum)]
    hvp_mode: Option<HvpArg>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    base: ConfigArgs,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    results: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    seed: u64,
    /// Comma-separated mean direction (normalised); the first axis by default.
    #[arg(long)]
    mu: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Mlp,
    LenetSmall,
}

#[derive(Args)]
struct CheckGradArgs {
    #[arg(long, value_enum, default_value = "mlp")]
    model: ModelArg,
    #[arg(long, default_value_t = 8)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_data() {
                3
            } else {
                1
            })
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attack(a) => cmd_attack(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::Verify(a) => cmd_verify(a),
        Command::SampleVmf(a) => cmd_sample(a),
        Command::CheckGrad(a) => cmd_check_grad(a),
    }
}

fn print_json(v: serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string(&v)?);
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.dataset.validate()?;
    cfg.dataset.load()
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = a.base.load()?;
    let t = &mut cfg.training;
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.expected_batch = a.expected_batch.unwrap_or(t.expected_batch);
    t.clip_norm = a.clip_norm.unwrap_or(t.clip_norm);
    let mechanism = a.mechanism.resolve(&cfg)?;
    let tcfg = cfg.training.for_cell(mechanism, a.base.seed);
    tcfg.validate()?;
    let data = load_data(&cfg)?;
    let arch = cfg.model.architecture(data.shape(), cfg.dataset.classes());
    let (params, trace) = train(arch, &data.train, &data.test, &tcfg)?;
    create_dir(&a.out)?;
    checkpoint::save(&params, &a.out.join("params.bin"))?;
    write_atomically(&a.out.join("trace.jsonl"), trace.to_jsonl()?.as_bytes())?;
    print_json(serde_json::json!({
        "architecture": arch.to_string(),
        "mechanism": mechanism,
        "seed": a.base.seed,
        "final_accuracy": trace.final_accuracy(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let data = load_data(&cfg)?;
    let params = checkpoint::load(&a.checkpoint)?;
    let expected = cfg.model.architecture(data.shape(), cfg.dataset.classes());
    if params.arch() != expected {
        return Err(Error::Config(format!("checkpoint is {}, config describes {expected}", params.arch())));
    }
    let (accuracy, top_k) = evaluate(&params, &data.test)?;
    print_json(serde_json::json!({ "accuracy": accuracy, "top_k": top_k, "examples": data.test.len() }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_attack(a: AttackArgs) -> Result<ExitCode> {
    let cfg = a.base.load()?;
    let mechanism = a.mechanism.resolve(&cfg)?;
    let method = match a.method {
        MethodArg::Dlg => AttackMethod::Dlg,
        MethodArg::Iga => AttackMethod::Iga,
    };
    // Start from the first configured attack of this method, if any.
    let mut acfg = cfg
        .attacks
        .iter()
        .find(|s| s.method == method)
        .map(|s| s.with_seed(a.base.seed))
        .unwrap_or_else(|| dirdp_core::attack::AttackConfig::new(method, a.base.seed));
    acfg.iterations = a.iterations.unwrap_or(acfg.iterations);
    acfg.eta = a.eta.or(acfg.eta);
    acfg.alpha_tv = a.alpha_tv.unwrap_or(acfg.alpha_tv);
    if let Some(h) = a.hvp_mode {
        acfg.hvp_mode = match h {
            HvpArg::FiniteDiff => HvpMode::FiniteDiff,
            HvpArg::AnalyticMlp => HvpMode::AnalyticMlp,
        };
    }
    acfg.validate()?;

    let data = load_data(&cfg)?;
    let example = data.train.get(a.image).ok_or_else(|| {
        Error::Config(format!("--image {} is out of range for {} training images", a.image, data.train.len()))
    })?;
    let params = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => NetworkParams::init(
            cfg.model.architecture(data.shape(), cfg.dataset.classes()),
            TrainingStreams::new(a.base.seed).init(),
        )?,
    };
    let report = attack_example(&params, example, &mechanism, &acfg)?;

    create_dir(&a.out)?;
    write_atomically(&a.out.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomically(&a.out.join("strip.pgm"), &pgm_strip_bytes(&example.x, &report.reconstructed)?)?;
    for c in 0..example.x.channels() {
        write_atomically(&a.out.join(format!("reconstruction_c{c}.pgm")), &pgm_channel_bytes(&report.reconstructed, c)?)?;
        write_atomically(&a.out.join(format!("ground_truth_c{c}.pgm")), &pgm_channel_bytes(&example.x, c)?)?;
    }
    print_json(serde_json::json!({
        "method": method,
        "mechanism": mechanism,
        "image": a.image,
        "ssim": report.final_ssim,
        "mse": report.final_mse,
        "best_iteration": report.best_iteration,
        "diverged": report.diverged,
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(a: RunArgs) -> Result<ExitCode> {
    let mut cfg = a.base.load()?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let records = run_experiment(&cfg)?;
    let files = emit_report(&records, &cfg.output_dir)?;
    for r in &records {
        print_json(serde_json::json!({
            "mechanism": r.mechanism,
            "seed": r.seed,
            "final_accuracy": r.final_accuracy,
            "attacks": r.attacks.iter().map(|o| serde_json::json!({
                "attack": o.attack,
                "weights": o.weights,
                "mean_ssim": o.summary.mean_ssim,
                "median_mse": o.summary.median_mse,
            })).collect::<Vec<_>>(),
        }))?;
    }
    eprintln!("wrote {} and {}", files.accuracy_csv.display(), files.attacks_csv.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(a: ReportArgs) -> Result<ExitCode> {
    let records = read_records(&a.results)?;
    let files = emit_report(&records, &a.out)?;
    print_json(serde_json::json!({
        "accuracy_csv": files.accuracy_csv,
        "attacks_csv": files.attacks_csv,
        "strips": files.strips.len(),
    }))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: VerifyArgs) -> Result<ExitCode> {
    let records = read_records(&a.results)?;
    let outcomes = verify_records(&records)?;
    let mut all = true;
    for o in &outcomes {
        all &= o.matches;
        print_json(serde_json::json!({
            "mechanism": o.mechanism,
            "seed": o.seed,
            "matches": o.matches,
            "first_difference": o.first_difference,
        }))?;
    }
    Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn cmd_sample(a: SampleArgs) -> Result<ExitCode> {
    let params = VmfParams::new(a.epsilon, a.dim).map_err(|e| Error::Config(e.to_string()))?;
    let mu = match &a.mu {
        None => UnitVector::pole(a.dim),
        Some(s) => {
            let v = s
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad --mu component {t:?}"))))
                .collect::<Result<Vec<f64>>>()?;
            if v.len() != a.dim {
                return Err(Error::Config(format!("--mu has {} components, --dim is {}", v.len(), a.dim)));
            }
            normalize(&FlatVector::new(v)?).map_err(|e| Error::Config(e.to_string()))?
        }
    };
    let mut rng = RngStream::new(a.seed).rng();
    let mut text = String::new();
    for _ in 0..a.count {
        let x = vmf_sample_with(&params, &mu, &mut rng)?;
        let row: Vec<String> = x.as_slice().iter().map(|v| format_real(*v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    match &a.out {
        Some(p) => write_atomically(p, text.as_bytes())?,
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_check_grad(a: CheckGradArgs) -> Result<ExitCode> {
    let model = match a.model {
        ModelArg::Mlp => ModelSpec::Mlp { hidden: a.hidden },
        ModelArg::LenetSmall => ModelSpec::LenetSmall,
    };
    let arch = model.architecture((a.size, a.size, a.channels), a.classes);
    arch.validate()?;
    let streams = RngStream::new(a.seed);
    let params = NetworkParams::init(arch, streams.child(0))?;
    let spec = SynthSpec { channels: a.channels, ..SynthSpec::new(a.classes, a.classes, a.size, streams.child(1).seed) };
    let examples = spec.generate()?;
    let example = &examples[(a.seed % a.classes as u64) as usize];
    let report = check_gradients(&params, example, a.h)?;
    let pass = report.max_rel_error <= a.tolerance;
    print_json(serde_json::json!({ "architecture": arch.to_string(), "report": report, "pass": pass }))?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
