use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lola_core::backend::{BackendKind, BudgetPolicy, Evaluator};
use lola_core::io::{load_csv_features, load_idx, Model};
use lola_core::network::{
    build_plan, collapse, predict, Layer, LayerSpec, Network, PlanConfig, Preset, Shape,
    Strategy, DEFAULT_PRIMES,
};
use lola_core::ring::CrtModulus;
use lola_core::trace::TraceReport;
use lola_core::verify::{run_suites, VerifyConfig};
use lola_core::Error;

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PARSE: u8 = 3;
const EXIT_SHAPE: u8 = 4;
const EXIT_BUDGET: u8 = 5;
const EXIT_VERIFY: u8 = 6;

#[derive(Parser)]
#[command(name = "lola", version, about = "Packed-message inference over a batched plaintext ring")]
struct Cli {
    /// Worker threads for kernel-level parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify one input.
    Infer(InferArgs),
    /// Print the per-step trace of a plan.
    Profile(ProfileArgs),
    /// Run the randomized self-check suites.
    Verify(VerifyArgs),
    /// Write a model with random integer weights.
    GenModel(GenModelArgs),
}

#[derive(Args)]
struct Params {
    /// Plan preset.
    #[arg(long, default_value = "lola-mnist")]
    plan: Preset,
    /// Ring degree (default depends on the plan).
    #[arg(long)]
    n: Option<usize>,
    /// Comma-separated plaintext primes.
    #[arg(long, value_delimiter = ',')]
    primes: Option<Vec<u64>>,
}

impl Params {
    fn config(&self) -> PlanConfig {
        let mut cfg = PlanConfig::for_preset(self.plan);
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(p) = &self.primes {
            cfg.primes = p.clone();
        }
        cfg
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Jsonl,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// IDX file (`.idx`, `-ubyte`) or CSV feature file (`.csv`).
    #[arg(long)]
    input: PathBuf,
    /// Item of a multi-item IDX file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[command(flatten)]
    params: Params,
    #[arg(long, default_value = "slot")]
    backend: BackendKind,
    /// Also print the measured per-step trace.
    #[arg(long)]
    report: Option<Format>,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    params: Params,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Execute the plan on this input and report measured counters.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "slot")]
    backend: BackendKind,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, value_delimiter = ',')]
    primes: Option<Vec<u64>>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    corrupt_rotation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    /// 8x8 input, 3x3 convolution with 2 maps, two dense layers.
    Toy,
    /// 28x28 input, 5x5 stride-2 convolution with 5 maps, dense 100, dense 10.
    Mnist,
    /// 32x32x3 input, two strided convolutions, dense 10.
    Cifar,
    /// 4096 features, dense 101.
    Features,
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, value_enum)]
    arch: Arch,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// File stem of the manifest.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest absolute weight.
    #[arg(long)]
    weight_range: Option<i32>,
    /// Set every bias to zero.
    #[arg(long)]
    zero_bias: bool,
    /// Write layer shapes only, without weight blobs.
    #[arg(long)]
    shape_only: bool,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse(_) => EXIT_PARSE,
        Error::Shape(_)
        | Error::RepresentationMismatch { .. }
        | Error::PermutationMismatch(_)
        | Error::Capacity(_)
        | Error::IncompatibleStrategy(_) => EXIT_SHAPE,
        Error::LayerOverflow { .. } | Error::MagnitudeOverflow { .. } | Error::DepthExceeded { .. } => EXIT_BUDGET,
        Error::InvalidParams(_) | Error::NoRootOfUnity { .. } | Error::NotCoprime { .. } => EXIT_USAGE,
        _ => EXIT_OTHER,
    }
}

fn load_input(path: &Path, index: usize) -> Result<Vec<f64>, Error> {
    let name = path.to_string_lossy();
    if name.ends_with(".csv") {
        load_csv_features(path)
    } else {
        Ok(load_idx(path)?.item(index)?.to_vec())
    }
}

fn evaluator(cfg: &PlanConfig, backend: BackendKind) -> Result<Evaluator, Error> {
    let modulus = Arc::new(CrtModulus::new(&cfg.primes, cfg.n)?);
    Ok(Evaluator::new(modulus, backend, BudgetPolicy::default()))
}

fn print_trace(report: &TraceReport, format: Format) {
    match format {
        Format::Text => print!("{}", report.to_text()),
        Format::Jsonl => print!("{}", report.to_jsonl()),
    }
}

fn execute(
    model: &Model,
    x: &[f64],
    params: &Params,
    backend: BackendKind,
) -> Result<lola_core::network::Execution, Error> {
    let ev = evaluator(&params.config(), backend)?;
    model.execute(x, &Strategy::Preset(params.plan), &ev)
}

fn infer(a: &InferArgs) -> Result<(), Error> {
    let model = Model::load(&a.model)?;
    let x = load_input(&a.input, a.index)?;
    let start = Instant::now();
    let out = execute(&model, &x, &a.params, a.backend)?;
    eprintln!(
        "{} on the {} backend: {:.3} s",
        a.params.plan,
        a.backend,
        start.elapsed().as_secs_f64()
    );
    let scores: Vec<String> = out.scores.iter().map(|s| s.to_string()).collect();
    println!("class {}", predict(&out.scores));
    println!("scores {}", scores.join(" "));
    if let Some(f) = a.report {
        print_trace(&TraceReport::from_cost(&out.report), f);
    }
    Ok(())
}

fn profile(a: &ProfileArgs) -> Result<(), Error> {
    let model = Model::load(&a.model)?;
    let report = match &a.input {
        Some(path) => {
            let x = load_input(path, 0)?;
            TraceReport::from_cost(&execute(&model, &x, &a.params, a.backend)?.report)
        }
        None => {
            let net = collapse(&model.network)?;
            TraceReport::from_plan(&build_plan(&net, &Strategy::Preset(a.params.plan), &a.params.config())?)
        }
    };
    print_trace(&report, a.format);
    Ok(())
}

fn verify(a: &VerifyArgs) -> Result<bool, Error> {
    let cfg = VerifyConfig {
        n: a.n,
        primes: a.primes.clone().unwrap_or_else(|| DEFAULT_PRIMES.to_vec()),
        trials: a.trials,
        seed: a.seed,
        corrupt_rotation: a.corrupt_rotation,
    };
    let results = run_suites(&cfg)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<24} trials {:>5}  failures {}", r.name, r.trials, r.failures);
        if let Some(why) = &r.first_failure {
            println!("     first failure: {why}");
        }
        ok &= r.passed();
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    println!("{passed}/{} suites passed (n = {}, primes {:?})", results.len(), cfg.n, cfg.primes);
    Ok(ok)
}

fn conv(k: usize, stride: usize, maps: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel_h: k,
        kernel_w: k,
        stride_h: stride,
        stride_w: stride,
        maps,
        padding,
    }
}

fn gen_model(a: &GenModelArgs) -> Result<PathBuf, Error> {
    let dense = |outputs| LayerSpec::Dense { outputs };
    let (input, specs, input_bound, range, stem) = match a.arch {
        Arch::Toy => (
            Shape::new(1, 8, 8),
            vec![conv(3, 1, 2, 0), LayerSpec::Square, dense(10), LayerSpec::Square, dense(10)],
            15,
            3,
            "toy",
        ),
        Arch::Mnist => (
            Shape::new(1, 28, 28),
            vec![conv(5, 2, 5, 1), LayerSpec::Square, dense(100), LayerSpec::Square, dense(10)],
            255,
            3,
            "mnist",
        ),
        Arch::Cifar => (
            Shape::new(3, 32, 32),
            vec![conv(8, 2, 83, 1), LayerSpec::Square, conv(6, 2, 163, 0), LayerSpec::Square, dense(10)],
            15,
            1,
            "cifar",
        ),
        Arch::Features => (Shape::flat(4096), vec![dense(101)], 255, 3, "features"),
    };
    let range = a.weight_range.unwrap_or(range);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut shape = input;
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let (w, b) = spec.param_lens(shape);
        let mut draw = |len: usize, zero: bool| -> Vec<f64> {
            match (a.shape_only, zero) {
                (true, _) => Vec::new(),
                (false, true) => vec![0.0; len],
                (false, false) => (0..len).map(|_| rng.gen_range(-range..=range) as f64).collect(),
            }
        };
        let weights = draw(w, false);
        let bias = draw(b, a.zero_bias);
        layers.push(Layer::new(spec, weights, bias));
        shape = spec.output_shape(shape)?;
    }
    let mut model = Model::new(Network::new(input, layers)?, input_bound);
    model.name = Some(stem.to_string());
    model.save(&a.out, a.name.as_deref().unwrap_or(stem))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::Infer(a) => infer(a),
        Command::Profile(a) => profile(a),
        Command::Verify(a) => match verify(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(EXIT_VERIFY),
            Err(e) => Err(e),
        },
        Command::GenModel(a) => gen_model(a).map(|p| println!("{}", p.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
