use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use photonshrink::io::{
    read_cube, read_depth, synth_scene, write_cube, write_depth, PatchSpec, Reflectivity, SceneKind,
};
use photonshrink::loss::{Metrics, DEFAULT_DELTAS};
use photonshrink::nn::gradcheck::standard_suite;
use photonshrink::nn::{load_model, save_model, DatasetSpec};
use photonshrink::pipeline::{reconstruct, Method, ReconstructOptions, TrainSpec};
use photonshrink::simulator::{simulate, SbrTarget};
use photonshrink::windowing::WindowConfig;
use photonshrink::{DetectorConfig, PulseModel, Result, Scene};

#[derive(Parser)]
#[command(
    name = "photonshrink",
    version,
    about = "Single-photon LiDAR simulation and depth reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a photon-count cube from a synthetic or stored scene.
    Simulate(SimulateArgs),
    /// Estimate a depth map from a cube.
    Reconstruct(ReconstructArgs),
    /// Train a network on simulated data.
    Train(TrainArgs),
    /// Compare a predicted depth map with ground truth and print CSV.
    Eval(EvalArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Synthetic scene kind: staircase, wedge or blocks.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    synth: Option<String>,
    /// Depth map (PFM, meters) with unit reflectivity.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    cols: usize,
    /// Reflectivity ramp instead of a constant.
    #[arg(long)]
    ramp: bool,
    /// Expected signal photons per pixel.
    #[arg(long, default_value_t = 2.0)]
    signal: f64,
    /// Expected background photons per pixel.
    #[arg(long, default_value_t = 50.0)]
    background: f64,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 80.0)]
    bin_ps: f64,
    #[arg(long, default_value_t = 240.0)]
    fwhm_ps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the ground-truth depth map here.
    #[arg(long)]
    gt_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Input cube file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "argmax")]
    method: Method,
    /// Trained model for the prsnet method.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Threshold scale of the shrinkage method.
    #[arg(long, default_value_t = 0.5)]
    s0: f64,
    #[arg(long, default_value_t = 240.0)]
    fwhm_ps: f64,
    /// Odd window length of the shrinkage method.
    #[arg(long)]
    window: Option<usize>,
    /// Square patch size for patch-wise reconstruction.
    #[arg(long)]
    patch: Option<usize>,
    /// Patch stride; defaults to the patch size.
    #[arg(long, requires = "patch")]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training recipe; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the recipe.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Accuracy thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DELTAS)]
    delta: Vec<f64>,
}

fn run_simulate(a: SimulateArgs) -> Result<()> {
    let cfg = DetectorConfig::from_picoseconds(a.bins, a.bin_ps)?;
    let pulse = PulseModel::from_picoseconds(a.fwhm_ps)?;
    let scene = match (&a.synth, &a.scene) {
        (Some(kind), _) => {
            let range = DatasetSpec {
                bins: a.bins,
                bin_ps: a.bin_ps,
                fwhm_ps: a.fwhm_ps,
                ..DatasetSpec::default()
            }
            .depth_range()?;
            let refl = if a.ramp {
                Reflectivity::Ramp
            } else {
                Reflectivity::Constant
            };
            synth_scene(&SceneKind::parse(kind)?, a.rows, a.cols, range, refl)?
        }
        (None, Some(path)) => {
            let z = read_depth(path)?;
            Scene::with_unit_reflectivity(z.rows(), z.cols(), z.into_values())?
        }
        (None, None) => unreachable!("clap requires one scene source"),
    };
    let sim = simulate(
        &scene,
        &cfg,
        &pulse,
        &SbrTarget::new(a.signal, a.background)?,
        a.seed,
    )?;
    write_cube(&a.out, &sim.cube)?;
    if let Some(path) = &a.gt_out {
        write_depth(path, &scene.depth_image())?;
    }
    Ok(())
}

fn run_reconstruct(a: ReconstructArgs) -> Result<()> {
    let cube = read_cube(&a.input)?;
    let mut model = a.model.as_deref().map(load_model).transpose()?;
    let opts = ReconstructOptions {
        method: a.method,
        fwhm: a.fwhm_ps * 1e-12,
        s0: a.s0,
        window: a.window.map(WindowConfig::new).transpose()?,
        patch: a
            .patch
            .map(|p| PatchSpec::new(p, a.stride.unwrap_or(p)))
            .transpose()?,
    };
    let depth = reconstruct(&cube, &opts, model.as_mut())?;
    write_depth(&a.out, &depth)
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(path) => TrainSpec::from_toml(&fs::read_to_string(path)?)?,
        None => TrainSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let (net, _) =
        spec.run(|e| println!("epoch {} lr {:.3e} loss {:.6}", e.epoch, e.lr, e.mean_loss))?;
    save_model(&a.out_model, &net)
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pred = read_depth(&a.pred)?;
    let gt = read_depth(&a.gt)?;
    let m = Metrics::compute(&gt, &pred, &a.delta, None)?;
    println!("{}", m.csv_header());
    println!("{}", m.csv_row());
    Ok(())
}

fn run_gradcheck(seed: u64) -> Result<bool> {
    let reports = standard_suite(seed)?;
    let (control, checks) = reports.split_last().expect("suite is non-empty");
    for r in checks {
        println!("{}", r.line());
    }
    println!("{} (negative control, expected to fail)", control.line());
    Ok(checks.iter().all(|r| r.passed()) && !control.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Reconstruct(a) => run_reconstruct(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck { seed } => match run_gradcheck(seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::FAILURE;
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
