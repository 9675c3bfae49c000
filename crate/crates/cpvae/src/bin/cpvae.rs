use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cpvae::analysis::{
    data_phase_map, latent_phase_map, latent_sweep_generate, reconstruction_map,
    sweep_records_to_csv, Observable,
};
use cpvae::models::{LatentSample, ModelConfig, VaeModel, Variant};
use cpvae::pipeline::{
    ingest_snapshots, load_model, lr_desk_axes, lr_desk_template, nnn_desk_axes,
    nnn_desk_template, run_holdout, save_model, weight_preset, write_atomic, HoldoutAxis,
    HoldoutSpec, RunManifest,
};
use cpvae::spinsim::{
    generate_grid_dataset, linspace, logspace, read_grid_dataset, write_grid_dataset,
    HamiltonianSpec, LANCZOS_DEFAULT_MAX_ITER, LANCZOS_DEFAULT_TOL,
};
use cpvae::trainer::{active_latent_neurons, train, TrainConfig};
use cpvae::{Error, Result};

#[derive(Parser)]
#[command(name = "cpvae", about = "Spin-model measurement data, cpVAE training and analysis")]
struct Cli {
    /// Base random seed for the command.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Treat recoverable data problems (rejected records) as failures.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads (reserved; execution is currently single-threaded).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridPreset {
    /// NNN-TFIM desk grid: 11 j2 x 21 h, N = 10.
    NnnDesk,
    /// LR-TFIM desk grid: 10 alpha x 10 h (log), N = 10.
    LrDesk,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    NnnTfim,
    LrTfim,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Cpvae,
    Dvae,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Cpvae => Variant::CpVae,
            VariantArg::Dvae => Variant::DVae,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an exact-sampled dataset over a parameter grid.
    Generate(GenerateArgs),
    /// Ingest newline-delimited JSON occupation snapshots.
    Ingest(IngestArgs),
    /// Train a cpVAE or dVAE on a dataset file.
    Train(TrainArgs),
    /// Train with an excluded parameter band and report generalization.
    Holdout(HoldoutArgs),
    /// Compute phase maps, latent maps or latent sweeps from a checkpoint.
    Analyze(AnalyzeArgs),
    /// Draw configurations from a trained cpVAE decoder.
    Sample(SampleArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid preset; overrides the explicit grid flags.
    #[arg(long, value_enum)]
    preset: Option<GridPreset>,
    #[arg(long, value_enum, default_value = "nnn-tfim")]
    model: ModelKind,
    #[arg(long, default_value_t = 10)]
    n_sites: usize,
    /// axis1 = j2 (NNN) or alpha (LR): lo, hi, count.
    #[arg(long, num_args = 3, value_names = ["LO", "HI", "COUNT"])]
    axis1: Option<Vec<f64>>,
    /// axis2 = h: lo, hi, count (log-spaced for LR).
    #[arg(long, num_args = 3, value_names = ["LO", "HI", "COUNT"])]
    axis2: Option<Vec<f64>>,
    #[arg(long, default_value_t = 2000)]
    samples_per_point: usize,
    /// Output dataset file name.
    #[arg(long, default_value = "dataset.ndjson")]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Input NDJSON snapshot file.
    #[arg(long)]
    input: PathBuf,
    /// Lattice rows and columns.
    #[arg(long, num_args = 2, value_names = ["L1", "L2"])]
    lattice: Vec<usize>,
    #[arg(long, default_value = "snapshots.json")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "cpvae")]
    variant: VariantArg,
    /// Loss-weight preset: nnn, lr or rydberg.
    #[arg(long, default_value = "nnn")]
    weights: String,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    learning_rate: f64,
    /// Latent dimension (defaults: 5 for cpvae; required sizing for dvae).
    #[arg(long)]
    d_latent: Option<usize>,
    #[arg(long, default_value = "checkpoint.bin")]
    out: PathBuf,
    #[arg(long, default_value = "history.csv")]
    history: PathBuf,
}

#[derive(Args)]
struct HoldoutArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Holdout axis: axis1 or axis2.
    #[arg(long, default_value = "axis2")]
    holdout_axis: String,
    #[arg(long, default_value_t = 0.4)]
    holdout_lo: f64,
    #[arg(long, default_value_t = 0.75)]
    holdout_hi: f64,
    #[arg(long, default_value = "nnn_correlator")]
    observable: String,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Analysis name: latent-map, reconstruction, data-map or sweep.
    #[arg(long)]
    analysis: String,
    /// Observable for reconstruction/data maps.
    #[arg(long, default_value = "nnn_correlator")]
    observable: String,
    /// Latent dimension for sweeps.
    #[arg(long, default_value_t = 0)]
    dim: usize,
    #[arg(long, default_value_t = -3.0)]
    from: f64,
    #[arg(long, default_value_t = 3.0)]
    to: f64,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 1000)]
    count: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Latent coordinates; missing trailing entries default to 0.
    #[arg(long, num_args = 0.., value_name = "Z")]
    z: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value = "samples.txt")]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    n_sites: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::LanczosNoConvergence { .. }
        | Error::NonFiniteLoss { .. }
        | Error::GridPointFailure { .. } => 2,
        Error::Io(_) | Error::Json(_) | Error::MalformedRecord { .. } => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::invalid("--threads must be >= 1"));
    }
    let started = Instant::now();
    match &cli.command {
        Command::Generate(args) => cmd_generate(cli, args, started),
        Command::Ingest(args) => cmd_ingest(cli, args, started),
        Command::Train(args) => cmd_train(cli, args, started).map(|_| ()),
        Command::Holdout(args) => cmd_holdout(cli, args, started),
        Command::Analyze(args) => cmd_analyze(cli, args),
        Command::Sample(args) => cmd_sample(cli, args),
        Command::Gradcheck(args) => cmd_gradcheck(cli, args),
    }
}

fn manifest_path(out: &PathBuf) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs, started: Instant) -> Result<()> {
    let (template, axis1, axis2) = match args.preset {
        Some(GridPreset::NnnDesk) => {
            let (a1, a2) = nnn_desk_axes();
            (nnn_desk_template(args.n_sites), a1, a2)
        }
        Some(GridPreset::LrDesk) => {
            let (a1, a2) = lr_desk_axes();
            (lr_desk_template(args.n_sites), a1, a2)
        }
        None => {
            let parse_axis = |spec: &Option<Vec<f64>>, name: &str| -> Result<(f64, f64, usize)> {
                let v = spec
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("--{} LO HI COUNT is required without a preset", name)))?;
                Ok((v[0], v[1], v[2] as usize))
            };
            let (lo1, hi1, n1) = parse_axis(&args.axis1, "axis1")?;
            let (lo2, hi2, n2) = parse_axis(&args.axis2, "axis2")?;
            match args.model {
                ModelKind::NnnTfim => (
                    HamiltonianSpec::nnn(args.n_sites, 0.0, 0.0),
                    linspace(lo1, hi1, n1),
                    linspace(lo2, hi2, n2),
                ),
                ModelKind::LrTfim => (
                    HamiltonianSpec::lr(args.n_sites, 1.0, 0.0),
                    linspace(lo1, hi1, n1),
                    logspace(lo2, hi2, n2),
                ),
            }
        }
    };
    let dataset = generate_grid_dataset(
        &template,
        &axis1,
        &axis2,
        args.samples_per_point,
        cli.seed,
        LANCZOS_DEFAULT_TOL,
        LANCZOS_DEFAULT_MAX_ITER,
    )?;
    let out = cli.out_dir.join(&args.out);
    std::fs::create_dir_all(&cli.out_dir)?;
    write_grid_dataset(&dataset, &out)?;
    let mut manifest = RunManifest::new(
        "generate",
        serde_json::json!({
            "n_sites": args.n_sites,
            "samples_per_point": args.samples_per_point,
            "axis1": axis1,
            "axis2": axis2,
        }),
        cli.seed,
    );
    manifest.outputs.push(out.clone());
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path(&out))?;
    println!(
        "wrote {} grid points x {} samples to {}",
        dataset.records.len(),
        dataset.samples_per_point,
        out.display()
    );
    Ok(())
}

fn cmd_ingest(cli: &Cli, args: &IngestArgs, started: Instant) -> Result<()> {
    if args.lattice.len() != 2 {
        return Err(Error::invalid("--lattice needs two values"));
    }
    let report = ingest_snapshots(&args.input, (args.lattice[0], args.lattice[1]))?;
    for set in &report.sets {
        println!(
            "rb_over_a={} delta_over_omega={}: {} snapshots",
            set.rb_over_a,
            set.delta_over_omega,
            set.occupations.len()
        );
    }
    println!("accepted {} records, rejected {}", report.accepted, report.rejected);
    if report.rejected > 0 {
        eprintln!("rejected lines: {:?}", report.rejection_lines);
        if cli.strict {
            return Err(Error::invalid(format!(
                "{} malformed snapshot records under --strict",
                report.rejected
            )));
        }
    }
    let out = cli.out_dir.join(&args.out);
    write_atomic(&out, serde_json::to_string_pretty(&report.sets)?.as_bytes())?;
    let mut manifest = RunManifest::new(
        "ingest",
        serde_json::json!({ "lattice": args.lattice, "rejected": report.rejected }),
        cli.seed,
    );
    manifest.inputs.push(args.input.clone());
    manifest.outputs.push(out.clone());
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path(&out))
}

fn build_train_config(cli: &Cli, args: &TrainArgs) -> Result<TrainConfig> {
    let preset = weight_preset(&args.weights)?;
    Ok(TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        weights: preset.loss_weights(),
        gamma_min: preset.gamma_min,
        gamma_max: preset.gamma_max,
        seed: cli.seed,
        checkpoint_every: 0,
        variant: args.variant.into(),
    })
}

fn model_config_for(variant: Variant, n_sites: usize, d_latent: Option<usize>) -> ModelConfig {
    match variant {
        Variant::CpVae => {
            let mut c = ModelConfig::cpvae(n_sites);
            if let Some(d) = d_latent {
                c.d_latent = d;
            }
            c
        }
        Variant::DVae => ModelConfig::dvae(n_sites, d_latent.unwrap_or(1)),
    }
}

fn cmd_train(cli: &Cli, args: &TrainArgs, started: Instant) -> Result<VaeModel> {
    let dataset = read_grid_dataset(&args.dataset)?;
    let config = build_train_config(cli, args)?;
    let model_config = model_config_for(config.variant, dataset.n_sites(), args.d_latent);
    let mut model = VaeModel::new(model_config, cli.seed)?;
    let history = train(&mut model, &dataset, &config)?;

    std::fs::create_dir_all(&cli.out_dir)?;
    let ckpt = cli.out_dir.join(&args.out);
    save_model(&model, &ckpt)?;
    let hist_path = cli.out_dir.join(&args.history);
    write_atomic(&hist_path, history.to_csv().as_bytes())?;

    let active = active_latent_neurons(&model, &dataset, 0.5);
    println!(
        "trained {} for {} epochs ({} steps); active latent dimensions: {:?}",
        config.variant,
        config.epochs,
        history.steps.len(),
        active
    );
    let mut manifest = RunManifest::new("train", serde_json::to_value(&config)?, cli.seed);
    manifest.inputs.push(args.dataset.clone());
    manifest.outputs.push(ckpt.clone());
    manifest.outputs.push(hist_path);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&manifest_path(&ckpt))?;
    Ok(model)
}

fn cmd_holdout(cli: &Cli, args: &HoldoutArgs, started: Instant) -> Result<()> {
    let dataset = read_grid_dataset(&args.train.dataset)?;
    let config = build_train_config(cli, &args.train)?;
    let model_config = model_config_for(config.variant, dataset.n_sites(), args.train.d_latent);
    let mut model = VaeModel::new(model_config, cli.seed)?;
    let axis = match args.holdout_axis.as_str() {
        "axis1" => HoldoutAxis::Axis1,
        "axis2" => HoldoutAxis::Axis2,
        other => return Err(Error::invalid(format!("unknown holdout axis '{}'", other))),
    };
    let holdout = HoldoutSpec { axis, lo: args.holdout_lo, hi: args.holdout_hi };
    let observable = Observable::from_name(&args.observable)?;
    let (report, data_map, model_map) =
        run_holdout(&mut model, &dataset, &holdout, &config, observable, cli.seed ^ 0xE7A1)?;

    std::fs::create_dir_all(&cli.out_dir)?;
    let ckpt = cli.out_dir.join(&args.train.out);
    save_model(&model, &ckpt)?;
    write_atomic(&cli.out_dir.join("holdout_data_map.csv"), data_map.to_csv().as_bytes())?;
    write_atomic(&cli.out_dir.join("holdout_model_map.csv"), model_map.to_csv().as_bytes())?;
    println!(
        "held-out mean error {:.4}, in-band mean error {:.4}, ratio {:.3}",
        report.held_out_mean_error, report.in_band_mean_error, report.error_ratio
    );
    let mut manifest = RunManifest::new(
        "holdout",
        serde_json::json!({ "train": serde_json::to_value(&config)?, "holdout": holdout, "report": report }),
        cli.seed,
    );
    manifest.inputs.push(args.train.dataset.clone());
    manifest.outputs.push(ckpt);
    manifest.wall_clock_seconds = started.elapsed().as_secs_f64();
    manifest.write(&cli.out_dir.join("holdout.manifest.json"))
}

fn cmd_analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let dataset = read_grid_dataset(&args.dataset)?;
    let model = load_model(&args.checkpoint)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    match args.analysis.as_str() {
        "latent-map" => {
            let maps = latent_phase_map(&model, &dataset)?;
            for map in maps.mu.iter().chain(&maps.mu_abs).chain(&maps.sigma) {
                let path = cli.out_dir.join(format!("latent_{}.csv", map.label));
                write_atomic(&path, map.to_csv().as_bytes())?;
                println!("wrote {}", path.display());
            }
        }
        "reconstruction" => {
            let observable = Observable::from_name(&args.observable)?;
            let map = reconstruction_map(&model, &dataset, observable, cli.seed, &args.observable)?;
            let path = cli.out_dir.join(format!("reconstruction_{}.csv", args.observable));
            write_atomic(&path, map.to_csv().as_bytes())?;
            println!("wrote {}", path.display());
        }
        "data-map" => {
            let observable = Observable::from_name(&args.observable)?;
            let map = data_phase_map(&dataset, observable, &args.observable)?;
            let path = cli.out_dir.join(format!("data_{}.csv", args.observable));
            write_atomic(&path, map.to_csv().as_bytes())?;
            println!("wrote {}", path.display());
        }
        "sweep" => {
            if args.steps < 2 {
                return Err(Error::invalid("--steps must be >= 2"));
            }
            let values = linspace(args.from, args.to, args.steps);
            let active = active_latent_neurons(&model, &dataset, 0.5);
            let (records, passive) =
                latent_sweep_generate(&model, args.dim, &values, args.count, cli.seed, &active)?;
            if passive {
                eprintln!("warning: latent dimension {} is passive", args.dim);
            }
            let path = cli.out_dir.join(format!("sweep_dim{}.csv", args.dim));
            write_atomic(&path, sweep_records_to_csv(&records).as_bytes())?;
            println!("wrote {}", path.display());
        }
        other => {
            return Err(Error::invalid(format!(
                "unknown analysis '{}'; valid names: latent-map, reconstruction, data-map, sweep",
                other
            )))
        }
    }
    Ok(())
}

fn cmd_sample(cli: &Cli, args: &SampleArgs) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let mut z = args.z.clone();
    if z.len() > model.d_latent() {
        return Err(Error::invalid(format!(
            "{} latent coordinates given but the model has {}",
            z.len(),
            model.d_latent()
        )));
    }
    z.resize(model.d_latent(), 0.0);
    let samples = model.autoregressive_sample(&LatentSample::from_z(z), args.count, cli.seed)?;
    let body: String = samples
        .iter()
        .map(|s| s.to_bitstring())
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::create_dir_all(&cli.out_dir)?;
    let out = cli.out_dir.join(&args.out);
    write_atomic(&out, body.as_bytes())?;
    println!("wrote {} configurations to {}", samples.len(), out.display());
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    let max_err = cpvae::objective::gradient_check_model(args.n_sites, args.batch_size, cli.seed)?;
    println!("max relative gradient error: {:.3e}", max_err);
    if max_err > args.tolerance {
        return Err(Error::invalid(format!(
            "gradient check failed: {:.3e} > {:.3e}",
            max_err, args.tolerance
        )));
    }
    Ok(())
}
