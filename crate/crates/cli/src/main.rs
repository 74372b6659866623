use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use oceanflow::basis::{BasisModel, Variant};
use oceanflow::ensemble::LatentSet;
use oceanflow::estimator::{estimate_field, reconstruct_grid, span_bound, EstimatorState};
use oceanflow::flowgrid::depth_average;
use oceanflow::flowgrid::flowpack::{ensemble_to_flowpack, field_to_flowpack, read_ensemble, read_field, Flowpack};
use oceanflow::glider::{evaluate_planning_suite, FlowField, GliderMission};
use oceanflow::metrics::ErrorReport;
use oceanflow::sensing::{generate_campaign, grid_point_campaign, MeasurementSet};
use oceanflow::GriddedField;
use oceanflow_cli::config::{default_mission, CampaignSpec, KernelSpec, RunConfig};
use oceanflow_cli::export::{export, Format};
use oceanflow_cli::pipeline::{self, glider_rows, print_glider_table};
use oceanflow_cli::{CliError, CliResult, EXIT_CODES};

#[derive(Parser)]
#[command(name = "oceanflow", version, about = "Ensemble-based 3D ocean current estimation", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureMode {
    Gridpoints,
    Campaign,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Vtk,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ensemble and its out-of-ensemble truth.
    GenEnsemble {
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
    /// Fit one latent vector per ensemble member.
    FitLatents {
        ensemble: PathBuf,
        /// Run config supplying kernel and ridge (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "latents.flowpack")]
        output: PathBuf,
    },
    /// Build a basis model from fitted latents.
    BuildBasis {
        latents: PathBuf,
        /// Defaults to the config's basis variant, else layered.
        #[arg(long)]
        variant: Option<String>,
        /// Retained modes; the config's rank or full rank when omitted.
        #[arg(long)]
        rank: Option<usize>,
        /// Run config supplying the basis section.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "basis.flowpack")]
        output: PathBuf,
        /// Also write the singular value spectrum as CSV.
        #[arg(long)]
        spectrum: Option<PathBuf>,
    },
    /// Sample measurements of a truth field.
    SimulateMeasurements {
        truth: PathBuf,
        #[arg(long, value_enum)]
        mode: MeasureMode,
        /// Run config supplying the campaign and noise settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(short, long, default_value = "measurements.flowpack")]
        output: PathBuf,
    },
    /// Run the Kalman filter over measurements.
    Estimate {
        model: PathBuf,
        measurements: PathBuf,
        /// Measurement standard deviation in m/s; R = value² I.
        #[arg(long = "R")]
        r_std: f64,
        /// Truth field to score the estimate against.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "state.flowpack")]
        state_out: PathBuf,
        #[arg(long, default_value = "estimate.flowpack")]
        field_out: PathBuf,
    },
    /// Best achievable grid RMSE of a model against a truth.
    Bound { model: PathBuf, truth: PathBuf },
    /// Plan on each estimate, fly in the truth, and tabulate closest approach.
    Glider {
        truth: PathBuf,
        /// NAME=KIND:PATH with KIND one of field, depth-average,
        /// estimate (MODEL,STATE) or member (ENSEMBLE,INDEX).
        #[arg(long = "estimate", required = true)]
        estimates: Vec<String>,
        /// Mission JSON; a default mission is used when omitted.
        #[arg(long)]
        mission: Option<PathBuf>,
        #[arg(short, long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Convert a flowpack artifact for plotting.
    Export {
        input: PathBuf,
        #[arg(long, value_enum)]
        format: ExportFormat,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Regenerate every table and figure input from one config.
    Reproduce {
        config: PathBuf,
        #[arg(short, long)]
        out_dir: Option<PathBuf>,
    },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::io(format!("{}: {e}", path.display()))
}

fn load(path: &Path) -> CliResult<Flowpack> {
    if !path.exists() {
        return Err(io_err(path, "no such file"));
    }
    Ok(Flowpack::load(path)?)
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

fn save(pack: &Flowpack, path: &Path) -> CliResult<()> {
    ensure_parent(path)?;
    pack.save(path).map_err(|e| match e {
        oceanflow::Error::Io(io) => io_err(path, io),
        other => other.into(),
    })
}

enum Estimate {
    Field(GriddedField),
    Latent(oceanflow::LatentField),
}

impl Estimate {
    fn as_flow(&self) -> &dyn FlowField {
        match self {
            Estimate::Field(f) => f,
            Estimate::Latent(f) => f,
        }
    }
}

fn parse_estimate(spec: &str) -> CliResult<(String, Estimate)> {
    let bad = || CliError::usage(format!("estimate '{spec}' is not NAME=KIND:PATH"));
    let (name, rest) = spec.split_once('=').ok_or_else(bad)?;
    let (kind, path) = rest.split_once(':').ok_or_else(bad)?;
    let est = match kind {
        "field" => Estimate::Field(read_field(load_path(path)?)?),
        "depth-average" => Estimate::Field(depth_average(&read_field(load_path(path)?)?)),
        "estimate" => {
            let (model, state) = path.split_once(',').ok_or_else(bad)?;
            let model = BasisModel::from_flowpack(&load(Path::new(model))?)?;
            let state = EstimatorState::from_flowpack(&load(Path::new(state))?)?;
            Estimate::Latent(estimate_field(&model, &state.w)?)
        }
        "member" => {
            let (ens, idx) = path.split_once(',').ok_or_else(bad)?;
            let idx: usize = idx.parse().map_err(|_| bad())?;
            let ensemble = read_ensemble(load_path(ens)?)?;
            let member = ensemble
                .members()
                .get(idx)
                .ok_or_else(|| CliError::new(oceanflow_cli::exit::NUMERIC, format!("member {idx} out of range")))?;
            Estimate::Field(member.clone())
        }
        other => return Err(CliError::usage(format!("unknown estimate kind '{other}'"))),
    };
    Ok((name.to_string(), est))
}

fn load_path(path: &str) -> CliResult<&Path> {
    let p = Path::new(path);
    if !p.exists() {
        return Err(io_err(p, "no such file"));
    }
    Ok(p)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenEnsemble { config, out_dir } => {
            let cfg = RunConfig::load(&config)?;
            let dir = out_dir.unwrap_or_else(|| cfg.output_dir.clone());
            let (ensemble, truth) = pipeline::generate(&cfg)?;
            save(&ensemble_to_flowpack(&ensemble), &dir.join("ensemble.flowpack"))?;
            save(&field_to_flowpack(&truth), &dir.join("truth.flowpack"))?;
            println!(
                "{} members on a {}x{}x{} grid, mean surface speed {:.4} m/s",
                ensemble.len(),
                ensemble.grid().nx,
                ensemble.grid().ny,
                ensemble.grid().nz,
                ensemble.mean_surface_speed()
            );
        }
        Command::FitLatents { ensemble, config, output } => {
            let cfg = load_config(config.as_deref())?;
            let ensemble = read_ensemble(load_path(&ensemble.to_string_lossy())?)?;
            let kernel: KernelSpec = cfg.kernel;
            let latents = pipeline::fit_latents(&ensemble, &kernel, cfg.ridge)?;
            save(&latents.to_flowpack(), &output)?;
            println!("member,residual");
            for (i, r) in latents.residuals.iter().enumerate() {
                println!("{i},{r}");
            }
        }
        Command::BuildBasis { latents, variant, rank, config, output, spectrum } => {
            let basis = load_config(config.as_deref())?.basis;
            let variant: Variant = match variant {
                Some(v) => v.parse().map_err(|e: oceanflow::Error| CliError::usage(e.to_string()))?,
                None => basis.variant,
            };
            let rank = rank.or(basis.rank);
            let latents = LatentSet::from_flowpack(&load(&latents)?)?;
            let model = pipeline::build_model(&latents, variant, rank)?;
            save(&model.to_flowpack(), &output)?;
            let spec = model.spectrum();
            let energy = spec.cumulative_energy[model.rank() - 1];
            println!(
                "{variant}: S = {} modes, kept r = {}, energy retained {:.6}, H elements {}",
                spec.mode_count,
                model.rank(),
                energy,
                model.mode_elements()
            );
            if let Some(path) = spectrum {
                ensure_parent(&path)?;
                fs::write(&path, spec.to_csv()).map_err(|e| io_err(&path, e))?;
            }
        }
        Command::SimulateMeasurements { truth, mode, config, output } => {
            let cfg = load_config(config.as_deref())?;
            let truth = read_field(load_path(&truth.to_string_lossy())?)?;
            let set = match mode {
                MeasureMode::Gridpoints => grid_point_campaign(&truth),
                MeasureMode::Campaign => {
                    let c: CampaignSpec = cfg.campaign;
                    generate_campaign(&truth, c.n_sites, &c.adcp(cfg.noise.noise_std), c.seed)?
                }
            };
            save(&set.to_flowpack(), &output)?;
            println!("{} measurements", set.len());
        }
        Command::Estimate { model, measurements, r_std, truth, state_out, field_out } => {
            if !(r_std.is_finite() && r_std > 0.0) {
                return Err(CliError::usage("--R must be a positive standard deviation"));
            }
            let model = BasisModel::from_flowpack(&load(&model)?)?;
            let meas = MeasurementSet::from_flowpack(&load(&measurements)?)?;
            let truth = match truth {
                Some(t) => Some(read_field(load_path(&t.to_string_lossy())?)?),
                None => None,
            };
            let state = pipeline::run_estimate(&model, &meas, r_std)?;
            let field = reconstruct_grid(&model, &state.w)?;
            save(&state.to_flowpack(), &state_out)?;
            save(&field_to_flowpack(&field), &field_out)?;
            if let Some(t) = truth {
                println!("{}", ErrorReport::compute(&field, &t)?.to_json());
            }
        }
        Command::Bound { model, truth } => {
            let model = BasisModel::from_flowpack(&load(&model)?)?;
            let truth = read_field(load_path(&truth.to_string_lossy())?)?;
            let b = span_bound(&model, &truth)?;
            println!(
                "{}",
                serde_json::json!({ "variant": model.variant(), "rank": model.rank(), "bound_rmse": b.rmse })
            );
        }
        Command::Glider { truth, estimates, mission, out_dir } => {
            let truth = read_field(load_path(&truth.to_string_lossy())?)?;
            let mission: GliderMission = match mission {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    let m: GliderMission = serde_json::from_str(&text)?;
                    m.validate().map_err(|e| CliError::schema(e.to_string()))?;
                    m
                }
                None => default_mission(),
            };
            let parsed = estimates.iter().map(|s| parse_estimate(s)).collect::<CliResult<Vec<_>>>()?;
            let list: Vec<(&str, &dyn FlowField)> =
                parsed.iter().map(|(n, e)| (n.as_str(), e.as_flow())).collect();
            let rows = evaluate_planning_suite(&truth, &list, &mission)?;
            fs::create_dir_all(&out_dir).map_err(|e| io_err(&out_dir, e))?;
            for row in &rows {
                let mut csv = Vec::new();
                row.trajectory.write_csv(&mut csv)?;
                let p = out_dir.join(format!("trajectory_{}.csv", row.name));
                fs::write(&p, csv).map_err(|e| io_err(&p, e))?;
                let mut vtk = Vec::new();
                row.trajectory.write_vtk(&mut vtk, &row.name)?;
                let p = out_dir.join(format!("trajectory_{}.vtk", row.name));
                fs::write(&p, vtk).map_err(|e| io_err(&p, e))?;
            }
            print_glider_table(&glider_rows(&rows));
        }
        Command::Export { input, format, output } => {
            let pack = load(&input)?;
            let format = match format {
                ExportFormat::Csv => Format::Csv,
                ExportFormat::Vtk => Format::Vtk,
            };
            match output {
                Some(path) => {
                    ensure_parent(&path)?;
                    let file = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
                    export(&pack, format, std::io::BufWriter::new(file))?;
                }
                None => export(&pack, format, std::io::stdout().lock())?,
            }
        }
        Command::Reproduce { config, out_dir } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.output_dir = dir;
            }
            pipeline::reproduce(&cfg)?;
            println!("artifacts written to {}", cfg.output_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
