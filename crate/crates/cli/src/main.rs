mod config;
mod run;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opdisc::acceptance::DEFAULT_SEED;
use opdisc::galerkin_fem::{ConvexNonlinearity, GalerkinKind};
use opdisc::layers::{Frame, GKind, LayerSpec};
use opdisc::{BasisSpec, CustomActivation, CustomFunction, PointwiseActivation};
use rayon::prelude::*;
use serde_json::json;

use config::*;
use run::{Outcome, RunError};

#[derive(Parser)]
#[command(name = "opdisc", version, about = "Discretization experiments for neural operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; without it a single default experiment is built from flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for CSV and JSON artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Certificate and sampled monotonicity of discretized layers.
    MonotoneCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        dims: Option<Vec<usize>>,
    },
    /// Discretization errors across prefix dimensions.
    DiscretizeScan {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        dims: Option<Vec<usize>>,
    },
    /// Factor a layer into near-identity blocks.
    Decompose {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "config")]
        epsilon: Option<f64>,
    },
    /// Fixed-point inversion of a residual chain.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "config")]
        delta: Option<f64>,
    },
    /// Determinant scan of a Galerkin operator path.
    NogoGalerkin {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, conflicts_with = "config")]
        kind: Option<PathKind>,
        #[arg(long, conflicts_with = "config")]
        n: Option<usize>,
        #[arg(long, conflicts_with = "config")]
        grid: Option<usize>,
        #[arg(long, conflicts_with = "config")]
        bisect_tol: Option<f64>,
    },
    /// Determinant scan of the truncated rotation isotopy.
    NogoIsotopy {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "config")]
        m: Option<usize>,
        #[arg(long, conflicts_with = "config")]
        grid: Option<usize>,
    },
    /// Finite element solves and H1 convergence.
    FemSolve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, conflicts_with = "config")]
        g: Option<GChoice>,
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        mesh: Option<Vec<usize>>,
    },
    /// Measured discretization error beside network-size bound columns.
    QuantReport {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        dims: Option<Vec<usize>>,
    },
    /// The acceptance suite.
    Accept {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', conflicts_with = "config")]
        criterion: Option<Vec<u8>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PathKind {
    A,
    B,
}

#[derive(Clone, Copy, ValueEnum)]
enum GChoice {
    Zero,
    Linear,
    Cubic,
}

fn generated(ambient: usize, spec: LayerSpec) -> LayerSource {
    LayerSource::Generate {
        space: BasisSpec::fourier(ambient),
        spec,
        seed: None,
    }
}

fn leaky(rank: usize, decay: f64, lip: f64, frame: Frame) -> LayerSpec {
    LayerSpec {
        rank,
        decay,
        lip_g: lip,
        g: GKind::Nemytskii {
            activation: PointwiseActivation::LeakyRelu { slope_neg: 0.2 },
        },
        support: None,
        frame,
    }
}

fn decaying_layer() -> LayerSource {
    generated(96, leaky(96, 2.0, 0.4, Frame::Aligned))
}

/// The experiment a subcommand runs when no config is given.
fn flag_experiment(command: &Command) -> Experiment {
    match command {
        Command::MonotoneCheck { dims, .. } => Experiment::MonotoneCheck(MonotoneCheck {
            name: "monotone_check".into(),
            seed: None,
            layer: generated(32, leaky(32, 1.0, 0.45, Frame::Random)),
            dims: dims.clone().unwrap_or(vec![1, 2, 4, 8, 16, 32]),
            radius: 1.0,
            samples: 32,
        }),
        Command::DiscretizeScan { dims, .. } => Experiment::DiscretizeScan(DiscretizeScan {
            name: "discretize_scan".into(),
            seed: None,
            layer: decaying_layer(),
            dims: dims.clone().unwrap_or(vec![4, 8, 16, 32, 64]),
            radius: 1.0,
            samples: 32,
            probes: 4,
            expect_decreasing: dims.is_none(),
        }),
        Command::Decompose { epsilon, .. } => Experiment::Decompose(DecomposeExperiment {
            name: "decompose".into(),
            seed: None,
            layer: LayerSource::Generate {
                space: BasisSpec::fourier(16),
                spec: LayerSpec {
                    rank: 4,
                    decay: 3.0,
                    lip_g: 0.25,
                    g: GKind::Nemytskii {
                        activation: PointwiseActivation::Custom(CustomActivation::with_bounds(CustomFunction::Tanh)),
                    },
                    support: Some(12),
                    frame: Frame::Random,
                },
                seed: None,
            },
            epsilon: epsilon.unwrap_or(0.25),
            r1: 1.0,
            h: None,
            pairs: None,
            composite_samples: None,
            composite_tol: None,
            max_blocks: None,
        }),
        Command::Invert { delta, .. } => Experiment::Invert(InvertExperiment {
            name: "invert".into(),
            seed: None,
            chain: ChainSpec {
                ambient_dim: 24,
                n: 16,
                blocks: 3,
                widths: None,
                activation: opdisc::CoordinateActivation::Groupsort2,
                lip: delta.unwrap_or(0.5),
                cert_radius: None,
            },
            delta: delta.unwrap_or(0.5),
            samples: 100,
            radius: 1.0,
            tol: 1e-11,
            max_iter: 10_000,
            roundtrip_tol: 1e-8,
        }),
        Command::NogoGalerkin {
            kind,
            n,
            grid,
            bisect_tol,
            ..
        } => {
            let path = match kind.unwrap_or(PathKind::A) {
                PathKind::A => GalerkinKind::A,
                PathKind::B => GalerkinKind::B,
            };
            Experiment::NogoGalerkin(NogoGalerkin {
                name: "nogo_galerkin".into(),
                path,
                n: n.unwrap_or(if path == GalerkinKind::A { 5 } else { 7 }),
                basis: None,
                grid: grid.unwrap_or(201),
                bisect_tol: bisect_tol.unwrap_or(1e-13),
            })
        }
        Command::NogoIsotopy { m, grid, .. } => Experiment::NogoIsotopy(NogoIsotopy {
            name: "nogo_isotopy".into(),
            m: m.unwrap_or(7),
            grid: grid.unwrap_or(201),
            dyadic: 30,
            bisect_tol: 1e-12,
        }),
        Command::FemSolve { g, mesh, .. } => {
            let g = match g.unwrap_or(GChoice::Linear) {
                GChoice::Zero => ConvexNonlinearity::Zero,
                GChoice::Linear => ConvexNonlinearity::Linear,
                GChoice::Cubic => ConvexNonlinearity::Cubic,
            };
            Experiment::FemSolve(FemSolve {
                name: "fem_solve".into(),
                g,
                meshes: mesh.clone().unwrap_or(vec![16, 32, 64, 128]),
                amplitude: None,
                tol: 1e-12,
                expect_ratio: (g != ConvexNonlinearity::Cubic).then_some([1.7, 2.3]),
            })
        }
        Command::QuantReport { dims, .. } => Experiment::QuantReport(QuantReportExperiment {
            name: "quant_report".into(),
            seed: None,
            layer: decaying_layer(),
            dims: dims.clone().unwrap_or(vec![4, 8, 16, 32, 64]),
            radius: 1.0,
            samples: 32,
        }),
        Command::Accept { criterion, .. } => Experiment::Accept(Accept {
            name: "acceptance".into(),
            seed: None,
            criteria: criterion.clone(),
        }),
    }
}

fn command_kind(command: &Command) -> &'static str {
    match command {
        Command::MonotoneCheck { .. } => "monotone_check",
        Command::DiscretizeScan { .. } => "discretize_scan",
        Command::Decompose { .. } => "decompose",
        Command::Invert { .. } => "invert",
        Command::NogoGalerkin { .. } => "nogo_galerkin",
        Command::NogoIsotopy { .. } => "nogo_isotopy",
        Command::FemSolve { .. } => "fem_solve",
        Command::QuantReport { .. } => "quant_report",
        Command::Accept { .. } => "accept",
    }
}

fn common(command: &Command) -> &Common {
    match command {
        Command::MonotoneCheck { common, .. }
        | Command::DiscretizeScan { common, .. }
        | Command::Decompose { common, .. }
        | Command::Invert { common, .. }
        | Command::NogoGalerkin { common, .. }
        | Command::NogoIsotopy { common, .. }
        | Command::FemSolve { common, .. }
        | Command::QuantReport { common, .. }
        | Command::Accept { common, .. } => common,
    }
}

fn load_config(command: &Command) -> Result<ExperimentConfig, String> {
    let c = common(command);
    let cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            let cfg = ExperimentConfig::parse(&text)?;
            let kind = command_kind(command);
            if let Some(e) = cfg.experiments.iter().find(|e| e.kind() != kind) {
                return Err(format!(
                    "experiment {:?} has kind {} but the subcommand runs {kind}",
                    e.name(),
                    e.kind()
                ));
            }
            cfg
        }
        None => ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: Some(DEFAULT_SEED),
            experiments: vec![flag_experiment(command)],
        },
    };
    cfg.validate(c.seed)
}

fn write_artifacts(dir: &Path, outcomes: &[Outcome]) -> std::io::Result<()> {
    if outcomes.iter().all(|o| o.artifacts.is_empty()) {
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    for o in outcomes {
        for (file, body) in &o.artifacts {
            fs::write(dir.join(file), body)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = common(&cli.command).clone();
    let cfg = match load_config(&cli.command) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("config error: {msg}");
            return ExitCode::from(1);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = c.jobs {
        if jobs == 0 {
            eprintln!("config error: --jobs must be positive");
            return ExitCode::from(1);
        }
        pool = pool.num_threads(jobs);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(1);
        }
    };
    let results: Vec<Result<Outcome, RunError>> = pool.install(|| cfg.experiments.par_iter().map(run::run).collect());
    let mut outcomes = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in cfg.experiments.iter().zip(results) {
        match r {
            Ok(o) => {
                for a in o.assertions.iter().filter(|a| !a.passed) {
                    failures.push(json!({"experiment": o.name, "kind": o.kind, "assertion": a.name, "value": a.value}));
                }
                outcomes.push(o);
            }
            Err(RunError::Config(msg)) => {
                eprintln!("config error in {}: {msg}", e.name());
                return ExitCode::from(1);
            }
            Err(RunError::Run(msg)) => {
                failures.push(json!({"experiment": e.name(), "kind": e.kind(), "assertion": "run", "value": msg}));
            }
        }
    }
    if let Err(err) = write_artifacts(&c.out, &outcomes) {
        eprintln!("cannot write artifacts: {err}");
        return ExitCode::from(1);
    }
    for o in &outcomes {
        println!("{} {} {}", o.kind, o.name, if o.passed() { "ok" } else { "FAILED" });
    }
    if failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    let report = serde_json::to_string_pretty(&json!({"failures": failures})).expect("report serializes") + "\n";
    let written = fs::create_dir_all(&c.out).and_then(|_| fs::write(c.out.join("failures.json"), &report));
    if written.is_err() {
        eprintln!("cannot write failures.json");
    }
    eprint!("{report}");
    ExitCode::from(2)
}
