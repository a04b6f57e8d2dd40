use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use resaple::error::{Error, Result};
use resaple::estimators::Method;
use resaple::inference::{PermutationScheme, TestResult, TestSide};
use resaple::io;
use resaple::residual_space::DesignMatrix;
use resaple::weights::{LatticeScheme, WeightMatrix};

#[derive(Parser)]
#[command(
    name = "resaple",
    version,
    about = "Restricted-likelihood estimation and testing of spatial dependence in spatial error models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a spatial weights file from a lattice, coordinates, or an edge list
    Weights(WeightsArgs),
    /// Estimate the dependence parameter with one-step methods and REML
    Estimate(EstimateArgs),
    /// Test H0: rho = 0 with exact, permutation, or z calibration
    Test(TestArgs),
    /// Local permutation tests on per-unit contributions
    Local(LocalArgs),
    /// Export scatterplot coordinates whose slope is the estimate
    Scatter(ScatterArgs),
    /// Rank candidate weight matrices by restricted null information
    CompareWeights(CompareWeightsArgs),
    /// Run a Monte Carlo estimation or power study from a design config
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Rook,
    Queen,
}

#[derive(Args)]
struct WeightsArgs {
    /// Lattice dimensions as ROWSxCOLS, e.g. 10x10
    #[arg(long, value_name = "RxC", conflicts_with_all = ["knn", "edges"])]
    lattice: Option<String>,
    /// Contiguity scheme for --lattice
    #[arg(long, value_enum, default_value = "queen")]
    scheme: SchemeArg,
    /// Number of nearest neighbours (symmetrized by union); requires --coords
    #[arg(long, requires = "coords")]
    knn: Option<usize>,
    /// Coordinate CSV (header row, columns x,y)
    #[arg(long, value_name = "FILE")]
    coords: Option<PathBuf>,
    /// Undirected edge-list CSV (header row, columns i,j)
    #[arg(long, value_name = "FILE")]
    edges: Option<PathBuf>,
    /// Keep raw 0/1 weights instead of row-standardizing
    #[arg(long)]
    raw: bool,
    /// Output weights JSON path
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Dataset CSV with a header row
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Weights JSON produced by the weights subcommand
    #[arg(long, value_name = "FILE")]
    weights: PathBuf,
    /// Response column name
    #[arg(long, value_name = "COL")]
    response: String,
    /// Comma-separated covariate column names
    #[arg(long, value_name = "COLS", value_delimiter = ',', num_args = 0..)]
    covariates: Vec<String>,
    /// Optional id column carried into per-unit outputs
    #[arg(long, value_name = "COL")]
    id_column: Option<String>,
    /// Drop the automatic intercept column
    #[arg(long)]
    no_intercept: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Comma-separated methods to run
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "moran,aple,maple,resaple,reml"
    )]
    methods: Vec<String>,
    /// Emit machine-readable JSON instead of the table
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TestMethodArg {
    Exact,
    Perm,
    Z,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SideArg {
    Greater,
    Less,
    TwoSided,
}

impl From<SideArg> for TestSide {
    fn from(s: SideArg) -> Self {
        match s {
            SideArg::Greater => TestSide::Greater,
            SideArg::Less => TestSide::Less,
            SideArg::TwoSided => TestSide::TwoSided,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PermSchemeArg {
    Coordinate,
    FreedmanLane,
}

#[derive(Args)]
struct TestArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    method: TestMethodArg,
    #[arg(long, value_enum, default_value = "greater")]
    side: SideArg,
    /// Permutation scheme for --method perm
    #[arg(long, value_enum, default_value = "freedman-lane")]
    scheme: PermSchemeArg,
    /// Number of permutations L (perm only)
    #[arg(long, default_value_t = 199)]
    permutations: usize,
    /// RNG seed; required for --method perm
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LocalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 199)]
    permutations: usize,
    /// RNG seed (required; never time-based)
    #[arg(long)]
    seed: u64,
    /// False-discovery-rate level for the Benjamini-Hochberg adjustment
    #[arg(long, default_value_t = 0.05)]
    fdr_q: f64,
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct ScatterArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Args)]
struct CompareWeightsArgs {
    /// Dataset CSV with a header row
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
    /// Response column name (covariates define the residual space)
    #[arg(long, value_name = "COL")]
    response: String,
    #[arg(long, value_name = "COLS", value_delimiter = ',', num_args = 0..)]
    covariates: Vec<String>,
    #[arg(long)]
    no_intercept: bool,
    /// Candidate weights as label=path, repeatable
    #[arg(long = "weights", value_name = "LABEL=FILE", required = true)]
    weights: Vec<String>,
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StudyArg {
    Estimation,
    Power,
}

#[derive(Args)]
struct SimulateArgs {
    /// Design config JSON (see SimDesign documentation)
    #[arg(long, value_name = "FILE")]
    design: PathBuf,
    #[arg(long, value_enum, default_value = "estimation")]
    study: StudyArg,
    /// Override the seed in the design file
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short, value_name = "FILE")]
    output: PathBuf,
}

fn main() -> ExitCode {
    if let Some(threads) = std::env::var("RESAPLE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(3)
            } else {
                ExitCode::from(4)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Weights(args) => cmd_weights(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Test(args) => cmd_test(args),
        Command::Local(args) => cmd_local(args),
        Command::Scatter(args) => cmd_scatter(args),
        Command::CompareWeights(args) => cmd_compare_weights(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn cmd_weights(args: WeightsArgs) -> Result<()> {
    let graph = if let Some(spec) = &args.lattice {
        let (rows, cols) = spec
            .split_once(['x', 'X'])
            .and_then(|(r, c)| Some((r.parse().ok()?, c.parse().ok()?)))
            .ok_or_else(|| Error::Data(format!("cannot parse lattice spec '{spec}' (use RxC)")))?;
        let scheme = match args.scheme {
            SchemeArg::Rook => LatticeScheme::Rook,
            SchemeArg::Queen => LatticeScheme::Queen,
        };
        resaple::build_lattice(rows, cols, scheme)?
    } else if let Some(k) = args.knn {
        let coords = io::read_coords_csv(args.coords.as_ref().expect("clap requires coords"))?;
        resaple::build_knn(&coords, k)?
    } else if let Some(edges_path) = &args.edges {
        let (n, edges) = io::read_edge_csv(edges_path)?;
        resaple::AdjacencyGraph::from_edges(n, edges, None)?
    } else {
        return Err(Error::Data(
            "one of --lattice, --knn, or --edges is required".into(),
        ));
    };
    let w = if args.raw {
        resaple::raw_weights(&graph)?
    } else {
        resaple::row_standardize(&graph)?
    };
    io::write_weights_json(&args.output, &w)?;
    println!(
        "wrote weights for n = {} units ({} normalization) to {}",
        w.n(),
        if args.raw { "raw" } else { "row" },
        args.output.display()
    );
    Ok(())
}

struct Model {
    z: DVector<f64>,
    x: DesignMatrix,
    w: WeightMatrix,
    ids: Vec<String>,
}

fn load_model(args: &ModelArgs) -> Result<Model> {
    let w = io::read_weights_json(&args.weights)?;
    let ds = io::read_dataset(
        &args.data,
        &args.response,
        &args.covariates,
        args.id_column.as_deref(),
        None,
    )?;
    let n = ds.response.len();
    if n != w.n() {
        return Err(Error::InvalidDimension(format!(
            "dataset has {n} rows but weights describe {} units",
            w.n()
        )));
    }
    let intercept = usize::from(!args.no_intercept);
    let p = intercept + ds.covariates.ncols();
    let x = if p == 0 {
        DesignMatrix::empty(n)
    } else {
        let m = DMatrix::from_fn(n, p, |i, j| {
            if j < intercept {
                1.0
            } else {
                ds.covariates[(i, j - intercept)]
            }
        });
        DesignMatrix::new(m)?
    };
    Ok(Model {
        z: ds.response,
        x,
        w,
        ids: ds.ids,
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let methods: Vec<Method> = args
        .methods
        .iter()
        .map(|m| match m.as_str() {
            "moran" => Ok(Method::Moran),
            "aple" => Ok(Method::Aple),
            "maple" => Ok(Method::Maple),
            "resaple" => Ok(Method::Resaple),
            "reml" => Ok(Method::Reml),
            other => Err(Error::Data(format!("unknown method '{other}'"))),
        })
        .collect::<Result<_>>()?;

    let s = resaple::build_residual_space(&model.x, &model.w)?;
    let e = resaple::contrasts(&s, &model.z)?;
    let results: Vec<resaple::EstimateResult> = methods
        .iter()
        .map(|m| match m {
            Method::Moran => resaple::moran_residual(&model.z, &model.x, &model.w),
            Method::Aple => resaple::aple(&model.x.residuals(&model.z)?, &model.w),
            Method::Maple => resaple::maple(&model.z, &model.x, &model.w),
            Method::Resaple => resaple::resaple(&s, &e),
            Method::Reml => resaple::reml_fit(&model.x, &model.w, &model.z, None),
        })
        .collect::<Result<_>>()?;

    if args.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        println!("{:<10} {:>14} {:>14} {:>14}", "method", "rho_hat", "sigma2_hat", "loglik");
        for r in &results {
            let opt = |v: Option<f64>| match v {
                Some(v) => format!("{v:.6}"),
                None => "-".to_string(),
            };
            println!(
                "{:<10} {:>14.10} {:>14} {:>14}",
                r.method.to_string(),
                r.rho_hat,
                opt(r.sigma2_hat),
                opt(r.loglik)
            );
        }
    }
    Ok(())
}

fn print_test_result(res: &TestResult) {
    println!("method: {}", res.method);
    println!("side: {}", match res.side {
        TestSide::Greater => "greater",
        TestSide::Less => "less",
        TestSide::TwoSided => "two_sided",
    });
    println!("statistic: {:.10}", res.statistic);
    println!("p_value: {:.10}", res.p_value);
    if let Some(l) = res.permutations {
        println!("permutations: {l}");
    }
    if let Some(seed) = res.seed {
        println!("seed: {seed}");
    }
    if let Some(p) = res.min_attainable_p {
        println!("min_attainable_p: {:.10}", p);
    }
    if res.accuracy_warning {
        println!("warning: quadrature accuracy target not certified");
    }
}

fn cmd_test(args: TestArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let side: TestSide = args.side.into();
    let res = match args.method {
        TestMethodArg::Exact => {
            let s = resaple::build_residual_space(&model.x, &model.w)?;
            let e = resaple::contrasts(&s, &model.z)?;
            resaple::exact_test(&s, &e, side)?
        }
        TestMethodArg::Z => {
            let s = resaple::build_residual_space(&model.x, &model.w)?;
            let e = resaple::contrasts(&s, &model.z)?;
            resaple::z_test(&s, &e, side)?
        }
        TestMethodArg::Perm => {
            let Some(seed) = args.seed else {
                clap::Error::raw(
                    clap::error::ErrorKind::MissingRequiredArgument,
                    "--seed is required for --method perm (seeds are never time-based)\n",
                )
                .exit()
            };
            let scheme = match args.scheme {
                PermSchemeArg::Coordinate => PermutationScheme::Coordinate,
                PermSchemeArg::FreedmanLane => PermutationScheme::FreedmanLane,
            };
            resaple::permutation_test(
                &model.z,
                &model.x,
                &model.w,
                scheme,
                args.permutations,
                seed,
                side,
            )?
        }
    };
    print_test_result(&res);
    Ok(())
}

fn cmd_local(args: LocalArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let s = resaple::build_residual_space(&model.x, &model.w)?;
    let e = resaple::contrasts(&s, &model.z)?;
    let res = resaple::local_tests(&s, &e, args.permutations, args.seed, args.fdr_q)?;
    io::write_local_csv(&args.output, &res, Some(&model.ids))?;
    let flagged = res.units.iter().filter(|u| u.significant).count();
    println!(
        "rho_hat: {:.10}\nunits flagged at fdr_q = {}: {flagged}\nwrote {}",
        res.rho_hat,
        args.fdr_q,
        args.output.display()
    );
    Ok(())
}

fn cmd_scatter(args: ScatterArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let s = resaple::build_residual_space(&model.x, &model.w)?;
    let e = resaple::contrasts(&s, &model.z)?;
    let scatter = resaple::scatter_coordinates(&s, &e)?;
    io::write_scatter_csv(&args.output, &scatter, Some(&model.ids))?;
    println!("rho_hat: {:.10}\nwrote {}", scatter.rho_hat, args.output.display());
    Ok(())
}

fn cmd_compare_weights(args: CompareWeightsArgs) -> Result<()> {
    let ds = io::read_dataset(&args.data, &args.response, &args.covariates, None, None)?;
    let n = ds.response.len();
    let intercept = usize::from(!args.no_intercept);
    let p = intercept + ds.covariates.ncols();
    let x = if p == 0 {
        DesignMatrix::empty(n)
    } else {
        let m = DMatrix::from_fn(n, p, |i, j| {
            if j < intercept {
                1.0
            } else {
                ds.covariates[(i, j - intercept)]
            }
        });
        DesignMatrix::new(m)?
    };
    let candidates: Vec<(String, WeightMatrix)> = args
        .weights
        .iter()
        .map(|spec| {
            let (label, path) = spec.split_once('=').ok_or_else(|| {
                Error::Data(format!("expected LABEL=FILE in --weights, got '{spec}'"))
            })?;
            Ok((label.to_string(), io::read_weights_json(Path::new(path))?))
        })
        .collect::<Result<_>>()?;
    let comparison = resaple::compare_weights(&x, &candidates)?;
    io::write_comparison_csv(&args.output, &comparison)?;
    let best = &comparison.rows[0];
    println!(
        "selected: {} (i_r0 = {:.6})\nwrote {}",
        best.label,
        best.i_r0,
        args.output.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.design)?;
    let mut design: resaple::SimDesign = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        design.seed = seed;
    }
    let metrics = match args.study {
        StudyArg::Estimation => resaple::run_estimation_study(&design)?,
        StudyArg::Power => resaple::run_power_study(&design)?,
    };
    io::write_sim_csv(&args.output, &metrics)?;
    println!(
        "wrote {} metric rows to {}",
        metrics.rows.len(),
        args.output.display()
    );
    Ok(())
}
