//! `missglasso` command-line tool.
//!
//! Exit codes: 0 success, 2 bad input (parse, dimensions, arguments, config,
//! I/O), 3 degenerate data, 4 no convergence.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use missglasso::glasso::GlassoOptions;
use missglasso::io::{fmt_f64, read_csv, write_imputed, CsvTable, ModelFile, RegressionPart};
use missglasso::missglasso::{
    conditional_mean_impute, fit_em, fit_missglasso, EmOptions, FitReport, GaussianModel, MStep,
};
use missglasso::select::{
    bic_path, cross_validate, cross_validate_stage2, lambda2_grid, lambda_grid, stage2_bic_path,
};
use missglasso::two_stage::{fit_stage2, RegressionData, TwoStageOptions};
use missglasso::Error;
use missglasso_simbench::config::{Kind, Method, ScenarioConfig};
use missglasso_simbench::models::CovModel;
use missglasso_simbench::run::{matrix_csv, run_scenario};
use missglasso_simbench::SimError;

#[derive(Parser)]
#[command(name = "missglasso", version, about = "Sparse Gaussian precision estimation with missing values")]
struct Cli {
    /// Worker threads (0 = one per core). Falls back to MISSGLASSO_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a sparse precision matrix by penalized EM.
    Fit(FitArgs),
    /// Fill missing cells with conditional means under a saved model.
    Impute(ImputeArgs),
    /// Two-stage penalized regression with missing covariates.
    Regress(RegressArgs),
    /// Score a penalty grid and report the selected value.
    Tune(TuneArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Rule {
    Bic,
    Cv,
}

#[derive(Args, Clone)]
struct EmArgs {
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 200)]
    max_em: usize,
    /// Relative objective decrease that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

impl EmArgs {
    fn options(&self) -> EmOptions {
        EmOptions {
            max_em: self.max_em,
            tol: self.tol,
            ..EmOptions::default()
        }
    }
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    lambda_count: usize,
    /// Smallest grid value as a fraction of the largest.
    #[arg(long, default_value_t = 0.01)]
    lambda_ratio: f64,
}

#[derive(Args)]
struct FitArgs {
    input: PathBuf,
    /// The first row holds data, not column names.
    #[arg(long)]
    no_header: bool,
    #[arg(long, conflicts_with = "tune", required_unless_present = "tune")]
    lambda: Option<f64>,
    #[arg(long, value_enum)]
    tune: Option<Rule>,
    /// Leave the diagonal of K unpenalized (fixed penalty only).
    #[arg(long, requires = "lambda")]
    no_penalize_diag: bool,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    input: PathBuf,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    model: PathBuf,
    /// Output file (standard output when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegressArgs {
    /// Response, one column without missing values.
    y: PathBuf,
    /// Covariates; missing cells allowed.
    x: PathBuf,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    /// Rule for whichever penalty is not given.
    #[arg(long, value_enum, default_value = "cv")]
    tune: Rule,
    /// Subtract the response mean and observed column means before fitting.
    #[arg(long)]
    center: bool,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    em: EmArgs,
    #[arg(long)]
    out: PathBuf,
    /// Coefficient table (`term,estimate`).
    #[arg(long)]
    coef: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    input: PathBuf,
    #[arg(long)]
    no_header: bool,
    #[arg(long, value_enum)]
    rule: Rule,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    em: EmArgs,
    /// Also save the selected model.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Complete data whose empirical covariance replaces the configured model.
    #[arg(long)]
    from_file: Option<PathBuf>,
    #[arg(long)]
    no_header: bool,
    /// Directory for per-method zero-frequency matrices.
    #[arg(long)]
    heatmap_dir: Option<PathBuf>,
    /// Record wall-clock time per fit.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Sim(SimError),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Core(Error::Io(e))
    }
}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::DegenerateData(_)
        | Error::ZeroResponse
        | Error::FoldDegenerate { .. }
        | Error::NotPositiveDefinite { .. }
        | Error::ZeroDiagonal { .. } => 3,
        Error::NotConverged { .. } | Error::GlassoNotConverged { .. } => 4,
        _ => 2,
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Core(e) => core_code(e),
            CliError::Sim(SimError::Core(e)) => core_code(e),
            CliError::Sim(SimError::AllMissingColumn { .. }) => 3,
            CliError::Sim(_) | CliError::Usage(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Sim(e) => write!(f, "{e}"),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type Outcome = Result<bool, CliError>;

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))
}

fn load_csv(path: &Path, no_header: bool) -> Result<CsvTable, CliError> {
    read_csv(open(path)?, !no_header).map_err(|e| match e {
        Error::Parse { line, message } => CliError::Usage(format!("{}:{line}: {message}", path.display())),
        e => e.into(),
    })
}

fn save_model(path: &Path, m: &ModelFile) -> Result<(), CliError> {
    std::fs::write(path, m.to_text())?;
    Ok(())
}

fn model_file(model: GaussianModel, lambda: f64, report: &FitReport) -> ModelFile {
    ModelFile {
        model,
        lambda,
        em_iterations: report.em_iterations,
        converged: report.converged,
        objective: report.objective(),
        regression: None,
    }
}

fn print_fit_summary(m: &ModelFile) {
    let p = m.model.dim();
    let upper = m.model.k.count_upper_nonzeros();
    println!("lambda {}", fmt_f64(m.lambda));
    println!("nonzeros_K {}", 2 * upper - p);
    println!("edges {}", upper - p);
    println!("em_iterations {}", m.em_iterations);
    println!("converged {}", m.converged);
    println!("objective {}", fmt_f64(m.objective));
}

fn select_lambda(
    t: &CsvTable,
    rule: Rule,
    grid: &GridArgs,
    opts: &EmOptions,
) -> Result<(Vec<f64>, Vec<f64>, usize, GaussianModel, FitReport), CliError> {
    let lambdas = lambda_grid(&t.data, grid.lambda_count, grid.lambda_ratio)?;
    match rule {
        Rule::Bic => {
            let mut path = bic_path(&t.data, &lambdas, opts)?;
            let best = path.best_index();
            let (m, r) = path.fits.swap_remove(best);
            Ok((lambdas, path.scores, best, m, r))
        }
        Rule::Cv => {
            let cv = cross_validate(&t.data, &lambdas, grid.cv_folds, grid.seed, opts)?;
            let best = lambdas.iter().position(|&l| l == cv.best_lambda).expect("selected from grid");
            Ok((lambdas, cv.scores, best, cv.model, cv.report))
        }
    }
}

fn cmd_fit(a: FitArgs) -> Outcome {
    let t = load_csv(&a.input, a.no_header)?;
    let opts = a.em.options();
    let (lambda, model, report) = match (a.lambda, a.tune) {
        (Some(lambda), _) => {
            let (m, r) = if a.no_penalize_diag {
                if !(lambda > 0.0) || !lambda.is_finite() {
                    return Err(CliError::Usage(format!("penalty must be positive, got {lambda}")));
                }
                let mstep = MStep::Glasso {
                    lambda,
                    penalize_diagonal: false,
                    options: GlassoOptions::tight(),
                };
                fit_em(&t.data, &mstep, &opts)?
            } else {
                fit_missglasso(&t.data, lambda, &opts)?
            };
            (lambda, m, r)
        }
        (None, Some(rule)) => {
            let (lambdas, _, best, m, r) = select_lambda(&t, rule, &a.grid, &opts)?;
            (lambdas[best], m, r)
        }
        (None, None) => unreachable!("clap requires --lambda or --tune"),
    };
    let mf = model_file(model, lambda, &report);
    save_model(&a.out, &mf)?;
    print_fit_summary(&mf);
    Ok(report.converged)
}

fn cmd_impute(a: ImputeArgs) -> Outcome {
    let mf = ModelFile::from_text(&std::fs::read_to_string(&a.model)?)?;
    let t = load_csv(&a.input, a.no_header)?;
    let mut model = mf.model.clone();
    if model.dim() != t.data.ncols() {
        return Err(CliError::Core(Error::DimensionMismatch(format!(
            "model has {} variables, {} has {}",
            model.dim(),
            a.input.display(),
            t.data.ncols()
        ))));
    }
    // a centered regression model describes shifted covariates
    if let Some(RegressionPart { centering: Some((_, means)), .. }) = &mf.regression {
        for (m, c) in model.mu.iter_mut().zip(means) {
            *m += c;
        }
    }
    let filled = conditional_mean_impute(&t.data, &model)?;
    match &a.out {
        Some(path) => write_imputed(BufWriter::new(File::create(path)?), &t, &filled)?,
        None => write_imputed(io::stdout().lock(), &t, &filled)?,
    }
    Ok(true)
}

fn cmd_regress(a: RegressArgs) -> Outcome {
    let yt = load_csv(&a.y, a.no_header)?;
    let xt = load_csv(&a.x, a.no_header)?;
    if yt.data.ncols() != 1 {
        return Err(CliError::Usage(format!("{} must have exactly one column", a.y.display())));
    }
    let y: Vec<f64> = (0..yt.data.nrows())
        .map(|i| yt.data.get(i, 0).ok_or_else(|| CliError::Usage(format!("response row {} is missing", i + 1))))
        .collect::<Result<_, _>>()?;
    let raw = RegressionData::new(y, xt.data.clone())?;
    let (data, centering) = if a.center {
        let (d, ym, xm) = raw.centered()?;
        (d, Some((ym, xm)))
    } else {
        (raw, None)
    };
    let em = a.em.options();
    let (lambda1, x_model, stage1) = match a.lambda1 {
        Some(l) => {
            let (m, r) = fit_missglasso(&data.x, l, &em)?;
            (l, m, r)
        }
        None => {
            let xs = CsvTable {
                header: None,
                tokens: Vec::new(),
                data: data.x.clone(),
            };
            let (lambdas, _, best, m, r) = select_lambda(&xs, a.tune, &a.grid, &em)?;
            (lambdas[best], m, r)
        }
    };
    let opts = TwoStageOptions {
        stage1: em.clone(),
        max_em: a.em.max_em,
        tol: a.em.tol,
    };
    let (lambda2, model, stage2) = match a.lambda2 {
        Some(l) => {
            let (m, r) = fit_stage2(&data, &x_model, l, None, &opts)?;
            (l, m, r)
        }
        None => {
            let grid = lambda2_grid(&data, &x_model, a.grid.lambda_count, a.grid.lambda_ratio)?;
            let sel = match a.tune {
                Rule::Bic => stage2_bic_path(&data, &x_model, &grid, &opts)?,
                Rule::Cv => cross_validate_stage2(&data, &x_model, &grid, a.grid.cv_folds, a.grid.seed, &opts)?,
            };
            (sel.best_lambda, sel.model, sel.report)
        }
    };
    let mf = ModelFile {
        model: x_model,
        lambda: lambda1,
        em_iterations: stage1.em_iterations,
        converged: stage1.converged,
        objective: stage1.objective(),
        regression: Some(RegressionPart {
            beta: model.beta.clone(),
            sigma: model.sigma,
            lambda2,
            centering: centering.clone(),
        }),
    };
    save_model(&a.out, &mf)?;
    if let Some(path) = &a.coef {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "term,estimate")?;
        if let Some((ym, xm)) = &centering {
            let b0 = ym - model.beta.iter().zip(xm).map(|(b, m)| b * m).sum::<f64>();
            writeln!(w, "intercept,{}", fmt_f64(b0))?;
        }
        for (j, b) in model.beta.iter().enumerate() {
            let name = xt.header.as_ref().map_or_else(|| format!("x{}", j + 1), |h| h[j].clone());
            writeln!(w, "{name},{}", fmt_f64(*b))?;
        }
        writeln!(w, "sigma,{}", fmt_f64(model.sigma))?;
        w.flush()?;
    }
    println!("lambda1 {}", fmt_f64(lambda1));
    println!("lambda2 {}", fmt_f64(lambda2));
    println!("nonzero_beta {}", model.beta.iter().filter(|b| **b != 0.0).count());
    println!("sigma {}", fmt_f64(model.sigma));
    println!("em_iterations {} {}", stage1.em_iterations, stage2.em_iterations);
    Ok(stage1.converged && stage2.converged)
}

fn cmd_tune(a: TuneArgs) -> Outcome {
    let t = load_csv(&a.input, a.no_header)?;
    let (lambdas, scores, best, m, r) = select_lambda(&t, a.rule, &a.grid, &a.em.options())?;
    println!("lambda,score");
    for (l, s) in lambdas.iter().zip(&scores) {
        println!("{},{}", fmt_f64(*l), fmt_f64(*s));
    }
    println!("selected {}", fmt_f64(lambdas[best]));
    if let Some(path) = &a.out {
        save_model(path, &model_file(m, lambdas[best], &r))?;
    }
    Ok(r.converged)
}

fn cmd_simulate(a: SimulateArgs) -> Outcome {
    let mut cfg = ScenarioConfig::from_file(&a.config)?;
    if let Some(path) = &a.from_file {
        let t = load_csv(path, a.no_header)?;
        if !t.data.is_complete() {
            return Err(CliError::Usage(format!("{} must not contain missing cells", path.display())));
        }
        cfg.model = CovModel::from_data(&t.data.filled(|_, _| 0.0))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    cfg.timing |= a.timing;
    cfg.validate()?;
    let result = run_scenario(&cfg)?;
    std::fs::write(&a.out, result.to_csv())?;
    if let Some(dir) = &a.heatmap_dir {
        if cfg.kind == Kind::Precision {
            std::fs::create_dir_all(dir)?;
            for &method in &cfg.methods {
                for level in 0..cfg.levels.len() {
                    if let Some(f) = result.zero_frequency(method, level) {
                        let name = format!("{}_level{}.csv", Method::name(method), level + 1);
                        std::fs::write(dir.join(name), matrix_csv(&f))?;
                    }
                }
            }
        }
    }
    print!("{}", result.summary_table());
    Ok(true)
}

fn init_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("MISSGLASSO_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("MISSGLASSO_THREADS must be a count, got {v:?}")))?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = init_threads(cli.threads).and_then(|()| match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Impute(a) => cmd_impute(a),
        Command::Regress(a) => cmd_regress(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Simulate(a) => cmd_simulate(a),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("warning: EM stopped before convergence; results written anyway");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
