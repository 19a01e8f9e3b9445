use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ivprice::harness::experiment::{run_experiment, ExperimentConfig};
use ivprice::harness::loan::{
    demand_observations, evaluate_on_demand, fit_demand, fit_loan_policies, generate_loans, partial_dependence, write_pdp,
    LoanData, LoanPolicyConfig, LoanSimParams,
};
use ivprice::minimax::{self, MinimaxConfig};
use ivprice::policy::{extract_policy, Pricing, PricingPolicy, DEFAULT_FLOOR_C};
use ivprice::scm::{generate_dataset_with_latents, Dataset, SimParams};

#[derive(Parser)]
#[command(name = "ivprice", version, about = "Personalized pricing from confounded data with an imperfect instrument")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a dataset from the simulator.
    Simulate {
        /// Simulator parameters as JSON; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the latent columns.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Fit the minimax estimator on a dataset CSV.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fit result JSON.
        #[arg(long)]
        out: PathBuf,
        /// Also write the extracted pricing policy.
        #[arg(long)]
        policy_out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        p1: f64,
        #[arg(long, default_value_t = 10.0)]
        p2: f64,
    },
    /// Run the Monte Carlo regret sweep.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Draw synthetic loan records.
    SimulateLoans {
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn pricing policies from loan records; writes `<name>.json` per policy.
    LoanPolicies {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Fit a demand model and score policies by expected revenue.
    LoanEval {
        #[arg(long)]
        records: PathBuf,
        /// Comma separated penalty grid for cross-validation.
        #[arg(long, value_delimiter = ',', default_value = "1e-6,1e-4,1e-3,1e-2,1e-1")]
        demand_penalties: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        policies: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partial dependence of a policy's price on one feature.
    Pdp {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        feature: String,
        /// Grid in standard deviations from the feature mean.
        #[arg(long, value_delimiter = ',', default_value = "-2,-1.5,-1,-0.5,0,0.5,1,1.5,2")]
        grid: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Config(String),
    Data(String),
    Run(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Run(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn config_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Config(format!("{}: {e}", path.display()))
}

fn data_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Data(format!("{}: {e}", path.display()))
}

fn run_err<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Run(e.to_string())
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(config_err(p))?;
            serde_json::from_str(&text).map_err(config_err(p))
        }
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(run_err)?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Failure::Run(format!("{}: {e}", path.display())))
}

fn read_loans(path: &Path) -> CliResult<LoanData> {
    let f = File::open(path).map_err(data_err(path))?;
    LoanData::read_csv(f).map_err(data_err(path))
}

fn read_policy(path: &Path) -> CliResult<PricingPolicy> {
    let text = fs::read_to_string(path).map_err(config_err(path))?;
    PricingPolicy::from_json(&text).map_err(config_err(path))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate { params, n, seed, out, diagnostics } => {
            let params: SimParams = read_config(params.as_deref())?;
            params.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let data = generate_dataset_with_latents(&params, n, seed).map_err(|e| Failure::Config(e.to_string()))?;
            data.write_csv(create(&out)?, diagnostics).map_err(run_err)
        }
        Command::Fit { data, config, out, policy_out, p1, p2 } => {
            let config: MinimaxConfig = read_config(config.as_deref())?;
            config.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let ds = Dataset::read_csv(File::open(&data).map_err(data_err(&data))?).map_err(data_err(&data))?;
            let fit = minimax::fit(&ds, &config).map_err(run_err)?;
            if !fit.converged {
                eprintln!("warning: stopped after {} iterations without meeting the tolerance", fit.iterations_used);
            }
            fs::write(&out, fit.to_json().map_err(run_err)?).map_err(run_err)?;
            if let Some(path) = policy_out {
                let policy = extract_policy(&fit.alpha_hat, p1, p2, DEFAULT_FLOOR_C).map_err(|e| Failure::Config(e.to_string()))?;
                fs::write(&path, policy.to_json().map_err(run_err)?).map_err(run_err)?;
            }
            Ok(())
        }
        Command::Experiment { config, out_dir, workers } => {
            let mut config: ExperimentConfig = read_config(config.as_deref())?;
            config.validate().map_err(|e| Failure::Config(e.to_string()))?;
            config.output_dir = Some(out_dir);
            let report = run_experiment(&config, workers.max(1)).map_err(run_err)?;
            let failed = report.rows.iter().filter(|r| r.status != "ok").count();
            eprintln!("{} rows ({} new, {} failed)", report.rows.len(), report.computed, failed);
            Ok(())
        }
        Command::SimulateLoans { params, n, seed, out } => {
            let params: LoanSimParams = read_config(params.as_deref())?;
            let loans = generate_loans(&params, n, seed).map_err(|e| Failure::Config(e.to_string()))?;
            loans.write_csv(create(&out)?).map_err(run_err)
        }
        Command::LoanPolicies { records, config, out_dir } => {
            let config: LoanPolicyConfig = read_config(config.as_deref())?;
            config.print.validate().map_err(|e| Failure::Config(e.to_string()))?;
            let loans = read_loans(&records)?;
            fs::create_dir_all(&out_dir).map_err(run_err)?;
            for (name, policy) in fit_loan_policies(&loans, &config).map_err(run_err)? {
                fs::write(out_dir.join(format!("{name}.json")), policy.to_json().map_err(run_err)?).map_err(run_err)?;
            }
            Ok(())
        }
        Command::LoanEval { records, demand_penalties, policies, folds, seed, out } => {
            if demand_penalties.is_empty() || demand_penalties.iter().any(|p| !(*p >= 0.0)) {
                return Err(Failure::Config("demand penalties must be a nonempty list of nonnegative numbers".into()));
            }
            let loans = read_loans(&records)?;
            let obs = demand_observations(&loans).map_err(data_err(&records))?;
            let model = fit_demand(&obs, &demand_penalties, folds, seed).map_err(data_err(&records))?;
            let loaded: Vec<(String, PricingPolicy)> = policies
                .iter()
                .map(|p| {
                    let name = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
                    read_policy(p).map(|pol| (name, pol))
                })
                .collect::<CliResult<_>>()?;
            let (p1, p2) = loaded.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, pol)| {
                let (a, b) = pol.bounds();
                (lo.min(a), hi.max(b))
            });
            let (p1, p2) = if loaded.is_empty() {
                let ps: Vec<f64> = obs.iter().map(|o| o.p).collect();
                (ps.iter().copied().fold(f64::INFINITY, f64::min).max(0.0), ps.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            } else {
                (p1, p2)
            };
            let refs: Vec<(&str, &dyn Pricing)> = loaded.iter().map(|(n, p)| (n.as_str(), p as &dyn Pricing)).collect();
            let eval = evaluate_on_demand(&model, &refs, &obs, p1, p2).map_err(run_err)?;
            eval.write_csv(create(&out)?).map_err(run_err)
        }
        Command::Pdp { policy, records, feature, grid, out } => {
            let policy = read_policy(&policy)?;
            let loans = read_loans(&records)?;
            let j = loans
                .feature_index(&feature)
                .ok_or_else(|| Failure::Config(format!("unknown feature {feature}; have {:?}", loans.feature_names)))?;
            let curve = partial_dependence(&policy, &loans.feature_rows(), j, &grid).map_err(run_err)?;
            write_pdp(&curve, create(&out)?).map_err(run_err)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let msg = match &f {
                Failure::Config(m) => format!("config error: {m}"),
                Failure::Data(m) => format!("data error: {m}"),
                Failure::Run(m) => m.clone(),
            };
            eprintln!("ivprice: {msg}");
            ExitCode::from(f.code())
        }
    }
}
