use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "pptlab",
    version,
    about = "Purified process tensors: construction, memory complexity, correlations and tomography"
)]
pub struct Cli {
    /// JSON object whose keys override the matching flags.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Output format; only figs2 supports csv.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// Write the result here instead of stdout.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the purified process tensor of a model.
    Build(BuildArgs),
    /// Stationary memory complexity of a time-independent model.
    Complexity(ComplexityArgs),
    /// Multi-time expectation value on a stored process tensor.
    Correlate(CorrelateArgs),
    /// Relaxation of the environment towards I/D under weak coupling.
    Figs2(RelaxationArgs),
    /// Disentangling tomography against a simulated oracle.
    Tomograph(TomographArgs),
    /// Variational fit of a stored process tensor.
    Fit(FitArgs),
    /// Extend a recovered time-independent model to more steps.
    Predict(PredictArgs),
    /// Recover a model whose initial state is entangled with the environment.
    ReconstructEntangled(EntangledArgs),
}

pub const SUBCOMMANDS: [&str; 8] = [
    "build",
    "complexity",
    "correlate",
    "figs2",
    "tomograph",
    "fit",
    "predict",
    "reconstruct-entangled",
];

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Load the model from JSON instead of drawing a Haar-random one.
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,

    /// System dimension.
    #[arg(long = "d", default_value_t = 2)]
    pub d: usize,

    /// Environment dimension.
    #[arg(long = "D", default_value_t = 2)]
    pub env_dim: usize,

    /// Seed of the Haar draw; required unless --model is given.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Draw an independent unitary for every step.
    #[arg(long)]
    pub time_dependent: bool,

    /// Schmidt coefficients of an entangled initial state.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set)]
    pub lambdas: Option<Vec<f64>>,

    /// Start from the maximally entangled state; needs d = D.
    #[arg(long, conflicts_with = "lambdas")]
    pub maximally_entangled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LegArg {
    Absorbed,
    Vector,
    SystemLeg,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Number of steps.
    #[arg(long = "N")]
    pub n_steps: usize,

    /// How the initial state enters the chain.
    #[arg(long, value_enum, default_value_t = LegArg::Absorbed)]
    pub leg: LegArg,

    /// Also write the model used.
    #[arg(long, value_name = "PATH")]
    pub model_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ComplexityArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Rényi orders.
    #[arg(long, value_delimiter = ',', num_args = 1.., action = ArgAction::Set, default_value = "1")]
    pub alpha: Vec<f64>,

    /// Convergence tolerance of the stationary state.
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct CorrelateArgs {
    /// Process tensor JSON, as written by build.
    #[arg(long, value_name = "PATH")]
    pub ppt: PathBuf,

    /// Observable JSON; defaults to the identity on the last step.
    #[arg(long, value_name = "PATH")]
    pub observable: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RelaxationArgs {
    #[arg(long = "d", default_value_t = 2)]
    pub d: usize,

    #[arg(long = "D", default_value_t = 2)]
    pub env_dim: usize,

    /// Coupling strength.
    #[arg(long)]
    pub eta: f64,

    /// Last step.
    #[arg(long)]
    pub nmax: usize,

    /// Number of seeds in the ensemble.
    #[arg(long)]
    pub seeds: usize,

    /// First seed; the ensemble uses seed-base, seed-base + 1, ...
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,

    /// Draw a new Hamiltonian at every step.
    #[arg(long)]
    pub fresh: bool,
}

#[derive(Args, Debug)]
pub struct TomographArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Number of steps.
    #[arg(long = "N")]
    pub n_steps: usize,

    /// Upper bound on the environment dimension.
    #[arg(long)]
    pub dbound: usize,

    /// Estimate reduced states from measurements, e.g. {"shots":10000,"seed":3}.
    #[arg(long, value_name = "JSON")]
    pub sampling: Option<String>,

    /// The initial state may be entangled with the environment.
    #[arg(long)]
    pub entangled_initial: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Target process tensor JSON.
    #[arg(long, value_name = "PATH")]
    pub target: PathBuf,

    /// Environment dimension of the ansatz.
    #[arg(long = "D")]
    pub env_dim: usize,

    /// Share one unitary across all steps.
    #[arg(long)]
    pub time_independent: bool,

    /// Seed of the random restarts.
    #[arg(long)]
    pub seed: u64,

    #[arg(long, default_value_t = 5)]
    pub restarts: usize,

    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Reconstruction report JSON from fit or tomograph.
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,

    /// Number of steps to extend to.
    #[arg(long = "N")]
    pub n_steps: usize,
}

#[derive(Args, Debug)]
pub struct EntangledArgs {
    #[command(flatten)]
    pub model: ModelArgs,

    /// Number of steps.
    #[arg(long = "N", default_value_t = 5)]
    pub n_steps: usize,

    /// Upper bound on the environment dimension.
    #[arg(long, default_value_t = 2)]
    pub dbound: usize,

    /// Seed of the variational restarts.
    #[arg(long)]
    pub fit_seed: u64,

    /// Loss above which an outcome counts as failed.
    #[arg(long, default_value_t = 1e-6)]
    pub outcome_loss: f64,
}
