use std::fs;
use std::io::Write;
use std::path::Path;

use pptlab::correlate::{self, MultiTimeObservable};
use pptlab::memory;
use pptlab::oqe::{maximally_entangled, schmidt_state};
use pptlab::ppt::{self, InitialLeg};
use pptlab::tomography::{
    self, DisentangleOptions, EntangledOptions, FitOptions, MeasurementOracle, OracleMode,
    ReconstructionReport, SamplingConfig,
};
use pptlab::{CMatrix, Error, OqeModel, PptMps};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::args::{
    BuildArgs, Cli, Command, ComplexityArgs, CorrelateArgs, EntangledArgs, FitArgs, Format, LegArg,
    ModelArgs, PredictArgs, RelaxationArgs, TomographArgs,
};

/// Why a subcommand stopped; maps onto the process exit code.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    NotConverged(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::NotConverged(_) => 2,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::NotConverged(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_convergence() {
            Failure::NotConverged(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

/// Text to emit and whether the numerics converged.
struct Output {
    text: String,
    converged: bool,
}

impl Output {
    fn ok(text: String) -> Self {
        Self {
            text,
            converged: true,
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let format = cli.format.unwrap_or(match cli.command {
        Command::Figs2(_) => Format::Csv,
        _ => Format::Json,
    });
    if format == Format::Csv && !matches!(cli.command, Command::Figs2(_)) {
        return Err(invalid("format: csv output is only available for figs2"));
    }
    let out = match &cli.command {
        Command::Build(a) => build(a)?,
        Command::Complexity(a) => complexity(a)?,
        Command::Correlate(a) => correlate(a)?,
        Command::Figs2(a) => figs2(a, format)?,
        Command::Tomograph(a) => tomograph(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Predict(a) => predict(a)?,
        Command::ReconstructEntangled(a) => reconstruct_entangled(a)?,
    };
    emit(cli.out.as_deref(), &out.text)?;
    if out.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged(
            "numerical procedure did not converge; the result was written anyway".into(),
        ))
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    let mut body = text.to_string();
    if !body.ends_with('\n') {
        body.push('\n');
    }
    match path {
        Some(p) => fs::write(p, body)
            .map_err(|e| invalid(format!("out: cannot write {}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| invalid(format!("out: {e}"))),
    }
}

fn read(field: &str, path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| invalid(format!("{field}: cannot read {}: {e}", path.display())))
}

fn load<T>(
    field: &str,
    path: &Path,
    parse: impl Fn(&str) -> pptlab::Result<T>,
) -> Result<T, Failure> {
    parse(&read(field, path)?).map_err(|e| invalid(format!("{field}: {e}")))
}

fn json_text<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| invalid(e.to_string()))
}

/// Model from `--model`, or a Haar draw with the requested initial state.
fn model_from(a: &ModelArgs, steps: usize) -> Result<OqeModel, Failure> {
    if let Some(p) = &a.model {
        return load("model", p, OqeModel::from_json_str);
    }
    let seed = a
        .seed
        .ok_or_else(|| invalid("seed: --seed is required when drawing a random model"))?;
    if a.d < 2 {
        return Err(invalid(format!("d: need d >= 2, got {}", a.d)));
    }
    if a.env_dim < 1 {
        return Err(invalid("D: need D >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = OqeModel::random_haar(a.d, a.env_dim, !a.time_dependent, steps, &mut rng)?;
    let state = if a.maximally_entangled {
        if a.d != a.env_dim {
            return Err(invalid(format!(
                "maximally-entangled: needs d = D, got d = {} and D = {}",
                a.d, a.env_dim
            )));
        }
        maximally_entangled(a.d)
    } else if let Some(l) = &a.lambdas {
        let norm: f64 = l.iter().map(|x| x * x).sum();
        if (norm - 1.0).abs() > 1e-10 || l.iter().any(|x| *x < 0.0) {
            return Err(invalid(
                "lambdas: need nonnegative values with squares summing to 1",
            ));
        }
        schmidt_state(l, a.d, a.env_dim).map_err(|e| invalid(format!("lambdas: {e}")))?
    } else {
        return Ok(model);
    };
    Ok(model.with_initial_state(state)?)
}

fn positive(field: &str, v: usize) -> Result<(), Failure> {
    if v == 0 {
        return Err(invalid(format!("{field}: must be at least 1")));
    }
    Ok(())
}

fn build(a: &BuildArgs) -> Result<Output, Failure> {
    positive("N", a.n_steps)?;
    let model = model_from(&a.model, a.n_steps)?;
    let leg = match a.leg {
        LegArg::Absorbed => InitialLeg::Absorbed,
        LegArg::Vector => InitialLeg::Vector,
        LegArg::SystemLeg => InitialLeg::SystemLeg,
    };
    let mps = ppt::build_ppt_with(&model, a.n_steps, leg)?;
    if let Some(p) = &a.model_out {
        emit(Some(p), &model.to_json_string()?)?;
    }
    Ok(Output::ok(mps.to_json_string()?))
}

fn complexity(a: &ComplexityArgs) -> Result<Output, Failure> {
    if a.model.time_dependent {
        return Err(invalid(
            "time-dependent: the stationary complexity needs a time-independent model",
        ));
    }
    if a.alpha.iter().any(|x| !(*x > 0.0)) {
        return Err(invalid("alpha: orders must be positive"));
    }
    let model = model_from(&a.model, 1)?;
    let reports = a
        .alpha
        .iter()
        .map(|&al| memory::complexity_report(&model, al, a.tol).map(|r| r.to_json()))
        .collect::<pptlab::Result<Vec<_>>>()?;
    let text = if reports.len() == 1 {
        json_text(&reports[0])?
    } else {
        json_text(&reports)?
    };
    Ok(Output::ok(text))
}

fn correlate(a: &CorrelateArgs) -> Result<Output, Failure> {
    let mps = load("ppt", &a.ppt, PptMps::from_json_str)?;
    let obs = match &a.observable {
        Some(p) => load("observable", p, MultiTimeObservable::from_json_str)?,
        None => {
            positive("ppt steps", mps.len())?;
            MultiTimeObservable::single(mps.len(), CMatrix::identity(mps.q(), mps.q()))?
        }
    };
    let v = correlate::expectation(&mps, &obs).map_err(|e| invalid(format!("observable: {e}")))?;
    Ok(Output::ok(json_text(&json!({ "value": [v.re, v.im] }))?))
}

fn figs2(a: &RelaxationArgs, format: Format) -> Result<Output, Failure> {
    positive("seeds", a.seeds)?;
    if !(a.eta > 0.0) {
        return Err(invalid("eta: must be positive"));
    }
    let seeds: Vec<u64> = (0..a.seeds as u64).map(|k| a.seed_base + k).collect();
    let rows = memory::relaxation_experiment(a.d, a.env_dim, a.eta, a.nmax, &seeds, a.fresh)?;
    let text = match format {
        Format::Csv => {
            let mut buf = Vec::new();
            memory::write_relaxation_csv(&rows, &mut buf)?;
            String::from_utf8(buf).map_err(|e| invalid(e.to_string()))?
        }
        Format::Json => json_text(
            &rows
                .iter()
                .map(|r| {
                    json!({
                        "n": r.n,
                        "mean_infidelity": r.mean,
                        "median_infidelity": r.median,
                        "q25": r.q25,
                        "q75": r.q75,
                    })
                })
                .collect::<Vec<_>>(),
        )?,
    };
    Ok(Output::ok(text))
}

fn report_output(rep: &ReconstructionReport) -> Result<Output, Failure> {
    Ok(Output {
        text: rep.to_json_string()?,
        converged: rep.converged,
    })
}

fn tomograph(a: &TomographArgs) -> Result<Output, Failure> {
    positive("N", a.n_steps)?;
    positive("dbound", a.dbound)?;
    let model = model_from(&a.model, a.n_steps)?;
    let mode = match &a.sampling {
        None => OracleMode::Exact,
        Some(s) => OracleMode::Sampled(serde_json::from_str::<SamplingConfig>(s).map_err(|e| {
            invalid(format!(
                "sampling: expected {{\"shots\":int,\"seed\":int}}: {e}"
            ))
        })?),
    };
    let mut oracle = MeasurementOracle::new(model, a.n_steps, mode)?;
    let opts = DisentangleOptions {
        entangled_initial: a.entangled_initial,
    };
    let rep = tomography::disentangle_reconstruct(&mut oracle, a.n_steps, a.dbound, &opts)?;
    report_output(&rep)
}

fn fit(a: &FitArgs) -> Result<Output, Failure> {
    positive("D", a.env_dim)?;
    positive("restarts", a.restarts)?;
    let target = load("target", &a.target, PptMps::from_json_str)?;
    let opts = FitOptions {
        seed: a.seed,
        restarts: a.restarts,
        max_iter: a.max_iter,
        ..FitOptions::default()
    };
    let rep = tomography::variational_fit(&target, a.env_dim, a.time_independent, &opts)?;
    report_output(&rep)
}

fn predict(a: &PredictArgs) -> Result<Output, Failure> {
    positive("N", a.n_steps)?;
    let rep = load("report", &a.report, ReconstructionReport::from_json_str)?;
    let mps = tomography::predict_future(&rep, a.n_steps)?;
    Ok(Output::ok(mps.to_json_string()?))
}

fn reconstruct_entangled(a: &EntangledArgs) -> Result<Output, Failure> {
    positive("N", a.n_steps)?;
    positive("dbound", a.dbound)?;
    if a.model.time_dependent {
        return Err(invalid(
            "time-dependent: initial-state recovery needs a time-independent model",
        ));
    }
    let model = model_from(&a.model, a.n_steps)?;
    let mut oracle = MeasurementOracle::exact(model, a.n_steps)?;
    let opts = EntangledOptions {
        n_steps: a.n_steps,
        d_bound: a.dbound,
        time_independent: true,
        fit: FitOptions {
            seed: a.fit_seed,
            ..FitOptions::default()
        },
        outcome_loss: a.outcome_loss,
    };
    let rec = tomography::reconstruct_entangled_initial(&mut oracle, &opts)?;
    Ok(Output {
        text: json_text(&rec.to_json())?,
        converged: !rec.partial,
    })
}
