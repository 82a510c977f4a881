//! Environment-state evolution, stationary states and memory complexity.
//!
//! Environment density operators are stored in the left-action convention
//! `ρ[a', a] = Σ conj(v_{a'}) v_a`, the transpose of the usual density matrix.
//! Spectra, entropies and fidelities are unaffected by the transposition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oqe::{self, OqeModel};
use crate::ppt::{self, PptMps};
use crate::tensor::{self, cr, CMatrix, ComplexTensor, MatrixMap, C64};

pub const DENSITY_TOL: f64 = 1e-10;
/// Eigenvalues below this are treated as exact zeros in entropies.
pub const EIGEN_FLOOR: f64 = 1e-14;
/// Superoperators up to this dimension are stored densely.
const DENSE_STORE_LIMIT: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvDensity(CMatrix);

impl EnvDensity {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "density of shape {:?}",
                m.shape()
            )));
        }
        let herm = tensor::max_abs(&(&m - m.adjoint()));
        if herm > DENSITY_TOL {
            return Err(Error::Validation(format!(
                "density not Hermitian ({herm:.3e})"
            )));
        }
        let tr = tensor::trace(&m);
        if (tr - cr(1.0)).norm() > DENSITY_TOL {
            return Err(Error::Validation(format!(
                "density trace {tr} differs from 1"
            )));
        }
        let min = tensor::eigh(&m).0.last().copied().unwrap_or(0.0);
        if min < -DENSITY_TOL {
            return Err(Error::Validation(format!(
                "density has eigenvalue {min:.3e}"
            )));
        }
        Ok(Self(m))
    }

    /// Hermitizes and renormalizes the trace without further checks.
    pub fn normalized(m: &CMatrix) -> Result<Self> {
        let h = tensor::hermitize(m);
        let tr = tensor::trace(&h).re;
        if !(tr.abs() > 0.0) {
            return Err(Error::DegenerateState);
        }
        Ok(Self(h / cr(tr)))
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        Self(CMatrix::identity(dim, dim) / cr(dim as f64))
    }

    /// State of a unit vector `v` in the left-action convention.
    pub fn from_vector(v: &[C64]) -> Result<Self> {
        let col = CMatrix::from_column_slice(v.len(), 1, v);
        Self::normalized(&(col.conjugate() * col.transpose()))
    }

    /// Ordinary density matrix `ρ_phys`, stored transposed.
    pub fn from_physical(rho: &CMatrix) -> Result<Self> {
        Self::new(rho.transpose())
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        tensor::eigh(&self.0).0
    }
}

/// `E = Σ_σ conj(B^σ) ⊗ B^σ` of one site, with its Kraus-like matrices.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub dl: usize,
    pub dr: usize,
    /// `None` for a uniform (time-independent) transfer matrix.
    pub site_index: Option<usize>,
    kraus: Vec<CMatrix>,
    dense: Option<CMatrix>,
}

impl TransferMatrix {
    pub fn from_site(site: &ComplexTensor, site_index: Option<usize>) -> Self {
        let kraus = ppt::site_kraus(site);
        let (dl, dr) = kraus[0].shape();
        let dense = (dl * dr <= DENSE_STORE_LIMIT).then(|| dense_transfer(&kraus));
        Self {
            dl,
            dr,
            site_index,
            kraus,
            dense,
        }
    }

    pub fn kraus(&self) -> &[CMatrix] {
        &self.kraus
    }

    /// `E[(a'·Dl + a), (b'·Dr + b)] = Σ_σ conj(B^σ[a',b']) B^σ[a,b]`.
    pub fn dense(&self) -> CMatrix {
        self.dense
            .clone()
            .unwrap_or_else(|| dense_transfer(&self.kraus))
    }

    /// Left action `ρ ↦ Σ_σ B^σ† ρ B^σ`.
    pub fn apply_left(&self, rho: &CMatrix) -> CMatrix {
        ppt::apply_left(&self.kraus, rho)
    }

    /// Right action `r ↦ Σ_σ B^σ r B^σ†`.
    pub fn apply_right(&self, r: &CMatrix) -> CMatrix {
        ppt::apply_right(&self.kraus, r)
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        Ok(tensor::eigenvalues(&self.dense())?
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max))
    }
}

fn dense_transfer(kraus: &[CMatrix]) -> CMatrix {
    let (dl, dr) = kraus[0].shape();
    let mut e = CMatrix::zeros(dl * dl, dr * dr);
    for b in kraus {
        let bc = b.conjugate();
        e += bc.kronecker(b);
    }
    e
}

impl MatrixMap for TransferMatrix {
    fn dim(&self) -> usize {
        self.dl
    }

    fn apply(&self, x: &CMatrix) -> CMatrix {
        self.apply_left(x)
    }

    fn superoperator(&self) -> Option<CMatrix> {
        // vec_out = E^T vec_in for row-major flattening
        (self.dl == self.dr).then(|| self.dense().transpose())
    }
}

pub fn transfer_matrix(site: &ComplexTensor) -> TransferMatrix {
    TransferMatrix::from_site(site, None)
}

/// Uniform transfer matrix of a time-independent model together with the
/// initial environment state, both on the effective environment.
pub fn uniform_transfer(model: &OqeModel) -> Result<(TransferMatrix, EnvDensity)> {
    if !model.time_independent() {
        return Err(Error::Validation(
            "stationary analysis needs a time-independent model".into(),
        ));
    }
    let mps = ppt::build_ppt_with(model, 2, ppt::InitialLeg::Vector)?;
    let k = mps.initial().expect("vector boundary").clone();
    let rho0 = EnvDensity::normalized(&(k.adjoint() * k))?;
    Ok((TransferMatrix::from_site(&mps.sites()[0], None), rho0))
}

/// Environment state after the first `n` transfer actions of `mps`, starting from `rho0`.
pub fn evolve_env(rho0: &EnvDensity, mps: &PptMps, n: usize) -> Result<EnvDensity> {
    if n > mps.len() {
        return Err(Error::Range(format!("n = {n} exceeds N = {}", mps.len())));
    }
    let mut rho = rho0.0.clone();
    for k in 0..n {
        let kraus = mps.kraus(k);
        if kraus[0].nrows() != rho.nrows() {
            return Err(Error::Dimension(format!(
                "site {} expects an environment of dimension {}, got {}",
                k + 1,
                kraus[0].nrows(),
                rho.nrows()
            )));
        }
        rho = ppt::apply_left(&kraus, &rho);
    }
    EnvDensity::normalized(&rho)
}

/// Uhlmann fidelity `(tr √(√A B √A))²`.
pub fn fidelity(a: &CMatrix, b: &CMatrix) -> f64 {
    let sa = tensor::psd_sqrt(a);
    let m = &sa * b * &sa;
    let (vals, _) = tensor::eigh(&m);
    let s: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    (s * s).min(1.0)
}

#[derive(Clone, Debug)]
pub struct Stationary {
    pub state: EnvDensity,
    pub steps: usize,
    pub degenerate: bool,
}

/// Stationary environment state of a uniform transfer matrix reached from `rho0`.
///
/// A non-degenerate dominant eigenvalue gives the fixed point directly. Otherwise
/// the fixed point depends on `rho0` and is found by repeated squaring of the
/// superoperator until successive iterates agree to fidelity `1 - tol`.
pub fn stationary_state(
    e: &TransferMatrix,
    rho0: &EnvDensity,
    tol: f64,
    max_iter: usize,
) -> Result<Stationary> {
    if e.dl != e.dr || rho0.dim() != e.dl {
        return Err(Error::Dimension(
            "transfer matrix and state dimensions differ".into(),
        ));
    }
    let eig = tensor::dominant_left_eigs(e, tol.min(1e-10), max_iter)?;
    if !eig.degenerate {
        let m = &eig.eigenmatrix / tensor::trace(&eig.eigenmatrix);
        return Ok(Stationary {
            state: EnvDensity::normalized(&m)?,
            steps: eig.iterations,
            degenerate: false,
        });
    }
    let dim = e.dl;
    let vec0 = nalgebra::DVector::from_vec(tensor::vec_rows(rho0.matrix()));
    let unvec = |v: &nalgebra::DVector<C64>| tensor::unvec_rows(v.as_slice(), dim, dim);
    if dim * dim <= tensor::DENSE_EIG_LIMIT {
        let mut p = e.dense().transpose();
        let mut prev = unvec(&(&p * &vec0));
        let mut steps = 1usize;
        let mut residual = f64::INFINITY;
        for _ in 0..64 {
            p = &p * &p;
            steps = steps.saturating_mul(2);
            let cur = unvec(&(&p * &vec0));
            residual = 1.0 - fidelity(&normalize_trace(&prev), &normalize_trace(&cur));
            if residual < tol {
                return Ok(Stationary {
                    state: EnvDensity::normalized(&cur)?,
                    steps,
                    degenerate: true,
                });
            }
            prev = cur;
        }
        return Err(Error::Convergence {
            iterations: 64,
            residual,
        });
    }
    let mut rho = rho0.0.clone();
    let mut residual = f64::INFINITY;
    for step in 1..=max_iter {
        let next = e.apply_left(&rho);
        residual = 1.0 - fidelity(&normalize_trace(&rho), &normalize_trace(&next));
        rho = next;
        if residual < tol {
            return Ok(Stationary {
                state: EnvDensity::normalized(&rho)?,
                steps: step,
                degenerate: true,
            });
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        residual,
    })
}

fn normalize_trace(m: &CMatrix) -> CMatrix {
    let h = tensor::hermitize(m);
    let t = tensor::trace(&h).re;
    h / cr(t)
}

pub fn stationary_from_model(model: &OqeModel, tol: f64) -> Result<Stationary> {
    let (e, rho0) = uniform_transfer(model)?;
    stationary_state(&e, &rho0, tol, 100_000)
}

/// Rényi entropy in bits of a probability vector; `alpha = 1` is Shannon.
pub fn renyi_entropy(probs: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let p: Vec<f64> = probs.iter().copied().filter(|&x| x > EIGEN_FLOOR).collect();
    let v = if (alpha - 1.0).abs() < 1e-12 {
        -p.iter().map(|&x| x * x.log2()).sum::<f64>()
    } else {
        p.iter().map(|&x| x.powf(alpha)).sum::<f64>().log2() / (1.0 - alpha)
    };
    Ok(v.max(0.0))
}

/// Memory complexity `C^α` of an environment state, in bits.
pub fn renyi_complexity(rho: &EnvDensity, alpha: f64) -> Result<f64> {
    renyi_entropy(&rho.eigenvalues(), alpha)
}

#[derive(Clone, Debug)]
pub struct ComplexityReport {
    pub alpha: f64,
    pub value_bits: f64,
    pub predicted_bits: Option<f64>,
    pub stationary: EnvDensity,
    pub degenerate: bool,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReportJson {
    pub alpha: f64,
    pub value_bits: f64,
    pub predicted_bits: Option<f64>,
    pub degenerate: bool,
    pub steps: usize,
}

impl ComplexityReport {
    pub fn to_json(&self) -> ComplexityReportJson {
        ComplexityReportJson {
            alpha: self.alpha,
            value_bits: self.value_bits,
            predicted_bits: self.predicted_bits,
            degenerate: self.degenerate,
            steps: self.steps,
        }
    }
}

/// Prediction for the memory complexity of a time-independent model: `log2 D`
/// for separable initial states, plus the Rényi entropy of the initial system
/// state when it is entangled with the environment.
pub fn predicted_complexity(model: &OqeModel, alpha: f64) -> Result<f64> {
    let base = (model.env_dim() as f64).log2();
    if !model.is_entangled() {
        return Ok(base);
    }
    let sf = oqe::schmidt_decompose(model.initial_state(), model.d(), model.env_dim())?;
    let probs: Vec<f64> = sf.lambdas.iter().map(|l| l * l).collect();
    Ok(renyi_entropy(&probs, alpha)? + base)
}

pub fn complexity_report(model: &OqeModel, alpha: f64, tol: f64) -> Result<ComplexityReport> {
    let st = stationary_from_model(model, tol)?;
    Ok(ComplexityReport {
        alpha,
        value_bits: renyi_complexity(&st.state, alpha)?,
        predicted_bits: Some(predicted_complexity(model, alpha)?),
        stationary: st.state,
        degenerate: st.degenerate,
        steps: st.steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityCheck {
    pub measured: f64,
    pub predicted: f64,
    pub pass: bool,
    /// True when the separable branch is not applicable because the dominant
    /// eigenvalue of the transfer matrix is degenerate.
    pub skipped: bool,
    pub degenerate: bool,
}

pub const COMPLEXITY_TOL: f64 = 1e-6;

pub fn complexity_check(model: &OqeModel, alpha: f64) -> Result<ComplexityCheck> {
    let rep = complexity_report(model, alpha, 1e-12)?;
    let predicted = rep.predicted_bits.unwrap_or(f64::NAN);
    let skipped = !model.is_entangled() && rep.degenerate;
    let pass = !skipped && (rep.value_bits - predicted).abs() < COMPLEXITY_TOL;
    Ok(ComplexityCheck {
        measured: rep.value_bits,
        predicted,
        pass,
        skipped,
        degenerate: rep.degenerate,
    })
}

/// Smallest `n` with `F(ρ_n, ρ_st) > 1 - tol`.
pub fn stationarity_onset(model: &OqeModel, tol: f64, max_steps: usize) -> Result<usize> {
    let (e, rho0) = uniform_transfer(model)?;
    let st = stationary_state(&e, &rho0, tol.min(1e-12), 100_000)?;
    let mut rho = rho0.0.clone();
    let mut residual = f64::INFINITY;
    for n in 0..=max_steps {
        residual = 1.0 - fidelity(&normalize_trace(&rho), st.state.matrix());
        if residual < tol {
            return Ok(n);
        }
        rho = e.apply_left(&rho);
    }
    Err(Error::Convergence {
        iterations: max_steps,
        residual,
    })
}

/// Infidelity to `I/D` of the environment state after each of `0..=n_max`
/// steps of a random near-identity evolution `exp(iηH)`.
///
/// With `fresh` a new `H` is drawn at every step; otherwise one `H` is reused.
pub fn relaxation_trajectory(
    d: usize,
    env_dim: usize,
    eta: f64,
    n_max: usize,
    seed: u64,
    fresh: bool,
    rho0: Option<&EnvDensity>,
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = d * env_dim;
    let mut rho = match rho0 {
        Some(r) => r.0.clone(),
        None => EnvDensity::from_vector(&oqe::basis_vector(env_dim, 0))?.0,
    };
    if rho.nrows() != env_dim {
        return Err(Error::Dimension("initial state does not match D".into()));
    }
    let mixed = CMatrix::identity(env_dim, env_dim) / cr(env_dim as f64);
    let step_map = |h: &CMatrix| -> Result<Vec<CMatrix>> {
        let u = tensor::expi_hermitian(h, eta);
        Ok(ppt::site_kraus(&ppt::site_from_unitary(&u, d, env_dim)?))
    };
    let mut kraus = step_map(&oqe::random_hermitian(dim, &mut rng))?;
    let mut out = Vec::with_capacity(n_max + 1);
    out.push(1.0 - fidelity(&rho, &mixed));
    for _ in 0..n_max {
        rho = ppt::apply_left(&kraus, &rho);
        out.push((1.0 - fidelity(&normalize_trace(&rho), &mixed)).max(0.0));
        if fresh {
            kraus = step_map(&oqe::random_hermitian(dim, &mut rng))?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxationRow {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Ensemble statistics of [`relaxation_trajectory`] over seeds, one row per step.
pub fn relaxation_experiment(
    d: usize,
    env_dim: usize,
    eta: f64,
    n_max: usize,
    seeds: &[u64],
    fresh: bool,
) -> Result<Vec<RelaxationRow>> {
    if seeds.is_empty() {
        return Err(Error::Validation("at least one seed is required".into()));
    }
    let runs: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&s| relaxation_trajectory(d, env_dim, eta, n_max, s, fresh, None))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..=n_max)
        .map(|n| {
            let mut col: Vec<f64> = runs.iter().map(|r| r[n]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.sort_by(|a, b| a.total_cmp(b));
            RelaxationRow {
                n,
                mean,
                median: quantile(&col, 0.5),
                q25: quantile(&col, 0.25),
                q75: quantile(&col, 0.75),
            }
        })
        .collect())
}

pub const RELAXATION_HEADER: [&str; 5] =
    ["n", "mean_infidelity", "median_infidelity", "q25", "q75"];

pub fn write_relaxation_csv<W: std::io::Write>(rows: &[RelaxationRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RELAXATION_HEADER)?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            format!("{:.16e}", r.mean),
            format!("{:.16e}", r.median),
            format!("{:.16e}", r.q25),
            format!("{:.16e}", r.q75),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_relaxation_csv<R: std::io::Read>(input: R) -> Result<Vec<RelaxationRow>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let num = |k: usize| -> Result<f64> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Validation(format!("bad CSV field {k}")))
        };
        rows.push(RelaxationRow {
            n: num(0)? as usize,
            mean: num(1)?,
            median: num(2)?,
            q25: num(3)?,
            q75: num(4)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oqe::{maximally_entangled, random_haar_unitary, schmidt_state};
    use crate::tensor::c;
    use rand::Rng;

    fn haar(d: usize, env: usize, seed: u64) -> OqeModel {
        OqeModel::random_haar(d, env, true, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_density(dim: usize, rng: &mut ChaCha8Rng) -> CMatrix {
        let g = oqe::gaussian_matrix(dim, dim, rng);
        let m = &g * g.adjoint();
        let t = tensor::trace(&m);
        m / t
    }

    #[test]
    fn trivial_environment_transfer_is_one() {
        let u = random_haar_unitary(2, &mut ChaCha8Rng::seed_from_u64(1));
        let e = transfer_matrix(&ppt::site_from_unitary(&u, 2, 1).unwrap());
        let dense = e.dense();
        assert_eq!(dense.shape(), (1, 1));
        assert!((dense[(0, 0)] - cr(1.0)).norm() < 1e-12);
    }

    #[test]
    fn maximally_mixed_is_two_sided_fixed_point() {
        let m = haar(2, 2, 2);
        let e = transfer_matrix(&ppt::site_from_unitary(&m.unitaries()[0], 2, 2).unwrap());
        let half = CMatrix::identity(2, 2) * cr(0.5);
        assert!(tensor::max_abs(&(e.apply_left(&half) - &half)) < 1e-12);
        assert!(tensor::max_abs(&(e.apply_right(&half) - &half)) < 1e-12);
    }

    #[test]
    fn dense_and_functional_actions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..3 * 4 * 3)
            .map(|_| c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let site = ComplexTensor::new(vec![3, 2, 2, 3], data).unwrap();
        let e = transfer_matrix(&site);
        let rho = oqe::gaussian_matrix(3, 3, &mut rng);
        let v = nalgebra::DVector::from_vec(tensor::vec_rows(&rho));
        let dense = tensor::unvec_rows((e.dense().transpose() * v).as_slice(), 3, 3);
        assert!(tensor::max_abs(&(dense - e.apply_left(&rho))) < 1e-12);
    }

    #[test]
    fn dominant_eig_matches_full_spectrum() {
        let m = haar(2, 2, 4);
        let e = transfer_matrix(&ppt::site_from_unitary(&m.unitaries()[0], 2, 2).unwrap());
        let eig = tensor::dominant_left_eigs(&e, 1e-12, 1000).unwrap();
        assert!((eig.eigenvalue - cr(1.0)).norm() < 1e-10);
        let mut spec: Vec<f64> = tensor::eigenvalues(&e.dense())
            .unwrap()
            .iter()
            .map(|z| z.norm())
            .collect();
        spec.sort_by(|a, b| b.total_cmp(a));
        assert!((spec[0] - eig.eigenvalue.norm()).abs() < 1e-10);
    }

    #[test]
    fn evolve_zero_steps_is_identity() {
        let m = haar(2, 2, 5);
        let mps = ppt::build_ppt_with(&m, 3, ppt::InitialLeg::Vector).unwrap();
        let rho0 = EnvDensity::from_vector(&[cr(0.6), c(0.0, 0.8)]).unwrap();
        assert_eq!(evolve_env(&rho0, &mps, 0).unwrap(), rho0);
        assert!(matches!(evolve_env(&rho0, &mps, 4), Err(Error::Range(_))));
    }

    #[test]
    fn evolve_matches_dense_matrix_power() {
        let m = haar(2, 3, 6);
        let mps = ppt::build_ppt_with(&m, 6, ppt::InitialLeg::Vector).unwrap();
        let rho0 = EnvDensity::from_vector(&[cr(0.6), cr(0.0), c(0.0, 0.8)]).unwrap();
        let e = transfer_matrix(&mps.sites()[0]).dense().transpose();
        let mut v = nalgebra::DVector::from_vec(tensor::vec_rows(rho0.matrix()));
        for _ in 0..6 {
            v = &e * v;
        }
        let oracle = tensor::unvec_rows(v.as_slice(), 3, 3);
        let got = evolve_env(&rho0, &mps, 6).unwrap();
        assert!(tensor::max_abs(&(got.matrix() - oracle)) < 1e-10);
    }

    #[test]
    fn long_evolution_reaches_maximally_mixed() {
        let m = haar(2, 2, 7);
        let (e, rho0) = uniform_transfer(&m).unwrap();
        let mut rho = rho0.matrix().clone();
        for _ in 0..200 {
            rho = e.apply_left(&rho);
        }
        let f = fidelity(&rho, &(CMatrix::identity(2, 2) * cr(0.5)));
        assert!(1.0 - f < 1e-8, "{}", 1.0 - f);
    }

    #[test]
    fn stationary_separable_is_maximally_mixed() {
        let st = stationary_from_model(&haar(2, 2, 8), 1e-12).unwrap();
        assert!(!st.degenerate);
        let half = CMatrix::identity(2, 2) * cr(0.5);
        assert!(tensor::max_abs(&(st.state.matrix() - half)) < 1e-8);
    }

    #[test]
    fn stationary_maximally_entangled_is_quarter_identity() {
        let m = haar(2, 2, 9)
            .with_initial_state(maximally_entangled(2))
            .unwrap();
        let st = stationary_from_model(&m, 1e-12).unwrap();
        assert!(st.degenerate);
        let q = CMatrix::identity(4, 4) * cr(0.25);
        assert!(tensor::max_abs(&(st.state.matrix() - q)) < 1e-8);
    }

    #[test]
    fn stationary_uneven_entanglement_spectrum() {
        let psi = schmidt_state(&[0.9f64.sqrt(), 0.1f64.sqrt()], 2, 2).unwrap();
        let m = haar(2, 2, 10).with_initial_state(psi).unwrap();
        let st = stationary_from_model(&m, 1e-12).unwrap();
        // dense power-limit oracle
        let (e, rho0) = uniform_transfer(&m).unwrap();
        let mut rho = rho0.matrix().clone();
        for _ in 0..2000 {
            rho = e.apply_left(&rho);
        }
        let mut oracle = tensor::eigh(&rho).0;
        oracle.sort_by(|a, b| b.total_cmp(a));
        let got = st.state.eigenvalues();
        for (g, (o, expect)) in got.iter().zip(oracle.iter().zip([0.45, 0.45, 0.05, 0.05])) {
            assert!((g - expect).abs() < 1e-8);
            assert!((g - o).abs() < 1e-8);
        }
    }

    #[test]
    fn renyi_examples() {
        let half = EnvDensity::maximally_mixed(2);
        assert!((renyi_complexity(&half, 2.0).unwrap() - 1.0).abs() < 1e-14);
        let pure = EnvDensity::from_vector(&[cr(0.6), cr(0.8)]).unwrap();
        for a in [0.5, 1.0, 2.0, 5.0] {
            assert!(renyi_complexity(&pure, a).unwrap().abs() < 1e-12);
        }
        for dim in [2usize, 3, 5] {
            let m = EnvDensity::maximally_mixed(dim);
            for a in [0.5, 1.0, 2.0] {
                assert!((renyi_complexity(&m, a).unwrap() - (dim as f64).log2()).abs() < 1e-12);
            }
        }
        assert!(matches!(
            renyi_complexity(&half, 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn complexity_check_examples() {
        let r = complexity_check(&haar(2, 3, 11), 2.0).unwrap();
        assert!((r.predicted - 3f64.log2()).abs() < 1e-12);
        assert!(r.pass, "{r:?}");

        let m = haar(2, 2, 12)
            .with_initial_state(maximally_entangled(2))
            .unwrap();
        let r = complexity_check(&m, 2.0).unwrap();
        assert!((r.predicted - 2.0).abs() < 1e-12);
        assert!(r.pass, "{r:?}");

        let psi = schmidt_state(&[0.9f64.sqrt(), 0.1f64.sqrt()], 2, 2).unwrap();
        let m = haar(2, 2, 13).with_initial_state(psi).unwrap();
        let r = complexity_check(&m, 1.0).unwrap();
        let h = -0.9 * 0.9f64.log2() - 0.1 * 0.1f64.log2();
        assert!((r.predicted - (h + 1.0)).abs() < 1e-12);
        assert!((r.predicted - 1.469).abs() < 1e-3);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn complexity_check_skips_degenerate_separable() {
        // identity coupling: E is the identity channel on the environment
        let m = OqeModel::uniform(
            CMatrix::identity(4, 4),
            &oqe::basis_vector(2, 0),
            &oqe::basis_vector(2, 0),
        )
        .unwrap();
        let r = complexity_check(&m, 1.0).unwrap();
        assert!(r.skipped && !r.pass);
    }

    #[test]
    fn onset_trivial_environment() {
        let u = random_haar_unitary(2, &mut ChaCha8Rng::seed_from_u64(1));
        let m = OqeModel::uniform(u, &oqe::basis_vector(2, 0), &oqe::basis_vector(1, 0)).unwrap();
        assert_eq!(stationarity_onset(&m, 1e-8, 10).unwrap(), 0);
    }

    #[test]
    fn onset_implies_shift_invariant_partial_process_tensors() {
        let m = haar(2, 2, 14);
        let tol = 1e-8;
        let n0 = stationarity_onset(&m, tol, 10_000).unwrap();
        let mps = ppt::build_ppt(&m, n0 + 4).unwrap();
        let a = ppt::partial_process_tensor(&mps, n0 + 1, n0 + 3).unwrap();
        let b = ppt::partial_process_tensor(&mps, n0 + 2, n0 + 4).unwrap();
        let diff = tensor::max_abs(&(a - b));
        // F > 1 - tol bounds the trace distance of the environment states by √tol,
        // and the three-site reduced states inherit that bound
        assert!(diff < tol.sqrt(), "diff {diff:.3e} at N0 = {n0}");

        let tight = 1e-14;
        let n1 = stationarity_onset(&m, tight, 10_000).unwrap();
        let mps = ppt::build_ppt(&m, n1 + 4).unwrap();
        let a = ppt::partial_process_tensor(&mps, n1 + 1, n1 + 3).unwrap();
        let b = ppt::partial_process_tensor(&mps, n1 + 2, n1 + 4).unwrap();
        assert!(tensor::max_abs(&(a - b)) < 1e-7, "at N0 = {n1}");
    }

    #[test]
    fn relaxation_starts_at_zero_from_mixed() {
        let mixed = EnvDensity::maximally_mixed(2);
        let t = relaxation_trajectory(2, 2, 0.01, 5, 1, false, Some(&mixed)).unwrap();
        assert!(t[0].abs() < 1e-14);
    }

    #[test]
    fn relaxation_csv_roundtrip() {
        let rows = relaxation_experiment(2, 2, 0.05, 4, &[0, 1, 2], false).unwrap();
        let mut buf = Vec::new();
        write_relaxation_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("n,mean_infidelity,median_infidelity,q25,q75\n"));
        let back = read_relaxation_csv(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.25) - 1.75).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn spectral_radius_bounded(seed in 0u64..100_000, env in 1usize..5) {
                let m = haar(2, env, seed);
                let e = transfer_matrix(&ppt::site_from_unitary(&m.unitaries()[0], 2, env).unwrap());
                prop_assert!(e.spectral_radius().unwrap() <= 1.0 + 1e-10);
                let mixed = CMatrix::identity(env, env) / cr(env as f64);
                prop_assert!(tensor::max_abs(&(e.apply_left(&mixed) - &mixed)) < 1e-10);
                prop_assert!(tensor::max_abs(&(e.apply_right(&mixed) - &mixed)) < 1e-10);
            }

            #[test]
            fn left_action_preserves_trace_and_positivity(seed in 0u64..100_000) {
                let m = haar(2, 3, seed);
                let e = transfer_matrix(&ppt::site_from_unitary(&m.unitaries()[0], 2, 3).unwrap());
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
                let rho = random_density(3, &mut rng);
                let out = e.apply_left(&rho);
                prop_assert!((tensor::trace(&out) - tensor::trace(&rho)).norm() < 1e-10);
                prop_assert!(tensor::eigh(&out).0.iter().all(|&v| v >= -1e-10));
            }

            #[test]
            fn renyi_monotone_in_alpha(seed in 0u64..100_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let rho = EnvDensity::normalized(&random_density(4, &mut rng)).unwrap();
                let grid = [0.25, 0.5, 0.9, 1.0, 1.5, 2.0, 3.0, 8.0];
                let vals: Vec<f64> = grid.iter().map(|&a| renyi_complexity(&rho, a).unwrap()).collect();
                for w in vals.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-12);
                }
            }
        }
    }
}
