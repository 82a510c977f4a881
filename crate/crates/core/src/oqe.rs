//! Open-quantum-evolution models: a `d`-level system coupled to a `D`-level
//! environment through step unitaries acting on the joint space.
//!
//! Joint indices are system-major: basis state `|s⟩|e⟩` has index `s * D + e`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cserde::{self, Pair};
use crate::error::{Error, Result};
use crate::tensor::{self, c, cr, CMatrix, C64};

pub const UNITARITY_TOL: f64 = 1e-10;
pub const NORM_TOL: f64 = 1e-12;
/// Second Schmidt coefficient above which a joint state counts as entangled.
pub const ENTANGLEMENT_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct OqeModel {
    d: usize,
    env_dim: usize,
    time_independent: bool,
    unitaries: Vec<CMatrix>,
    initial_state: Vec<C64>,
    entangled: bool,
}

impl OqeModel {
    pub fn new(
        d: usize,
        env_dim: usize,
        time_independent: bool,
        unitaries: Vec<CMatrix>,
        initial_state: Vec<C64>,
    ) -> Result<Self> {
        if d < 2 {
            return Err(Error::Validation(format!(
                "system dimension d = {d}, need d >= 2"
            )));
        }
        if env_dim < 1 {
            return Err(Error::Validation(
                "environment dimension D must be >= 1".into(),
            ));
        }
        if unitaries.is_empty() {
            return Err(Error::Validation("model needs at least one unitary".into()));
        }
        if time_independent && unitaries.len() != 1 {
            return Err(Error::Validation(format!(
                "time-independent model must store exactly one unitary, got {}",
                unitaries.len()
            )));
        }
        let n = d * env_dim;
        for (k, u) in unitaries.iter().enumerate() {
            if u.shape() != (n, n) {
                return Err(Error::Validation(format!(
                    "unitary {} has shape {:?}, expected {n}x{n}",
                    k + 1,
                    u.shape()
                )));
            }
            let r = tensor::unitarity_residual(u);
            if !(r < UNITARITY_TOL) {
                return Err(Error::Validation(format!(
                    "unitary {} violates U^dag U = I by {r:.3e}",
                    k + 1
                )));
            }
        }
        if initial_state.len() != n {
            return Err(Error::Validation(format!(
                "initial state has length {}, expected {n}",
                initial_state.len()
            )));
        }
        let norm = initial_state
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt();
        if !((norm - 1.0).abs() < NORM_TOL) {
            return Err(Error::Validation(format!(
                "initial state norm {norm:.15} differs from 1"
            )));
        }
        let entangled = schmidt_values(&initial_state, d, env_dim)
            .get(1)
            .is_some_and(|&s| s > ENTANGLEMENT_TOL);
        Ok(Self {
            d,
            env_dim,
            time_independent,
            unitaries,
            initial_state,
            entangled,
        })
    }

    /// Time-independent model with a product initial state `sys ⊗ env`.
    pub fn uniform(u: CMatrix, sys: &[C64], env: &[C64]) -> Result<Self> {
        let d = sys.len();
        let env_dim = env.len();
        Self::new(d, env_dim, true, vec![u], kron_vec(sys, env))
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn env_dim(&self) -> usize {
        self.env_dim
    }

    pub fn time_independent(&self) -> bool {
        self.time_independent
    }

    pub fn unitaries(&self) -> &[CMatrix] {
        &self.unitaries
    }

    pub fn initial_state(&self) -> &[C64] {
        &self.initial_state
    }

    pub fn is_entangled(&self) -> bool {
        self.entangled
    }

    /// Number of steps the model can drive, `None` when unbounded.
    pub fn max_steps(&self) -> Option<usize> {
        (!self.time_independent).then_some(self.unitaries.len())
    }

    /// Unitary of step `n` (1-based).
    pub fn unitary(&self, n: usize) -> Result<&CMatrix> {
        if n == 0 {
            return Err(Error::Range("steps are numbered from 1".into()));
        }
        if self.time_independent {
            return Ok(&self.unitaries[0]);
        }
        self.unitaries.get(n - 1).ok_or_else(|| {
            Error::Range(format!(
                "step {n} requested from a model with {} steps",
                self.unitaries.len()
            ))
        })
    }

    /// Effective environment dimension seen by the process: `d * D` when the
    /// initial state is entangled, `D` otherwise.
    pub fn effective_env_dim(&self) -> usize {
        if self.entangled {
            self.d * self.env_dim
        } else {
            self.env_dim
        }
    }

    pub fn with_initial_state(&self, state: Vec<C64>) -> Result<Self> {
        Self::new(
            self.d,
            self.env_dim,
            self.time_independent,
            self.unitaries.clone(),
            state,
        )
    }

    /// Restricts a time-dependent model to its first `n` steps.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if self.time_independent {
            return Ok(self.clone());
        }
        if n == 0 || n > self.unitaries.len() {
            return Err(Error::Range(format!(
                "cannot truncate {} steps to {n}",
                self.unitaries.len()
            )));
        }
        Self::new(
            self.d,
            self.env_dim,
            false,
            self.unitaries[..n].to_vec(),
            self.initial_state.clone(),
        )
    }

    /// Re-expresses the model on a larger environment through an isometry
    /// `s` (`D' x D`, `s^† s = I`). The complement of the image evolves trivially.
    pub fn embed_environment(&self, s: &CMatrix) -> Result<Self> {
        let (big, small) = s.shape();
        if small != self.env_dim || big < small {
            return Err(Error::Dimension(format!(
                "isometry shape {:?} incompatible with D = {}",
                s.shape(),
                self.env_dim
            )));
        }
        if tensor::unitarity_residual(s) > UNITARITY_TOL {
            return Err(Error::Validation(
                "environment map is not an isometry".into(),
            ));
        }
        let id = CMatrix::identity(self.d, self.d);
        let lift = id.kronecker(s);
        let proj = id.kronecker(&(CMatrix::identity(big, big) - s * s.adjoint()));
        let unitaries = self
            .unitaries
            .iter()
            .map(|u| &lift * u * lift.adjoint() + &proj)
            .collect();
        let psi = nalgebra::DVector::from_column_slice(&self.initial_state);
        let state = (&lift * psi).iter().copied().collect();
        Self::new(self.d, big, self.time_independent, unitaries, state)
    }

    /// Random model with Haar step unitaries and the product initial state `|0⟩|0⟩`.
    pub fn random_haar<R: Rng + ?Sized>(
        d: usize,
        env_dim: usize,
        time_independent: bool,
        steps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let count = if time_independent { 1 } else { steps.max(1) };
        let unitaries = (0..count)
            .map(|_| random_haar_unitary(d * env_dim, rng))
            .collect();
        let mut psi = vec![C64::default(); d * env_dim];
        psi[0] = cr(1.0);
        Self::new(d, env_dim, time_independent, unitaries, psi)
    }

    pub fn to_json(&self) -> OqeModelJson {
        OqeModelJson {
            d: self.d,
            env_dim: self.env_dim,
            time_independent: self.time_independent,
            unitaries: self.unitaries.iter().map(cserde::matrix_to_pairs).collect(),
            initial_state: cserde::to_pairs(&self.initial_state),
        }
    }

    pub fn from_json(doc: &OqeModelJson) -> Result<Self> {
        let n = doc.d * doc.env_dim;
        let unitaries = doc
            .unitaries
            .iter()
            .map(|u| cserde::matrix_from_pairs(u, n, n))
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            doc.d,
            doc.env_dim,
            doc.time_independent,
            unitaries,
            cserde::from_pairs(&doc.initial_state)?,
        )
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OqeModelJson {
    pub d: usize,
    #[serde(rename = "D")]
    pub env_dim: usize,
    pub time_independent: bool,
    pub unitaries: Vec<Vec<Pair>>,
    pub initial_state: Vec<Pair>,
}

/// Residual `max_n |T_n^† T_n - I|` of the step isometries built from raw
/// matrices, without requiring them to be unitary first.
///
/// `T_n` maps the incoming bond `α'` to the outgoing `(o, i, α)`, with entries
/// `U^{o,α}_{i,α'} / √d`.
pub fn check_isometry_of(unitaries: &[CMatrix], d: usize, env_dim: usize) -> f64 {
    let scale = 1.0 / d as f64;
    let mut worst = 0.0f64;
    for u in unitaries {
        let mut g = CMatrix::zeros(env_dim, env_dim);
        for a in 0..env_dim {
            for a2 in 0..env_dim {
                let mut acc = C64::default();
                for o in 0..d {
                    for i in 0..d {
                        for b in 0..env_dim {
                            let row = o * env_dim + b;
                            acc += u[(row, i * env_dim + a)].conj() * u[(row, i * env_dim + a2)];
                        }
                    }
                }
                g[(a, a2)] = acc * scale;
            }
        }
        let r = tensor::max_abs(&(g - CMatrix::identity(env_dim, env_dim)));
        worst = worst.max(r);
    }
    worst
}

pub fn kron_vec(a: &[C64], b: &[C64]) -> Vec<C64> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect()
}

pub fn basis_vector(dim: usize, k: usize) -> Vec<C64> {
    let mut v = vec![C64::default(); dim];
    v[k] = cr(1.0);
    v
}

/// `Σ_k |k⟩|k⟩ / √n` on an `n x n` joint space.
pub fn maximally_entangled(n: usize) -> Vec<C64> {
    let mut v = vec![C64::default(); n * n];
    let a = cr(1.0 / (n as f64).sqrt());
    for k in 0..n {
        v[k * n + k] = a;
    }
    v
}

/// `Σ_s λ_s |s⟩|s⟩` for the given Schmidt coefficients.
pub fn schmidt_state(lambdas: &[f64], d: usize, env_dim: usize) -> Result<Vec<C64>> {
    if lambdas.len() > d.min(env_dim) {
        return Err(Error::Dimension(format!(
            "{} Schmidt coefficients exceed min(d, D) = {}",
            lambdas.len(),
            d.min(env_dim)
        )));
    }
    let mut v = vec![C64::default(); d * env_dim];
    for (s, &l) in lambdas.iter().enumerate() {
        v[s * env_dim + s] = cr(l);
    }
    Ok(v)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c(re, im)
    })
}

/// Haar-random unitary from the QR decomposition of a complex Ginibre matrix.
pub fn random_haar_unitary<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    let g = gaussian_matrix(dim, dim, rng);
    tensor::qr_positive(&g).0
}

/// `(G + G^†) / 2` with independent standard-normal real and imaginary parts in `G`.
pub fn random_hermitian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> CMatrix {
    tensor::hermitize(&gaussian_matrix(dim, dim, rng))
}

/// `exp(i η H)` for a fresh random Hermitian `H`.
pub fn near_identity_unitary<R: Rng + ?Sized>(
    dim: usize,
    eta: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("eta must be positive, got {eta}")));
    }
    let h = random_hermitian(dim, rng);
    Ok(tensor::expi_hermitian(&h, eta))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchmidtForm {
    pub lambdas: Vec<f64>,
    pub sys_basis: Vec<Vec<C64>>,
    pub env_basis: Vec<Vec<C64>>,
}

impl SchmidtForm {
    pub fn reconstruct(&self, d: usize, env_dim: usize) -> Vec<C64> {
        let mut v = vec![C64::default(); d * env_dim];
        for ((l, x), y) in self
            .lambdas
            .iter()
            .zip(&self.sys_basis)
            .zip(&self.env_basis)
        {
            for s in 0..d {
                for e in 0..env_dim {
                    v[s * env_dim + e] += x[s] * y[e] * *l;
                }
            }
        }
        v
    }

    pub fn rank(&self) -> usize {
        self.lambdas.len()
    }
}

/// Schmidt coefficients below this are dropped from the decomposition.
pub const SCHMIDT_DROP: f64 = 1e-12;

fn schmidt_values(state: &[C64], d: usize, env_dim: usize) -> Vec<f64> {
    tensor::svd(&CMatrix::from_row_slice(d, env_dim, state)).s
}

/// Schmidt decomposition of a joint `d ⊗ D` pure state.
pub fn schmidt_decompose(state: &[C64], d: usize, env_dim: usize) -> Result<SchmidtForm> {
    if state.len() != d * env_dim {
        return Err(Error::Dimension(format!(
            "state length {} is not d*D = {}",
            state.len(),
            d * env_dim
        )));
    }
    let norm = state.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::Validation(format!("state norm {norm} is not 1")));
    }
    let dec = tensor::svd(&CMatrix::from_row_slice(d, env_dim, state));
    let r = dec.rank(SCHMIDT_DROP).max(1);
    Ok(SchmidtForm {
        lambdas: dec.s[..r].to_vec(),
        sys_basis: (0..r)
            .map(|k| dec.u.column(k).iter().copied().collect())
            .collect(),
        env_basis: (0..r)
            .map(|k| dec.vh.row(k).iter().copied().collect())
            .collect(),
    })
}
