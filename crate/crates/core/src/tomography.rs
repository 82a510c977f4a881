//! Reconstruction of a purified process tensor from reduced density operators.
//!
//! A [`MeasurementOracle`] plays the experiment: it hides a model and answers
//! reduced-density-operator queries on the current state, optionally with
//! shot noise. [`disentangle_reconstruct`] peels the state site by site with
//! window unitaries until only a short entangled tail is left.
//! [`variational_fit`] refines step unitaries against a target state, and
//! [`reconstruct_entangled_initial`] handles system-environment initial
//! states that are entangled.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cserde::{self, Pair};
use crate::error::{Error, Result};
use crate::oqe::{self, OqeModel, OqeModelJson, SchmidtForm};
use crate::ppt::{self, PptMps, PptMpsJson};
use crate::tensor::{self, c, contract, cr, CMatrix, ComplexTensor, C64};

/// Eigenvalues above this belong to the support of a reduced density operator.
pub const SUPPORT_TOL: f64 = 1e-10;
/// Relative singular-value cutoff when splitting a block back into sites.
pub const SPLIT_CUTOFF: f64 = 1e-13;
/// Fits with a final loss below this count as converged.
pub const SUCCESS_LOSS: f64 = 1e-8;
/// Largest number of qubits tomographed in sampled mode.
pub const SAMPLED_QUBIT_LIMIT: usize = 8;

pub const GAUGE_NOTE: &str = "recovered model equals the hidden one up to a unitary on the \
environment; compare physical expectations, not matrices";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub shots: u64,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleMode {
    Exact,
    Sampled(SamplingConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Query {
    Reduced { first: usize, last: usize },
    InitialSystem,
}

/// Simulated experiment around a sealed model.
///
/// Window gates applied through [`MeasurementOracle::apply_gate`] act on the
/// oracle's copy of the state, so later queries see the gated state.
#[derive(Clone, Debug)]
pub struct MeasurementOracle {
    hidden: OqeModel,
    n_steps: usize,
    mode: OracleMode,
    truth: PptMps,
    current: PptMps,
    rng: Option<ChaCha8Rng>,
    log: Vec<Query>,
    spawned: u64,
}

impl MeasurementOracle {
    pub fn new(model: OqeModel, n_steps: usize, mode: OracleMode) -> Result<Self> {
        let rng = match mode {
            OracleMode::Exact => None,
            OracleMode::Sampled(cfg) => {
                if model.d() != 2 {
                    return Err(Error::Unsupported(format!(
                        "sampled tomography uses Pauli measurements and needs d = 2, got {}",
                        model.d()
                    )));
                }
                if cfg.shots == 0 {
                    return Err(Error::Validation("shots must be positive".into()));
                }
                Some(ChaCha8Rng::seed_from_u64(cfg.seed))
            }
        };
        let truth = ppt::build_ppt(&model, n_steps)?;
        Ok(Self {
            hidden: model,
            n_steps,
            mode,
            current: truth.clone(),
            truth,
            rng,
            log: Vec::new(),
            spawned: 0,
        })
    }

    pub fn exact(model: OqeModel, n_steps: usize) -> Result<Self> {
        Self::new(model, n_steps, OracleMode::Exact)
    }

    pub fn d(&self) -> usize {
        self.hidden.d()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn query_log(&self) -> &[Query] {
        &self.log
    }

    /// Number of reduced-density-operator requests answered so far.
    pub fn query_count(&self) -> usize {
        self.log
            .iter()
            .filter(|q| matches!(q, Query::Reduced { .. }))
            .count()
    }

    /// Reduced density operator of sites `first..=last` (1-based) of the
    /// current state. An empty range (`first == last + 1`) yields `[[1]]`.
    pub fn reduced_density(&mut self, first: usize, last: usize) -> Result<ComplexTensor> {
        let rho = ppt::partial_process_tensor(&self.current, first, last)?;
        self.log.push(Query::Reduced { first, last });
        if first == last + 1 {
            return Ok(ComplexTensor::from_matrix(&rho));
        }
        let rho = self.measure(&rho)?;
        Ok(ComplexTensor::from_matrix(&rho))
    }

    /// Reduced state of the system before the first step.
    pub fn initial_system_state(&mut self) -> Result<CMatrix> {
        self.log.push(Query::InitialSystem);
        let (d, env) = (self.hidden.d(), self.hidden.env_dim());
        let m = CMatrix::from_row_slice(d, env, self.hidden.initial_state());
        let rho = &m * m.adjoint();
        self.measure(&rho)
    }

    /// Oracle for the process conditioned on finding the system in `x`
    /// before the first step. The environment starts in the matching
    /// post-measurement state.
    pub fn conditional(&mut self, x: &[C64]) -> Result<MeasurementOracle> {
        let (d, env) = (self.hidden.d(), self.hidden.env_dim());
        if x.len() != d {
            return Err(Error::Dimension(format!(
                "outcome vector has length {}, d = {d}",
                x.len()
            )));
        }
        let nx = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nx < 1e-12 {
            return Err(Error::DegenerateState);
        }
        let psi = self.hidden.initial_state();
        let mut y = vec![C64::default(); env];
        for (s, xs) in x.iter().enumerate() {
            for (e, ye) in y.iter_mut().enumerate() {
                *ye += xs.conj() * psi[s * env + e] / nx;
            }
        }
        let ny = y.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if ny < 1e-12 {
            return Err(Error::Validation("outcome has zero probability".into()));
        }
        y.iter_mut().for_each(|z| *z /= ny);
        let xn: Vec<C64> = x.iter().map(|z| z / nx).collect();
        let model = self.hidden.with_initial_state(oqe::kron_vec(&xn, &y))?;
        self.spawned += 1;
        let mode = match self.mode {
            OracleMode::Exact => OracleMode::Exact,
            OracleMode::Sampled(cfg) => OracleMode::Sampled(SamplingConfig {
                shots: cfg.shots,
                seed: cfg.seed.wrapping_add(self.spawned),
            }),
        };
        MeasurementOracle::new(model, self.n_steps, mode)
    }

    /// Applies a window unitary starting at site `first` to the oracle state.
    pub fn apply_gate(&mut self, first: usize, gate: &CMatrix) -> Result<()> {
        self.current = apply_window_gate(&self.current, first, gate)?;
        Ok(())
    }

    /// Discards all applied gates. The query log is kept.
    pub fn reset(&mut self) {
        self.current = self.truth.clone();
    }

    /// Unseals the hidden model for validation.
    pub fn reveal(&self) -> &OqeModel {
        &self.hidden
    }

    /// Gauge-invariant fidelity of a candidate against the hidden process.
    pub fn truth_fidelity(&self, mps: &PptMps) -> Result<f64> {
        ppt::gauge_fidelity(&self.truth, mps)
    }

    fn measure(&mut self, rho: &CMatrix) -> Result<CMatrix> {
        match (self.mode, self.rng.as_mut()) {
            (OracleMode::Sampled(cfg), Some(rng)) => pauli_estimate(rho, cfg.shots, rng),
            _ => Ok(rho.clone()),
        }
    }
}

fn rotation(letter: usize) -> CMatrix {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    match letter {
        0 => CMatrix::from_row_slice(2, 2, &[cr(h), cr(h), cr(h), cr(-h)]),
        1 => CMatrix::from_row_slice(2, 2, &[cr(h), c(0.0, -h), cr(h), c(0.0, h)]),
        _ => CMatrix::identity(2, 2),
    }
}

fn sample_counts(probs: &[f64], shots: u64, rng: &mut ChaCha8Rng) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; probs.len()];
    let mut remaining = shots;
    let mut mass = 1.0;
    for (b, &p) in probs.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        if b + 1 == probs.len() {
            counts[b] = remaining;
            break;
        }
        let pc = if mass > 0.0 {
            (p / mass).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let k = Binomial::new(remaining, pc)
            .map_err(|e| Error::Domain(e.to_string()))?
            .sample(rng);
        counts[b] = k;
        remaining -= k;
        mass -= p;
    }
    Ok(counts)
}

fn walsh_hadamard(v: &mut [f64]) {
    let mut h = 1;
    while h < v.len() {
        for start in (0..v.len()).step_by(2 * h) {
            for k in start..start + h {
                let (a, b) = (v[k], v[k + h]);
                v[k] = a + b;
                v[k + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Estimate of a multi-qubit density operator from `shots` samples in every
/// Pauli-product basis. Each Pauli expectation is averaged over all settings
/// that measure it; the result is Hermitian with unit trace.
fn pauli_estimate(rho: &CMatrix, shots: u64, rng: &mut ChaCha8Rng) -> Result<CMatrix> {
    let dim = rho.nrows();
    let n = dim.trailing_zeros() as usize;
    if dim != 1 << n {
        return Err(Error::Dimension(format!(
            "dimension {dim} is not a power of two"
        )));
    }
    if n > SAMPLED_QUBIT_LIMIT {
        return Err(Error::Capacity {
            needed: n as u128,
            limit: SAMPLED_QUBIT_LIMIT as u128,
        });
    }
    let n_paulis = 1usize << (2 * n);
    let mut sum = vec![0.0; n_paulis];
    let mut cnt = vec![0u32; n_paulis];
    for setting in 0..3usize.pow(n as u32) {
        let letters: Vec<usize> = (0..n)
            .map(|k| (setting / 3usize.pow((n - 1 - k) as u32)) % 3)
            .collect();
        let rot = letters.iter().fold(CMatrix::identity(1, 1), |acc, &l| {
            acc.kronecker(&rotation(l))
        });
        let rotated = &rot * rho * rot.adjoint();
        let mut probs: Vec<f64> = (0..dim).map(|b| rotated[(b, b)].re.max(0.0)).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        let counts = sample_counts(&probs, shots, rng)?;
        let mut h: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
        walsh_hadamard(&mut h);
        for (mask, hv) in h.iter().enumerate() {
            let mut p = 0;
            for (k, &l) in letters.iter().enumerate() {
                let bit = (mask >> (n - 1 - k)) & 1;
                p = p * 4 + if bit == 1 { l + 1 } else { 0 };
            }
            sum[p] += hv / shots as f64;
            cnt[p] += 1;
        }
    }
    let mut est = CMatrix::zeros(dim, dim);
    for p in 0..n_paulis {
        let e = sum[p] / cnt[p] as f64;
        let letters: Vec<usize> = (0..n).map(|k| (p >> (2 * (n - 1 - k))) & 3).collect();
        let flip = letters
            .iter()
            .fold(0usize, |acc, &l| acc * 2 + usize::from(l == 1 || l == 2));
        for r in 0..dim {
            let mut val = cr(e / dim as f64);
            for (k, &l) in letters.iter().enumerate() {
                let bit = (r >> (n - 1 - k)) & 1;
                val *= match (l, bit) {
                    (2, 0) => c(0.0, -1.0),
                    (2, _) => c(0.0, 1.0),
                    (3, 1) => cr(-1.0),
                    _ => cr(1.0),
                };
            }
            est[(r, r ^ flip)] += val;
        }
    }
    let est = tensor::hermitize(&est);
    let tr = tensor::trace(&est).re;
    Ok(est / cr(tr))
}

/// Splits a block tensor `[Dl, q^w, Dr]` into `w` sites by sequential SVD.
fn split_block(block: &ComplexTensor, w: usize, d: usize) -> Result<Vec<ComplexTensor>> {
    let q = d * d;
    let (mut left, dr) = (block.shape()[0], block.shape()[2]);
    let mut rest = block.clone();
    let mut sites = Vec::with_capacity(w);
    for k in 0..w.saturating_sub(1) {
        let rem = q.pow((w - 1 - k) as u32);
        let m = CMatrix::from_row_slice(left * q, rem * dr, rest.data());
        let dec = tensor::svd(&m);
        let s0 = dec.s.first().copied().unwrap_or(0.0);
        let rank = dec
            .s
            .iter()
            .filter(|&&s| s > SPLIT_CUTOFF * s0)
            .count()
            .max(1);
        let u = dec.u.columns(0, rank).into_owned();
        sites.push(ComplexTensor::from_matrix(&u).into_reshape(vec![left, d, d, rank])?);
        let sv = CMatrix::from_fn(rank, rank, |i, j| {
            if i == j {
                cr(dec.s[i])
            } else {
                C64::default()
            }
        });
        let tail = sv * dec.vh.rows(0, rank);
        rest = ComplexTensor::from_matrix(&tail).into_reshape(vec![rank, rem, dr])?;
        left = rank;
    }
    if w > 0 {
        sites.push(rest.into_reshape(vec![left, d, d, dr])?);
    }
    Ok(sites)
}

/// Applies a unitary on the `w` consecutive sites starting at `first`
/// (1-based; the first site is the most significant digit of the window).
pub fn apply_window_gate(mps: &PptMps, first: usize, gate: &CMatrix) -> Result<PptMps> {
    let (d, q) = (mps.d(), mps.q());
    let dim = gate.nrows();
    let mut w = 0;
    let mut cap = 1;
    while cap < dim {
        cap *= q;
        w += 1;
    }
    if cap != dim || !gate.is_square() || w == 0 {
        return Err(Error::Dimension(format!(
            "gate of shape {:?} does not act on whole sites of dimension {q}",
            gate.shape()
        )));
    }
    if first == 0 || first - 1 + w > mps.len() {
        return Err(Error::Range(format!(
            "window {first}..{} outside 1..={}",
            first + w - 1,
            mps.len()
        )));
    }
    let sites = mps.sites();
    let s0 = &sites[first - 1];
    let mut block = s0.reshape(vec![s0.shape()[0], q, s0.shape()[3]])?;
    for site in &sites[first..first - 1 + w] {
        let sh = site.shape();
        let next = site.reshape(vec![sh[0], q, sh[3]])?;
        let t = contract(&block, &next, &[(2, 0)])?;
        let (dl, width) = (t.shape()[0], t.shape()[1] * q);
        block = t.into_reshape(vec![dl, width, sh[3]])?;
    }
    let applied =
        contract(&block, &ComplexTensor::from_matrix(gate), &[(1, 1)])?.permute(&[0, 2, 1])?;
    let mut new_sites = sites[..first - 1].to_vec();
    new_sites.extend(split_block(&applied, w, d)?);
    new_sites.extend_from_slice(&sites[first - 1 + w..]);
    PptMps::new(d, new_sites, mps.initial().cloned())
}

/// Window size `R`: one more than the number of sites whose joint dimension
/// `(d²)^k` first reaches `d_bound·d_init`.
pub fn window_size(d: usize, d_bound: usize, d_init: usize) -> usize {
    let q = d * d;
    let target = d_bound.max(1) * d_init.max(1);
    let (mut k, mut cap) = (0, 1usize);
    while cap < target {
        cap *= q;
        k += 1;
    }
    k + 1
}

/// Multiplies a vector by the phase that makes its largest entry real and positive.
fn phase_fixed(v: DVector<C64>) -> DVector<C64> {
    let big = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    match v.iter().find(|z| z.norm() >= big - 1e-12) {
        Some(z) if z.norm() > 0.0 => {
            let ph = z.conj() / z.norm();
            v * ph
        }
        _ => v,
    }
}

/// Window unitary sending the leading `support` eigenvectors to the first
/// basis states, i.e. into the subspace where the first site is `|0⟩`.
fn disentangling_gate(vecs: &CMatrix, support: usize) -> CMatrix {
    let cols: Vec<DVector<C64>> = (0..support)
        .map(|k| phase_fixed(vecs.column(k).into_owned()))
        .collect();
    let v = tensor::complete_unitary(&CMatrix::from_columns(&cols));
    v.adjoint()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DisentangleOptions {
    /// The hidden initial state is entangled with the environment, so the
    /// effective environment carries an extra factor `d`.
    pub entangled_initial: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub recovered_mps: PptMps,
    pub recovered_model: Option<OqeModel>,
    pub state_fidelity: f64,
    pub per_site_unitarity_residual: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub gauge_note: String,
    pub query_count: usize,
    pub window_size: Option<usize>,
    pub converged: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionReportJson {
    pub recovered_mps: PptMpsJson,
    pub recovered_model: Option<OqeModelJson>,
    pub state_fidelity: f64,
    pub per_site_unitarity_residual: Vec<f64>,
    pub loss_trace: Vec<f64>,
    pub gauge_note: String,
    pub query_count: usize,
    pub window_size: Option<usize>,
    pub converged: bool,
    pub notes: Vec<String>,
}

impl ReconstructionReport {
    pub fn to_json(&self) -> ReconstructionReportJson {
        ReconstructionReportJson {
            recovered_mps: self.recovered_mps.to_json(),
            recovered_model: self.recovered_model.as_ref().map(OqeModel::to_json),
            state_fidelity: self.state_fidelity,
            per_site_unitarity_residual: self.per_site_unitarity_residual.clone(),
            loss_trace: self.loss_trace.clone(),
            gauge_note: self.gauge_note.clone(),
            query_count: self.query_count,
            window_size: self.window_size,
            converged: self.converged,
            notes: self.notes.clone(),
        }
    }

    pub fn from_json(doc: &ReconstructionReportJson) -> Result<Self> {
        if !(0.0..=1.0).contains(&doc.state_fidelity) {
            return Err(Error::Validation(format!(
                "state_fidelity {} outside [0, 1]",
                doc.state_fidelity
            )));
        }
        Ok(Self {
            recovered_mps: PptMps::from_json(&doc.recovered_mps)?,
            recovered_model: doc
                .recovered_model
                .as_ref()
                .map(OqeModel::from_json)
                .transpose()?,
            state_fidelity: doc.state_fidelity,
            per_site_unitarity_residual: doc.per_site_unitarity_residual.clone(),
            loss_trace: doc.loss_trace.clone(),
            gauge_note: doc.gauge_note.clone(),
            query_count: doc.query_count,
            window_size: doc.window_size,
            converged: doc.converged,
            notes: doc.notes.clone(),
        })
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

/// Reconstructs the first `n_steps` steps of the hidden process with window
/// unitaries, given an upper bound `d_bound` on the environment dimension.
///
/// Each window of `R` sites is rotated so that its first site factors out in
/// `|0⟩`; after `N - R + 1` windows the remaining `R - 1` sites are still
/// entangled with the environment and are read off from one more reduced
/// density operator, with the environment basis chosen as its eigenbasis.
/// Undoing the gates gives the state, which is canonicalized and converted
/// into step unitaries.
pub fn disentangle_reconstruct(
    oracle: &mut MeasurementOracle,
    n_steps: usize,
    d_bound: usize,
    opts: &DisentangleOptions,
) -> Result<ReconstructionReport> {
    let d = oracle.d();
    let q = d * d;
    let d_init = if opts.entangled_initial { d } else { 1 };
    let r = window_size(d, d_bound, d_init);
    if n_steps > oracle.n_steps() {
        return Err(Error::Range(format!(
            "oracle holds {} steps, {n_steps} requested",
            oracle.n_steps()
        )));
    }
    if n_steps < r {
        return Err(Error::Validation(format!(
            "N = {n_steps} is shorter than the window size R = {r}"
        )));
    }
    let exact = oracle.mode() == OracleMode::Exact;
    let start = oracle.query_count();
    oracle.reset();
    let f = n_steps + 1 - r;
    let capacity = q.pow((r - 1) as u32);
    let keep_max = capacity.min(d_bound.max(1) * d_init);
    let mut notes = Vec::new();
    let mut gates = Vec::with_capacity(f);
    for j in 1..=f {
        let rho = oracle.reduced_density(j, j + r - 1)?.to_matrix()?;
        let (vals, vecs) = tensor::eigh(&rho);
        let mut support = vals.iter().filter(|&&v| v > SUPPORT_TOL).count().max(1);
        if support > capacity {
            if exact {
                return Err(Error::BoundViolation {
                    window: j,
                    support,
                    capacity,
                });
            }
            notes.push(format!(
                "window {j}: estimated support {support} truncated to {keep_max}"
            ));
        }
        if !exact {
            support = support.min(keep_max);
        }
        if (1..support).any(|k| vals[k - 1] - vals[k] < SUPPORT_TOL) {
            notes.push(format!(
                "window {j}: near-degenerate support eigenvalues ordered by index"
            ));
        }
        let gate = disentangling_gate(&vecs, support);
        oracle.apply_gate(j, &gate)?;
        gates.push(gate);
    }
    let tail_rho = oracle.reduced_density(f + 1, n_steps)?.to_matrix()?;
    let (vals, vecs) = tensor::eigh(&tail_rho);
    let mut rank = vals.iter().filter(|&&v| v > SUPPORT_TOL).count().max(1);
    if rank > d_bound.max(1) * d_init {
        if exact {
            return Err(Error::BoundViolation {
                window: f + 1,
                support: rank,
                capacity: d_bound.max(1) * d_init,
            });
        }
        rank = keep_max;
    }
    let weight: f64 = vals[..rank].iter().map(|v| v.max(0.0)).sum();
    let tail_dim = tail_rho.nrows();
    let mut chi = ComplexTensor::zeros(vec![1, tail_dim, rank]);
    for s in 0..rank {
        let lam = (vals[s].max(0.0) / weight).sqrt();
        let a = phase_fixed(vecs.column(s).into_owned());
        for x in 0..tail_dim {
            chi.set(&[0, x, s], a[x] * lam);
        }
    }
    let mut zero = ComplexTensor::zeros(vec![1, d, d, 1]);
    zero.set(&[0, 0, 0, 0], cr(1.0));
    let mut sites = vec![zero; f];
    sites.extend(split_block(&chi, r - 1, d)?);
    let mut mps = PptMps::new(d, sites, None)?;
    for j in (1..=f).rev() {
        mps = apply_window_gate(&mps, j, &gates[j - 1].adjoint())?;
    }
    let mps = ppt::to_right_canonical(&mps)?;
    let (model, residuals, converged) = match ppt::mps_to_oqe(&mps) {
        Ok((m, res)) => (Some(m), res, true),
        Err(e) => {
            notes.push(format!("conversion to step unitaries failed: {e}"));
            (None, vec![], false)
        }
    };
    let state_fidelity = oracle.truth_fidelity(&mps)?;
    Ok(ReconstructionReport {
        recovered_mps: mps,
        recovered_model: model,
        state_fidelity,
        per_site_unitarity_residual: residuals,
        loss_trace: vec![],
        gauge_note: GAUGE_NOTE.into(),
        query_count: oracle.query_count() - start,
        window_size: Some(r),
        converged,
        notes,
    })
}

/// Extracts a single step unitary from a right-canonical PPT of a
/// time-independent process.
///
/// Bulk sites of a canonical form differ from the uniform site by unitary
/// bond gauges, `B̃_n = V_{n-1} B V_n^†`. The gauge ratio `X = V_1 V_2^†` is
/// the null vector of `X B̃_3 = B̃_2 Q`; `X^† B̃_2` is then uniform. The first
/// site fixes the initial environment vector, which is rotated onto `|0⟩`.
/// Returns the unitary and the relative residual of the gauge equation.
pub fn uniform_gauge(target: &PptMps) -> Result<(CMatrix, f64)> {
    if target.len() < 3 {
        return Err(Error::Validation(
            "uniform gauge needs at least 3 steps".into(),
        ));
    }
    if target.prefix_dim() != 1 {
        return Err(Error::Unsupported(
            "uniform gauge needs the initial state absorbed into the first site".into(),
        ));
    }
    let t = ppt::to_right_canonical(target)?;
    let d = t.d();
    let b1 = t.kraus(0);
    let b2 = t.kraus(1);
    let b3 = t.kraus(2);
    let env = b2[0].nrows();
    if b2[0].ncols() != env || b3[0].shape() != (env, env) || b1[0].ncols() != env {
        return Err(Error::Unsupported(format!(
            "bond dimensions {:?} are not uniform from the first bond on",
            t.bond_dims()
        )));
    }
    let dd = env * env;
    let mut m = CMatrix::zeros(b2.len() * dd, 2 * dd);
    for (s, (x2, x3)) in b2.iter().zip(&b3).enumerate() {
        for r in 0..env {
            for col in 0..env {
                let row = (s * env + r) * env + col;
                for k in 0..env {
                    m[(row, r * env + k)] += x3[(k, col)];
                    m[(row, dd + k * env + col)] -= x2[(r, k)];
                }
            }
        }
    }
    let dec = tensor::svd(&m);
    let smax = dec.s[0];
    let residual = dec.s[2 * dd - 1] / smax;
    let null = dec.vh.row(2 * dd - 1);
    let x = CMatrix::from_fn(env, env, |r, k| null[r * env + k].conj());
    let x = tensor::polar_factor(&x);
    let cs: Vec<CMatrix> = b2.iter().map(|b| x.adjoint() * b).collect();
    let nu = b1
        .iter()
        .zip(&cs)
        .fold(CMatrix::zeros(1, env), |acc, (b, cm)| {
            acc + b * &x * cm.adjoint()
        });
    let nn = nu.norm();
    if nn < 1e-12 {
        return Err(Error::DegenerateState);
    }
    let nu_col = nu.transpose() / cr(nn);
    let s = tensor::complete_unitary(&nu_col);
    let st = s.transpose();
    let sc = s.map(|z| z.conj());
    let uniform: Vec<CMatrix> = cs.iter().map(|cm| &st * cm * &sc).collect();
    let site = ppt::site_from_kraus(&uniform, d)?;
    let u = tensor::polar_factor(&ppt::unitary_from_site(&site)?);
    Ok((u, residual))
}

/// Lifts a `d·small` step unitary onto a `d·big` environment; the added
/// environment levels evolve trivially.
fn embed_unitary(u: &CMatrix, d: usize, small: usize, big: usize) -> CMatrix {
    let n = d * big;
    let mut out = CMatrix::identity(n, n);
    for r in 0..d * small {
        for col in 0..d * small {
            let (ro, rb) = (r / small, r % small);
            let (co, cb) = (col / small, col % small);
            out[(ro * big + rb, co * big + cb)] = u[(r, col)];
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub learning_rate: f64,
    /// Iteration stops once the loss drops below this.
    pub stop_loss: f64,
    pub success_loss: f64,
    /// Starting unitaries; when absent a warm start is derived from the target.
    pub init: Option<Vec<CMatrix>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            restarts: 5,
            max_iter: 2000,
            learning_rate: 0.5,
            stop_loss: 1e-14,
            success_loss: SUCCESS_LOSS,
            init: None,
        }
    }
}

/// Overlap of a target PPT with the sequential ansatz `T_N ... T_1 |0⟩`
/// followed by a free unitary on the final environment leg.
struct FitProblem {
    d: usize,
    env: usize,
    n: usize,
    time_independent: bool,
    target: Vec<Vec<CMatrix>>,
    l0: CMatrix,
}

impl FitProblem {
    fn new(target: &PptMps, env: usize, time_independent: bool) -> Result<Self> {
        if target.prefix_dim() != 1 {
            return Err(Error::Unsupported(
                "fitting needs the initial state absorbed into the first site".into(),
            ));
        }
        let t_env = target.env_dim();
        if t_env > env {
            return Err(Error::Validation(format!(
                "target environment leg {t_env} exceeds ansatz dimension {env}"
            )));
        }
        let mut kraus: Vec<Vec<CMatrix>> = (0..target.len()).map(|k| target.kraus(k)).collect();
        for m in kraus.last_mut().into_iter().flatten() {
            *m = m.clone().resize_horizontally(env, C64::default());
        }
        let k0 = target.left_boundary();
        let mut l0 = CMatrix::zeros(k0.nrows(), env);
        l0[(0, 0)] = cr(1.0);
        Ok(Self {
            d: target.d(),
            env,
            n: target.len(),
            time_independent,
            target: kraus,
            l0,
        })
    }

    fn unitary_at<'a>(&self, us: &'a [CMatrix], n: usize) -> &'a CMatrix {
        if self.time_independent {
            &us[0]
        } else {
            &us[n]
        }
    }

    fn ansatz(&self, us: &[CMatrix]) -> Vec<Vec<CMatrix>> {
        (0..self.n)
            .map(|n| {
                let site = ppt::site_from_unitary(self.unitary_at(us, n), self.d, self.env)
                    .expect("ansatz unitaries have the fitted shape");
                ppt::site_kraus(&site)
            })
            .collect()
    }

    /// Mixed left environments `L_0 .. L_N` starting from `l0`.
    fn left_envs(&self, ansatz: &[Vec<CMatrix>], l0: &CMatrix) -> Vec<CMatrix> {
        let mut envs = vec![l0.clone()];
        for (t, a) in self.target.iter().zip(ansatz) {
            let prev = envs.last().expect("nonempty");
            let next = t
                .iter()
                .zip(a)
                .fold(CMatrix::zeros(t[0].ncols(), self.env), |acc, (x, y)| {
                    acc + x.adjoint() * prev * y
                });
            envs.push(next);
        }
        envs
    }

    /// Loss `2 - 2 max_O Re⟨target|O ansatz⟩` and its gradient with respect
    /// to the (conjugate-free) entries of each unitary.
    fn evaluate(&self, us: &[CMatrix]) -> (f64, Vec<CMatrix>) {
        let ansatz = self.ansatz(us);
        let lefts = self.left_envs(&ansatz, &self.l0);
        let last = &lefts[self.n];
        let dec = tensor::svd(last);
        let loss = 2.0 - 2.0 * dec.s.iter().sum::<f64>();
        let mut r = tensor::polar_factor(&last.map(|z| z.conj()));
        let big = self.d * self.env;
        let mut grads = vec![CMatrix::zeros(big, big); us.len()];
        let inv = 1.0 / (self.d as f64).sqrt();
        for n in (0..self.n).rev() {
            let g = &mut grads[if self.time_independent { 0 } else { n }];
            let lt = lefts[n].transpose();
            let mut next_r = CMatrix::zeros(self.target[n][0].nrows(), self.env);
            for (s, (t, a)) in self.target[n].iter().zip(&ansatz[n]).enumerate() {
                let tc = t.map(|z| z.conj());
                let e = &lt * &tc * &r;
                let (o, i) = (s / self.d, s % self.d);
                for al in 0..self.env {
                    for b in 0..self.env {
                        g[(o * self.env + b, i * self.env + al)] += e[(al, b)] * inv;
                    }
                }
                next_r += &tc * &r * a.transpose();
            }
            r = next_r;
        }
        (loss, grads)
    }
}

struct Descent {
    unitaries: Vec<CMatrix>,
    loss: f64,
    trace: Vec<f64>,
}

fn descend(problem: &FitProblem, init: Vec<CMatrix>, opts: &FitOptions) -> Descent {
    let mut us = init;
    let (mut loss, mut grads) = problem.evaluate(&us);
    let mut trace = vec![loss];
    let mut lr = opts.learning_rate;
    let mut stall = 0;
    for _ in 0..opts.max_iter {
        if loss < opts.stop_loss {
            break;
        }
        let cand: Vec<CMatrix> = us
            .iter()
            .zip(&grads)
            .map(|(u, g)| tensor::polar_factor(&(u + g.map(|z| z.conj()) * cr(2.0 * lr))))
            .collect();
        let (cl, cg) = problem.evaluate(&cand);
        if cl < loss {
            stall = if loss - cl < 1e-16 { stall + 1 } else { 0 };
            us = cand;
            loss = cl;
            grads = cg;
            lr = (lr * 1.5).min(1e6);
            if stall > 20 {
                trace.push(loss);
                break;
            }
        } else {
            lr *= 0.5;
            if lr < 1e-12 {
                trace.push(loss);
                break;
            }
        }
        trace.push(loss);
    }
    Descent {
        unitaries: us,
        loss,
        trace,
    }
}

fn warm_start(
    target: &PptMps,
    env: usize,
    time_independent: bool,
    notes: &mut Vec<String>,
) -> Option<Vec<CMatrix>> {
    let d = target.d();
    if time_independent {
        match uniform_gauge(target) {
            Ok((u, residual)) => {
                notes.push(format!(
                    "warm start from uniform gauge, residual {residual:.3e}"
                ));
                let small = u.nrows() / d;
                (small <= env).then(|| vec![embed_unitary(&u, d, small, env)])
            }
            Err(e) => {
                notes.push(format!("no uniform-gauge warm start: {e}"));
                None
            }
        }
    } else {
        let canon = ppt::to_right_canonical(target).ok()?;
        match ppt::mps_to_oqe(&canon) {
            Ok((model, _)) if model.env_dim() <= env => {
                notes.push("warm start from canonical step unitaries".into());
                let small = model.env_dim();
                Some(
                    model
                        .unitaries()
                        .iter()
                        .map(|u| embed_unitary(u, d, small, env))
                        .collect(),
                )
            }
            Ok(_) => None,
            Err(e) => {
                notes.push(format!("no canonical warm start: {e}"));
                None
            }
        }
    }
}

/// Fits step unitaries of environment dimension `env_dim` to a normalized
/// target PPT by gradient descent on the unitary manifold.
///
/// The first run starts from `opts.init` or from a warm start derived from
/// the target. If it ends above `opts.success_loss`, further runs from Haar
/// random unitaries are made in parallel and the lowest loss wins, ties going
/// to the lower restart index.
pub fn variational_fit(
    target: &PptMps,
    env_dim: usize,
    time_independent: bool,
    opts: &FitOptions,
) -> Result<ReconstructionReport> {
    let nrm = target.norm();
    if (nrm - 1.0).abs() > 1e-8 {
        return Err(Error::Validation(format!("target norm {nrm} is not 1")));
    }
    let problem = FitProblem::new(target, env_dim, time_independent)?;
    let d = problem.d;
    let big = d * env_dim;
    let count = if time_independent { 1 } else { problem.n };
    let random_init = |k: u64| -> Vec<CMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(k));
        (0..count)
            .map(|_| oqe::random_haar_unitary(big, &mut rng))
            .collect()
    };
    let mut notes = Vec::new();
    let first = match &opts.init {
        Some(init) => {
            if init.len() != count || init.iter().any(|u| u.shape() != (big, big)) {
                return Err(Error::Dimension(format!(
                    "initial guess needs {count} unitaries of size {big}"
                )));
            }
            init.clone()
        }
        None => warm_start(target, env_dim, time_independent, &mut notes)
            .unwrap_or_else(|| random_init(0)),
    };
    let mut runs = vec![descend(&problem, first, opts)];
    if runs[0].loss >= opts.success_loss && opts.restarts > 1 {
        notes.push(format!(
            "first run stalled at loss {:.3e}; {} random restarts",
            runs[0].loss,
            opts.restarts - 1
        ));
        let more: Vec<Descent> = (1..opts.restarts as u64)
            .into_par_iter()
            .map(|k| descend(&problem, random_init(k), opts))
            .collect();
        runs.extend(more);
    }
    let (best_idx, _) = runs
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bi, bl), (i, r)| {
            if r.loss < bl {
                (i, r.loss)
            } else {
                (bi, bl)
            }
        });
    let best = runs.swap_remove(best_idx);
    let converged = best.loss < opts.success_loss;
    if !converged {
        notes.push(format!(
            "residual loss {:.3e} above {:.1e}; the fit may sit in a local minimum",
            best.loss, opts.success_loss
        ));
    }
    let mut psi = vec![C64::default(); big];
    psi[0] = cr(1.0);
    let residuals = best
        .unitaries
        .iter()
        .map(tensor::unitarity_residual)
        .collect();
    let model = OqeModel::new(d, env_dim, time_independent, best.unitaries, psi)?;
    let mps = ppt::build_ppt(&model, problem.n)?;
    let state_fidelity = ppt::gauge_fidelity(target, &mps)?;
    Ok(ReconstructionReport {
        recovered_mps: mps,
        recovered_model: Some(model),
        state_fidelity,
        per_site_unitarity_residual: residuals,
        loss_trace: best.trace,
        gauge_note: GAUGE_NOTE.into(),
        query_count: 0,
        window_size: None,
        converged,
        notes,
    })
}

/// PPT of the recovered time-independent model over `n_future` steps.
pub fn predict_future(report: &ReconstructionReport, n_future: usize) -> Result<PptMps> {
    match &report.recovered_model {
        Some(m) if m.time_independent() => ppt::build_ppt(m, n_future),
        Some(_) => Err(Error::Unsupported(
            "a time-dependent model does not determine future steps".into(),
        )),
        None => Err(Error::Unsupported(
            "report carries no recovered model".into(),
        )),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntangledOptions {
    pub n_steps: usize,
    pub d_bound: usize,
    pub time_independent: bool,
    pub fit: FitOptions,
    /// Conditional fits with a loss above this are reported as failed.
    pub outcome_loss: f64,
}

impl Default for EntangledOptions {
    fn default() -> Self {
        Self {
            n_steps: 5,
            d_bound: 2,
            time_independent: true,
            fit: FitOptions::default(),
            outcome_loss: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntangledReconstruction {
    pub schmidt: SchmidtForm,
    pub model: OqeModel,
    pub recovered_outcomes: Vec<usize>,
    pub failed_outcomes: Vec<usize>,
    pub outcome_losses: Vec<f64>,
    pub partial: bool,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntangledReconstructionJson {
    pub lambdas: Vec<f64>,
    pub sys_basis: Vec<Vec<Pair>>,
    pub env_basis: Vec<Vec<Pair>>,
    pub model: OqeModelJson,
    pub recovered_outcomes: Vec<usize>,
    pub failed_outcomes: Vec<usize>,
    pub outcome_losses: Vec<f64>,
    pub partial: bool,
    pub notes: Vec<String>,
}

impl EntangledReconstruction {
    pub fn to_json(&self) -> EntangledReconstructionJson {
        EntangledReconstructionJson {
            lambdas: self.schmidt.lambdas.clone(),
            sys_basis: self
                .schmidt
                .sys_basis
                .iter()
                .map(|v| cserde::to_pairs(v))
                .collect(),
            env_basis: self
                .schmidt
                .env_basis
                .iter()
                .map(|v| cserde::to_pairs(v))
                .collect(),
            model: self.model.to_json(),
            recovered_outcomes: self.recovered_outcomes.clone(),
            failed_outcomes: self.failed_outcomes.clone(),
            outcome_losses: self.outcome_losses.clone(),
            partial: self.partial,
            notes: self.notes.clone(),
        }
    }

    pub fn from_json(doc: &EntangledReconstructionJson) -> Result<Self> {
        let vecs = |vs: &[Vec<Pair>]| -> Result<Vec<Vec<C64>>> {
            vs.iter().map(|v| cserde::from_pairs(v)).collect()
        };
        Ok(Self {
            schmidt: SchmidtForm {
                lambdas: doc.lambdas.clone(),
                sys_basis: vecs(&doc.sys_basis)?,
                env_basis: vecs(&doc.env_basis)?,
            },
            model: OqeModel::from_json(&doc.model)?,
            recovered_outcomes: doc.recovered_outcomes.clone(),
            failed_outcomes: doc.failed_outcomes.clone(),
            outcome_losses: doc.outcome_losses.clone(),
            partial: doc.partial,
            notes: doc.notes.clone(),
        })
    }
}

/// Best initial environment vector, orthogonal to `previous`, for a fixed
/// step unitary, together with the optimal final environment unitary.
/// Returns the vector and the loss.
fn fit_initial_vector(
    target: &PptMps,
    u: &CMatrix,
    env: usize,
    previous: &[Vec<C64>],
) -> Result<(Vec<C64>, f64)> {
    let problem = FitProblem::new(target, env, true)?;
    let ansatz = problem.ansatz(std::slice::from_ref(u));
    let finals: Vec<CMatrix> = (0..env)
        .map(|a| {
            let mut l0 = CMatrix::zeros(1, env);
            l0[(0, a)] = cr(1.0);
            problem.left_envs(&ansatz, &l0).pop().expect("nonempty")
        })
        .collect();
    let mut proj = CMatrix::identity(env, env);
    for r in previous {
        let v = DVector::from_column_slice(r);
        proj -= &v * v.adjoint();
    }
    let combine = |nu: &DVector<C64>| {
        finals
            .iter()
            .zip(nu.iter())
            .fold(CMatrix::zeros(finals[0].nrows(), env), |acc, (l, z)| {
                acc + l * *z
            })
    };
    let nuclear = |m: &CMatrix| tensor::svd(m).s.iter().sum::<f64>();
    let mut best: Option<(Vec<C64>, f64)> = None;
    for k in 0..env {
        let mut nu = proj.column(k).into_owned();
        let n0 = nu.norm();
        if n0 < 1e-8 {
            continue;
        }
        nu /= cr(n0);
        let mut f_prev = 0.0;
        for _ in 0..500 {
            let m = combine(&nu);
            let o = tensor::polar_factor(&m.map(|z| z.conj()));
            let g = DVector::from_iterator(
                env,
                finals.iter().map(|l| l.component_mul(&o).sum().conj()),
            );
            let w = &proj * g;
            let nw = w.norm();
            if nw < 1e-14 {
                break;
            }
            nu = w / cr(nw);
            let f = nuclear(&combine(&nu));
            if (f - f_prev).abs() < 1e-15 {
                break;
            }
            f_prev = f;
        }
        let loss = 2.0 - 2.0 * nuclear(&combine(&nu));
        if best.as_ref().is_none_or(|(_, bl)| loss < *bl) {
            best = Some((nu.iter().copied().collect(), loss));
        }
    }
    best.ok_or_else(|| Error::Validation("no environment direction left for this outcome".into()))
}

/// Recovers a time-independent model whose initial state may be entangled
/// with the environment.
///
/// The reduced initial system state gives the Schmidt weights and system
/// vectors. Conditioning on the first system vector leaves a separable
/// process, reconstructed in full; its initial environment vector becomes
/// `|0⟩`. Every further outcome only contributes an initial environment
/// vector, fitted with the step unitary held fixed and constrained to be
/// orthogonal to the earlier ones.
pub fn reconstruct_entangled_initial(
    oracle: &mut MeasurementOracle,
    opts: &EntangledOptions,
) -> Result<EntangledReconstruction> {
    if !opts.time_independent {
        return Err(Error::Unsupported(
            "initial-state recovery holds the step unitary fixed across outcomes and needs a \
             time-independent model"
                .into(),
        ));
    }
    let d = oracle.d();
    let env = opts.d_bound;
    let rho_s = oracle.initial_system_state()?;
    let (vals, vecs) = tensor::eigh(&rho_s);
    let count = vals.iter().filter(|&&v| v > SUPPORT_TOL).count().max(1);
    let weight: f64 = vals[..count].iter().sum();
    let lambdas: Vec<f64> = vals[..count].iter().map(|v| (v / weight).sqrt()).collect();
    let xs: Vec<Vec<C64>> = (0..count)
        .map(|k| {
            phase_fixed(vecs.column(k).into_owned())
                .iter()
                .copied()
                .collect()
        })
        .collect();
    let mut notes = Vec::new();

    let mut cond = oracle.conditional(&xs[0])?;
    let rec =
        disentangle_reconstruct(&mut cond, opts.n_steps, env, &DisentangleOptions::default())?;
    notes.push(format!(
        "outcome 0: disentangling reconstruction with {} queries",
        rec.query_count
    ));
    let fit = variational_fit(&rec.recovered_mps, env, true, &opts.fit)?;
    let first_loss = fit.loss_trace.last().copied().unwrap_or(f64::INFINITY);
    if first_loss > opts.outcome_loss {
        return Err(Error::Convergence {
            iterations: fit.loss_trace.len(),
            residual: first_loss,
        });
    }
    let u = fit
        .recovered_model
        .as_ref()
        .expect("fit returns a model")
        .unitaries()[0]
        .clone();

    let mut env_vecs = vec![oqe::basis_vector(env, 0)];
    let mut recovered = vec![0];
    let mut failed = Vec::new();
    let mut losses = vec![first_loss];
    for (s, x) in xs.iter().enumerate().skip(1) {
        let mut cond = oracle.conditional(x)?;
        let rec =
            disentangle_reconstruct(&mut cond, opts.n_steps, env, &DisentangleOptions::default())?;
        let (nu, loss) = fit_initial_vector(&rec.recovered_mps, &u, env, &env_vecs)?;
        losses.push(loss);
        if loss <= opts.outcome_loss {
            env_vecs.push(nu);
            recovered.push(s);
        } else {
            notes.push(format!(
                "outcome {s}: environment vector fit stalled at loss {loss:.3e}"
            ));
            failed.push(s);
        }
    }

    let kept: Vec<f64> = recovered.iter().map(|&s| lambdas[s]).collect();
    let norm = kept.iter().map(|l| l * l).sum::<f64>().sqrt();
    let schmidt = SchmidtForm {
        lambdas: kept.iter().map(|l| l / norm).collect(),
        sys_basis: recovered.iter().map(|&s| xs[s].clone()).collect(),
        env_basis: env_vecs,
    };
    let psi = schmidt.reconstruct(d, env);
    let model = OqeModel::new(d, env, true, vec![u], psi)?;
    Ok(EntangledReconstruction {
        schmidt,
        model,
        partial: !failed.is_empty(),
        recovered_outcomes: recovered,
        failed_outcomes: failed,
        outcome_losses: losses,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlate::{expectation, Insertion, MultiTimeObservable};
    use crate::oqe::{maximally_entangled, random_hermitian, schmidt_state};
    use rand::Rng;

    fn haar(d: usize, env: usize, ti: bool, steps: usize, seed: u64) -> OqeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        OqeModel::random_haar(d, env, ti, steps, &mut rng).unwrap()
    }

    fn dense_partial_trace(
        rho: &CMatrix,
        q: usize,
        n: usize,
        first: usize,
        last: usize,
    ) -> CMatrix {
        let (before, width) = (first - 1, last + 1 - first);
        let after = n - last;
        let (pb, pw, pa) = (
            q.pow(before as u32),
            q.pow(width as u32),
            q.pow(after as u32),
        );
        CMatrix::from_fn(pw, pw, |r, col| {
            let mut acc = C64::default();
            for b in 0..pb {
                for a in 0..pa {
                    acc += rho[((b * pw + r) * pa + a, (b * pw + col) * pa + a)];
                }
            }
            acc
        })
    }

    fn random_two_time(rng: &mut ChaCha8Rng, q: usize, steps: usize) -> MultiTimeObservable {
        let a = rng.random_range(1..steps);
        let b = rng.random_range(a + 1..=steps);
        MultiTimeObservable::new(vec![
            Insertion {
                step: a,
                matrix: random_hermitian(q, rng),
            },
            Insertion {
                step: b,
                matrix: random_hermitian(q, rng),
            },
        ])
        .unwrap()
    }

    #[test]
    fn window_sizes() {
        assert_eq!(window_size(2, 16, 1), 3);
        assert_eq!(window_size(2, 1, 1), 1);
        assert_eq!(window_size(2, 2, 1), 2);
        assert_eq!(window_size(2, 4, 1), 2);
        assert_eq!(window_size(2, 5, 1), 3);
        assert_eq!(window_size(2, 2, 2), 2);
        assert_eq!(window_size(3, 9, 1), 2);
    }

    #[test]
    fn exact_reduced_density_matches_dense_partial_trace() {
        let model = haar(2, 2, true, 1, 3);
        let mut oracle = MeasurementOracle::exact(model.clone(), 4).unwrap();
        let full = ppt::ppt_to_process_tensor(&ppt::build_ppt(&model, 4).unwrap())
            .unwrap()
            .to_matrix()
            .unwrap();
        for (first, last) in [(1, 1), (2, 3), (1, 4), (4, 4), (3, 4)] {
            let got = oracle
                .reduced_density(first, last)
                .unwrap()
                .to_matrix()
                .unwrap();
            let want = dense_partial_trace(&full, 4, 4, first, last);
            assert!(tensor::max_abs(&(&got - &want)) < 1e-12);
            assert!((tensor::trace(&got).re - 1.0).abs() < 1e-12);
            assert!(tensor::eigh(&got).0.iter().all(|&v| v > -1e-12));
        }
        assert_eq!(oracle.query_count(), 5);
    }

    #[test]
    fn product_model_full_range_is_pure() {
        let model = haar(2, 1, true, 1, 4);
        let mut oracle = MeasurementOracle::exact(model, 3).unwrap();
        let rho = oracle.reduced_density(1, 3).unwrap().to_matrix().unwrap();
        let purity = tensor::trace(&(&rho * &rho)).re;
        assert!((purity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_range_is_unit_scalar() {
        let mut oracle = MeasurementOracle::exact(haar(2, 2, true, 1, 5), 3).unwrap();
        let rho = oracle.reduced_density(4, 3).unwrap();
        assert_eq!(rho.shape(), &[1, 1]);
        assert!((rho.get(&[0, 0]) - cr(1.0)).norm() < 1e-12);
    }

    #[test]
    fn window_gate_preserves_norm_and_inverts() {
        let model = haar(2, 2, true, 1, 6);
        let mps = ppt::build_ppt(&model, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let g = oqe::random_haar_unitary(16, &mut rng);
        let moved = apply_window_gate(&mps, 2, &g).unwrap();
        assert!((moved.norm() - 1.0).abs() < 1e-12);
        let back = apply_window_gate(&moved, 2, &g.adjoint()).unwrap();
        let f = ppt::overlap(&mps, &back).unwrap();
        assert!((f - cr(1.0)).norm() < 1e-12);
    }

    #[test]
    fn disentangle_d2_d2_n5() {
        let model = haar(2, 2, true, 1, 11);
        let mut oracle = MeasurementOracle::exact(model, 5).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 5, 2, &DisentangleOptions::default()).unwrap();
        assert!(rep.state_fidelity > 1.0 - 1e-8, "{}", rep.state_fidelity);
        assert_eq!(rep.window_size, Some(2));
        assert_eq!(rep.query_count, 5);
        assert!(rep.recovered_model.is_some());
    }

    #[test]
    fn disentangle_fig2_window_layout() {
        let model = haar(2, 2, true, 1, 12);
        let mut oracle = MeasurementOracle::exact(model, 5).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 5, 16, &DisentangleOptions::default()).unwrap();
        assert_eq!(rep.window_size, Some(3));
        assert_eq!(rep.query_count, 4);
        let windows: Vec<Query> = oracle.query_log().to_vec();
        assert_eq!(windows.last(), Some(&Query::Reduced { first: 4, last: 5 }));
        assert!(rep.state_fidelity > 1.0 - 1e-8);
    }

    #[test]
    fn disentangle_product_model() {
        let model = haar(2, 1, false, 4, 13);
        let mut oracle = MeasurementOracle::exact(model, 4).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 4, 1, &DisentangleOptions::default()).unwrap();
        assert_eq!(rep.window_size, Some(1));
        assert_eq!(rep.query_count, 5);
        assert!(rep.state_fidelity > 1.0 - 1e-10);
    }

    #[test]
    fn disentangle_rejects_small_bound() {
        let model = haar(2, 4, true, 1, 14);
        let mut oracle = MeasurementOracle::exact(model, 4).unwrap();
        let err =
            disentangle_reconstruct(&mut oracle, 4, 1, &DisentangleOptions::default()).unwrap_err();
        assert!(
            matches!(
                err,
                Error::BoundViolation {
                    window: 1,
                    capacity: 1,
                    ..
                }
            ),
            "{err}"
        );
    }

    #[test]
    fn disentangle_entangled_initial_state() {
        let model = haar(2, 2, true, 1, 15)
            .with_initial_state(maximally_entangled(2))
            .unwrap();
        let mut oracle = MeasurementOracle::exact(model, 4).unwrap();
        let opts = DisentangleOptions {
            entangled_initial: true,
        };
        let rep = disentangle_reconstruct(&mut oracle, 4, 2, &opts).unwrap();
        assert!(rep.state_fidelity > 1.0 - 1e-8);
    }

    #[test]
    fn recovered_model_reproduces_expectations() {
        let model = haar(2, 2, false, 5, 16);
        let mut oracle = MeasurementOracle::exact(model.clone(), 5).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 5, 2, &DisentangleOptions::default()).unwrap();
        let truth = ppt::build_ppt(&model, 5).unwrap();
        let rec = ppt::build_ppt(rep.recovered_model.as_ref().unwrap(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(160);
        for _ in 0..10 {
            let obs = random_two_time(&mut rng, 4, 5);
            let a = expectation(&truth, &obs).unwrap();
            let b = expectation(&rec, &obs).unwrap();
            assert!((a - b).norm() < 1e-8);
        }
    }

    #[test]
    fn uniform_gauge_recovers_process() {
        for seed in 0..3 {
            let model = haar(2, 2, true, 1, 20 + seed);
            let truth = ppt::build_ppt(&model, 5).unwrap();
            let (u, residual) = uniform_gauge(&truth).unwrap();
            assert!(residual < 1e-10);
            let mut psi = vec![C64::default(); 4];
            psi[0] = cr(1.0);
            let rec = OqeModel::new(2, 2, true, vec![u], psi).unwrap();
            let f = ppt::gauge_fidelity(&truth, &ppt::build_ppt(&rec, 5).unwrap()).unwrap();
            assert!(f > 1.0 - 1e-10);
        }
    }

    #[test]
    fn fit_from_truth_starts_at_global_minimum() {
        let model = haar(2, 2, true, 1, 30);
        let target = ppt::build_ppt(&model, 4).unwrap();
        let opts = FitOptions {
            init: Some(model.unitaries().to_vec()),
            ..FitOptions::default()
        };
        let rep = variational_fit(&target, 2, true, &opts).unwrap();
        assert!(rep.loss_trace[0] < 1e-12);
        assert!(rep.converged);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = haar(2, 2, false, 3, 31);
        let target = ppt::build_ppt(&model, 3).unwrap();
        let problem = FitProblem::new(&target, 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        let us: Vec<CMatrix> = (0..3)
            .map(|_| oqe::random_haar_unitary(4, &mut rng))
            .collect();
        let (l0, grads) = problem.evaluate(&us);
        let dir: Vec<CMatrix> = (0..3)
            .map(|_| oqe::gaussian_matrix(4, 4, &mut rng))
            .collect();
        let h = 1e-6;
        let moved: Vec<CMatrix> = us.iter().zip(&dir).map(|(u, v)| u + v * cr(h)).collect();
        let (l1, _) = problem.evaluate(&moved);
        let predicted: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, v)| -2.0 * g.component_mul(v).sum().re)
            .sum();
        assert!(
            ((l1 - l0) / h - predicted).abs() < 1e-4,
            "{} vs {predicted}",
            (l1 - l0) / h
        );
    }

    #[test]
    fn time_independent_fit_predicts_next_step() {
        let model = haar(2, 2, true, 1, 32);
        let mut oracle = MeasurementOracle::exact(model.clone(), 6).unwrap();
        let rec =
            disentangle_reconstruct(&mut oracle, 6, 2, &DisentangleOptions::default()).unwrap();
        let rep = variational_fit(&rec.recovered_mps, 2, true, &FitOptions::default()).unwrap();
        assert!(*rep.loss_trace.last().unwrap() < 1e-8);
        let future = predict_future(&rep, 7).unwrap();
        let truth = ppt::build_ppt(&model, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(320);
        for _ in 0..5 {
            let obs = MultiTimeObservable::single(7, random_hermitian(4, &mut rng)).unwrap();
            let a = expectation(&truth, &obs).unwrap();
            let b = expectation(&future, &obs).unwrap();
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn noisy_target_reports_residual() {
        let model = haar(2, 2, false, 4, 33);
        let target = ppt::build_ppt(&model, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(330);
        let sites: Vec<ComplexTensor> = target
            .sites()
            .iter()
            .map(|s| {
                let noise: Vec<C64> = s
                    .data()
                    .iter()
                    .map(|z| z + c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * 2e-4)
                    .collect();
                ComplexTensor::new(s.shape().to_vec(), noise).unwrap()
            })
            .collect();
        let noisy = ppt::to_right_canonical(&target.with_sites(sites).unwrap()).unwrap();
        let opts = FitOptions {
            restarts: 1,
            ..FitOptions::default()
        };
        let rep = variational_fit(&noisy, 2, false, &opts).unwrap();
        let first = rep.loss_trace[0];
        let last = *rep.loss_trace.last().unwrap();
        assert!(last <= first);
        assert!(last < 1e-5);
        assert!(last > 1e-12);
        assert_eq!(rep.converged, last < SUCCESS_LOSS);
        if !rep.converged {
            assert!(rep.notes.iter().any(|n| n.contains("residual")));
        }
    }

    #[test]
    fn prediction_needs_time_independent_model() {
        let model = haar(2, 2, false, 4, 34);
        let mut oracle = MeasurementOracle::exact(model, 4).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 4, 2, &DisentangleOptions::default()).unwrap();
        assert!(matches!(
            predict_future(&rep, 6),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn product_model_predictions_are_exact() {
        let model = haar(2, 1, true, 1, 35);
        let target = ppt::build_ppt(&model, 3).unwrap();
        let rep = variational_fit(&target, 1, true, &FitOptions::default()).unwrap();
        let future = predict_future(&rep, 6).unwrap();
        let truth = ppt::build_ppt(&model, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(350);
        for step in 4..=6 {
            let obs = MultiTimeObservable::single(step, random_hermitian(4, &mut rng)).unwrap();
            let diff = expectation(&truth, &obs).unwrap() - expectation(&future, &obs).unwrap();
            assert!(diff.norm() < 1e-12);
        }
    }

    #[test]
    fn entangled_recovery_matches_two_time_expectations() {
        let model = haar(2, 2, true, 1, 40)
            .with_initial_state(maximally_entangled(2))
            .unwrap();
        let mut oracle = MeasurementOracle::exact(model.clone(), 5).unwrap();
        let res = reconstruct_entangled_initial(&mut oracle, &EntangledOptions::default()).unwrap();
        assert!(!res.partial);
        let truth = ppt::build_ppt(&model, 5).unwrap();
        let rec = ppt::build_ppt(&res.model, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(400);
        for _ in 0..10 {
            let obs = random_two_time(&mut rng, 4, 5);
            let diff = expectation(&truth, &obs).unwrap() - expectation(&rec, &obs).unwrap();
            assert!(diff.norm() < 1e-6);
        }
    }

    #[test]
    fn entangled_recovery_finds_schmidt_weights() {
        let psi = schmidt_state(&[0.9f64.sqrt(), 0.1f64.sqrt()], 2, 2).unwrap();
        let model = haar(2, 2, true, 1, 41).with_initial_state(psi).unwrap();
        let mut oracle = MeasurementOracle::exact(model, 5).unwrap();
        let res = reconstruct_entangled_initial(&mut oracle, &EntangledOptions::default()).unwrap();
        assert!((res.schmidt.lambdas[0] - 0.9f64.sqrt()).abs() < 1e-6);
        assert!((res.schmidt.lambdas[1] - 0.1f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn separable_initial_state_has_one_outcome() {
        let model = haar(2, 2, true, 1, 42);
        let mut oracle = MeasurementOracle::exact(model, 5).unwrap();
        let res = reconstruct_entangled_initial(&mut oracle, &EntangledOptions::default()).unwrap();
        assert_eq!(res.schmidt.rank(), 1);
        assert!((res.schmidt.lambdas[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sampled_estimates_are_hermitian_with_unit_trace() {
        let model = haar(2, 2, true, 1, 50);
        let mode = OracleMode::Sampled(SamplingConfig {
            shots: 200,
            seed: 5,
        });
        let mut oracle = MeasurementOracle::new(model, 3, mode).unwrap();
        let rho = oracle.reduced_density(1, 2).unwrap().to_matrix().unwrap();
        assert!(tensor::max_abs(&(&rho - rho.adjoint())) < 1e-14);
        assert!((tensor::trace(&rho) - cr(1.0)).norm() < 1e-12);
    }

    #[test]
    fn sampled_mode_requires_qubits() {
        let model = haar(3, 1, true, 1, 51);
        let mode = OracleMode::Sampled(SamplingConfig { shots: 10, seed: 0 });
        assert!(matches!(
            MeasurementOracle::new(model, 2, mode),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn sampled_estimate_error_shrinks_with_shots() {
        let model = haar(2, 2, true, 1, 52);
        let exact = ppt::partial_process_tensor(&ppt::build_ppt(&model, 2).unwrap(), 1, 1).unwrap();
        let mut medians = Vec::new();
        for shots in [1_000u64, 10_000, 100_000] {
            let mut errs: Vec<f64> = (0..5)
                .map(|seed| {
                    let mode = OracleMode::Sampled(SamplingConfig { shots, seed });
                    let mut o = MeasurementOracle::new(model.clone(), 2, mode).unwrap();
                    let est = o.reduced_density(1, 1).unwrap().to_matrix().unwrap();
                    (&est - &exact).norm()
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            medians.push(errs[2]);
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "{medians:?}"
        );
    }

    #[test]
    fn report_json_roundtrip() {
        let model = haar(2, 2, true, 1, 60);
        let mut oracle = MeasurementOracle::exact(model, 3).unwrap();
        let rep =
            disentangle_reconstruct(&mut oracle, 3, 2, &DisentangleOptions::default()).unwrap();
        let back = ReconstructionReport::from_json_str(&rep.to_json_string().unwrap()).unwrap();
        assert_eq!(back, rep);
    }
}
