//! Purified process tensors as matrix product states.
//!
//! Site `n` is a rank-4 tensor `B[α_{n-1}, o_n, i_n, α_n]` whose physical
//! index is the pair `σ = o·d + i`. The last right bond is left open: it
//! carries the final environment state. An optional `initial` matrix `K`
//! (`p x α_0`) prepends a physical leg of dimension `p` and fixes the first
//! left bond; without it the first left bond has dimension one.

use serde::{Deserialize, Serialize};

use crate::cserde::{self, Pair};
use crate::error::{Error, Result};
use crate::oqe::{self, OqeModel};
use crate::tensor::{self, contract, cr, CMatrix, ComplexTensor, C64};

/// Largest physical dimension for which a dense process tensor is formed.
pub const DENSE_PHYS_LIMIT: usize = 4096;
/// Largest statevector length built for oracle comparisons.
pub const DENSE_STATE_LIMIT: usize = 1 << 20;
pub const SCHMIDT_TOL: f64 = 1e-8;
const ZERO_SINGULAR: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Canonical {
    None,
    Right,
    Mixed,
}

/// How the initial joint state enters the chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialLeg {
    /// Initial environment vector contracted into the first site.
    #[default]
    Absorbed,
    /// Initial environment vector kept as a `1 x D` boundary matrix.
    Vector,
    /// Initial system output `o_0` kept as a physical leg; `K` is the `d x D`
    /// reshaping of the joint initial state.
    SystemLeg,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PptMps {
    d: usize,
    sites: Vec<ComplexTensor>,
    canonical: Canonical,
    initial: Option<CMatrix>,
}

impl PptMps {
    pub fn new(d: usize, sites: Vec<ComplexTensor>, initial: Option<CMatrix>) -> Result<Self> {
        Self::with_flag(d, sites, initial, Canonical::None)
    }

    fn with_flag(
        d: usize,
        sites: Vec<ComplexTensor>,
        initial: Option<CMatrix>,
        canonical: Canonical,
    ) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Validation("MPS needs at least one site".into()));
        }
        for (n, s) in sites.iter().enumerate() {
            let sh = s.shape();
            if sh.len() != 4 || sh[1] != d || sh[2] != d {
                return Err(Error::Dimension(format!(
                    "site {} has shape {sh:?}, expected [Dl, {d}, {d}, Dr]",
                    n + 1
                )));
            }
            if n > 0 && sites[n - 1].shape()[3] != sh[0] {
                return Err(Error::Dimension(format!(
                    "bond mismatch between sites {n} and {}",
                    n + 1
                )));
            }
        }
        let dl0 = sites[0].shape()[0];
        match &initial {
            None if dl0 != 1 => {
                return Err(Error::Dimension(format!(
                    "first left bond is {dl0} but no initial boundary matrix was given"
                )))
            }
            Some(k) if k.ncols() != dl0 || k.nrows() == 0 => {
                return Err(Error::Dimension(format!(
                    "initial matrix {:?} does not match first bond {dl0}",
                    k.shape()
                )))
            }
            _ => {}
        }
        Ok(Self {
            d,
            sites,
            canonical,
            initial,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Local physical dimension `d²` of one site.
    pub fn q(&self) -> usize {
        self.d * self.d
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[ComplexTensor] {
        &self.sites
    }

    pub fn canonical(&self) -> Canonical {
        self.canonical
    }

    pub fn initial(&self) -> Option<&CMatrix> {
        self.initial.as_ref()
    }

    /// `[α_0, α_1, ..., α_N]`.
    pub fn bond_dims(&self) -> Vec<usize> {
        std::iter::once(self.sites[0].shape()[0])
            .chain(self.sites.iter().map(|s| s.shape()[3]))
            .collect()
    }

    pub fn env_dim(&self) -> usize {
        self.sites.last().map(|s| s.shape()[3]).unwrap_or(1)
    }

    /// Dimension of the leading physical leg (1 when absent).
    pub fn prefix_dim(&self) -> usize {
        self.initial.as_ref().map(|k| k.nrows()).unwrap_or(1)
    }

    /// Matrices `B^σ` (`Dl x Dr`) of site `n` (0-based).
    pub fn kraus(&self, n: usize) -> Vec<CMatrix> {
        site_kraus(&self.sites[n])
    }

    /// Boundary environment state `K^† K` (or `[[1]]`) in the left-action convention.
    pub fn left_boundary(&self) -> CMatrix {
        match &self.initial {
            Some(k) => k.adjoint() * k,
            None => CMatrix::identity(1, 1),
        }
    }

    /// Max deviation of `Σ_σ B^σ B^σ†` from the identity over all sites.
    pub fn right_canonical_residual(&self) -> f64 {
        (0..self.len())
            .map(|n| site_right_residual(&self.sites[n]))
            .fold(0.0, f64::max)
    }

    /// Max deviation of `Σ_σ B^σ† B^σ` from the identity over sites `from..`.
    pub fn left_canonical_residual(&self, from: usize) -> f64 {
        (from..self.len())
            .map(|n| site_left_residual(&self.sites[n]))
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        let mut l = self.left_boundary();
        for n in 0..self.len() {
            l = apply_left(&self.kraus(n), &l);
        }
        tensor::trace(&l).re.max(0.0).sqrt()
    }

    pub fn with_sites(&self, sites: Vec<ComplexTensor>) -> Result<Self> {
        Self::new(self.d, sites, self.initial.clone())
    }

    pub fn to_json(&self) -> PptMpsJson {
        PptMpsJson {
            format_version: 1,
            d: self.d,
            canonical: self.canonical,
            bond_dims: self.bond_dims(),
            sites: self
                .sites
                .iter()
                .map(|s| cserde::to_pairs(s.data()))
                .collect(),
            initial: self.initial.as_ref().map(|k| BoundaryJson {
                rows: k.nrows(),
                cols: k.ncols(),
                data: cserde::matrix_to_pairs(k),
            }),
        }
    }

    pub fn from_json(doc: &PptMpsJson) -> Result<Self> {
        if doc.format_version != 1 {
            return Err(Error::Validation(format!(
                "unsupported format_version {}",
                doc.format_version
            )));
        }
        if doc.bond_dims.len() != doc.sites.len() + 1 {
            return Err(Error::Validation(
                "bond_dims must have one more entry than sites".into(),
            ));
        }
        let sites = doc
            .sites
            .iter()
            .enumerate()
            .map(|(n, data)| {
                ComplexTensor::new(
                    vec![doc.bond_dims[n], doc.d, doc.d, doc.bond_dims[n + 1]],
                    cserde::from_pairs(data)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let initial = doc
            .initial
            .as_ref()
            .map(|b| cserde::matrix_from_pairs(&b.data, b.rows, b.cols))
            .transpose()?;
        Self::with_flag(doc.d, sites, initial, doc.canonical)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_json())?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PptMpsJson {
    pub format_version: u32,
    pub d: usize,
    pub canonical: Canonical,
    pub bond_dims: Vec<usize>,
    pub sites: Vec<Vec<Pair>>,
    pub initial: Option<BoundaryJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Pair>,
}

pub fn site_kraus(site: &ComplexTensor) -> Vec<CMatrix> {
    let sh = site.shape();
    let (dl, q, dr) = (sh[0], sh[1] * sh[2], sh[3]);
    let data = site.data();
    (0..q)
        .map(|s| CMatrix::from_fn(dl, dr, |a, b| data[(a * q + s) * dr + b]))
        .collect()
}

pub fn site_from_kraus(kraus: &[CMatrix], d: usize) -> Result<ComplexTensor> {
    let q = d * d;
    if kraus.len() != q {
        return Err(Error::Dimension(format!(
            "need {q} matrices, got {}",
            kraus.len()
        )));
    }
    let (dl, dr) = kraus[0].shape();
    let mut data = vec![C64::default(); dl * q * dr];
    for (s, m) in kraus.iter().enumerate() {
        for a in 0..dl {
            for b in 0..dr {
                data[(a * q + s) * dr + b] = m[(a, b)];
            }
        }
    }
    ComplexTensor::new(vec![dl, d, d, dr], data)
}

/// `Σ_σ B^σ† ρ B^σ`.
pub(crate) fn apply_left(kraus: &[CMatrix], rho: &CMatrix) -> CMatrix {
    let (_, dr) = kraus[0].shape();
    kraus
        .iter()
        .fold(CMatrix::zeros(dr, dr), |acc, b| acc + b.adjoint() * rho * b)
}

/// `Σ_σ B^σ r B^σ†`.
pub(crate) fn apply_right(kraus: &[CMatrix], r: &CMatrix) -> CMatrix {
    let (dl, _) = kraus[0].shape();
    kraus
        .iter()
        .fold(CMatrix::zeros(dl, dl), |acc, b| acc + b * r * b.adjoint())
}

fn site_right_residual(site: &ComplexTensor) -> f64 {
    let k = site_kraus(site);
    let dr = k[0].ncols();
    let g = apply_right(&k, &CMatrix::identity(dr, dr));
    tensor::max_abs(&(&g - CMatrix::identity(g.nrows(), g.nrows())))
}

fn site_left_residual(site: &ComplexTensor) -> f64 {
    let k = site_kraus(site);
    let dl = k[0].nrows();
    let g = apply_left(&k, &CMatrix::identity(dl, dl));
    tensor::max_abs(&(&g - CMatrix::identity(g.nrows(), g.nrows())))
}

/// `B^{o,i}_{a,b} = U[(o,b),(i,a)] / √d` for a `dD x dD` step unitary.
pub fn site_from_unitary(u: &CMatrix, d: usize, env_dim: usize) -> Result<ComplexTensor> {
    let n = d * env_dim;
    if u.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "unitary shape {:?} is not {n}x{n}",
            u.shape()
        )));
    }
    let scale = cr(1.0 / (d as f64).sqrt());
    let mut t = ComplexTensor::zeros(vec![env_dim, d, d, env_dim]);
    for a in 0..env_dim {
        for o in 0..d {
            for i in 0..d {
                for b in 0..env_dim {
                    t.set(&[a, o, i, b], u[(o * env_dim + b, i * env_dim + a)] * scale);
                }
            }
        }
    }
    Ok(t)
}

/// Inverse of [`site_from_unitary`] for square bonds.
pub fn unitary_from_site(site: &ComplexTensor) -> Result<CMatrix> {
    let sh = site.shape();
    if sh.len() != 4 || sh[0] != sh[3] || sh[1] != sh[2] {
        return Err(Error::Dimension(format!(
            "site shape {sh:?} is not [D, d, d, D]"
        )));
    }
    let (env, d) = (sh[0], sh[1]);
    let scale = cr((d as f64).sqrt());
    Ok(CMatrix::from_fn(d * env, d * env, |r, cidx| {
        let (o, b) = (r / env, r % env);
        let (i, a) = (cidx / env, cidx % env);
        site.get(&[a, o, i, b]) * scale
    }))
}

/// `I_p ⊗ B`: carries an extra `p`-dimensional label through the bond.
fn lift_site(site: &ComplexTensor, p: usize) -> ComplexTensor {
    let sh = site.shape();
    let (dl, d, dr) = (sh[0], sh[1], sh[3]);
    let mut t = ComplexTensor::zeros(vec![p * dl, d, d, p * dr]);
    for x in 0..p {
        for a in 0..dl {
            for o in 0..d {
                for i in 0..d {
                    for b in 0..dr {
                        t.set(&[x * dl + a, o, i, x * dr + b], site.get(&[a, o, i, b]));
                    }
                }
            }
        }
    }
    t
}

/// Contracts a boundary row vector into the left bond of a site.
fn absorb(nu: &[C64], site: &ComplexTensor) -> Result<ComplexTensor> {
    let v = ComplexTensor::new(vec![1, nu.len()], nu.to_vec())?;
    contract(&v, site, &[(1, 0)])
}

pub fn build_ppt(model: &OqeModel, n_steps: usize) -> Result<PptMps> {
    build_ppt_with(model, n_steps, InitialLeg::Absorbed)
}

pub fn build_ppt_with(model: &OqeModel, n_steps: usize, leg: InitialLeg) -> Result<PptMps> {
    if n_steps == 0 {
        return Err(Error::Validation("N must be at least 1".into()));
    }
    if let Some(max) = model.max_steps() {
        if n_steps > max {
            return Err(Error::Validation(format!(
                "model defines {max} steps, {n_steps} requested"
            )));
        }
    }
    let (d, env) = (model.d(), model.env_dim());
    let mut sites = (1..=n_steps)
        .map(|n| site_from_unitary(model.unitary(n)?, d, env))
        .collect::<Result<Vec<_>>>()?;
    let psi = model.initial_state();
    let initial = match leg {
        InitialLeg::SystemLeg => Some(CMatrix::from_row_slice(d, env, psi)),
        InitialLeg::Absorbed | InitialLeg::Vector => {
            let nu: Vec<C64> = if model.is_entangled() {
                sites = sites.iter().map(|s| lift_site(s, d)).collect();
                psi.to_vec()
            } else {
                oqe::schmidt_decompose(psi, d, env)?
                    .env_basis
                    .swap_remove(0)
            };
            if leg == InitialLeg::Absorbed {
                sites[0] = absorb(&nu, &sites[0])?;
                None
            } else {
                Some(CMatrix::from_row_slice(1, nu.len(), &nu))
            }
        }
    };
    PptMps::with_flag(d, sites, initial, Canonical::Right)
}

/// Isometry residual of every step map of a model.
pub fn check_isometry(model: &OqeModel) -> f64 {
    oqe::check_isometry_of(model.unitaries(), model.d(), model.env_dim())
}

/// One right-to-left SVD sweep leaving every site right-canonical and the
/// state normalized.
pub fn to_right_canonical(mps: &PptMps) -> Result<PptMps> {
    let n_sites = mps.len();
    let d = mps.d;
    let mut out: Vec<ComplexTensor> = vec![ComplexTensor::zeros(vec![1]); n_sites];
    let dr_last = mps.env_dim();
    let mut carry = tensor::ComplexTensor::identity(dr_last);
    for n in (0..n_sites).rev() {
        let m = contract(&mps.sites[n], &carry, &[(3, 0)])?;
        let sh = m.shape().to_vec();
        let (dl, dr) = (sh[0], sh[3]);
        let mat = m.as_matrix(1);
        let dec = tensor::svd(&mat);
        let s0 = dec.s.first().copied().unwrap_or(0.0);
        if s0 == 0.0 || !s0.is_finite() {
            return Err(Error::DegenerateState);
        }
        let rank = dec.s.iter().filter(|&&s| s > ZERO_SINGULAR * s0).count();
        let (site, next) = if rank == dl {
            let uvh = &dec.u * &dec.vh;
            let mut us = dec.u.clone();
            for (j, &sv) in dec.s.iter().enumerate() {
                us.column_mut(j).scale_mut(sv);
            }
            (uvh, us * dec.u.adjoint())
        } else {
            let t = dec.truncate(rank);
            let mut us = t.u.clone();
            for (j, &sv) in t.s.iter().enumerate() {
                us.column_mut(j).scale_mut(sv);
            }
            (t.vh, us)
        };
        let rows = site.nrows();
        out[n] = ComplexTensor::from_matrix(&site).into_reshape(vec![rows, d, d, dr])?;
        carry = ComplexTensor::from_matrix(&next);
    }
    let carry = carry.to_matrix()?;
    let initial = match &mps.initial {
        Some(k) => {
            let k2 = k * carry;
            let nrm = k2.norm();
            if !(nrm > 0.0) {
                return Err(Error::DegenerateState);
            }
            Some(k2 / cr(nrm))
        }
        None => {
            // 1 x 1: the overall scale, discarded by normalization
            if !(carry[(0, 0)].norm() > 0.0) {
                return Err(Error::DegenerateState);
            }
            let phase = carry[(0, 0)] / cr(carry[(0, 0)].norm());
            out[0] = out[0].scale(phase);
            None
        }
    };
    PptMps::with_flag(d, out, initial, Canonical::Right)
}

/// Schmidt spectra at every cut, left to right. The first entry is the cut
/// after the leading physical leg when one is present.
pub fn schmidt_spectra(mps: &PptMps) -> Result<Vec<Vec<f64>>> {
    let rc = to_right_canonical(mps)?;
    let mut spectra = Vec::with_capacity(rc.len() + 1);
    let mut center = match &rc.initial {
        Some(k) => {
            let dec = tensor::svd(k);
            spectra.push(dec.s.clone());
            let mut svh = dec.vh.clone();
            for (j, &s) in dec.s.iter().enumerate() {
                svh.row_mut(j).scale_mut(s);
            }
            svh
        }
        None => CMatrix::identity(1, 1),
    };
    for site in &rc.sites {
        let m = contract(&ComplexTensor::from_matrix(&center), site, &[(1, 0)])?;
        let dec = tensor::svd(&m.as_matrix(3));
        let mut svh = dec.vh.clone();
        for (j, &s) in dec.s.iter().enumerate() {
            svh.row_mut(j).scale_mut(s);
        }
        spectra.push(dec.s);
        center = svh;
    }
    Ok(spectra)
}

/// Largest number of Schmidt values above `tol` across all cuts.
pub fn memory_size(mps: &PptMps, tol: f64) -> Result<usize> {
    Ok(schmidt_spectra(mps)?
        .iter()
        .map(|s| s.iter().filter(|&&x| x > tol).count())
        .max()
        .unwrap_or(1))
}

/// Recovers step unitaries from a right-canonical MPS.
///
/// Every site is embedded into a common environment of dimension equal to the
/// largest bond, projected onto the nearest isometry and completed to a
/// unitary. Returns the time-dependent model and the per-site distance
/// between the scaled site matrix and its projection.
pub fn mps_to_oqe(mps: &PptMps) -> Result<(OqeModel, Vec<f64>)> {
    let rc_res = mps.right_canonical_residual();
    if rc_res > 1e-8 {
        return Err(Error::Validation(format!(
            "MPS is not right-canonical (residual {rc_res:.3e})"
        )));
    }
    let d = mps.d;
    let env = *mps.bond_dims().iter().max().unwrap_or(&1);
    let n_big = d * env;
    let sqd = (d as f64).sqrt();
    let mut unitaries = Vec::with_capacity(mps.len());
    let mut residuals = Vec::with_capacity(mps.len());
    for (n, site) in mps.sites.iter().enumerate() {
        let sh = site.shape();
        let (dl, dr) = (sh[0], sh[3]);
        let mut a = CMatrix::zeros(n_big, d * dl);
        for al in 0..dl {
            for o in 0..d {
                for i in 0..d {
                    for b in 0..dr {
                        a[(o * env + b, i * dl + al)] = site.get(&[al, o, i, b]) * sqd;
                    }
                }
            }
        }
        let w = tensor::polar_isometry(&a).map_err(|e| Error::Conversion {
            site: n + 1,
            reason: e.to_string(),
        })?;
        residuals.push((&a - &w).norm());
        let full = tensor::complete_unitary(&w);
        let mut u = CMatrix::zeros(n_big, n_big);
        let mut extra = d * dl;
        for i in 0..d {
            for al in 0..env {
                let src = if al < dl {
                    i * dl + al
                } else {
                    extra += 1;
                    extra - 1
                };
                u.set_column(i * env + al, &full.column(src));
            }
        }
        unitaries.push(u);
    }
    let mut psi = vec![C64::default(); n_big];
    match &mps.initial {
        None => psi[0] = cr(1.0),
        Some(k) if k.nrows() == 1 => {
            for e in 0..k.ncols() {
                psi[e] = k[(0, e)];
            }
        }
        Some(k) if k.nrows() == d => {
            for s in 0..d {
                for e in 0..k.ncols() {
                    psi[s * env + e] = k[(s, e)];
                }
            }
        }
        Some(k) => {
            return Err(Error::Conversion {
                site: 0,
                reason: format!("initial leg of dimension {} is neither 1 nor d", k.nrows()),
            })
        }
    }
    let nrm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    psi.iter_mut().for_each(|z| *z /= nrm);
    let model = OqeModel::new(d, env, false, unitaries, psi)?;
    Ok((model, residuals))
}

/// Full statevector over `(o_0?, σ_1, ..., σ_N, α_N)`, row-major.
pub fn to_statevector(mps: &PptMps) -> Result<Vec<C64>> {
    let len =
        mps.prefix_dim() as u128 * (mps.q() as u128).pow(mps.len() as u32) * mps.env_dim() as u128;
    if len > DENSE_STATE_LIMIT as u128 {
        return Err(Error::Capacity {
            needed: len,
            limit: DENSE_STATE_LIMIT as u128,
        });
    }
    let mut psi = match &mps.initial {
        Some(k) => ComplexTensor::from_matrix(k),
        None => ComplexTensor::identity(1),
    };
    for site in &mps.sites {
        let t = contract(&psi, site, &[(1, 0)])?;
        let rows = t.shape()[0] * mps.q();
        let dr = site.shape()[3];
        psi = t.into_reshape(vec![rows, dr])?;
    }
    Ok(psi.into_data())
}

/// Dense Choi state of the process, the environment traced out.
pub fn ppt_to_process_tensor(mps: &PptMps) -> Result<ComplexTensor> {
    let phys = mps.prefix_dim() as u128 * (mps.q() as u128).pow(mps.len() as u32);
    if phys > DENSE_PHYS_LIMIT as u128 {
        return Err(Error::Capacity {
            needed: phys,
            limit: DENSE_PHYS_LIMIT as u128,
        });
    }
    let psi = to_statevector(mps)?;
    let env = mps.env_dim();
    let m = CMatrix::from_row_slice(phys as usize, env, &psi);
    Ok(ComplexTensor::from_matrix(&(&m * m.adjoint())))
}

/// Environment state entering site `n` (0-based), starting from the boundary.
pub fn left_environment(mps: &PptMps, n: usize) -> CMatrix {
    let mut l = mps.left_boundary();
    for k in 0..n {
        l = apply_left(&mps.kraus(k), &l);
    }
    l
}

/// Contraction of sites `n..` with their conjugates, open on the left bond of site `n`.
pub fn right_environment(mps: &PptMps, n: usize) -> CMatrix {
    let env = mps.env_dim();
    let mut r = CMatrix::identity(env, env);
    for k in (n..mps.len()).rev() {
        r = apply_right(&mps.kraus(k), &r);
    }
    r
}

fn psd_factor(m: &CMatrix) -> CMatrix {
    let (vals, vecs) = tensor::eigh(m);
    let keep: Vec<usize> = (0..vals.len()).filter(|&k| vals[k] > 0.0).collect();
    let mut p = CMatrix::zeros(m.nrows(), keep.len().max(1));
    for (j, &k) in keep.iter().enumerate() {
        p.set_column(j, &(vecs.column(k) * cr(vals[k].sqrt())));
    }
    p
}

/// Reduced density operator of a block of consecutive sites, given the left
/// environment `l` and the right environment `r`. The first site of the block
/// is the most significant digit of the block index.
pub fn block_density(l: &CMatrix, sites: &[ComplexTensor], r: &CMatrix) -> CMatrix {
    if sites.is_empty() {
        let val = tensor::trace(&(l.transpose() * r));
        return CMatrix::from_element(1, 1, val);
    }
    let p = psd_factor(l);
    let q = psd_factor(r);
    let mut blocks: Vec<CMatrix> = vec![p.adjoint()];
    for site in sites {
        let kraus = site_kraus(site);
        blocks = blocks
            .iter()
            .flat_map(|x| kraus.iter().map(move |b| x * b))
            .collect();
    }
    let width = p.ncols() * q.ncols();
    let mut v = CMatrix::zeros(blocks.len(), width);
    for (s, x) in blocks.iter().enumerate() {
        let y = x * &q;
        for (k, z) in tensor::vec_rows(&y).into_iter().enumerate() {
            v[(s, k)] = z;
        }
    }
    &v * v.adjoint()
}

/// Reduced density operator of sites `first..=last` (1-based) of the PPT.
pub fn partial_process_tensor(mps: &PptMps, first: usize, last: usize) -> Result<CMatrix> {
    if first == 0 || last > mps.len() || first > last + 1 {
        return Err(Error::Range(format!(
            "site range {first}..={last} outside 1..={}",
            mps.len()
        )));
    }
    let width = (last + 1 - first) as u32;
    let dim = (mps.q() as u128).pow(width);
    if dim > DENSE_PHYS_LIMIT as u128 {
        return Err(Error::Capacity {
            needed: dim,
            limit: DENSE_PHYS_LIMIT as u128,
        });
    }
    let l = left_environment(mps, first - 1);
    let r = if mps.canonical == Canonical::Right {
        let dr = if last == 0 {
            mps.sites[0].shape()[0]
        } else {
            mps.sites[last - 1].shape()[3]
        };
        CMatrix::identity(dr, dr)
    } else {
        right_environment(mps, last)
    };
    Ok(block_density(&l, &mps.sites[first - 1..last], &r))
}

/// `⟨a|b⟩` including the final environment leg.
pub fn overlap(a: &PptMps, b: &PptMps) -> Result<C64> {
    let m = environment_overlap(a, b)?;
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension("environment legs differ".into()));
    }
    Ok(tensor::trace(&m))
}

/// Overlap matrix between the final environment legs of two MPS,
/// `M[α, β] = ⟨a, α | b, β⟩` with the physical legs contracted.
pub fn environment_overlap(a: &PptMps, b: &PptMps) -> Result<CMatrix> {
    if a.len() != b.len() || a.d != b.d || a.prefix_dim() != b.prefix_dim() {
        return Err(Error::Dimension("MPS layouts differ".into()));
    }
    let ka = a.initial.clone().unwrap_or_else(|| CMatrix::identity(1, 1));
    let kb = b.initial.clone().unwrap_or_else(|| CMatrix::identity(1, 1));
    let mut m = ka.adjoint() * kb;
    for n in 0..a.len() {
        let ba = a.kraus(n);
        let bb = b.kraus(n);
        m = ba.iter().zip(&bb).fold(
            CMatrix::zeros(ba[0].ncols(), bb[0].ncols()),
            |acc, (x, y)| acc + x.adjoint() * &m * y,
        );
    }
    Ok(m)
}

/// Fidelity between two normalized PPTs up to a unitary on the environment
/// leg: the squared trace norm of their environment overlap matrix.
pub fn gauge_fidelity(a: &PptMps, b: &PptMps) -> Result<f64> {
    let m = environment_overlap(a, b)?;
    let nrm = a.norm() * b.norm();
    let tn: f64 = tensor::svd(&m).s.iter().sum();
    Ok(((tn / nrm) * (tn / nrm)).min(1.0))
}
