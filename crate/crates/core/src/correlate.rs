//! Multi-time correlations of a process.
//!
//! An insertion at step `n` is an operator on the pair `(o_n, i_n)` with index
//! `σ = o·d + i`; the value of an observable is `⟨Υ| ⊗_n M_n |Υ⟩`.

use serde::{Deserialize, Serialize};

use crate::cserde::{self, Pair};
use crate::error::{Error, Result};
use crate::oqe::OqeModel;
use crate::ppt::{self, Canonical, PptMps};
use crate::tensor::{self, cr, CMatrix, C64};

#[derive(Clone, Debug, PartialEq)]
pub struct Insertion {
    pub step: usize,
    pub matrix: CMatrix,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MultiTimeObservable {
    pub insertions: Vec<Insertion>,
}

impl MultiTimeObservable {
    pub fn new(insertions: Vec<Insertion>) -> Result<Self> {
        for w in insertions.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Validation(format!(
                    "insertion steps must be strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        if insertions.first().is_some_and(|i| i.step == 0) {
            return Err(Error::Validation("insertion steps start at 1".into()));
        }
        for ins in &insertions {
            if !ins.matrix.is_square() {
                return Err(Error::Validation(format!(
                    "operator at step {} is not square",
                    ins.step
                )));
            }
        }
        Ok(Self { insertions })
    }

    pub fn single(step: usize, matrix: CMatrix) -> Result<Self> {
        Self::new(vec![Insertion { step, matrix }])
    }

    /// Checks operator sizes and step range against a process with `n_steps` steps.
    pub fn validate_for(&self, d: usize, n_steps: usize) -> Result<()> {
        let q = d * d;
        for ins in &self.insertions {
            if ins.step > n_steps {
                return Err(Error::Range(format!(
                    "insertion at step {} beyond N = {n_steps}",
                    ins.step
                )));
            }
            if ins.matrix.shape() != (q, q) {
                return Err(Error::Validation(format!(
                    "operator at step {} has shape {:?}, expected {q}x{q}",
                    ins.step,
                    ins.matrix.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn last_step(&self) -> usize {
        self.insertions.last().map(|i| i.step).unwrap_or(0)
    }

    pub fn to_json(&self) -> ObservableJson {
        ObservableJson {
            insertions: self
                .insertions
                .iter()
                .map(|i| InsertionJson {
                    step: i.step,
                    matrix: cserde::matrix_to_pairs(&i.matrix),
                })
                .collect(),
        }
    }

    pub fn from_json(doc: &ObservableJson) -> Result<Self> {
        let insertions = doc
            .insertions
            .iter()
            .map(|i| {
                Ok(Insertion {
                    step: i.step,
                    matrix: cserde::square_from_pairs(&i.matrix)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(insertions)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Self::from_json(&serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObservableJson {
    pub insertions: Vec<InsertionJson>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InsertionJson {
    pub step: usize,
    pub matrix: Vec<Pair>,
}

/// Composite operator for measuring `effect` on the output after preparing
/// `prep` on the input: `effect ⊗ prep^T`.
pub fn prep_measure(effect: &CMatrix, prep: &CMatrix) -> CMatrix {
    effect.kronecker(&prep.transpose())
}

/// `Σ_{σ,τ} M[σ,τ] B^σ† L B^τ`.
fn sandwich(kraus: &[CMatrix], m: &CMatrix, l: &CMatrix) -> CMatrix {
    let dr = kraus[0].ncols();
    let lb: Vec<CMatrix> = kraus.iter().map(|b| l * b).collect();
    let mut out = CMatrix::zeros(dr, dr);
    for (s, bs) in kraus.iter().enumerate() {
        let mut acc = CMatrix::zeros(l.nrows(), dr);
        for (t, lbt) in lb.iter().enumerate() {
            let w = m[(s, t)];
            if w != C64::default() {
                acc += lbt * w;
            }
        }
        out += bs.adjoint() * acc;
    }
    out
}

/// Value of a multi-time observable by left-to-right contraction of the MPS.
pub fn expectation(mps: &PptMps, obs: &MultiTimeObservable) -> Result<C64> {
    obs.validate_for(mps.d(), mps.len())?;
    let stop = if mps.canonical() == Canonical::Right {
        obs.last_step()
    } else {
        mps.len()
    };
    let mut l = mps.left_boundary();
    let mut next = obs.insertions.iter().peekable();
    for n in 1..=stop {
        let kraus = mps.kraus(n - 1);
        l = match next.peek() {
            Some(ins) if ins.step == n => {
                let ins = next.next().expect("peeked");
                sandwich(&kraus, &ins.matrix, &l)
            }
            _ => ppt::apply_left(&kraus, &l),
        };
    }
    Ok(tensor::trace(&l))
}

/// Independent oracle: simulates the generating circuit register by register,
/// storing the full pure state over `(o_0, o_1, i_1, ..., o_N, i_N, E)`.
pub fn dense_expectation(
    model: &OqeModel,
    n_steps: usize,
    obs: &MultiTimeObservable,
) -> Result<C64> {
    let (d, env) = (model.d(), model.env_dim());
    obs.validate_for(d, n_steps)?;
    let q = d * d;
    let len = d as u128 * (q as u128).pow(n_steps as u32) * env as u128;
    if len > ppt::DENSE_STATE_LIMIT as u128 {
        return Err(Error::Capacity {
            needed: len,
            limit: ppt::DENSE_STATE_LIMIT as u128,
        });
    }
    // layout (records, live system, E); the initial system is the first record
    let mut prefix = 1usize;
    let mut state: Vec<C64> = model.initial_state().to_vec();
    let pair = cr(1.0 / (d as f64).sqrt());
    let dim = d * env;
    for n in 1..=n_steps {
        let u = model.unitary(n)?;
        // the live system becomes a record, a fresh pair (ancilla, live) is appended
        let mut grown = vec![C64::default(); prefix * d * d * dim];
        for p in 0..prefix {
            for s in 0..d {
                for e in 0..env {
                    let amp = state[(p * d + s) * env + e];
                    if amp == C64::default() {
                        continue;
                    }
                    for i in 0..d {
                        grown[(((p * d + s) * d + i) * d + i) * env + e] = amp * pair;
                    }
                }
            }
        }
        prefix *= d * d;
        let mut next = vec![C64::default(); prefix * dim];
        for p in 0..prefix {
            let base = p * dim;
            for r in 0..dim {
                let mut acc = C64::default();
                for c in 0..dim {
                    let v = grown[base + c];
                    if v != C64::default() {
                        acc += u[(r, c)] * v;
                    }
                }
                next[base + r] = acc;
            }
        }
        state = next;
    }
    // registers are now (o_0, i_1, o_1, i_2, o_2, ..., i_N, o_N, E)
    let mut regs = vec![d; 2 * n_steps + 1];
    regs.push(env);
    let t = tensor::ComplexTensor::new(regs, state)?;
    let mut perm = vec![0usize];
    for k in 1..=n_steps {
        perm.push(2 * k);
        perm.push(2 * k - 1);
    }
    perm.push(2 * n_steps + 1);
    let ordered = t.permute(&perm)?;
    let psi = ordered.data();

    let mut phi = psi.to_vec();
    for ins in &obs.insertions {
        let k = ins.step;
        let inner = q.pow((n_steps - k) as u32) * env;
        let outer = d * q.pow((k - 1) as u32);
        let mut out = vec![C64::default(); phi.len()];
        for a in 0..outer {
            for s in 0..q {
                for b in 0..inner {
                    let mut acc = C64::default();
                    for t2 in 0..q {
                        let m = ins.matrix[(s, t2)];
                        if m != C64::default() {
                            acc += m * phi[(a * q + t2) * inner + b];
                        }
                    }
                    out[(a * q + s) * inner + b] = acc;
                }
            }
        }
        phi = out;
    }
    Ok(psi.iter().zip(&phi).map(|(x, y)| x.conj() * y).sum())
}
