//! Imaginary-time steps driven by two-qubit measurements with an ancilla.
//!
//! A measured cell is paired with a fresh |0> ancilla and the pair is measured
//! in a four-outcome basis. Outcomes 0 and 1 realize `e^{αP}` up to a Pauli
//! byproduct; outcomes 2 and 3 reject the run.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::ModelSpec;
use crate::protocol::{Engine, Evolution, Faults, Outcomes, RunRecord, SimPlan, Stage};
use crate::qstate::{fidelity, fourier_matrix, Init, MeasBasis, PauliOp, Register, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PairKind {
    /// Plaquette-type: `e^{αX}|s>` on the cell.
    A,
    /// Field-type: `e^{αZ}H|s>` on the source of a teleport.
    B,
}

fn c(x: f64) -> C64 {
    C64::new(x, 0.0)
}

/// The two accepting vectors, indexed `cell + 2·ancilla`.
pub fn accepting_vectors(kind: PairKind, alpha: f64) -> [[C64; 4]; 2] {
    let pre = (-alpha.abs()).exp();
    let tail = (2.0 * alpha.abs()).sinh().sqrt();
    let sgn = if alpha < 0.0 { -1.0 } else { 1.0 };
    let r = 0.5f64.sqrt();
    let (ch, sh) = (alpha.cosh(), alpha.sinh());
    let (ep, em) = (alpha.exp(), (-alpha).exp());
    match kind {
        // e^{αX}|s>, plus ±√sinh2|α| |-,1>
        PairKind::A => [
            [c(pre * ch), c(pre * sh), c(pre * tail * r), c(-pre * tail * r)],
            [c(pre * sh), c(pre * ch), c(-sgn * pre * tail * r), c(sgn * pre * tail * r)],
        ],
        // e^{αZ}|±>, plus ±√sinh2|α| |1,1>
        PairKind::B => [
            [c(pre * ep * r), c(pre * em * r), c(0.0), c(pre * tail)],
            [c(pre * ep * r), c(-pre * em * r), c(0.0), c(-sgn * pre * tail)],
        ],
    }
}

fn fill_ins(kind: PairKind) -> [[C64; 4]; 2] {
    let r = 0.5f64.sqrt();
    match kind {
        PairKind::A => [[c(0.0), c(0.0), c(0.0), c(1.0)], [c(0.0), c(0.0), c(1.0), c(0.0)]],
        PairKind::B => [[c(0.0), c(0.0), c(0.0), c(1.0)], [c(0.0), c(0.0), c(r), c(r)]],
    }
}

fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Appends `v` orthogonalized against `done` if it keeps enough weight.
fn gram_schmidt_push(done: &mut Vec<Vec<C64>>, v: &[C64]) -> bool {
    let mut w = v.to_vec();
    for _ in 0..2 {
        for u in done.iter() {
            let ip = inner(u, &w);
            for (wi, ui) in w.iter_mut().zip(u) {
                *wi -= ip * ui;
            }
        }
    }
    let norm = inner(&w, &w).re.sqrt();
    if norm < 1e-6 {
        return false;
    }
    done.push(w.into_iter().map(|z| z / norm).collect());
    true
}

/// Orthonormal four-outcome basis on (cell, ancilla).
pub fn build_basis(kind: PairKind, alpha: f64) -> Result<MeasBasis> {
    if !alpha.is_finite() {
        return Err(Error::Invalid(format!("step parameter {alpha}")));
    }
    let mut vecs: Vec<Vec<C64>> = accepting_vectors(kind, alpha).iter().map(|v| v.to_vec()).collect();
    for f in fill_ins(kind) {
        gram_schmidt_push(&mut vecs, &f);
    }
    for i in 0..4 {
        if vecs.len() == 4 {
            break;
        }
        let mut e = vec![c(0.0); 4];
        e[i] = c(1.0);
        gram_schmidt_push(&mut vecs, &e);
    }
    MeasBasis::custom(2, 2, vecs, 1e-10)
}

/// Max-entry deviation between the measured map and
/// `(1/√2) e^{-|α|} Z(nbrs)^s e^{α Z(nbrs)}` on a random neighbour state.
pub fn a_factor_deviation(alpha: f64, s: usize, neighbours: usize, psi: &[C64]) -> Result<f64> {
    let nbrs: Vec<u64> = (1..=neighbours as u64).collect();
    let mut reg = Register::from_amplitudes(2, nbrs.clone(), psi.to_vec())?;
    reg.attach(0, Init::Plus)?;
    for &b in &nbrs {
        reg.apply_cz(0, b, 1)?;
    }
    reg.attach(100, Init::Zero)?;
    let basis = build_basis(PairKind::A, alpha)?;
    let got = reg.contract(&[0, 100], &basis.vectors[s])?.amplitudes_in(&nbrs)?;

    let zs = PauliOp::z_string(2, nbrs.iter().map(|&b| (b, 1)));
    let p = zs.matrix(&nbrs);
    let id = DMatrix::<C64>::identity(p.nrows(), p.ncols());
    let exp = &id * c(alpha.cosh()) + &p * c(alpha.sinh());
    let byp = if s == 1 { p.clone() } else { id };
    let v = (byp * exp) * nalgebra::DVector::from_vec(psi.to_vec()) * c(0.5f64.sqrt() * (-alpha.abs()).exp());
    Ok(got.iter().zip(v.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
}

/// Same check for the field-type pair: teleporting a qubit from the measured
/// cell to a fresh |+> target realizes `(1/√2) e^{-|α|} X^s e^{αX} H`.
pub fn b_factor_deviation(alpha: f64, s: usize, psi: &[C64]) -> Result<f64> {
    let mut reg = Register::from_amplitudes(2, vec![0], psi.to_vec())?;
    reg.attach(1, Init::Plus)?;
    reg.apply_cz(0, 1, 1)?;
    reg.attach(100, Init::Zero)?;
    let basis = build_basis(PairKind::B, alpha)?;
    let got = reg.contract(&[0, 100], &basis.vectors[s])?.amplitudes_in(&[1])?;

    let x = PauliOp::x(2, 0, 1).matrix(&[0]);
    let id = DMatrix::<C64>::identity(2, 2);
    let exp = &id * c(alpha.cosh()) + &x * c(alpha.sinh());
    let byp = if s == 1 { x } else { id };
    let v = (byp * exp * fourier_matrix(2)) * nalgebra::DVector::from_vec(psi.to_vec())
        * c(0.5f64.sqrt() * (-alpha.abs()).exp());
    Ok(got.iter().zip(v.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
}

#[derive(Clone, Debug)]
pub struct ImagRun {
    pub state: Register,
    pub record: RunRecord,
    /// Fidelity with the normalized non-unitary Trotter product.
    pub fidelity: f64,
}

/// Post-selected run; outcomes are drawn among accepting branches only and
/// `record.log_acceptance` holds the log of the total acceptance probability.
pub fn run_imaginary(plan: &SimPlan, seed: u64) -> Result<ImagRun> {
    let plan = plan.clone().with_evolution(Evolution::Imaginary { post_select: true });
    let traj = Engine::new(&plan, Outcomes::seeded(seed), Faults::default())?.finish()?;
    let oracle = plan.oracle_state()?;
    let fidelity = fidelity(&traj.state, &oracle)?;
    Ok(ImagRun { state: traj.state, record: traj.record, fidelity })
}

/// Fidelity of a spatial-cell register with the dense ground state of `model`.
pub fn ground_state_fidelity(model: &ModelSpec, state: &Register) -> Result<f64> {
    let order: Vec<u64> = model.sites().iter().map(|c| c.0).collect();
    let eig = model.hamiltonian().symmetric_eigen();
    let (imin, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or_else(|| Error::Invalid("empty model".into()))?;
    let gs: Vec<C64> = eig.eigenvectors.column(imin).iter().copied().collect();
    let gs = Register::from_amplitudes(model.modulus(), order, gs)?;
    fidelity(&gs, state)
}

#[derive(Clone, Debug, Serialize)]
pub struct AcceptanceStats {
    pub attempted: u64,
    pub accepted: u64,
    pub rate: f64,
    pub std_error: f64,
    pub wilson_lower: f64,
    pub wilson_upper: f64,
}

/// Wilson score interval at `z` standard deviations.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Per-measurement acceptance over independent unconditioned trials. Each
/// trial runs until its first rejection; every two-qubit measurement it made
/// counts as one attempt.
pub fn success_statistics(plan: &SimPlan, trials: u64, seed: u64) -> Result<AcceptanceStats> {
    let plan = plan.clone().with_evolution(Evolution::Imaginary { post_select: false });
    let counts: Vec<(u64, u64)> = (0..trials)
        .into_par_iter()
        .map(|t| -> Result<(u64, u64)> {
            let mut engine = Engine::new(&plan, Outcomes::seeded(crate::protocol::trial_seed(seed, t)), Faults::default())?;
            for _ in 0..plan.steps {
                match engine.step() {
                    Ok(()) => {}
                    Err(Error::Rejected(_)) => break,
                    Err(e) => return Err(e),
                }
            }
            let paired = engine.record().entries.iter().filter(|e| matches!(e.stage, Stage::Plaquette | Stage::Field));
            Ok(paired.fold((0, 0), |(a, s), e| (a + 1, s + u64::from(e.outcome < 2))))
        })
        .collect::<Result<_>>()?;
    let (attempted, accepted) = counts.iter().fold((0, 0), |(a, s), &(x, y)| (a + x, s + y));
    let rate = if attempted == 0 { 0.0 } else { accepted as f64 / attempted as f64 };
    let std_error = if attempted == 0 { 0.0 } else { (rate * (1.0 - rate) / attempted as f64).sqrt() };
    let (wilson_lower, wilson_upper) = wilson_interval(accepted, attempted, 3.0);
    Ok(AcceptanceStats { attempted, accepted, rate, std_error, wilson_lower, wilson_upper })
}
