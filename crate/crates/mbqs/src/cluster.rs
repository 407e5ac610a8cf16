//! Generalized cluster states on the n- and (n-1)-cells of a cell complex.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::complex::{Cell, CellComplex, Chain};
use crate::error::{Error, Result};
use crate::qstate::{fourier_matrix, Init, PauliOp, Register, C64};

/// Dense construction limit in qubits; for N > 2 the limit shrinks so the
/// state vector stays the same size.
pub const DENSE_QUBIT_CAP: usize = 22;

pub fn dense_cap(n: u32) -> usize {
    if n == 2 {
        DENSE_QUBIT_CAP
    } else {
        ((DENSE_QUBIT_CAP as f64) * 2f64.ln() / (n as f64).ln()).floor() as usize
    }
}

#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub complex: CellComplex,
    pub degree: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stabilizer {
    pub anchor: Cell,
    pub op: PauliOp,
}

impl ClusterSpec {
    pub fn new(complex: CellComplex, degree: usize) -> Result<Self> {
        if degree == 0 || degree > complex.dim() {
            return Err(Error::Invalid(format!("degree {degree} outside 1..={}", complex.dim())));
        }
        Ok(ClusterSpec { complex, degree })
    }

    pub fn modulus(&self) -> u32 {
        self.complex.modulus()
    }

    pub fn top_cells(&self) -> Vec<Cell> {
        self.complex.cells(self.degree)
    }

    pub fn low_cells(&self) -> Vec<Cell> {
        self.complex.cells(self.degree - 1)
    }

    /// Low cells first, then top cells.
    pub fn sites(&self) -> Vec<Cell> {
        let mut s = self.low_cells();
        s.extend(self.top_cells());
        s
    }

    /// `(σ_n, σ_{n-1}, a(∂σ_n; σ_{n-1}))` for every nonzero incidence.
    pub fn entangling_pairs(&self) -> Vec<(Cell, Cell, u32)> {
        let n = self.modulus();
        let mut out = Vec::new();
        for top in self.top_cells() {
            let b = self.complex.boundary(&Chain::single(top, n)).expect("degree >= 1");
            out.extend(b.terms().map(|(low, k)| (top, low, k)));
        }
        out
    }

    pub fn stabilizers(&self) -> Vec<Stabilizer> {
        let n = self.modulus();
        let mut by_low: BTreeMap<Cell, PauliOp> =
            self.low_cells().into_iter().map(|c| (c, PauliOp::x(n, c.0, 1))).collect();
        let mut by_top: BTreeMap<Cell, PauliOp> =
            self.top_cells().into_iter().map(|c| (c, PauliOp::x(n, c.0, 1))).collect();
        for (top, low, k) in self.entangling_pairs() {
            let t = by_top.get_mut(&top).expect("top cell");
            *t = t.mul(&PauliOp::z(n, low.0, k as i64));
            let l = by_low.get_mut(&low).expect("low cell");
            *l = l.mul(&PauliOp::z(n, top.0, k as i64));
        }
        by_low
            .into_iter()
            .chain(by_top)
            .map(|(anchor, op)| Stabilizer { anchor, op })
            .collect()
    }
}

/// `U_CZ |+>^⊗` as a dense register labelled by cell ids.
pub fn build_full(spec: &ClusterSpec) -> Result<Register> {
    let sites = spec.sites();
    let cap = dense_cap(spec.modulus());
    if sites.len() > cap {
        return Err(Error::DenseCap { qudits: sites.len(), cap });
    }
    let mut r = Register::new(spec.modulus()).with_cap(cap);
    for s in &sites {
        r.attach(s.0, Init::Plus)?;
    }
    for (top, low, k) in spec.entangling_pairs() {
        r.apply_cz(top.0, low.0, k as i64)?;
    }
    Ok(r)
}

#[derive(Clone, Debug)]
pub struct StabilizerReport {
    pub values: BTreeMap<Cell, C64>,
    pub pass: bool,
}

pub fn stabilizer_check(state: &Register, spec: &ClusterSpec) -> Result<StabilizerReport> {
    let mut values = BTreeMap::new();
    for s in spec.stabilizers() {
        values.insert(s.anchor, state.expectation(&s.op)?);
    }
    let pass = values.values().all(|v| (v - C64::new(1.0, 0.0)).norm() < 1e-9);
    Ok(StabilizerReport { values, pass })
}

/// Copy tensor on a top cell: `Σ_γ (-1)^{βγ} Π δ(ρ, γ)`.
pub fn top_tensor(beta: u8, rhos: &[u8]) -> i32 {
    (0u8..2)
        .filter(|&g| rhos.iter().all(|&r| r == g))
        .map(|g| if beta & g == 1 { -1 } else { 1 })
        .sum()
}

/// Parity tensor on a low cell: `δ(α, Σ ρ mod 2)`.
pub fn low_tensor(alpha: u8, rhos: &[u8]) -> i32 {
    let parity = rhos.iter().fold(0u8, |acc, r| acc ^ r);
    (parity == alpha) as i32
}

/// Contracts the tensor network for X-basis labels `alpha` (low cells) and
/// `beta` (top cells), normalized by `2^{-|top cells|}`.
pub fn tensor_contract(spec: &ClusterSpec, alpha: &BTreeMap<Cell, u8>, beta: &BTreeMap<Cell, u8>) -> Result<f64> {
    if spec.modulus() != 2 {
        return Err(Error::Unsupported("tensor network form is Z_2 only".into()));
    }
    let tops = spec.top_cells();
    let lows = spec.low_cells();
    if tops.len() > 24 {
        return Err(Error::DenseCap { qudits: tops.len(), cap: 24 });
    }
    let pairs = spec.entangling_pairs();
    let mut total = 0i64;
    // Each top tensor is diagonal in its bond indices, so summing over the
    // bonds reduces to summing over one shared bit per top cell.
    for gamma in 0u64..1 << tops.len() {
        let bit = |c: Cell| -> u8 {
            let i = tops.binary_search(&c).expect("top cell");
            ((gamma >> i) & 1) as u8
        };
        let mut w = 1i64;
        for (i, &t) in tops.iter().enumerate() {
            let rhos: Vec<u8> = pairs.iter().filter(|p| p.0 == t).map(|_| ((gamma >> i) & 1) as u8).collect();
            w *= top_tensor(beta.get(&t).copied().unwrap_or(0), &rhos) as i64;
        }
        if w == 0 {
            continue;
        }
        for &l in &lows {
            let rhos: Vec<u8> = pairs.iter().filter(|p| p.1 == l).map(|p| bit(p.0)).collect();
            w *= low_tensor(alpha.get(&l).copied().unwrap_or(0), &rhos) as i64;
            if w == 0 {
                break;
            }
        }
        total += w;
    }
    Ok(total as f64 / 2f64.powi(tops.len() as i32))
}

/// `<labels|state>` with every site in the X eigenbasis (`0 → |+>`, `1 → |->`).
pub fn x_basis_amplitude(state: &Register, labels: &BTreeMap<Cell, u8>) -> Result<C64> {
    let f = fourier_matrix(state.modulus());
    let mut r = state.clone();
    for s in state.sites().to_vec() {
        let k = labels.get(&Cell(s)).copied().unwrap_or(0) as usize;
        let bra: Vec<C64> = f.column(k).iter().copied().collect();
        r = r.contract(&[s], &bra)?;
    }
    Ok(r.amplitudes()[0])
}

/// Bond matrices of the one-dimensional chain read off the general tensors:
/// `(top[β], low[α])` with rows/columns indexed by the two bonds.
pub fn chain_matrices() -> ([DMatrix<f64>; 2], [DMatrix<f64>; 2]) {
    let build = |f: &dyn Fn(u8, &[u8]) -> i32, label: u8| {
        DMatrix::from_fn(2, 2, |r, c| f(label, &[r as u8, c as u8]) as f64)
    };
    (
        [build(&top_tensor, 0), build(&top_tensor, 1)],
        [build(&low_tensor, 0), build(&low_tensor, 1)],
    )
}

fn pauli_z() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])
}

fn pauli_x() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])
}

/// `U(a, b) = σ_z^a σ_x^b`.
pub fn projective_u(a: u8, b: u8) -> DMatrix<f64> {
    let mut u = DMatrix::identity(2, 2);
    if a == 1 {
        u *= pauli_z();
    }
    if b == 1 {
        u *= pauli_x();
    }
    u
}

/// Checks `(-1)^{aα}(-1)^{bβ} T_v[α]T_e[β] = U T_v[α]T_e[β] U⁻¹` for all 16
/// label choices, and that `U` is genuinely projective.
pub fn projective_rep_check_with(u: impl Fn(u8, u8) -> DMatrix<f64>) -> bool {
    let (te, tv) = chain_matrices();
    let mut ok = true;
    for a in 0..2u8 {
        for b in 0..2u8 {
            let ua = u(a, b);
            let Some(ui) = ua.clone().try_inverse() else { return false };
            for alpha in 0..2u8 {
                for beta in 0..2u8 {
                    let prod = &tv[alpha as usize] * &te[beta as usize];
                    let sign = if (a & alpha) ^ (b & beta) == 1 { -1.0 } else { 1.0 };
                    let lhs = &prod * sign;
                    let rhs = &ua * &prod * &ui;
                    ok &= (lhs - rhs).abs().max() < 1e-12;
                }
            }
        }
    }
    let (u10, u01) = (u(1, 0), u(0, 1));
    ok && (&u10 * &u01 + &u01 * &u10).abs().max() < 1e-12
}

pub fn projective_rep_check() -> bool {
    projective_rep_check_with(projective_u)
}
