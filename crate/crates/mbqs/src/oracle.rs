//! Reference evolutions and classical sums that the measurement protocols are
//! checked against: dense Trotter steps, Hamiltonians, partition functions,
//! Wilson loops and their cluster-state overlaps.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cluster::{build_full, ClusterSpec};
use crate::complex::{Cell, CellComplex, Chain};
use crate::error::{Error, Result};
use crate::qstate::{fourier_matrix, omega, Init, PauliOp, Register, C64};

/// Upper bound on the number of configurations a brute-force sum visits.
pub const CONFIG_CAP: u64 = 1 << 22;

/// Quantum model on the spatial complex: qudits on (n-1)-cells.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub space: CellComplex,
    pub degree: usize,
    pub lambda: f64,
    pub dt: f64,
    /// Strength of the Gauss-law energy cost, if that term is included.
    pub cost: Option<f64>,
    /// Static charges on (n-2)-cells, mod N.
    pub charges: BTreeMap<Cell, u32>,
}

impl ModelSpec {
    pub fn new(space: CellComplex, degree: usize, lambda: f64, dt: f64) -> Result<Self> {
        if degree == 0 || degree > space.dim() {
            return Err(Error::Invalid(format!("degree {degree} outside 1..={}", space.dim())));
        }
        Ok(ModelSpec { space, degree, lambda, dt, cost: None, charges: BTreeMap::new() })
    }

    pub fn with_cost(mut self, cost: f64) -> Self {
        self.cost = Some(cost);
        self
    }

    pub fn with_charge(mut self, cell: Cell, q: u32) -> Self {
        let q = q % self.modulus();
        if q == 0 {
            self.charges.remove(&cell);
        } else {
            self.charges.insert(cell, q);
        }
        self
    }

    pub fn modulus(&self) -> u32 {
        self.space.modulus()
    }

    pub fn charge(&self, cell: Cell) -> u32 {
        self.charges.get(&cell).copied().unwrap_or(0)
    }

    /// Qudit sites, Δ_{n-1} in cell order.
    pub fn sites(&self) -> Vec<Cell> {
        self.space.cells(self.degree - 1)
    }

    pub fn plaquettes(&self) -> Vec<Cell> {
        self.space.cells(self.degree)
    }

    /// (n-2)-cells carrying a Gauss law; empty for n = 1.
    pub fn vertices(&self) -> Vec<Cell> {
        if self.degree < 2 {
            Vec::new()
        } else {
            self.space.cells(self.degree - 2)
        }
    }

    pub fn field_term(&self, site: Cell) -> PauliOp {
        PauliOp::x(self.modulus(), site.0, 1)
    }

    /// `Z(∂σ_n)`.
    pub fn plaquette_term(&self, plaq: Cell) -> PauliOp {
        let n = self.modulus();
        let b = self.space.boundary(&Chain::single(plaq, n)).expect("degree >= 1");
        PauliOp::z_string(n, b.terms().map(|(c, k)| (c.0, k as i64)))
    }

    /// `G(σ) = Π X^{-a(∂τ; σ)}` over the cofaces τ of `σ`.
    pub fn gauss_operator(&self, vertex: Cell) -> PauliOp {
        let n = self.modulus();
        let cb = self.space.coboundary(&Chain::single(vertex, n)).expect("degree < dim");
        PauliOp::x_string(n, cb.terms().map(|(c, k)| (c.0, -(k as i64))))
    }

    /// `ω^{-Q} G(σ)`, which has eigenvalue 1 on states obeying the Gauss law.
    pub fn cost_term(&self, vertex: Cell) -> PauliOp {
        let q = self.charge(vertex) as i64;
        self.gauss_operator(vertex).with_phase(-2 * q)
    }

    /// `H = -½Σ(X + h.c.) - (λ/2)Σ(Z(∂σ) + h.c.) [- (Λ/2)Σ(ω^{-Q}G + h.c.)]`
    /// as a dense matrix over [`ModelSpec::sites`].
    pub fn hamiltonian(&self) -> DMatrix<C64> {
        let order: Vec<u64> = self.sites().iter().map(|c| c.0).collect();
        let dim = (self.modulus() as usize).pow(order.len() as u32);
        let mut h = DMatrix::<C64>::zeros(dim, dim);
        let mut add = |p: &PauliOp, w: f64| {
            let m = p.matrix(&order);
            h += (&m + m.adjoint()) * C64::new(-0.5 * w, 0.0);
        };
        for s in self.sites() {
            add(&self.field_term(s), 1.0);
        }
        for p in self.plaquettes() {
            add(&self.plaquette_term(p), self.lambda);
        }
        if let Some(cost) = self.cost {
            for v in self.vertices() {
                add(&self.cost_term(v), cost);
            }
        }
        h
    }

    /// `e^{-iHt}` by diagonalization.
    pub fn exact_propagator(&self, t: f64) -> DMatrix<C64> {
        let eig = self.hamiltonian().symmetric_eigen();
        let phases = eig.eigenvalues.map(|e| C64::from_polar(1.0, -e * t));
        &eig.eigenvectors * DMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint()
    }

    /// One Trotter step as a dense matrix, built from the same factors as
    /// [`trotter_step`] but by matrix exponentials of each term.
    pub fn trotter_matrix(&self) -> DMatrix<C64> {
        let order: Vec<u64> = self.sites().iter().map(|c| c.0).collect();
        let dim = (self.modulus() as usize).pow(order.len() as u32);
        let factor = |p: &PauliOp, theta: f64| {
            let m = p.matrix(&order);
            let g = (&m + m.adjoint()) * C64::new(0.5, 0.0);
            let eig = g.symmetric_eigen();
            let ph = eig.eigenvalues.map(|e| C64::from_polar(1.0, theta * e));
            &eig.eigenvectors * DMatrix::from_diagonal(&ph) * eig.eigenvectors.adjoint()
        };
        let mut u = DMatrix::<C64>::identity(dim, dim);
        for p in self.plaquettes() {
            u = factor(&self.plaquette_term(p), self.lambda * self.dt) * u;
        }
        if let Some(cost) = self.cost {
            for v in self.vertices() {
                u = factor(&self.cost_term(v), cost * self.dt) * u;
            }
        }
        for s in self.sites() {
            u = factor(&self.field_term(s), self.dt) * u;
        }
        u
    }

    /// Product state over the sites.
    pub fn product_state(&self, init: Init) -> Result<Register> {
        let mut r = Register::new(self.modulus()).with_cap(self.sites().len().max(1));
        for s in self.sites() {
            r.attach(s.0, init.clone())?;
        }
        Ok(r)
    }

    /// Register over the sites holding `amps` in [`ModelSpec::sites`] order.
    pub fn state_from(&self, amps: Vec<C64>) -> Result<Register> {
        Register::from_amplitudes(self.modulus(), self.sites().iter().map(|c| c.0).collect(), amps)
    }
}

/// Applies one factor ordering of the Trotter step:
/// `Π e^{iδt(X+h.c.)/2} · [Π e^{iΛδt(ω^{-Q}G+h.c.)/2}] · Π e^{iλδt(Z(∂σ)+h.c.)/2}`,
/// rightmost first.
pub fn trotter_step(model: &ModelSpec, state: &mut Register) -> Result<()> {
    for p in model.plaquettes() {
        state.apply_exp(&model.plaquette_term(p), model.lambda * model.dt)?;
    }
    if let Some(cost) = model.cost {
        for v in model.vertices() {
            state.apply_exp(&model.cost_term(v), cost * model.dt)?;
        }
    }
    for s in model.sites() {
        state.apply_exp(&model.field_term(s), model.dt)?;
    }
    Ok(())
}

pub fn trotter_evolve(model: &ModelSpec, state: &mut Register, steps: usize) -> Result<()> {
    for _ in 0..steps {
        trotter_step(model, state)?;
    }
    Ok(())
}

/// Imaginary-time counterpart of [`trotter_step`]: each factor becomes
/// `e^{α(P+P†)/2}` with `α = τ-step × coupling`, renormalized afterwards.
/// Returns the accumulated log-norm.
pub fn imaginary_trotter_step(model: &ModelSpec, state: &mut Register) -> Result<f64> {
    let mut log = 0.0;
    for p in model.plaquettes() {
        log += state.apply_imaginary(&model.plaquette_term(p), model.lambda * model.dt)?;
    }
    for s in model.sites() {
        log += state.apply_imaginary(&model.field_term(s), model.dt)?;
    }
    Ok(log)
}

/// Classical Z_N model: spins on (n-1)-cells, action on n-cells.
#[derive(Clone, Debug)]
pub struct SpinModel {
    pub complex: CellComplex,
    pub degree: usize,
    pub beta: f64,
    pub coupling: f64,
}

impl SpinModel {
    pub fn new(complex: CellComplex, degree: usize, beta: f64, coupling: f64) -> Result<Self> {
        if degree == 0 || degree > complex.dim() {
            return Err(Error::Invalid(format!("degree {degree} outside 1..={}", complex.dim())));
        }
        Ok(SpinModel { complex, degree, beta, coupling })
    }

    pub fn modulus(&self) -> u32 {
        self.complex.modulus()
    }

    fn spins(&self) -> Vec<Cell> {
        self.complex.cells(self.degree - 1)
    }

    /// Per n-cell, the (spin index, incidence) pairs of its boundary.
    fn terms(&self) -> Vec<Vec<(usize, u32)>> {
        let index: BTreeMap<Cell, usize> = self.spins().into_iter().enumerate().map(|(i, c)| (c, i)).collect();
        let n = self.modulus();
        self.complex
            .cells(self.degree)
            .into_iter()
            .map(|top| {
                let b = self.complex.boundary(&Chain::single(top, n)).expect("degree >= 1");
                b.terms().map(|(c, k)| (index[&c], k)).collect()
            })
            .collect()
    }

    /// Number of configurations, or an error past [`CONFIG_CAP`].
    fn config_count(&self) -> Result<u64> {
        let m = self.spins().len();
        let n = self.modulus() as u64;
        let mut total: u64 = 1;
        for _ in 0..m {
            total = total.saturating_mul(n);
            if total > CONFIG_CAP {
                return Err(Error::DenseCap { qudits: m, cap: (CONFIG_CAP as f64).log(n as f64) as usize });
            }
        }
        Ok(total)
    }

    /// `I = -J Σ S(∂σ)` at N = 2, `-J Σ (u(∂σ) + c.c.)` otherwise.
    pub fn action(&self, config: &[u32]) -> f64 {
        action_of(&self.terms(), self.modulus(), self.coupling, config)
    }

    /// Σ over configurations of `f(config) e^{-βI}`, reduced in a fixed order.
    fn weighted_sum(&self, f: impl Fn(&[u32]) -> f64 + Sync) -> Result<f64> {
        let total = self.config_count()?;
        let terms = self.terms();
        let n = self.modulus();
        let m = self.spins().len();
        const BLOCK: u64 = 1 << 12;
        let blocks = total.div_ceil(BLOCK);
        let partial: Vec<f64> = (0..blocks)
            .into_par_iter()
            .map(|b| {
                let mut cfg = vec![0u32; m];
                let mut acc = 0.0;
                for idx in b * BLOCK..((b + 1) * BLOCK).min(total) {
                    let mut rem = idx;
                    for c in cfg.iter_mut() {
                        *c = (rem % n as u64) as u32;
                        rem /= n as u64;
                    }
                    let i = action_of(&terms, n, self.coupling, &cfg);
                    acc += f(&cfg) * (-self.beta * i).exp();
                }
                acc
            })
            .collect();
        Ok(partial.iter().sum())
    }
}

fn action_of(terms: &[Vec<(usize, u32)>], n: u32, coupling: f64, config: &[u32]) -> f64 {
    let mut s = 0.0;
    for t in terms {
        let phase = t.iter().map(|&(i, k)| k as u64 * config[i] as u64).sum::<u64>() % n as u64;
        let angle = 2.0 * PI * phase as f64 / n as f64;
        s += if n == 2 { angle.cos() } else { 2.0 * angle.cos() };
    }
    -coupling * s
}

/// `Σ_config e^{-βI}` by exhaustive enumeration.
pub fn partition_function(model: &SpinModel) -> Result<f64> {
    model.weighted_sum(|_| 1.0)
}

/// Unnormalized `<W(C)> = Σ_config u(C) e^{-βI}`; the imaginary part cancels
/// for cycles, so the real part is returned.
pub fn wilson_sum(model: &SpinModel, loop_chain: &Chain) -> Result<f64> {
    check_loop(model, loop_chain)?;
    let index: BTreeMap<Cell, usize> = model.spins().into_iter().enumerate().map(|(i, c)| (c, i)).collect();
    let support: Vec<(usize, u32)> = loop_chain.terms().map(|(c, k)| (index[&c], k)).collect();
    let n = model.modulus();
    model.weighted_sum(move |cfg| {
        let ph = support.iter().map(|&(i, k)| k as u64 * cfg[i] as u64).sum::<u64>() % n as u64;
        (2.0 * PI * ph as f64 / n as f64).cos()
    })
}

fn check_loop(model: &SpinModel, c: &Chain) -> Result<()> {
    if c.degree() != model.degree - 1 {
        return Err(Error::DegreeMismatch { expected: model.degree - 1, got: c.degree() });
    }
    if c.degree() > 0 && !model.complex.boundary(c)?.is_empty() {
        return Err(Error::Invalid("Wilson operator needs a closed chain".into()));
    }
    Ok(())
}

/// Single-site bra vector `<0| e^{βJ(X+h.c.)}` (`e^{βJX}` at N = 2).
fn weight_bra(n: u32, beta_j: f64) -> Vec<C64> {
    let f = fourier_matrix(n);
    // X = F Z F†, so g(X) = F g(Z) F†.
    let diag: Vec<C64> = (0..n)
        .map(|k| {
            let w = omega(n).powu(k);
            let e = if n == 2 { w.re } else { 2.0 * w.re };
            C64::new((beta_j * e).exp(), 0.0)
        })
        .collect();
    let g = &f * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * f.adjoint();
    // contract() conjugates the bra; g is real symmetric so row 0 serves as is.
    (0..n as usize).map(|c| g[(0, c)].conj()).collect()
}

fn plus_bra(n: u32) -> Vec<C64> {
    vec![C64::new(1.0 / (n as f64).sqrt(), 0.0); n as usize]
}

fn cluster_of(model: &SpinModel) -> Result<(ClusterSpec, Register)> {
    let spec = ClusterSpec::new(model.complex.clone(), model.degree)?;
    let state = build_full(&spec)?;
    Ok((spec, state))
}

/// Contracts the weight bra on every n-cell and `<+|` on every (n-1)-cell.
fn weighted_overlap(model: &SpinModel, spec: &ClusterSpec, state: Register) -> Result<C64> {
    let n = model.modulus();
    let top = weight_bra(n, model.beta * model.coupling);
    let plus = plus_bra(n);
    let mut r = state;
    for c in spec.top_cells() {
        r = r.contract(&[c.0], &top)?;
    }
    for c in spec.low_cells() {
        r = r.contract(&[c.0], &plus)?;
    }
    Ok(r.amplitudes()[0])
}

/// `N^{|Δ_{n-1}| + |Δ_n|/2} <φ|gCS>` with the weight bra above.
pub fn overlap_partition(model: &SpinModel) -> Result<f64> {
    let (spec, state) = cluster_of(model)?;
    let ov = weighted_overlap(model, &spec, state)?;
    Ok(overlap_prefactor(&spec) * ov.re)
}

fn overlap_prefactor(spec: &ClusterSpec) -> f64 {
    let n = spec.modulus() as f64;
    let lows = spec.low_cells().len() as f64;
    let tops = spec.top_cells().len() as f64;
    n.powf(lows + tops / 2.0)
}

#[derive(Clone, Debug)]
pub struct OverlapReport {
    pub partition: f64,
    pub overlap: f64,
    pub rel_err: f64,
}

pub fn overlap_identity_check(model: &SpinModel) -> Result<OverlapReport> {
    let partition = partition_function(model)?;
    let overlap = overlap_partition(model)?;
    Ok(OverlapReport { partition, overlap, rel_err: (overlap - partition).abs() / partition })
}

#[derive(Clone, Debug)]
pub struct WilsonReport {
    pub sum: f64,
    pub overlap: f64,
}

/// Both forms of the Wilson expectation. The overlap form `<φ|Z(C)|gCS>` is
/// scaled by the constant that maps the empty-loop overlap onto Z.
pub fn wilson_expectation(model: &SpinModel, loop_chain: &Chain) -> Result<WilsonReport> {
    let sum = wilson_sum(model, loop_chain)?;
    let (spec, state) = cluster_of(model)?;
    let bare = weighted_overlap(model, &spec, state.clone())?.re;
    let scale = partition_function(model)? / bare;
    let n = model.modulus();
    let mut loaded = state;
    loaded.apply_pauli(&PauliOp::z_string(n, loop_chain.terms().map(|(c, k)| (c.0, k as i64))))?;
    let ov = weighted_overlap(model, &spec, loaded)?;
    Ok(WilsonReport { sum, overlap: scale * ov.re })
}

/// `e^{-|α|}(e^{αX}|0,0> + √sinh(2|α|) |-,1>)` over (cell, ancilla),
/// little-endian with the cell first.
pub fn ancilla_pair_vector(alpha: f64) -> [C64; 4] {
    let pre = (-alpha.abs()).exp();
    let tail = (2.0 * alpha.abs()).sinh().sqrt() / 2f64.sqrt();
    // index = cell + 2 * ancilla
    [
        C64::new(pre * alpha.cosh(), 0.0),
        C64::new(pre * alpha.sinh(), 0.0),
        C64::new(pre * tail, 0.0),
        C64::new(-pre * tail, 0.0),
    ]
}

#[derive(Clone, Debug)]
pub struct ImaginaryOverlapReport {
    pub overlap: C64,
    pub partition: f64,
    /// `overlap · e^{α|Δ_n|} / Z`, which should not depend on β.
    pub constant: f64,
}

/// Overlap of the ancilla-pair product bra with `gCS ⊗ |0>^{ancillas}`.
pub fn imaginary_overlap(model: &SpinModel) -> Result<ImaginaryOverlapReport> {
    if model.modulus() != 2 {
        return Err(Error::Unsupported("the ancilla-pair overlap is defined for N = 2".into()));
    }
    let alpha = model.beta * model.coupling;
    let (spec, mut r) = cluster_of(model)?;
    let tops = spec.top_cells();
    let ancilla_base = 1u64 << 62;
    let cap = r.sites().len() + 1;
    r = r.with_cap(cap);
    let pair = ancilla_pair_vector(alpha);
    for (i, c) in tops.iter().enumerate() {
        let a = ancilla_base + i as u64;
        r.attach(a, Init::Zero)?;
        r = r.contract(&[c.0, a], &pair)?;
    }
    let plus = plus_bra(2);
    for c in spec.low_cells() {
        r = r.contract(&[c.0], &plus)?;
    }
    let overlap = r.amplitudes()[0];
    let partition = partition_function(model)?;
    let constant = overlap.re * (alpha * tops.len() as f64).exp() / partition;
    Ok(ImaginaryOverlapReport { overlap, partition, constant })
}

/// Relative spread of the proportionality constant between β = 0 and the
/// model's β, plus the largest imaginary part seen.
pub fn imaginary_overlap_check(model: &SpinModel) -> Result<(f64, f64)> {
    let anchor = SpinModel { beta: 0.0, ..model.clone() };
    let a = imaginary_overlap(&anchor)?;
    let b = imaginary_overlap(model)?;
    if a.overlap.re <= 0.0 || b.overlap.re <= 0.0 {
        return Err(Error::Invalid("overlap is not positive".into()));
    }
    let rel = (b.constant - a.constant).abs() / a.constant;
    Ok((rel, a.overlap.im.abs().max(b.overlap.im.abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ring(l: usize, n: u32) -> CellComplex {
        CellComplex::torus(vec![l], n).unwrap()
    }

    fn max_dev(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_step_is_identity() {
        let m = ModelSpec::new(ring(3, 2), 1, 1.0, 0.0).unwrap();
        let mut s = m.product_state(Init::Zero).unwrap();
        let before = s.clone();
        trotter_step(&m, &mut s).unwrap();
        assert!(max_dev(
            &DMatrix::from_column_slice(8, 1, s.amplitudes()),
            &DMatrix::from_column_slice(8, 1, before.amplitudes())
        ) < 1e-14);
    }

    #[test]
    fn trotter_step_matches_matrix_exponentials() {
        for (n, lambda) in [(2u32, 1.0), (3, 0.6)] {
            let m = ModelSpec::new(ring(3, n), 1, lambda, 0.1).unwrap();
            let u = m.trotter_matrix();
            let dim = u.nrows();
            for col in [0, 1, dim - 1] {
                let mut amps = vec![C64::new(0.0, 0.0); dim];
                amps[col] = C64::new(1.0, 0.0);
                let mut s = m.state_from(amps).unwrap();
                trotter_step(&m, &mut s).unwrap();
                let got = DMatrix::from_column_slice(dim, 1, s.amplitudes());
                let want = DMatrix::from_iterator(dim, 1, u.column(col).iter().copied());
                assert!(max_dev(&got, &want) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_coupling_leaves_only_field_rotations() {
        let m = ModelSpec::new(ring(3, 2), 1, 0.0, 0.2).unwrap();
        let order: Vec<u64> = m.sites().iter().map(|c| c.0).collect();
        let mut want = DMatrix::<C64>::identity(8, 8);
        for s in &order {
            let x = PauliOp::x(2, *s, 1).matrix(&order);
            let r = DMatrix::<C64>::identity(8, 8) * C64::new(0.2f64.cos(), 0.0) + x * C64::new(0.0, 0.2f64.sin());
            want = r * want;
        }
        assert!(max_dev(&m.trotter_matrix(), &want) < 1e-12);
    }

    #[test]
    fn trotter_error_is_second_order() {
        let space = CellComplex::torus(vec![2, 2], 2).unwrap();
        let base = ModelSpec::new(space, 2, 0.7, 0.1).unwrap().with_cost(1.5);
        let errs: Vec<f64> = [0.1, 0.05, 0.025]
            .iter()
            .map(|&dt| {
                let m = ModelSpec { dt, ..base.clone() };
                max_dev(&m.trotter_matrix(), &m.exact_propagator(dt))
            })
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!((order - 2.0).abs() < 0.15, "order {order}");
        }
    }

    #[test]
    fn cost_term_commutes_with_hamiltonian_gauss_operators() {
        let space = CellComplex::torus(vec![2, 1], 3).unwrap();
        let v0 = space.cells(0)[0];
        let m = ModelSpec::new(space, 2, 0.7, 0.1).unwrap().with_cost(2.0).with_charge(v0, 1);
        let order: Vec<u64> = m.sites().iter().map(|c| c.0).collect();
        let u = m.trotter_matrix();
        for v in m.vertices() {
            let g = m.gauss_operator(v).matrix(&order);
            assert!(max_dev(&(&g * &u), &(&u * &g)) < 1e-10);
        }
    }

    #[test]
    fn partition_function_at_zero_coupling() {
        for (n, l) in [(2u32, 2usize), (3, 2)] {
            let c = CellComplex::torus(vec![l, l], n).unwrap();
            let m0 = SpinModel::new(c.clone(), 1, 0.0, 1.0).unwrap();
            let m1 = SpinModel::new(c, 1, 0.7, 0.0).unwrap();
            let want = (n as f64).powi((l * l) as i32);
            assert!((partition_function(&m0).unwrap() - want).abs() < 1e-9);
            assert!((partition_function(&m1).unwrap() - want).abs() < 1e-9);
        }
    }

    #[test]
    fn ising_torus_matches_pair_enumeration() {
        // Independent loop: spins on a 2x2 grid, bonds listed by hand.
        let bj = 0.4;
        let bonds = [(0, 1), (1, 0), (2, 3), (3, 2), (0, 2), (2, 0), (1, 3), (3, 1)];
        let mut z = 0.0;
        for cfg in 0..16u32 {
            let s = |i: usize| if cfg >> i & 1 == 1 { -1.0 } else { 1.0 };
            let e: f64 = bonds.iter().map(|&(a, b)| s(a) * s(b)).sum();
            z += (bj * e).exp();
        }
        let m = SpinModel::new(CellComplex::torus(vec![2, 2], 2).unwrap(), 1, bj, 1.0).unwrap();
        assert!((partition_function(&m).unwrap() - z).abs() < 1e-9 * z);
    }

    #[test]
    fn too_many_spins_is_rejected() {
        let m = SpinModel::new(CellComplex::torus(vec![5, 5], 2).unwrap(), 1, 0.1, 1.0).unwrap();
        assert!(matches!(partition_function(&m), Err(Error::DenseCap { .. })));
    }

    #[test]
    fn overlap_reproduces_partition_function() {
        for bj in [0.0, 0.1, 0.3, 0.7] {
            let m = SpinModel::new(CellComplex::torus(vec![2, 2], 2).unwrap(), 1, bj, 1.0).unwrap();
            let r = overlap_identity_check(&m).unwrap();
            assert!(r.rel_err < 1e-10, "βJ={bj}: {r:?}");
        }
        let m = SpinModel::new(CellComplex::torus(vec![1, 2], 3).unwrap(), 1, 0.2, 1.0).unwrap();
        assert!(overlap_identity_check(&m).unwrap().rel_err < 1e-10);
    }

    #[test]
    fn overlap_prefactor_matches_brute_force() {
        // The ratio Z / <φ|gCS> is N^{|Δ_{n-1}| + |Δ_n|/2}, for both N.
        for (ext, n) in [(vec![2usize, 2], 2u32), (vec![1, 2], 3)] {
            let m = SpinModel::new(CellComplex::torus(ext, n).unwrap(), 1, 0.3, 1.0).unwrap();
            let (spec, state) = cluster_of(&m).unwrap();
            let ov = weighted_overlap(&m, &spec, state).unwrap().re;
            let ratio = partition_function(&m).unwrap() / ov;
            let lows = spec.low_cells().len() as f64;
            let tops = spec.top_cells().len() as f64;
            let want = (n as f64).powf(lows + tops / 2.0);
            assert!((ratio / want - 1.0).abs() < 1e-10, "ratio {ratio} want {want}");
        }
    }

    #[test]
    fn wilson_of_boundary_vanishes_at_infinite_temperature() {
        let c = CellComplex::torus(vec![2, 2], 2).unwrap();
        let m = SpinModel::new(c.clone(), 1, 0.0, 1.0).unwrap();
        let e = c.cells(1)[0];
        let lp = c.boundary(&Chain::single(e, 2)).unwrap();
        let r = wilson_expectation(&m, &lp).unwrap();
        assert!(r.sum.abs() < 1e-12 && r.overlap.abs() < 1e-9);
    }

    #[test]
    fn empty_wilson_loop_is_partition_function() {
        let m = SpinModel::new(CellComplex::torus(vec![2, 2], 2).unwrap(), 2, 0.5, 1.0).unwrap();
        let r = wilson_expectation(&m, &Chain::zero(1, 2)).unwrap();
        let z = partition_function(&m).unwrap();
        assert!((r.sum - z).abs() < 1e-9 * z && (r.overlap - z).abs() < 1e-9 * z);
    }

    #[test]
    fn noncontractible_wilson_loop_agrees_in_both_forms() {
        let c = CellComplex::torus(vec![2, 2], 2).unwrap();
        let m = SpinModel::new(c.clone(), 2, 0.5, 1.0).unwrap();
        let straight: Vec<Chain> = c
            .kernel_cycles(1, crate::complex::Side::Primal, 64)
            .unwrap()
            .into_iter()
            .filter(|z| z.len() == 2 && z.support().all(|e| e.mask() == 1))
            .collect();
        assert!(!straight.is_empty());
        for lp in straight {
            let r = wilson_expectation(&m, &lp).unwrap();
            assert!((r.sum - r.overlap).abs() < 1e-9 * r.sum.abs().max(1.0), "{r:?}");
        }
        let m3 = SpinModel::new(CellComplex::torus(vec![1, 2], 3).unwrap(), 2, 0.4, 1.0).unwrap();
        let lp = Chain::single(m3.complex.cells(1).into_iter().find(|e| e.mask() == 1).unwrap(), 3);
        assert!(m3.complex.boundary(&lp).unwrap().is_empty());
        let r = wilson_expectation(&m3, &lp).unwrap();
        assert!((r.sum - r.overlap).abs() < 1e-9 * r.sum.abs().max(1.0), "{r:?}");
    }

    #[test]
    fn open_wilson_line_is_rejected() {
        let c = CellComplex::torus(vec![2, 2], 2).unwrap();
        let m = SpinModel::new(c.clone(), 2, 0.5, 1.0).unwrap();
        let e = Chain::single(c.cells(1)[0], 2);
        assert!(wilson_sum(&m, &e).is_err());
    }

    #[test]
    fn ancilla_pair_vector_is_normalized() {
        for a in [-0.7, -0.05, 0.0, 0.3, 1.2] {
            let v = ancilla_pair_vector(a);
            let n: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn imaginary_overlap_is_positive_and_proportional() {
        let c = CellComplex::torus(vec![2, 2], 2).unwrap();
        for bj in [0.1, 0.5] {
            let m = SpinModel::new(c.clone(), 1, bj, 1.0).unwrap();
            let (rel, im) = imaginary_overlap_check(&m).unwrap();
            assert!(rel < 1e-9, "βJ={bj}: {rel}");
            assert!(im < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn action_is_gauge_invariant(seed in proptest::collection::vec(0u32..3, 8), vtx in 0usize..4, k in 1u32..3) {
            let c = CellComplex::torus(vec![2, 2], 3).unwrap();
            let m = SpinModel::new(c.clone(), 2, 0.3, 1.0).unwrap();
            let edges = c.cells(1);
            let gauge = c.coboundary(&Chain::single(c.cells(0)[vtx], 3)).unwrap().scale(k as i64);
            let moved: Vec<u32> = edges.iter().zip(&seed).map(|(e, s)| (s + gauge.get(*e)) % 3).collect();
            prop_assert!((m.action(&seed) - m.action(&moved)).abs() < 1e-12);
        }
    }
}
