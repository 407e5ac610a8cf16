//! Adaptive measurement patterns on a lazily entangled cluster state.
//!
//! The register holds only the qudits whose measurement is imminent plus the
//! current boundary slice. Each Trotter step measures, in order:
//! n-cells on the slice (A basis), the slice's (n-1)-cells (X basis,
//! teleporting into the time-like n-cells), the Gauss cells on the slab, and
//! the time-like n-cells (B basis, teleporting onto the next slice).

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cluster::{ClusterSpec, dense_cap};
use crate::complex::{Cell, CellComplex, Chain, Slab};
use crate::error::{Error, Result};
use crate::imagtime::{build_basis, PairKind};
use crate::oracle::{imaginary_trotter_step, trotter_evolve, ModelSpec};
use crate::qstate::{fidelity, Init, MeasBasis, Outcome, PauliOp, Register, C64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussMethod {
    /// Gauss cells measured in the Z basis; the slab carries no Gauss term.
    None,
    /// Gauss cells measured in an adapted A basis, realizing the cost term.
    EnergyCost,
    /// Gauss cells measured in the X basis; outcomes serve as syndromes.
    Syndrome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Plaquette,
    Transfer,
    Gauss,
    Field,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BasisTag {
    A,
    X,
    Z,
    B,
}

/// One row of the per-step measurement table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatternStep {
    pub stage: Stage,
    pub basis: BasisTag,
    /// Whether the measured cells extend over the slab `[j, j+1]`.
    pub on_interval: bool,
    /// Degree of the spatial cell the measured cell sits over.
    pub spatial_degree: usize,
}

/// Stage order for one Trotter step of the degree-`n` model.
pub fn pattern(degree: usize, method: GaussMethod) -> Vec<PatternStep> {
    let mut out = vec![
        PatternStep { stage: Stage::Plaquette, basis: BasisTag::A, on_interval: false, spatial_degree: degree },
        PatternStep { stage: Stage::Transfer, basis: BasisTag::X, on_interval: false, spatial_degree: degree - 1 },
    ];
    if degree >= 2 {
        let basis = match method {
            GaussMethod::None => BasisTag::Z,
            GaussMethod::EnergyCost => BasisTag::A,
            GaussMethod::Syndrome => BasisTag::X,
        };
        out.push(PatternStep { stage: Stage::Gauss, basis, on_interval: true, spatial_degree: degree - 2 });
    }
    out.push(PatternStep { stage: Stage::Field, basis: BasisTag::B, on_interval: true, spatial_degree: degree - 1 });
    out
}

/// Real-time steps, or imaginary-time steps realized by two-qubit ancilla
/// measurements. With `post_select`, outcomes are drawn from the accepted
/// branches only and the acceptance probability is logged.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Evolution {
    Real,
    Imaginary { post_select: bool },
}

/// Label offset of the ancilla paired with a measured cell.
pub const ANCILLA_OFFSET: u64 = 1 << 62;

type Incidences = Vec<(Cell, i64)>;

#[derive(Clone, Debug)]
pub enum InitialState {
    Zero,
    Plus,
    /// Amplitudes over the model's sites in cell order.
    Amplitudes(Vec<C64>),
}

#[derive(Clone, Debug)]
pub struct SimPlan {
    pub model: ModelSpec,
    pub steps: usize,
    pub gauss: GaussMethod,
    pub init: InitialState,
    pub evolution: Evolution,
}

impl SimPlan {
    pub fn new(model: ModelSpec, steps: usize) -> Self {
        SimPlan { model, steps, gauss: GaussMethod::None, init: InitialState::Plus, evolution: Evolution::Real }
    }

    pub fn with_gauss(mut self, gauss: GaussMethod) -> Self {
        self.gauss = gauss;
        self
    }

    pub fn with_init(mut self, init: InitialState) -> Self {
        self.init = init;
        self
    }

    pub fn with_evolution(mut self, evolution: Evolution) -> Self {
        self.evolution = evolution;
        self
    }

    pub fn is_imaginary(&self) -> bool {
        matches!(self.evolution, Evolution::Imaginary { .. })
    }

    pub fn modulus(&self) -> u32 {
        self.model.modulus()
    }

    /// Spacetime complex: the spatial directions plus an open time direction
    /// with `steps + 1` slices.
    pub fn spacetime(&self) -> Result<CellComplex> {
        let mut ext = self.model.space.extents().to_vec();
        let mut per = self.model.space.periodic().to_vec();
        ext.push(self.steps + 1);
        per.push(false);
        CellComplex::new(ext, per, self.modulus())
    }

    /// The model the protocol is meant to reproduce: the cost term is kept
    /// only when the Gauss cells realize it.
    pub fn target_model(&self) -> ModelSpec {
        let mut m = self.model.clone();
        if self.gauss != GaussMethod::EnergyCost || self.model.degree < 2 {
            m.cost = None;
        }
        m
    }

    pub fn initial_state(&self) -> Result<Register> {
        match &self.init {
            InitialState::Zero => self.model.product_state(Init::Zero),
            InitialState::Plus => self.model.product_state(Init::Plus),
            InitialState::Amplitudes(a) => self.model.state_from(a.clone()),
        }
    }

    /// Number of measurements the whole run performs.
    pub fn measurement_count(&self) -> usize {
        let s = &self.model.space;
        let n = self.model.degree;
        let gauss = if n >= 2 { s.count(n - 2) } else { 0 };
        self.steps * (s.count(n) + 2 * s.count(n - 1) + gauss)
    }

    /// Trotter evolution of the initial state, labelled by spatial cells.
    /// Imaginary plans give the normalized non-unitary product.
    pub fn oracle_state(&self) -> Result<Register> {
        let mut s = self.initial_state()?;
        if self.is_imaginary() {
            let model = self.target_model();
            for _ in 0..self.steps {
                imaginary_trotter_step(&model, &mut s)?;
            }
        } else {
            trotter_evolve(&self.target_model(), &mut s, self.steps)?;
        }
        Ok(s)
    }
}

/// Byproduct ledger: the physical register equals `(⊗_s F_s^{b_s}) · P` applied
/// to the ideal state, with Fourier powers `b_s` and a Pauli string `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PauliFrame {
    pub fourier: BTreeMap<u64, i64>,
    pub pauli: PauliOp,
}

impl PauliFrame {
    pub fn new(n: u32) -> Self {
        PauliFrame { fourier: BTreeMap::new(), pauli: PauliOp::identity(n) }
    }

    pub fn is_trivial(&self) -> bool {
        self.pauli.is_identity() && self.pauli.phase_half_steps() == 0 && self.fourier.values().all(|b| b % 4 == 0)
    }

    fn fourier_power(&self, site: u64) -> i64 {
        self.fourier.get(&site).copied().unwrap_or(0)
    }

    /// `W⁻¹ op W` for the frame operator `W`.
    pub fn pull_back(&self, op: &PauliOp) -> PauliOp {
        let mut g = op.clone();
        let sites: Vec<u64> = g.sites().collect();
        for s in sites {
            let b = self.fourier_power(s);
            if b % 4 != 0 {
                g = g.fourier_conjugate(s, -b);
            }
        }
        g.conjugate_by(&self.pauli)
    }

    /// Records that `byproduct` acted on the physical register.
    pub fn push(&mut self, byproduct: &PauliOp) {
        let mut g = byproduct.clone();
        let sites: Vec<u64> = g.sites().collect();
        for s in sites {
            let b = self.fourier_power(s);
            if b % 4 != 0 {
                g = g.fourier_conjugate(s, -b);
            }
        }
        self.pauli = g.mul(&self.pauli);
    }

    /// Records that `F^power` acted on `site`.
    pub fn fourier_step(&mut self, site: u64, power: i64) {
        let b = (self.fourier_power(site) + power).rem_euclid(4);
        if b == 0 {
            self.fourier.remove(&site);
        } else {
            self.fourier.insert(site, b);
        }
    }

    pub fn relabel(&mut self, from: u64, to: u64) {
        self.pauli = self.pauli.relabel(from, to);
        if let Some(b) = self.fourier.remove(&from) {
            self.fourier.insert(to, b);
        }
    }

    /// `state ← W state`.
    pub fn apply(&self, state: &mut Register) -> Result<()> {
        state.apply_pauli(&self.pauli)?;
        for (&s, &b) in &self.fourier {
            state.apply_fourier(s, b)?;
        }
        Ok(())
    }

    /// `state ← W⁻¹ state`.
    pub fn remove(&self, state: &mut Register) -> Result<()> {
        for (&s, &b) in &self.fourier {
            state.apply_fourier(s, -b)?;
        }
        state.apply_pauli(&self.pauli.inverse())
    }
}

/// Angle `ξ` for which `exp(-i(ξ·generator + h.c.)/2)` acting on the physical
/// register equals `exp(iθ(target + h.c.)/2)` on the ideal state.
pub fn adapt_angle(frame: &PauliFrame, generator: &PauliOp, target: &PauliOp, theta: f64) -> Result<C64> {
    let g = frame.pull_back(generator);
    let phi = g.phase();
    let m = g.canonical();
    let c = if target.canonical() == m {
        target.phase()
    } else if target.dagger().canonical() == m {
        target.dagger().phase()
    } else {
        return Err(Error::NoMatchingTerm(generator.sites().next().unwrap_or(0)));
    };
    Ok(-c * theta / phi)
}

/// Real coefficient `a` for which `exp(a · generator)` on the physical
/// register equals `exp(alpha · target)` on the ideal state (qubits only).
pub fn adapt_imaginary(frame: &PauliFrame, generator: &PauliOp, target: &PauliOp, alpha: f64) -> Result<f64> {
    let g = frame.pull_back(generator);
    let m = g.canonical();
    if target.canonical() != m {
        return Err(Error::NoMatchingTerm(generator.sites().next().unwrap_or(0)));
    }
    let ratio = target.phase() / g.phase();
    if ratio.im.abs() > 1e-12 {
        return Err(Error::Unsupported("non-Hermitian imaginary-time generator".into()));
    }
    Ok(alpha * ratio.re)
}

/// Chain-level Pauli faults on the resource, keyed by spacetime cell.
#[derive(Clone, Debug, Default)]
pub struct Faults {
    pub z: BTreeSet<Cell>,
    pub x: BTreeSet<Cell>,
}

impl Faults {
    pub fn is_empty(&self) -> bool {
        self.z.is_empty() && self.x.is_empty()
    }
}

#[derive(Clone, Debug)]
pub enum Outcomes {
    Seeded(Box<ChaCha8Rng>),
    Scripted(Vec<usize>, usize),
}

impl Outcomes {
    pub fn seeded(seed: u64) -> Self {
        Outcomes::Seeded(Box::new(ChaCha8Rng::seed_from_u64(seed)))
    }

    pub fn scripted(script: Vec<usize>) -> Self {
        Outcomes::Scripted(script, 0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasurementEntry {
    pub cell: u64,
    pub step: usize,
    pub stage: Stage,
    pub outcome: usize,
    /// Adapted angle as `[re, im]`.
    pub angle: [f64; 2],
    pub probability: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RunRecord {
    pub entries: Vec<MeasurementEntry>,
    /// Sum of log acceptance probabilities of post-selected measurements.
    pub log_acceptance: f64,
    /// Frame at the end of each step.
    #[serde(skip)]
    pub frames: Vec<PauliFrame>,
}

impl RunRecord {
    pub fn outcome(&self, cell: Cell) -> Option<usize> {
        self.entries.iter().find(|e| e.cell == cell.0).map(|e| e.outcome)
    }

    pub fn outcomes(&self) -> BTreeMap<u64, usize> {
        self.entries.iter().map(|e| (e.cell, e.outcome)).collect()
    }
}

/// Lazy-entangling simulator for one trajectory.
pub struct Engine {
    plan: SimPlan,
    spacetime: CellComplex,
    reg: Register,
    frame: PauliFrame,
    location: BTreeMap<Cell, u64>,
    entangled: HashSet<(u64, u64)>,
    measured: HashSet<u64>,
    source: Outcomes,
    faults: Faults,
    record: RunRecord,
    next_step: usize,
    last_alpha: f64,
}

impl Engine {
    pub fn new(plan: &SimPlan, source: Outcomes, faults: Faults) -> Result<Self> {
        if plan.gauss == GaussMethod::EnergyCost && plan.model.cost.is_none() && plan.model.degree >= 2 {
            return Err(Error::Invalid("energy-cost method needs a cost strength".into()));
        }
        if plan.is_imaginary() && (plan.modulus() != 2 || plan.gauss == GaussMethod::EnergyCost) {
            return Err(Error::Unsupported("imaginary time runs qubit models without the cost term".into()));
        }
        let spacetime = plan.spacetime()?;
        let n = plan.modulus();
        let initial = plan.initial_state()?;
        let mut reg = initial.with_cap(dense_cap(n));
        let mut location = BTreeMap::new();
        for sigma in plan.model.sites() {
            let b = spacetime.product_cell(&plan.model.space, sigma, Slab::Point(0))?;
            location.insert(sigma, b.0);
        }
        relabel_all(&mut reg, location.iter().map(|(s, b)| (s.0, *b)))?;
        for &b in location.values() {
            if faults.z.contains(&Cell(b)) {
                reg.apply_pauli(&PauliOp::z(n, b, 1))?;
            }
        }
        Ok(Engine {
            plan: plan.clone(),
            spacetime,
            reg,
            frame: PauliFrame::new(n),
            location,
            entangled: HashSet::new(),
            measured: HashSet::new(),
            source,
            faults,
            record: RunRecord::default(),
            next_step: 0,
            last_alpha: 0.0,
        })
    }

    pub fn state(&self) -> &Register {
        &self.reg
    }

    pub fn frame(&self) -> &PauliFrame {
        &self.frame
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }

    pub fn spacetime(&self) -> &CellComplex {
        &self.spacetime
    }

    /// Current register label of a spatial site.
    pub fn physical_label(&self, sigma: Cell) -> Option<u64> {
        self.location.get(&sigma).copied()
    }

    pub fn steps_done(&self) -> usize {
        self.next_step
    }

    /// Declares that the ideal state carries an extra `op` the frame did not
    /// know about, e.g. a recovery chain.
    pub fn absorb(&mut self, op: &PauliOp) {
        self.frame.pauli = self.frame.pauli.mul(op);
    }

    fn n(&self) -> u32 {
        self.plan.modulus()
    }

    fn degree(&self) -> usize {
        self.plan.model.degree
    }

    fn in_resource(&self, cell: Cell) -> bool {
        let n = self.degree();
        let deg = cell.degree();
        if deg == n {
            let d = self.spacetime.dim();
            let t = self.spacetime.coords(cell)[d - 1];
            let timelike = cell.mask() & (1 << (d - 1)) != 0;
            timelike || t < self.plan.steps
        } else {
            deg + 1 == n
        }
    }

    /// Resource neighbours with their CZ powers.
    fn neighbours(&self, cell: Cell) -> Vec<(Cell, i64)> {
        let n = self.n() as i64;
        let mut acc: BTreeMap<Cell, i64> = BTreeMap::new();
        let raw = if cell.degree() == self.degree() {
            self.spacetime.cell_boundary(cell)
        } else {
            self.spacetime.cell_coboundary(cell)
        };
        for (c, k) in raw {
            if self.in_resource(c) {
                *acc.entry(c).or_insert(0) += k;
            }
        }
        acc.into_iter().map(|(c, k)| (c, k.rem_euclid(n))).filter(|(_, k)| *k != 0).collect()
    }

    fn attach(&mut self, cell: Cell) -> Result<()> {
        self.reg.attach(cell.0, Init::Plus)?;
        if self.faults.z.contains(&cell) {
            self.reg.apply_pauli(&PauliOp::z(self.n(), cell.0, 1))?;
        }
        Ok(())
    }

    /// Makes every entangling gate on `cell` happen, attaching fresh
    /// neighbours. Returns the neighbours and the subset attached here.
    fn prepare(&mut self, cell: Cell) -> Result<(Incidences, Vec<Cell>)> {
        if !self.reg.is_live(cell.0) {
            self.attach(cell)?;
        }
        let nbrs = self.neighbours(cell);
        let mut fresh = Vec::new();
        for &(nb, k) in &nbrs {
            let key = (cell.0.min(nb.0), cell.0.max(nb.0));
            if self.measured.contains(&nb.0) {
                if !self.entangled.contains(&key) {
                    return Err(Error::MissedEntangler(nb.0));
                }
                continue;
            }
            if !self.reg.is_live(nb.0) {
                self.attach(nb)?;
                fresh.push(nb);
            }
            if self.entangled.insert(key) {
                self.reg.apply_cz(cell.0, nb.0, k)?;
            }
        }
        if self.faults.x.contains(&cell) {
            self.reg.apply_pauli(&PauliOp::x(self.n(), cell.0, 1))?;
        }
        Ok((nbrs, fresh))
    }

    /// Measures `cell`, or `cell` with a fresh |0> ancilla for two-site bases.
    /// Two-site outcomes 0 and 1 are accepted; others reject the run.
    fn measure(&mut self, cell: Cell, basis: &MeasBasis, step: usize, stage: Stage) -> Result<usize> {
        let mut sites = vec![cell.0];
        if basis.sites == 2 {
            let anc = ANCILLA_OFFSET | cell.0;
            self.reg.attach(anc, Init::Zero)?;
            sites.push(anc);
        }
        let post_select = basis.sites == 2 && self.plan.evolution == (Evolution::Imaginary { post_select: true });
        let (k, p) = match &mut self.source {
            Outcomes::Seeded(rng) if post_select => {
                let probs = self.reg.probabilities(&sites, basis)?;
                let accept = probs[0] + probs[1];
                if accept <= 0.0 {
                    return Err(Error::ImpossibleBranch(accept));
                }
                self.record.log_acceptance += accept.ln();
                let k = usize::from(rng.gen::<f64>() * accept >= probs[0]);
                self.reg.measure::<ChaCha8Rng>(&sites, basis, Outcome::Forced(k))?
            }
            Outcomes::Seeded(rng) => self.reg.measure(&sites, basis, Outcome::Sample(rng.as_mut()))?,
            Outcomes::Scripted(script, pos) => {
                let forced = *script.get(*pos).ok_or(Error::MissingOutcome(cell.0))?;
                *pos += 1;
                self.reg.measure::<ChaCha8Rng>(&sites, basis, Outcome::Forced(forced))?
            }
        };
        self.measured.insert(cell.0);
        let angle = match basis.kind {
            crate::qstate::BasisKind::A(z) | crate::qstate::BasisKind::B(z) => [z.re, z.im],
            crate::qstate::BasisKind::Custom => [self.last_alpha, 0.0],
            _ => [0.0, 0.0],
        };
        self.record.entries.push(MeasurementEntry { cell: cell.0, step, stage, outcome: k, angle, probability: p });
        if basis.sites == 2 && k >= 2 {
            return Err(Error::Rejected(cell.0));
        }
        Ok(k)
    }

    /// Spatial-label operator moved onto the current physical labels.
    fn to_physical(&self, op: &PauliOp) -> PauliOp {
        let mut out = PauliOp::identity(op.modulus()).with_phase(op.phase_half_steps() as i64);
        for (s, x, z) in op.terms() {
            out = out.with(self.location[&Cell(s)], x as i64, z as i64);
        }
        out
    }

    fn lift(&self, sigma: Cell, slab: Slab) -> Result<Cell> {
        self.spacetime.product_cell(&self.plan.model.space, sigma, slab)
    }

    /// Runs one Trotter step.
    pub fn step(&mut self) -> Result<()> {
        let j = self.next_step;
        if j >= self.plan.steps {
            return Err(Error::SliceOutOfRange(j + 1));
        }
        for ps in pattern(self.degree(), self.plan.gauss) {
            match ps.stage {
                Stage::Plaquette => self.plaquette_stage(j)?,
                Stage::Transfer => self.transfer_stage(j)?,
                Stage::Gauss => self.gauss_stage(j)?,
                Stage::Field => self.field_stage(j)?,
            }
        }
        self.record.frames.push(self.frame.clone());
        self.next_step += 1;
        Ok(())
    }

    fn plaquette_stage(&mut self, j: usize) -> Result<()> {
        let n = self.n();
        let model = self.plan.model.clone();
        for sigma in model.plaquettes() {
            let c = self.lift(sigma, Slab::Point(j))?;
            let (nbrs, _) = self.prepare(c)?;
            let gen = PauliOp::z_string(n, nbrs.iter().map(|(nb, k)| (nb.0, -k)));
            let target = self.to_physical(&model.plaquette_term(sigma));
            let basis = if self.plan.is_imaginary() {
                self.last_alpha = adapt_imaginary(&self.frame, &gen, &target, model.lambda * model.dt)?;
                build_basis(PairKind::A, self.last_alpha)?
            } else {
                MeasBasis::a_type(n, adapt_angle(&self.frame, &gen, &target, model.lambda * model.dt)?)
            };
            let s = self.measure(c, &basis, j, Stage::Plaquette)?;
            self.frame.push(&gen.inverse().pow(s as u32));
        }
        Ok(())
    }

    /// Measures `source` in `basis` and follows its content onto the single
    /// fresh neighbour `target`.
    fn teleport(&mut self, source: Cell, target: Cell, basis: MeasBasis, j: usize, stage: Stage) -> Result<()> {
        let (nbrs, fresh) = self.prepare(source)?;
        if fresh != [target] {
            return Err(Error::Invalid(format!("teleport from {} expected fresh {}", source.0, target.0)));
        }
        let k = nbrs.iter().find(|(c, _)| *c == target).map(|(_, k)| *k).expect("target is a neighbour");
        let n = self.n() as i64;
        // CZ^{±1} teleports through F^{∓1}; other powers would need a
        // multiplication map outside the Clifford frame.
        let signed = match k {
            1 => 1,
            k if k == n - 1 => -1,
            _ => return Err(Error::Invalid(format!("teleport through CZ^{k} is unsupported"))),
        };
        let s = self.measure(source, &basis, j, stage)?;
        self.frame.push(&PauliOp::z(n as u32, source.0, s as i64));
        self.frame.fourier_step(source.0, -signed);
        self.frame.relabel(source.0, target.0);
        Ok(())
    }

    fn transfer_stage(&mut self, j: usize) -> Result<()> {
        let n = self.n();
        for sigma in self.plan.model.sites() {
            let b = Cell(self.location[&sigma]);
            let t = self.lift(sigma, Slab::Interval(j))?;
            self.teleport(b, t, MeasBasis::x_basis(n), j, Stage::Transfer)?;
            self.location.insert(sigma, t.0);
        }
        Ok(())
    }

    fn gauss_stage(&mut self, j: usize) -> Result<()> {
        let n = self.n();
        let model = self.plan.model.clone();
        for sigma in model.vertices() {
            let g = self.lift(sigma, Slab::Interval(j))?;
            let (nbrs, fresh) = self.prepare(g)?;
            if !fresh.is_empty() {
                return Err(Error::Invalid(format!("Gauss cell {} reached unattached cells", g.0)));
            }
            let gen = PauliOp::z_string(n, nbrs.iter().map(|(nb, k)| (nb.0, -k)));
            match self.plan.gauss {
                GaussMethod::Syndrome => {
                    self.measure(g, &MeasBasis::x_basis(n), j, Stage::Gauss)?;
                }
                GaussMethod::None => {
                    let s = self.measure(g, &MeasBasis::z_basis(n), j, Stage::Gauss)?;
                    self.frame.push(&gen.inverse().pow(s as u32));
                }
                GaussMethod::EnergyCost => {
                    let cost = model.cost.expect("checked at construction");
                    let target = self.to_physical(&model.cost_term(sigma));
                    let xi = adapt_angle(&self.frame, &gen, &target, cost * model.dt)?;
                    let s = self.measure(g, &MeasBasis::a_type(n, xi), j, Stage::Gauss)?;
                    self.frame.push(&gen.inverse().pow(s as u32));
                }
            }
        }
        Ok(())
    }

    fn field_stage(&mut self, j: usize) -> Result<()> {
        let n = self.n();
        let model = self.plan.model.clone();
        for sigma in model.sites() {
            let t = Cell(self.location[&sigma]);
            let u = self.lift(sigma, Slab::Point(j + 1))?;
            let gen = PauliOp::z(n, t.0, 1);
            let target = self.to_physical(&model.field_term(sigma));
            let basis = if self.plan.is_imaginary() {
                self.last_alpha = adapt_imaginary(&self.frame, &gen, &target, model.dt)?;
                build_basis(PairKind::B, self.last_alpha)?
            } else {
                MeasBasis::b_type(n, adapt_angle(&self.frame, &gen, &target, model.dt)?)
            };
            self.teleport(t, u, basis, j, Stage::Field)?;
            self.location.insert(sigma, u.0);
        }
        Ok(())
    }

    /// Runs the remaining steps and returns the raw boundary register, still
    /// in the physical frame and labelled by spacetime cells.
    pub fn run_raw(mut self) -> Result<(Register, PauliFrame, RunRecord, BTreeMap<Cell, u64>)> {
        while self.next_step < self.plan.steps {
            self.step()?;
        }
        let n = self.n();
        for &u in self.location.values() {
            if self.faults.x.contains(&Cell(u)) {
                self.reg.apply_pauli(&PauliOp::x(n, u, 1))?;
            }
        }
        Ok((self.reg, self.frame, self.record, self.location))
    }

    /// Runs the remaining steps, removes the frame and relabels the result
    /// onto spatial cells.
    pub fn finish(self) -> Result<Trajectory> {
        let (mut reg, frame, record, location) = self.run_raw()?;
        frame.remove(&mut reg)?;
        relabel_all(&mut reg, location.iter().map(|(s, p)| (*p, s.0)))?;
        Ok(Trajectory { state: reg, record })
    }
}

/// Relabels several sites at once; source and target label sets may overlap.
fn relabel_all(reg: &mut Register, pairs: impl Iterator<Item = (u64, u64)>) -> Result<()> {
    const PARK: u64 = 1 << 61;
    let pairs: Vec<(u64, u64)> = pairs.collect();
    for (i, &(from, _)) in pairs.iter().enumerate() {
        reg.relabel(from, PARK + i as u64)?;
    }
    for (i, &(_, to)) in pairs.iter().enumerate() {
        reg.relabel(PARK + i as u64, to)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub state: Register,
    pub record: RunRecord,
}

pub fn run(plan: &SimPlan, seed: u64) -> Result<Trajectory> {
    Engine::new(plan, Outcomes::seeded(seed), Faults::default())?.finish()
}

pub fn run_with(plan: &SimPlan, source: Outcomes, faults: Faults) -> Result<Trajectory> {
    Engine::new(plan, source, faults)?.finish()
}

/// Removes a frame from a state; the inverse of [`PauliFrame::apply`].
pub fn remove_frame(state: &Register, frame: &PauliFrame) -> Result<Register> {
    let mut s = state.clone();
    frame.remove(&mut s)?;
    Ok(s)
}

/// Every possible outcome sequence with its frame-removed final state.
/// Sequences that hit a zero-probability outcome are skipped.
pub fn enumerate_branches(plan: &SimPlan, max_measurements: usize) -> Result<Vec<(Vec<usize>, Register)>> {
    let m = plan.measurement_count();
    if m > max_measurements {
        return Err(Error::Invalid(format!("{m} measurements exceed the enumeration limit {max_measurements}")));
    }
    let n = plan.modulus() as usize;
    let total = n.pow(m as u32);
    let mut out = Vec::new();
    for idx in 0..total {
        let script: Vec<usize> = (0..m).map(|i| idx / n.pow(i as u32) % n).collect();
        match run_with(plan, Outcomes::scripted(script.clone()), Faults::default()) {
            Ok(t) => out.push((script, t.state)),
            Err(Error::ImpossibleBranch(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Seed of trial `trial` under master seed `master` (SplitMix64 mix).
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    let mut z = master ^ trial.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Worst fidelity against the oracle over `trials` seeded trajectories.
pub fn worst_oracle_fidelity(plan: &SimPlan, trials: u64, seed: u64) -> Result<f64> {
    use rayon::prelude::*;
    let want = plan.oracle_state()?;
    let fids: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| run(plan, trial_seed(seed, t)).and_then(|t| fidelity(&t.state, &want)))
        .collect::<Result<_>>()?;
    Ok(fids.into_iter().fold(1.0, f64::min))
}

/// Outcomes of the Gauss cells on slab `j`, keyed by their spatial cell.
pub fn gauss_outcomes(plan: &SimPlan, record: &RunRecord, j: usize) -> Result<BTreeMap<Cell, usize>> {
    let st = plan.spacetime()?;
    let mut out = BTreeMap::new();
    for v in plan.model.vertices() {
        let g = st.product_cell(&plan.model.space, v, Slab::Interval(j))?;
        out.insert(v, record.outcome(g).ok_or(Error::MissingOutcome(g.0))?);
    }
    Ok(out)
}

/// Checks `U_g(Λ)|ψ_3d> = U_CZ(O_bp U_g|ψ_2d> ⊗ |+>)` for the Ising resource
/// over `slices` time slices. `U_g` is the global flip when `flip` holds;
/// `bulk` lists the non-boundary vertices with `Λ = 1`.
pub fn bulk_boundary_symmetry_check(
    space: &CellComplex,
    slices: usize,
    psi: &[C64],
    byproduct: &PauliOp,
    flip: bool,
    bulk: &BTreeSet<Cell>,
) -> Result<bool> {
    let n = space.modulus();
    let mut ext = space.extents().to_vec();
    ext.push(slices);
    let mut per = space.periodic().to_vec();
    per.push(false);
    let st = CellComplex::new(ext, per, n)?;
    let spec = ClusterSpec::new(st.clone(), 1)?;
    let boundary: Vec<Cell> =
        space.cells(0).into_iter().map(|v| st.product_cell(space, v, Slab::Point(0))).collect::<Result<_>>()?;
    if spec.sites().len() > dense_cap(n) {
        return Err(Error::DenseCap { qudits: spec.sites().len(), cap: dense_cap(n) });
    }
    let flip_op = if flip {
        PauliOp::x_string(n, boundary.iter().map(|b| (b.0, 1)))
    } else {
        PauliOp::identity(n)
    };
    let resource = |boundary_state: &Register| -> Result<Register> {
        let mut r = boundary_state.clone().with_cap(dense_cap(n));
        for c in spec.sites() {
            if !r.is_live(c.0) {
                r.attach(c.0, Init::Plus)?;
            }
        }
        for (top, low, k) in spec.entangling_pairs() {
            r.apply_cz(top.0, low.0, k as i64)?;
        }
        Ok(r)
    };
    let mut psi2 = Register::from_amplitudes(n, boundary.iter().map(|b| b.0).collect(), psi.to_vec())?;
    let mut dressed = psi2.clone();
    dressed.apply_pauli(byproduct)?;
    let psi3 = resource(&dressed)?;

    // (-1)^m from O U_g O⁻¹ = ω^m U_g.
    let m = byproduct.commutation(&flip_op) as i64;
    let stabs: BTreeMap<Cell, PauliOp> = spec.stabilizers().into_iter().map(|s| (s.anchor, s.op)).collect();
    let mut lhs = psi3;
    for v in st.cells(0) {
        let on_boundary = boundary.contains(&v);
        let power = if on_boundary { flip } else { bulk.contains(&v) };
        if power {
            lhs.apply_pauli(&stabs[&v])?;
        }
    }
    lhs.apply_pauli(&PauliOp::identity(n).with_phase(2 * m))?;

    psi2.apply_pauli(&flip_op)?;
    psi2.apply_pauli(byproduct)?;
    let rhs = resource(&psi2)?;
    let order: Vec<u64> = lhs.sites().to_vec();
    let b = rhs.amplitudes_in(&order)?;
    let dev = lhs.amplitudes().iter().zip(&b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    Ok(dev < 1e-10)
}

/// A chain as the list of `(cell id, coefficient)` pairs used by Pauli strings.
pub fn chain_terms(c: &Chain) -> Vec<(u64, i64)> {
    c.terms().map(|(cell, k)| (cell.0, k as i64)).collect()
}
