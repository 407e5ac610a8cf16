//! Higher-form symmetries of the Z₂ cluster state and the gauging map that
//! sends the symmetric sector onto the gauged sector.
//!
//! Everything here is dense and restricted to qubits. Cells of each degree are
//! packed into `u64` bit masks, so at most 64 cells per degree are allowed.

use std::collections::{BTreeMap, HashSet};

use crate::cluster::{build_full, dense_cap, ClusterSpec};
use crate::complex::{Cell, Chain, Side};
use crate::qstate::{PauliOp, Register, C64};
use crate::{Error, Result};

const EPS: f64 = 1e-9;

/// Rank over GF(2) of a set of bit vectors.
pub fn gf2_rank(rows: &[u64]) -> usize {
    let mut basis = Gf2Basis::default();
    rows.iter().filter(|&&r| basis.insert(r, 0)).count()
}

/// Reduced row basis keyed by leading bit. Each row remembers which inputs
/// were combined to produce it.
#[derive(Default)]
struct Gf2Basis {
    rows: BTreeMap<u32, (u64, u64)>,
}

impl Gf2Basis {
    fn insert(&mut self, value: u64, combo: u64) -> bool {
        let (v, c) = self.reduce(value, combo);
        if v == 0 {
            return false;
        }
        self.rows.insert(63 - v.leading_zeros(), (v, c));
        true
    }

    fn reduce(&self, mut v: u64, mut c: u64) -> (u64, u64) {
        while v != 0 {
            let top = 63 - v.leading_zeros();
            match self.rows.get(&top) {
                Some(&(rv, rc)) => {
                    v ^= rv;
                    c ^= rc;
                }
                None => break,
            }
        }
        (v, c)
    }

    /// Combination of inputs summing to `target`, if one exists.
    fn solve(&self, target: u64) -> Option<u64> {
        let mut v = target;
        let mut c = 0;
        while v != 0 {
            let top = 63 - v.leading_zeros();
            let &(rv, rc) = self.rows.get(&top)?;
            v ^= rv;
            c ^= rc;
        }
        Some(c)
    }
}

/// Cells of degree n ("top") and n−1 ("low") as bit positions, with the
/// boundary map between them.
#[derive(Clone, Debug)]
struct Layout {
    low: Vec<Cell>,
    top: Vec<Cell>,
    low_index: BTreeMap<u64, usize>,
    top_index: BTreeMap<u64, usize>,
    // boundary of each top cell, over low cells
    bd: Vec<u64>,
    // coboundary of each low cell, over top cells
    cobd: Vec<u64>,
}

impl Layout {
    fn new(spec: &ClusterSpec) -> Result<Self> {
        if spec.modulus() != 2 {
            return Err(Error::Unsupported("symmetry sectors are implemented for qubits only".into()));
        }
        let low = spec.low_cells();
        let top = spec.top_cells();
        if low.len() > 64 || top.len() > 64 {
            return Err(Error::Invalid(format!("{} low and {} top cells exceed 64 per degree", low.len(), top.len())));
        }
        let low_index: BTreeMap<u64, usize> = low.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
        let top_index: BTreeMap<u64, usize> = top.iter().enumerate().map(|(i, c)| (c.0, i)).collect();
        let mut bd = vec![0u64; top.len()];
        let mut cobd = vec![0u64; low.len()];
        for (j, &t) in top.iter().enumerate() {
            for (face, k) in spec.complex.cell_boundary(t) {
                if k.rem_euclid(2) == 1 {
                    let i = low_index[&face.0];
                    bd[j] ^= 1 << i;
                    cobd[i] ^= 1 << j;
                }
            }
        }
        Ok(Layout { low, top, low_index, top_index, bd, cobd })
    }

    fn qubits(&self) -> usize {
        self.low.len() + self.top.len()
    }

    fn sites(&self) -> Vec<u64> {
        self.low.iter().chain(&self.top).map(|c| c.0).collect()
    }

    fn boundary(&self, top: u64) -> u64 {
        fold_columns(&self.bd, top)
    }

    fn coboundary(&self, low: u64) -> u64 {
        fold_columns(&self.cobd, low)
    }

    fn low_mask(&self, chain: &Chain) -> u64 {
        chain.terms().filter(|(_, k)| k % 2 == 1).fold(0, |m, (c, _)| m | 1 << self.low_index[&c.0])
    }

    fn top_mask(&self, chain: &Chain) -> u64 {
        chain.terms().filter(|(_, k)| k % 2 == 1).fold(0, |m, (c, _)| m | 1 << self.top_index[&c.0])
    }

    /// Full-register index mask: low cells in the lowest bits.
    fn joint(&self, low: u64, top: u64) -> usize {
        (low | top << self.low.len()) as usize
    }

    fn split(&self, index: usize) -> (u64, u64) {
        let nl = self.low.len();
        let low = (index as u64) & mask_of(nl);
        let top = (index >> nl) as u64;
        (low, top)
    }

    fn x_op(&self, low: u64, top: u64) -> PauliOp {
        PauliOp::x_string(2, self.labels(low, top).map(|s| (s, 1)))
    }

    fn z_op(&self, low: u64, top: u64) -> PauliOp {
        PauliOp::z_string(2, self.labels(low, top).map(|s| (s, 1)))
    }

    fn labels(&self, low: u64, top: u64) -> impl Iterator<Item = u64> + '_ {
        let l = bits(low).map(|i| self.low[i].0);
        let t = bits(top).map(|j| self.top[j].0);
        l.chain(t)
    }

    /// Splits an operator into its X and Z masks on (low, top).
    fn masks(&self, op: &PauliOp) -> Result<[u64; 4]> {
        let mut m = [0u64; 4];
        for (site, x, z) in op.terms() {
            let (slot, bit) = match (self.low_index.get(&site), self.top_index.get(&site)) {
                (Some(&i), _) => (0, i),
                (None, Some(&j)) => (1, j),
                (None, None) => return Err(Error::DeadSite(site)),
            };
            if x % 2 == 1 {
                m[slot] |= 1 << bit;
            }
            if z % 2 == 1 {
                m[2 + slot] |= 1 << bit;
            }
        }
        Ok(m)
    }
}

fn fold_columns(cols: &[u64], select: u64) -> u64 {
    bits(select).fold(0, |acc, i| acc ^ cols[i])
}

fn bits(mask: u64) -> impl Iterator<Item = usize> {
    (0..64).filter(move |i| mask >> i & 1 == 1)
}

fn mask_of(len: usize) -> u64 {
    if len >= 64 {
        u64::MAX
    } else {
        (1u64 << len) - 1
    }
}

/// Dimensions of the two symmetric subspaces and the rank of the gauging map
/// between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SectorDims {
    pub ungauged: usize,
    pub gauged: usize,
    pub gauge_rank: usize,
}

/// The X-type symmetry generators of the cluster state on (n, n−1) cells and
/// their Z-type counterparts on the gauged side, plus the gauging map.
#[derive(Clone, Debug)]
pub struct SymmetrySector {
    layout: Layout,
    cycles: Vec<Chain>,
    cocycles: Vec<Chain>,
}

impl SymmetrySector {
    pub fn new(spec: &ClusterSpec) -> Result<Self> {
        let layout = Layout::new(spec)?;
        let cap = dense_cap(2);
        if layout.qubits() > cap {
            return Err(Error::DenseCap { qudits: layout.qubits(), cap });
        }
        let n = spec.degree;
        let cycles = spec.complex.kernel_cycles(n, Side::Primal, 64)?;
        let cocycles = spec.complex.kernel_cycles(n - 1, Side::Dual, 64)?;
        Ok(SymmetrySector { layout, cycles, cocycles })
    }

    /// n-cycles generating the symmetries on top cells.
    pub fn cycles(&self) -> &[Chain] {
        &self.cycles
    }

    /// Closed (n−1)-cochains generating the symmetries on low cells.
    pub fn cocycles(&self) -> &[Chain] {
        &self.cocycles
    }

    pub fn sites(&self) -> Vec<u64> {
        self.layout.sites()
    }

    fn generator_masks(&self) -> Vec<(u64, u64)> {
        let top = self.cycles.iter().map(|c| (0, self.layout.top_mask(c)));
        let low = self.cocycles.iter().map(|c| (self.layout.low_mask(c), 0));
        top.chain(low).collect()
    }

    /// X over each cycle and each closed cochain.
    pub fn x_generators(&self) -> Vec<PauliOp> {
        self.generator_masks().into_iter().map(|(l, t)| self.layout.x_op(l, t)).collect()
    }

    /// Z over the same supports, acting on the gauged register.
    pub fn z_generators(&self) -> Vec<PauliOp> {
        self.generator_masks().into_iter().map(|(l, t)| self.layout.z_op(l, t)).collect()
    }

    /// `(|Z_n|, |Z^{n−1}|)`: kernel sizes of the boundary map on n-chains and
    /// of the coboundary map on (n−1)-chains.
    pub fn kernel_orders(&self) -> (u64, u64) {
        let l = &self.layout;
        let zn = l.top.len() - gf2_rank(&l.bd);
        let zc = l.low.len() - gf2_rank(&l.cobd);
        (1 << zn, 1 << zc)
    }

    /// Whether the enumerated generators span the full kernels.
    pub fn spans_kernels(&self) -> bool {
        let top: Vec<u64> = self.cycles.iter().map(|c| self.layout.top_mask(c)).collect();
        let low: Vec<u64> = self.cocycles.iter().map(|c| self.layout.low_mask(c)).collect();
        let closed = top.iter().all(|&t| self.layout.boundary(t) == 0) && low.iter().all(|&c| self.layout.coboundary(c) == 0);
        let (zn, zc) = self.kernel_orders();
        closed && 1u64 << gf2_rank(&top) == zn && 1u64 << gf2_rank(&low) == zc
    }

    pub fn normalization(&self) -> f64 {
        let (zn, zc) = self.kernel_orders();
        1.0 / ((zn as f64) * (zc as f64)).sqrt()
    }

    pub fn is_symmetric(&self, state: &Register) -> Result<bool> {
        for g in self.x_generators() {
            if (state.expectation(&g)? - C64::new(1.0, 0.0)).norm() > EPS {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Group average of `amps` (ordered as `sites()`), left unnormalized.
    pub fn symmetrize(&self, amps: &[C64]) -> Vec<C64> {
        let mut v = amps.to_vec();
        for (l, t) in self.generator_masks() {
            let g = self.layout.joint(l, t);
            v = (0..v.len()).map(|i| (v[i] + v[i ^ g]) * 0.5).collect();
        }
        v
    }

    /// The gauging map on basis states, without normalization or symmetry check.
    pub fn gauge_raw(&self, amps: &[C64]) -> Vec<C64> {
        let l = &self.layout;
        let mut out = vec![C64::new(0.0, 0.0); amps.len()];
        for (i, a) in amps.iter().enumerate() {
            if a.norm_sqr() == 0.0 {
                continue;
            }
            let (low, top) = l.split(i);
            out[l.joint(l.boundary(top), l.coboundary(low))] += a;
        }
        out
    }

    /// Normalized gauging map on a symmetric amplitude vector. The norm is
    /// preserved, so the output is not renormalized.
    pub fn gauge_amplitudes(&self, amps: &[C64]) -> Result<Vec<C64>> {
        if amps.len() != 1 << self.layout.qubits() {
            return Err(Error::SiteMismatch);
        }
        let sym = self.symmetrize(amps);
        let dev: f64 = sym.iter().zip(amps).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        if dev > EPS {
            return Err(Error::NotSymmetric);
        }
        let k = self.normalization();
        Ok(self.gauge_raw(amps).into_iter().map(|a| a * k).collect())
    }

    /// Gauged state on the same cell labels.
    pub fn gauge_state(&self, state: &Register) -> Result<Register> {
        let sites = self.sites();
        let amps = state.amplitudes_in(&sites)?;
        let out = self.gauge_amplitudes(&amps)?;
        Register::from_amplitudes(2, sites, out)
    }

    /// Image of a symmetric Pauli operator, so that the gauged operator acts
    /// on the gauged state as the original acted before gauging.
    pub fn gauge_operator(&self, op: &PauliOp) -> Result<PauliOp> {
        if op.modulus() != 2 {
            return Err(Error::Unsupported("operator gauging is implemented for qubits only".into()));
        }
        if !self.x_generators().iter().all(|g| g.commutes_with(op)) {
            return Err(Error::Invalid("operator does not commute with the symmetry generators".into()));
        }
        let l = &self.layout;
        let [x_low, x_top, z_low, z_top] = l.masks(op)?;
        let bare = l.x_op(x_low, x_top).mul(&l.z_op(z_low, z_top));
        let phase = op.mul(&bare.inverse());
        debug_assert!(phase.is_identity());

        // Z on top cells pulls back to Z on a low chain whose coboundary it is,
        // and Z on low cells to a top chain whose boundary it is.
        let mut co = Gf2Basis::default();
        for (i, &c) in l.cobd.iter().enumerate() {
            co.insert(c, 1 << i);
        }
        let mut bo = Gf2Basis::default();
        for (j, &b) in l.bd.iter().enumerate() {
            bo.insert(b, 1 << j);
        }
        let unsolvable = || Error::Invalid("Z part is not a (co)boundary".into());
        let y_low = co.solve(z_top).ok_or_else(unsolvable)?;
        let y_top = bo.solve(z_low).ok_or_else(unsolvable)?;

        let x = l.x_op(l.boundary(x_top), l.coboundary(x_low));
        let z = l.z_op(y_low, y_top);
        Ok(x.mul(&z).with_phase(phase.phase_half_steps() as i64))
    }

    /// Ranks of the projectors onto both symmetric subspaces and of the
    /// gauging map restricted to the ungauged one.
    pub fn dimensions(&self) -> SectorDims {
        let q = self.layout.qubits();
        let gens: Vec<usize> = self.generator_masks().into_iter().map(|(l, t)| self.layout.joint(l, t)).collect();
        // Group elements as index masks.
        let mut group: Vec<usize> = vec![0];
        for g in &gens {
            if !group.contains(g) {
                let extra: Vec<usize> = group.iter().map(|h| h ^ g).collect();
                for e in extra {
                    if !group.contains(&e) {
                        group.push(e);
                    }
                }
            }
        }
        // Orbit representatives under the X group count the rank of its
        // averaging projector.
        let ungauged = (0..1usize << q).filter(|&i| group.iter().all(|&g| i ^ g >= i)).count();
        // The Z group projector is diagonal: keep basis states with even
        // overlap against every generator.
        let gauged = (0..1usize << q).filter(|&i| gens.iter().all(|&g| (i & g).count_ones() % 2 == 0)).count();
        let l = &self.layout;
        let images: HashSet<usize> = (0..1usize << q)
            .map(|i| {
                let (low, top) = l.split(i);
                l.joint(l.boundary(top), l.coboundary(low))
            })
            .collect();
        SectorDims { ungauged, gauged, gauge_rank: images.len() }
    }
}

/// Stabilizers of the gauged trivial state: X(∂σ_n) on low cells,
/// X(∂*σ_{n−1}) on top cells, and the flux terms Z(∂σ_{n+1}) and Z(∂*σ_{n−2})
/// where those degrees exist.
pub fn gauged_trivial_stabilizers(spec: &ClusterSpec) -> Result<Vec<PauliOp>> {
    let n = spec.degree;
    let d = spec.complex.dim();
    let m = spec.modulus();
    let x_of = |c: Chain| PauliOp::x_string(m, c.terms().map(|(s, k)| (s.0, k as i64)));
    let z_of = |c: Chain| PauliOp::z_string(m, c.terms().map(|(s, k)| (s.0, k as i64)));
    let mut out = Vec::new();
    for t in spec.top_cells() {
        out.push(x_of(spec.complex.boundary(&Chain::single(t, m))?));
    }
    for l in spec.low_cells() {
        out.push(x_of(spec.complex.coboundary(&Chain::single(l, m))?));
    }
    if n < d {
        for c in spec.complex.cells(n + 1) {
            out.push(z_of(spec.complex.boundary(&Chain::single(c, m))?));
        }
    }
    if n >= 2 {
        for c in spec.complex.cells(n - 2) {
            out.push(z_of(spec.complex.coboundary(&Chain::single(c, m))?));
        }
    }
    out.retain(|p| !p.is_identity());
    Ok(out)
}

/// Cluster stabilizers with X and Z swapped on every site.
pub fn hadamard_stabilizers(spec: &ClusterSpec) -> Vec<PauliOp> {
    spec.stabilizers().into_iter().map(|s| swap_xz(&s.op)).collect()
}

fn swap_xz(p: &PauliOp) -> PauliOp {
    p.terms()
        .fold(PauliOp::identity(p.modulus()), |acc, (s, x, z)| acc.with(s, z as i64, x as i64))
        .with_phase(p.phase_half_steps() as i64)
}

/// Hadamard on every live site.
pub fn hadamard_all(state: &Register) -> Result<Register> {
    let mut out = state.clone();
    for &s in state.sites().to_vec().iter() {
        out.apply_fourier(s, 1)?;
    }
    Ok(out)
}

/// Which open end of direction 1 a boundary check refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum End {
    Left,
    Right,
}

#[derive(Clone, Debug)]
pub struct EndCheck {
    pub end: End,
    pub z_part: PauliOp,
    pub x_part: PauliOp,
    pub intersection: usize,
    pub anticommute: bool,
}

#[derive(Clone, Debug)]
pub struct BraneReport {
    /// Product of K(σ_n) over the n-cells spanning directions 1..n.
    pub brane: PauliOp,
    /// Product of K(σ_{n−1}) over every (n−1)-cell spanning directions 2..n.
    pub dual_brane: PauliOp,
    /// Z parts of both operators sit only on cells of the two ends.
    pub z_on_ends_only: bool,
    pub stabilize_cluster: bool,
    pub ends: Vec<EndCheck>,
}

impl BraneReport {
    pub fn passed(&self) -> bool {
        self.z_on_ends_only
            && self.stabilize_cluster
            && self.ends.iter().all(|e| e.anticommute && e.intersection % 2 == 1)
    }
}

/// Brane operators on a complex whose first direction is open and all others
/// periodic. Restricted to either end, the Z part of the brane and the X part
/// of the dual brane must anticommute.
pub fn brane_projective_check(spec: &ClusterSpec) -> Result<BraneReport> {
    let cx = &spec.complex;
    let d = cx.dim();
    let n = spec.degree;
    if spec.modulus() != 2 {
        return Err(Error::Unsupported("brane checks are implemented for qubits only".into()));
    }
    if cx.periodic()[0] || !cx.periodic()[1..].iter().all(|&p| p) {
        return Err(Error::Invalid("need direction 1 open and the rest periodic".into()));
    }
    if cx.extents()[0] < 2 {
        return Err(Error::Invalid("the open direction needs at least two slices".into()));
    }
    let cap = dense_cap(2);
    let qubits = cx.count(n) + cx.count(n - 1);
    if qubits > cap {
        return Err(Error::DenseCap { qudits: qubits, cap });
    }
    let span: u32 = (1 << n) - 1;
    let stabs: BTreeMap<Cell, PauliOp> = spec.stabilizers().into_iter().map(|s| (s.anchor, s.op)).collect();
    let product = |cells: Vec<Cell>| cells.iter().fold(PauliOp::identity(2), |acc, c| acc.mul(&stabs[c]));

    let brane = product(
        cx.cells(n)
            .into_iter()
            .filter(|&c| c.mask() == span && cx.coords(c)[n..d].iter().all(|&x| x == 0))
            .collect(),
    );
    let dual_brane = product(cx.cells(n - 1).into_iter().filter(|&c| c.mask() == span & !1).collect());

    let last = cx.extents()[0] - 1;
    let end_of = |site: u64| -> Option<End> {
        let c = Cell(site);
        if c.mask() & 1 != 0 {
            return None;
        }
        match cx.coords(c)[0] {
            0 => Some(End::Left),
            x if x == last => Some(End::Right),
            _ => None,
        }
    };
    let z_on_ends_only = [&brane, &dual_brane]
        .iter()
        .all(|p| p.terms().filter(|t| t.2 % 2 == 1).all(|t| end_of(t.0).is_some()));

    let reg = build_full(spec)?;
    let one = C64::new(1.0, 0.0);
    let stabilize_cluster =
        (reg.expectation(&brane)? - one).norm() < EPS && (reg.expectation(&dual_brane)? - one).norm() < EPS;

    let ends = [End::Left, End::Right]
        .into_iter()
        .map(|end| {
            let z_part = PauliOp::z_string(2, brane.terms().filter(|t| t.2 % 2 == 1 && end_of(t.0) == Some(end)).map(|t| (t.0, 1)));
            let x_part =
                PauliOp::x_string(2, dual_brane.terms().filter(|t| t.1 % 2 == 1 && end_of(t.0) == Some(end)).map(|t| (t.0, 1)));
            let zs: HashSet<u64> = z_part.sites().collect();
            let intersection = x_part.sites().filter(|s| zs.contains(s)).count();
            let anticommute = !z_part.commutes_with(&x_part);
            EndCheck { end, z_part, x_part, intersection, anticommute }
        })
        .collect();
    Ok(BraneReport { brane, dual_brane, z_on_ends_only, stabilize_cluster, ends })
}

#[derive(Clone, Debug)]
pub struct SptCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Gauging and brane checks on the small instances used by the CLI and the
/// acceptance suite.
pub fn run_suite(seed: u64) -> Result<Vec<SptCheck>> {
    use crate::complex::CellComplex;
    use rand::{Rng, SeedableRng};

    let mut checks = Vec::new();
    let mut push = |name: String, passed: bool, detail: String| checks.push(SptCheck { name, passed, detail });
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let instances = [(vec![2, 2], 1usize), (vec![2, 1, 1], 2usize)];
    for (extents, n) in instances {
        let tag = format!("({},{}) torus {:?}", extents.len(), n, extents);
        let spec = ClusterSpec::new(CellComplex::torus(extents, 2)?, n)?;
        let sector = SymmetrySector::new(&spec)?;
        let gcs = build_full(&spec)?;

        let commute = spec.stabilizers().iter().all(|s| sector.x_generators().iter().all(|g| g.commutes_with(&s.op)));
        push(format!("{tag}: cluster Hamiltonian commutes with symmetries"), commute, String::new());

        let dims = sector.dimensions();
        push(
            format!("{tag}: symmetric dimensions agree and gauging is bijective"),
            dims.ungauged == dims.gauged && dims.gauge_rank == dims.ungauged && sector.spans_kernels(),
            format!("{dims:?}"),
        );

        let mut worst = 0.0f64;
        let mut cov = 0.0f64;
        let ops: Vec<PauliOp> = spec.stabilizers().into_iter().map(|s| s.op).chain(sector.x_generators()).collect();
        for _ in 0..4 {
            let raw: Vec<C64> =
                (0..1 << sector.sites().len()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let sym = sector.symmetrize(&raw);
            let norm = sym.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            let sym: Vec<C64> = sym.into_iter().map(|a| a / norm).collect();
            let image = sector.gauge_amplitudes(&sym)?;
            let out_norm = image.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            worst = worst.max((out_norm - 1.0).abs());
            let state = Register::from_amplitudes(2, sector.sites(), sym)?;
            let gauged = sector.gauge_state(&state)?;
            let op = &ops[rng.gen_range(0..ops.len())];
            cov = cov.max(operator_covariance(&sector, op, &state, &gauged)?);
        }
        push(format!("{tag}: gauging is isometric on symmetric states"), worst < 1e-10, format!("max |norm-1| = {worst:.2e}"));
        push(format!("{tag}: operators gauge covariantly"), cov < 1e-10, format!("max deviation = {cov:.2e}"));

        let image = sector.gauge_state(&gcs)?;
        let had = hadamard_all(&gcs)?;
        let f = crate::qstate::fidelity(&image, &had)?;
        let stab_ok = hadamard_stabilizers(&spec).iter().all(|p| (image.expectation(p).map(|e| (e - 1.0).norm()).unwrap_or(1.0)) < EPS);
        push(
            format!("{tag}: gauged cluster state is the Hadamard-transformed cluster state"),
            (f - 1.0).abs() < 1e-10 && stab_ok,
            format!("fidelity = {f:.12}"),
        );

        let plus = Register::from_amplitudes(2, sector.sites(), vec![C64::new(1.0, 0.0); 1 << sector.sites().len()])?;
        let trivial = sector.gauge_state(&plus)?;
        let triv_ok = gauged_trivial_stabilizers(&spec)?
            .iter()
            .all(|p| trivial.expectation(p).map(|e| (e - 1.0).norm() < EPS).unwrap_or(false));
        push(format!("{tag}: gauged product state satisfies the gauged trivial stabilizers"), triv_ok, String::new());
    }
    for (extents, n) in [(vec![2, 1], 1usize), (vec![2, 1, 1], 2usize)] {
        let d = extents.len();
        let mut periodic = vec![true; d];
        periodic[0] = false;
        let tag = format!("({d},{n}) open {extents:?}");
        let spec = ClusterSpec::new(CellComplex::new(extents, periodic, 2)?, n)?;
        let report = brane_projective_check(&spec)?;
        let counts: Vec<usize> = report.ends.iter().map(|e| e.intersection).collect();
        push(format!("{tag}: boundary brane operators anticommute"), report.passed(), format!("intersections {counts:?}"));
    }
    Ok(checks)
}

/// `‖Γ(A ψ) − A^Γ Γ(ψ)‖` for one symmetric state.
pub fn operator_covariance(sector: &SymmetrySector, op: &PauliOp, state: &Register, gauged: &Register) -> Result<f64> {
    let mut moved = state.clone();
    moved.apply_pauli(op)?;
    let lhs = sector.gauge_state(&moved)?;
    let mut rhs = gauged.clone();
    rhs.apply_pauli(&sector.gauge_operator(op)?)?;
    let sites = sector.sites();
    let a = lhs.amplitudes_in(&sites)?;
    let b = rhs.amplitudes_in(&sites)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complex::CellComplex;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn torus(extents: Vec<usize>, n: usize) -> ClusterSpec {
        ClusterSpec::new(CellComplex::torus(extents, 2).unwrap(), n).unwrap()
    }

    fn open(extents: Vec<usize>, n: usize) -> ClusterSpec {
        let mut periodic = vec![true; extents.len()];
        periodic[0] = false;
        ClusterSpec::new(CellComplex::new(extents, periodic, 2).unwrap(), n).unwrap()
    }

    fn random_symmetric(sector: &SymmetrySector, rng: &mut ChaCha8Rng) -> Register {
        let raw: Vec<C64> =
            (0..1 << sector.sites().len()).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        Register::from_amplitudes(2, sector.sites(), sector.symmetrize(&raw)).unwrap()
    }

    fn near_one(r: &Register, p: &PauliOp) -> bool {
        (r.expectation(p).unwrap() - 1.0).norm() < 1e-9
    }

    #[test]
    fn gf2_solver() {
        assert_eq!(gf2_rank(&[0b011, 0b110, 0b101]), 2);
        let mut b = Gf2Basis::default();
        b.insert(0b011, 1);
        b.insert(0b110, 2);
        assert_eq!(b.solve(0b101), Some(3));
        assert_eq!(b.solve(0b001), None);
    }

    #[test]
    fn generators_span_kernels() {
        for (ext, n) in [(vec![2, 2], 1), (vec![2, 2], 2), (vec![2, 1, 1], 2), (vec![2, 1, 1], 1), (vec![3], 1)] {
            let s = SymmetrySector::new(&torus(ext.clone(), n)).unwrap();
            assert!(s.spans_kernels(), "{ext:?} n={n}");
        }
        // 2x2 torus: H_1 has rank 2 plus 3 independent plaquette boundaries.
        let s = SymmetrySector::new(&torus(vec![2, 2], 1)).unwrap();
        assert_eq!(s.kernel_orders(), (1 << 5, 2));
    }

    #[test]
    fn cluster_hamiltonian_commutes_with_symmetries() {
        for (ext, n) in [(vec![2, 2], 1), (vec![2, 1, 1], 2)] {
            let spec = torus(ext, n);
            let s = SymmetrySector::new(&spec).unwrap();
            for g in s.x_generators() {
                assert!(spec.stabilizers().iter().all(|k| k.op.commutes_with(&g)));
            }
            let gcs = build_full(&spec).unwrap();
            assert!(s.is_symmetric(&gcs).unwrap());
        }
    }

    #[test]
    fn sector_dimensions_match() {
        for (ext, n) in [(vec![2, 2], 1), (vec![2, 1, 1], 2), (vec![3], 1)] {
            let s = SymmetrySector::new(&torus(ext.clone(), n)).unwrap();
            let dims = s.dimensions();
            let (zn, zc) = s.kernel_orders();
            let q = s.sites().len();
            assert_eq!(dims.ungauged, dims.gauged, "{ext:?}");
            assert_eq!(dims.gauge_rank, dims.ungauged, "{ext:?}");
            assert_eq!(dims.ungauged as u64 * zn * zc, 1 << q);
        }
    }

    #[test]
    fn trivial_state_maps_to_gauged_trivial() {
        for (ext, n) in [(vec![2, 2], 1), (vec![2, 1, 1], 2)] {
            let spec = torus(ext, n);
            let s = SymmetrySector::new(&spec).unwrap();
            let plus = Register::from_amplitudes(2, s.sites(), vec![C64::new(1.0, 0.0); 1 << s.sites().len()]).unwrap();
            let image = s.gauge_state(&plus).unwrap();
            let stabs = gauged_trivial_stabilizers(&spec).unwrap();
            // flux terms appear: plaquettes for (2,1), and both kinds for (3,2)
            assert!(stabs.iter().any(|p| p.terms().all(|t| t.2 == 1)));
            for p in &stabs {
                assert!(near_one(&image, p));
            }
        }
    }

    #[test]
    fn cluster_maps_to_hadamard_cluster() {
        for (ext, n) in [(vec![2, 2], 1), (vec![2, 1, 1], 2)] {
            let spec = torus(ext, n);
            let s = SymmetrySector::new(&spec).unwrap();
            let gcs = build_full(&spec).unwrap();
            let image = s.gauge_state(&gcs).unwrap();
            let f = crate::qstate::fidelity(&image, &hadamard_all(&gcs).unwrap()).unwrap();
            assert!((f - 1.0).abs() < 1e-12, "{f}");
            for p in hadamard_stabilizers(&spec) {
                assert!(near_one(&image, &p));
            }
        }
    }

    #[test]
    fn symmetry_generators_gauge_to_identity() {
        let spec = torus(vec![2, 2], 1);
        let s = SymmetrySector::new(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw: Vec<C64> = (0..1 << 12).map(|_| C64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
        let base = s.gauge_raw(&raw);
        for g in s.x_generators() {
            let mut r = Register::from_amplitudes(2, s.sites(), raw.clone()).unwrap();
            let scale = raw.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            r.apply_pauli(&g).unwrap();
            let moved: Vec<C64> = r.amplitudes_in(&s.sites()).unwrap().into_iter().map(|a| a * scale).collect();
            let img = s.gauge_raw(&moved);
            let dev: f64 = img.iter().zip(&base).map(|(a, b)| (a - b).norm()).sum();
            assert!(dev < 1e-9);
            assert!(s.gauge_operator(&g).unwrap().is_identity());
        }
    }

    #[test]
    fn named_operator_images() {
        let spec = torus(vec![2, 2], 1);
        let s = SymmetrySector::new(&spec).unwrap();
        let top = spec.top_cells()[0];
        let bd = spec.complex.boundary(&Chain::single(top, 2)).unwrap();
        let x_bd = PauliOp::x_string(2, bd.support().map(|c| (c.0, 1)));

        assert_eq!(s.gauge_operator(&PauliOp::x(2, top.0, 1)).unwrap(), x_bd);
        let k = spec.stabilizers().into_iter().find(|st| st.anchor == top).unwrap().op;
        let expected = PauliOp::z(2, top.0, 1).mul(&x_bd);
        let got = s.gauge_operator(&k).unwrap();
        assert!(got.same_string(&expected));
        assert!(got.commutes_with(&expected));
        assert!(s.gauge_operator(&PauliOp::identity(2)).unwrap().is_identity());

        let low = spec.low_cells()[0];
        let cob = spec.complex.coboundary(&Chain::single(low, 2)).unwrap();
        let x_cob = PauliOp::x_string(2, cob.support().map(|c| (c.0, 1)));
        assert_eq!(s.gauge_operator(&PauliOp::x(2, low.0, 1)).unwrap(), x_cob);
    }

    #[test]
    fn asymmetric_inputs_rejected() {
        let spec = torus(vec![2, 2], 1);
        let s = SymmetrySector::new(&spec).unwrap();
        let mut zero = vec![C64::new(0.0, 0.0); 1 << 12];
        zero[0] = C64::new(1.0, 0.0);
        let r = Register::from_amplitudes(2, s.sites(), zero).unwrap();
        assert_eq!(s.gauge_state(&r).unwrap_err(), Error::NotSymmetric);
        let lone_z = PauliOp::z(2, spec.top_cells()[0].0, 1);
        assert!(matches!(s.gauge_operator(&lone_z), Err(Error::Invalid(_))));
    }

    #[test]
    fn qudits_unsupported() {
        let spec = ClusterSpec::new(CellComplex::torus(vec![2, 2], 3).unwrap(), 1).unwrap();
        assert!(matches!(SymmetrySector::new(&spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn brane_ends_anticommute() {
        for (ext, n) in [(vec![2, 1], 1), (vec![2, 1, 1], 2), (vec![3, 1, 1], 2), (vec![2, 1, 1], 1), (vec![2], 1), (vec![2, 1, 1], 3)] {
            let r = brane_projective_check(&open(ext.clone(), n)).unwrap();
            assert!(r.passed(), "{ext:?} n={n}: {r:?}");
            for e in &r.ends {
                assert_eq!(e.intersection, 1);
                assert!(!e.z_part.is_identity());
            }
        }
    }

    #[test]
    fn brane_rejects_periodic_first_direction() {
        assert!(brane_projective_check(&torus(vec![2, 2], 1)).is_err());
        assert!(brane_projective_check(&open(vec![1, 1], 1)).is_err());
    }

    #[test]
    fn disjoint_restrictions_commute() {
        let r = brane_projective_check(&open(vec![2, 1, 1], 2)).unwrap();
        let left = r.ends.iter().find(|e| e.end == End::Left).unwrap();
        let right = r.ends.iter().find(|e| e.end == End::Right).unwrap();
        assert!(left.z_part.commutes_with(&right.x_part));
        assert!(right.z_part.commutes_with(&left.x_part));
    }

    #[test]
    fn suite_passes() {
        let checks = run_suite(11).unwrap();
        assert!(checks.len() >= 10);
        for c in checks {
            assert!(c.passed, "{} {}", c.name, c.detail);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn isometric_and_covariant(seed in any::<u64>(), pick in 0usize..64) {
            let spec = torus(vec![2, 2], 1);
            let s = SymmetrySector::new(&spec).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let psi = random_symmetric(&s, &mut rng);
            let amps = psi.amplitudes_in(&s.sites()).unwrap();
            let out = s.gauge_amplitudes(&amps).unwrap();
            let norm: f64 = out.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-10);
            let stabs = spec.stabilizers();
            let a = stabs[pick % stabs.len()].op.mul(&stabs[(pick / 3) % stabs.len()].op);
            let gauged = s.gauge_state(&psi).unwrap();
            prop_assert!(operator_covariance(&s, &a, &psi, &gauged).unwrap() < 1e-10);
            for z in s.z_generators() {
                prop_assert!(near_one(&gauged, &z));
            }
        }
    }
}
