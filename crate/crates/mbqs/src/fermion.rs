//! Majorana chain on a fermion/qubit resource.
//!
//! Fermions live on the vertices of a layered square lattice and qubits on its
//! edges. The register stores modes in a fixed slot order and applies the
//! Jordan–Wigner sign on the fly. A measured mode is moved to the front of the
//! order before it is dropped, so the remaining state is the one with that
//! creation operator factored out on the left.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::protocol::Outcomes;
use crate::qstate::{sample_index, C64};

/// One Majorana operator: `γ_site` or, when `primed`, `γ'_site`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Majorana {
    pub site: u64,
    pub primed: bool,
}

impl Majorana {
    pub fn gamma(site: u64) -> Self {
        Majorana { site, primed: false }
    }

    pub fn gamma_prime(site: u64) -> Self {
        Majorana { site, primed: true }
    }
}

/// `i^phase` times an ordered product of distinct Majoranas, sites ascending
/// and `γ` before `γ'` on each site.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MajoranaWord {
    phase: u8,
    ops: Vec<Majorana>,
}

impl MajoranaWord {
    pub fn identity() -> Self {
        MajoranaWord { phase: 0, ops: Vec::new() }
    }

    /// Normal form of `i^phase · seq[0] · seq[1] · …`.
    pub fn from_sequence(phase: u8, seq: impl IntoIterator<Item = Majorana>) -> Self {
        let mut phase = phase % 4;
        let mut ops: Vec<Majorana> = Vec::new();
        for m in seq {
            // move m leftwards past every larger operator
            let greater = ops.iter().rev().take_while(|o| **o > m).count();
            if greater % 2 == 1 {
                phase = (phase + 2) % 4;
            }
            let at = ops.len() - greater;
            if at > 0 && ops[at - 1] == m {
                ops.remove(at - 1);
            } else {
                ops.insert(at, m);
            }
        }
        MajoranaWord { phase, ops }
    }

    pub fn single(m: Majorana) -> Self {
        MajoranaWord { phase: 0, ops: vec![m] }
    }

    /// `P = -iγγ'`.
    pub fn parity(site: u64) -> Self {
        Self::from_sequence(3, [Majorana::gamma(site), Majorana::gamma_prime(site)])
    }

    /// `S = iγ'_minus γ_plus`.
    pub fn hop(minus: u64, plus: u64) -> Self {
        Self::from_sequence(1, [Majorana::gamma_prime(minus), Majorana::gamma(plus)])
    }

    /// Product of `parity` over `sites`.
    pub fn total_parity(sites: impl IntoIterator<Item = u64>) -> Self {
        sites.into_iter().fold(Self::identity(), |w, s| w.mul(&Self::parity(s)))
    }

    pub fn phase(&self) -> C64 {
        [C64::new(1.0, 0.0), C64::new(0.0, 1.0), C64::new(-1.0, 0.0), C64::new(0.0, -1.0)][self.phase as usize]
    }

    pub fn ops(&self) -> &[Majorana] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn is_even(&self) -> bool {
        self.ops.len().is_multiple_of(2)
    }

    pub fn mul(&self, other: &MajoranaWord) -> MajoranaWord {
        let mut w = Self::from_sequence(0, self.ops.iter().chain(&other.ops).copied());
        w.phase = (w.phase + self.phase + other.phase) % 4;
        w
    }

    pub fn pow(&self, k: usize) -> MajoranaWord {
        (0..k).fold(Self::identity(), |w, _| w.mul(self))
    }

    pub fn inverse(&self) -> MajoranaWord {
        let k = self.ops.len();
        let reversal = if (k * k.saturating_sub(1) / 2) % 2 == 1 { 2 } else { 0 };
        MajoranaWord { phase: (4 - self.phase + reversal) % 4, ops: self.ops.clone() }
    }

    pub fn commutes_with(&self, other: &MajoranaWord) -> bool {
        let shared = self.ops.iter().filter(|m| other.ops.contains(m)).count();
        (self.ops.len() * other.ops.len() - shared).is_multiple_of(2)
    }

    /// Moves every operator on `from` to `to`, renormalizing the order.
    pub fn relabel(&self, from: u64, to: u64) -> MajoranaWord {
        let seq = self.ops.iter().map(|m| if m.site == from { Majorana { site: to, ..*m } } else { *m });
        Self::from_sequence(self.phase, seq)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot {
    label: u64,
    fermion: bool,
}

/// Dense state over fermion modes and qubits, one bit per slot.
#[derive(Clone, Debug)]
pub struct FermionRegister {
    slots: Vec<Slot>,
    amps: Vec<C64>,
    cap: usize,
}

impl Default for FermionRegister {
    fn default() -> Self {
        Self::new()
    }
}

impl FermionRegister {
    pub fn new() -> Self {
        FermionRegister { slots: Vec::new(), amps: vec![C64::new(1.0, 0.0)], cap: 20 }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Modes in slot order; amplitude index bit `k` is the occupation of `labels[k]`.
    pub fn from_modes(labels: &[u64], amps: Vec<C64>) -> Result<Self> {
        if amps.len() != 1 << labels.len() {
            return Err(Error::Invalid(format!("expected {} amplitudes, got {}", 1usize << labels.len(), amps.len())));
        }
        let mut r = FermionRegister::new();
        r.slots = labels.iter().map(|&label| Slot { label, fermion: true }).collect();
        r.amps = amps;
        let n = r.norm();
        if n < 1e-12 {
            return Err(Error::Invalid("zero state".into()));
        }
        r.scale(1.0 / n);
        Ok(r)
    }

    pub fn labels(&self) -> Vec<u64> {
        self.slots.iter().map(|s| s.label).collect()
    }

    pub fn modes(&self) -> Vec<u64> {
        self.slots.iter().filter(|s| s.fermion).map(|s| s.label).collect()
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    fn scale(&mut self, f: f64) {
        for a in &mut self.amps {
            *a *= f;
        }
    }

    fn position(&self, label: u64) -> Result<usize> {
        self.slots.iter().position(|s| s.label == label).ok_or(Error::DeadSite(label))
    }

    fn push(&mut self, slot: Slot, amp0: C64, amp1: C64) -> Result<()> {
        if self.slots.iter().any(|s| s.label == slot.label) {
            return Err(Error::DuplicateSite(slot.label));
        }
        if self.slots.len() + 1 > self.cap {
            return Err(Error::SiteCap(self.cap));
        }
        let mut out = Vec::with_capacity(self.amps.len() * 2);
        out.extend(self.amps.iter().map(|a| a * amp0));
        out.extend(self.amps.iter().map(|a| a * amp1));
        self.amps = out;
        self.slots.push(slot);
        Ok(())
    }

    /// Appends an empty mode.
    pub fn attach_mode(&mut self, label: u64) -> Result<()> {
        self.push(Slot { label, fermion: true }, C64::new(1.0, 0.0), C64::new(0.0, 0.0))
    }

    /// Appends a qubit in |0> or |+>.
    pub fn attach_qubit(&mut self, label: u64, plus: bool) -> Result<()> {
        let (a, b) = if plus { (0.5f64.sqrt(), 0.5f64.sqrt()) } else { (1.0, 0.0) };
        self.push(Slot { label, fermion: false }, C64::new(a, 0.0), C64::new(b, 0.0))
    }

    fn fermion_mask_below(&self, pos: usize) -> usize {
        self.slots[..pos].iter().enumerate().filter(|(_, s)| s.fermion).fold(0, |m, (i, _)| m | (1 << i))
    }

    fn apply_majorana(&mut self, m: Majorana) -> Result<()> {
        let pos = self.position(m.site)?;
        if !self.slots[pos].fermion {
            return Err(Error::Invalid(format!("slot {} is a qubit", m.site)));
        }
        let below = self.fermion_mask_below(pos);
        let bit = 1usize << pos;
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (idx, a) in self.amps.iter().enumerate() {
            let sign = if (idx & below).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
            let occupied = idx & bit != 0;
            let coef = match (m.primed, occupied) {
                (false, _) => C64::new(sign, 0.0),
                (true, false) => C64::new(0.0, sign),
                (true, true) => C64::new(0.0, -sign),
            };
            out[idx ^ bit] = coef * a;
        }
        self.amps = out;
        Ok(())
    }

    pub fn apply_word(&mut self, w: &MajoranaWord) -> Result<()> {
        for m in w.ops.iter().rev() {
            self.apply_majorana(*m)?;
        }
        let ph = w.phase();
        for a in &mut self.amps {
            *a *= ph;
        }
        Ok(())
    }

    /// `e^{-iθA}` for a Hermitian word with `A² = 1`.
    pub fn apply_rotation(&mut self, w: &MajoranaWord, theta: f64) -> Result<()> {
        let mut moved = self.clone();
        moved.apply_word(w)?;
        let (c, s) = (theta.cos(), theta.sin());
        for (a, b) in self.amps.iter_mut().zip(&moved.amps) {
            *a = *a * c - C64::new(0.0, s) * b;
        }
        Ok(())
    }

    /// Applies `w` on the branch where qubit `control` is 1.
    pub fn apply_controlled(&mut self, control: u64, w: &MajoranaWord) -> Result<()> {
        let pos = self.position(control)?;
        if self.slots[pos].fermion {
            return Err(Error::Invalid(format!("control {control} is a mode")));
        }
        let mut moved = self.clone();
        moved.apply_word(w)?;
        for (idx, a) in self.amps.iter_mut().enumerate() {
            if idx >> pos & 1 == 1 {
                *a = moved.amps[idx];
            }
        }
        Ok(())
    }

    pub fn apply_x(&mut self, qubit: u64) -> Result<()> {
        let pos = self.position(qubit)?;
        let bit = 1 << pos;
        for idx in 0..self.amps.len() {
            if idx & bit == 0 {
                self.amps.swap(idx, idx | bit);
            }
        }
        Ok(())
    }

    pub fn apply_z(&mut self, qubit: u64) -> Result<()> {
        let pos = self.position(qubit)?;
        for (idx, a) in self.amps.iter_mut().enumerate() {
            if idx >> pos & 1 == 1 {
                *a = -*a;
            }
        }
        Ok(())
    }

    /// Drops slot `pos`, keeping the component `value` scaled by `weight(idx)`.
    fn drop_slot(&self, pos: usize, keep: impl Fn(usize) -> C64) -> FermionRegister {
        let low = (1usize << pos) - 1;
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len() / 2];
        for (idx, a) in self.amps.iter().enumerate() {
            let w = keep(idx);
            if w != C64::new(0.0, 0.0) {
                out[(idx & low) | ((idx >> (pos + 1)) << pos)] += w * a;
            }
        }
        let mut slots = self.slots.clone();
        slots.remove(pos);
        FermionRegister { slots, amps: out, cap: self.cap }
    }

    fn qubit_branches(&self, label: u64, basis: &[[C64; 2]; 2]) -> Result<Vec<FermionRegister>> {
        let pos = self.position(label)?;
        if self.slots[pos].fermion {
            return Err(Error::Invalid(format!("slot {label} is a mode")));
        }
        Ok(basis.iter().map(|v| self.drop_slot(pos, |idx| v[idx >> pos & 1].conj())).collect())
    }

    fn mode_branches(&self, label: u64) -> Result<Vec<FermionRegister>> {
        let pos = self.position(label)?;
        if !self.slots[pos].fermion {
            return Err(Error::Invalid(format!("slot {label} is a qubit")));
        }
        let below = self.fermion_mask_below(pos);
        Ok((0..2)
            .map(|t| {
                self.drop_slot(pos, |idx| {
                    if idx >> pos & 1 != t {
                        C64::new(0.0, 0.0)
                    } else if t == 1 && (idx & below).count_ones() % 2 == 1 {
                        C64::new(-1.0, 0.0)
                    } else {
                        C64::new(1.0, 0.0)
                    }
                })
            })
            .collect())
    }

    fn collapse(&mut self, branches: Vec<FermionRegister>, source: &mut Outcomes, label: u64) -> Result<(usize, f64)> {
        let probs: Vec<f64> = branches.iter().map(|b| b.norm().powi(2)).collect();
        let k = draw(source, &probs, label)?;
        let mut post = branches.into_iter().nth(k).expect("branch");
        post.scale(1.0 / probs[k].sqrt());
        *self = post;
        Ok((k, probs[k]))
    }

    /// Measures a qubit against `basis` and removes it.
    pub fn measure_qubit(&mut self, label: u64, basis: &[[C64; 2]; 2], source: &mut Outcomes) -> Result<(usize, f64)> {
        let b = self.qubit_branches(label, basis)?;
        self.collapse(b, source, label)
    }

    /// Measures the occupation of a mode and removes it.
    pub fn measure_mode(&mut self, label: u64, source: &mut Outcomes) -> Result<(usize, f64)> {
        let b = self.mode_branches(label)?;
        self.collapse(b, source, label)
    }

    pub fn qubit_probabilities(&self, label: u64, basis: &[[C64; 2]; 2]) -> Result<Vec<f64>> {
        Ok(self.qubit_branches(label, basis)?.iter().map(|b| b.norm().powi(2)).collect())
    }

    pub fn relabel(&mut self, from: u64, to: u64) -> Result<()> {
        if self.slots.iter().any(|s| s.label == to) {
            return Err(Error::DuplicateSite(to));
        }
        let pos = self.position(from)?;
        self.slots[pos].label = to;
        Ok(())
    }

    pub fn expectation(&self, w: &MajoranaWord) -> Result<C64> {
        let mut m = self.clone();
        m.apply_word(w)?;
        Ok(self.amps.iter().zip(&m.amps).map(|(a, b)| a.conj() * b).sum())
    }

    /// Amplitudes with the slots permuted into `order`, including the
    /// Jordan–Wigner sign of the reordering.
    pub fn amplitudes_in(&self, order: &[u64]) -> Result<Vec<C64>> {
        if order.len() != self.slots.len() {
            return Err(Error::SiteMismatch);
        }
        let perm: Vec<usize> = order.iter().map(|&l| self.position(l)).collect::<Result<_>>()?;
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (idx, a) in self.amps.iter().enumerate() {
            let mut new = 0usize;
            let mut swaps = 0u32;
            for (k, &p) in perm.iter().enumerate() {
                if idx >> p & 1 == 1 {
                    new |= 1 << k;
                    if self.slots[p].fermion {
                        // occupied modes placed earlier in the new order but later in the old one
                        swaps += perm[..k]
                            .iter()
                            .filter(|&&q| q > p && self.slots[q].fermion && idx >> q & 1 == 1)
                            .count() as u32;
                    }
                }
            }
            out[new] = if swaps % 2 == 1 { -*a } else { *a };
        }
        Ok(out)
    }
}

pub(crate) fn draw(source: &mut Outcomes, probs: &[f64], label: u64) -> Result<usize> {
    let k = match source {
        Outcomes::Seeded(rng) => sample_index(probs, rng),
        Outcomes::Scripted(script, pos) => {
            let k = *script.get(*pos).ok_or(Error::MissingOutcome(label))?;
            *pos += 1;
            k
        }
    };
    match probs.get(k) {
        Some(&p) if p > 1e-24 => Ok(k),
        p => Err(Error::ImpossibleBranch(p.copied().unwrap_or(0.0))),
    }
}

/// `|<a|b>|²` after aligning `b` to the slot order of `a`.
pub fn fermion_fidelity(a: &FermionRegister, b: &FermionRegister) -> Result<f64> {
    let bb = b.amplitudes_in(&a.labels())?;
    let ip: C64 = a.amps.iter().zip(&bb).map(|(x, y)| x.conj() * y).sum();
    Ok(ip.norm_sqr() / (a.norm().powi(2) * b.norm().powi(2)))
}

/// `{ e^{iξX}|s> }`.
pub fn hop_basis(xi: f64) -> [[C64; 2]; 2] {
    let (c, s) = (C64::new(xi.cos(), 0.0), C64::new(0.0, xi.sin()));
    [[c, s], [s, c]]
}

/// `{ e^{iξZ}|+>, e^{iξZ}|-> }`.
pub fn rise_basis(xi: f64) -> [[C64; 2]; 2] {
    let r = 0.5f64.sqrt();
    let (p, m) = (C64::from_polar(r, xi), C64::from_polar(r, -xi));
    [[p, m], [p, -m]]
}

pub fn x_basis() -> [[C64; 2]; 2] {
    rise_basis(0.0)
}

/// Attaches a |+> qubit, entangles it by controlled-`S` and measures it in
/// the hop basis. The modes then carry `S^s e^{-iξS}`.
pub fn measure_hop(
    reg: &mut FermionRegister,
    minus: u64,
    plus: u64,
    edge: u64,
    xi: f64,
    source: &mut Outcomes,
) -> Result<(usize, f64)> {
    reg.attach_qubit(edge, true)?;
    reg.apply_controlled(edge, &MajoranaWord::hop(minus, plus))?;
    reg.measure_qubit(edge, &hop_basis(xi), source)
}

/// Outcomes of a fermion teleport.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeleportOutcome {
    pub parity: usize,
    pub edge: usize,
}

/// Moves the mode `source_mode` to a fresh `target` through qubit `edge`.
/// The parity outcome `t` is read first and passed to `angle`. The target
/// then carries `P^{s+1} γ^t e^{-i(-1)^t ξ P}` applied to the input.
pub fn teleport_fermion(
    reg: &mut FermionRegister,
    source_mode: u64,
    target: u64,
    edge: u64,
    angle: impl FnOnce(usize) -> f64,
    source: &mut Outcomes,
) -> Result<(TeleportOutcome, f64)> {
    reg.attach_mode(target)?;
    reg.attach_qubit(edge, true)?;
    reg.apply_controlled(edge, &MajoranaWord::hop(source_mode, target))?;
    let (t, pt) = reg.measure_mode(source_mode, source)?;
    let (s, ps) = reg.measure_qubit(edge, &rise_basis(angle(t)), source)?;
    Ok((TeleportOutcome { parity: t, edge: s }, pt * ps))
}

/// Byproduct left by [`teleport_fermion`] on `target`.
pub fn teleport_byproduct(target: u64, out: TeleportOutcome) -> MajoranaWord {
    MajoranaWord::parity(target)
        .pow(out.edge + 1)
        .mul(&MajoranaWord::single(Majorana::gamma(target)).pow(out.parity))
}

/// Edge of the layered lattice. Hops run along the chain on one layer,
/// rises join a vertex to the one above it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum FermionEdge {
    Hop { vertex: usize, layer: usize },
    Rise { vertex: usize, layer: usize },
}

/// Chain of `length` vertices stacked in `layers` layers. Hops exist on
/// layers `first_hop_layer..layers`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FermionLattice {
    pub length: usize,
    pub layers: usize,
    pub periodic: bool,
    pub first_hop_layer: usize,
}

/// Order of the controlled-`S` gates in the entangler.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntanglerOrder {
    /// Layer by layer from the chain upward; a layer's rises follow its hops.
    Layered,
    /// Every hop first, then every rise.
    HopsFirst,
}

pub fn mode_label(vertex: usize, layer: usize) -> u64 {
    ((layer as u64) << 20) | vertex as u64
}

pub fn edge_label(edge: FermionEdge) -> u64 {
    match edge {
        FermionEdge::Hop { vertex, layer } => (1 << 40) | mode_label(vertex, layer),
        FermionEdge::Rise { vertex, layer } => (2 << 40) | mode_label(vertex, layer),
    }
}

impl FermionLattice {
    pub fn new(length: usize, layers: usize, periodic: bool) -> Result<Self> {
        if layers == 0 || length == 0 || (periodic && length < 2) {
            return Err(Error::Invalid(format!("lattice {length}x{layers} periodic={periodic}")));
        }
        Ok(FermionLattice { length, layers, periodic, first_hop_layer: 0 })
    }

    /// Resource for `steps` Kitaev steps: no hops on the input layer.
    pub fn kitaev(length: usize, steps: usize, periodic: bool) -> Result<Self> {
        let mut l = Self::new(length, steps + 1, periodic)?;
        l.first_hop_layer = 1;
        Ok(l)
    }

    pub fn chain_edges(&self) -> usize {
        if self.periodic { self.length } else { self.length - 1 }
    }

    pub fn modes(&self) -> Vec<u64> {
        (0..self.layers).flat_map(|j| (0..self.length).map(move |v| mode_label(v, j))).collect()
    }

    /// `(v_-, v_+)` with `v_+ - v_-` the boundary of the edge.
    pub fn ends(&self, edge: FermionEdge) -> (u64, u64) {
        match edge {
            FermionEdge::Hop { vertex, layer } => (mode_label(vertex, layer), mode_label((vertex + 1) % self.length, layer)),
            FermionEdge::Rise { vertex, layer } => (mode_label(vertex, layer), mode_label(vertex, layer + 1)),
        }
    }

    pub fn hops(&self, layer: usize) -> Vec<FermionEdge> {
        if layer < self.first_hop_layer {
            return Vec::new();
        }
        (0..self.chain_edges()).map(|vertex| FermionEdge::Hop { vertex, layer }).collect()
    }

    pub fn rises(&self, layer: usize) -> Vec<FermionEdge> {
        if layer + 1 >= self.layers {
            return Vec::new();
        }
        (0..self.length).map(|vertex| FermionEdge::Rise { vertex, layer }).collect()
    }

    /// Edges in the order their gates are applied.
    pub fn gate_order(&self, order: EntanglerOrder) -> Vec<FermionEdge> {
        match order {
            EntanglerOrder::Layered => (0..self.layers).flat_map(|j| [self.hops(j), self.rises(j)].concat()).collect(),
            EntanglerOrder::HopsFirst => {
                let hops = (0..self.layers).flat_map(|j| self.hops(j));
                hops.chain((0..self.layers).flat_map(|j| self.rises(j))).collect()
            }
        }
    }

    pub fn edge_word(&self, edge: FermionEdge) -> MajoranaWord {
        let (m, p) = self.ends(edge);
        MajoranaWord::hop(m, p)
    }
}

/// Applies every controlled-`S` gate of the lattice in `order`.
pub fn apply_entangler(reg: &mut FermionRegister, lattice: &FermionLattice, order: EntanglerOrder) -> Result<()> {
    for e in lattice.gate_order(order) {
        reg.apply_controlled(edge_label(e), &lattice.edge_word(e))?;
    }
    Ok(())
}

/// Entangled resource with `input` on the layer-0 modes (vacuum if `None`),
/// every other mode empty and every qubit in |+>.
pub fn build_fermionic_cluster(
    lattice: &FermionLattice,
    order: EntanglerOrder,
    input: Option<&FermionRegister>,
) -> Result<FermionRegister> {
    let mut reg = match input {
        Some(r) => r.clone().with_cap(usize::MAX),
        None => FermionRegister::new().with_cap(usize::MAX),
    };
    for v in 0..lattice.length {
        let l = mode_label(v, 0);
        if input.is_none() {
            reg.attach_mode(l)?;
        } else if !reg.modes().contains(&l) {
            return Err(Error::DeadSite(l));
        }
    }
    for m in lattice.modes().into_iter().skip(lattice.length) {
        reg.attach_mode(m)?;
    }
    for e in lattice.gate_order(order) {
        reg.attach_qubit(edge_label(e), true)?;
    }
    if reg.slots.len() > 20 {
        return Err(Error::DenseCap { qudits: reg.slots.len(), cap: 20 });
    }
    apply_entangler(&mut reg, lattice, order)?;
    Ok(reg)
}

/// Stabilizer of the resource: Majorana word times qubit Paulis.
#[derive(Clone, Debug)]
pub struct MixedStabilizer {
    pub word: MajoranaWord,
    pub x: Vec<u64>,
    pub z: Vec<u64>,
}

impl MixedStabilizer {
    pub fn apply(&self, reg: &mut FermionRegister) -> Result<()> {
        reg.apply_word(&self.word)?;
        for &q in &self.z {
            reg.apply_z(q)?;
        }
        for &q in &self.x {
            reg.apply_x(q)?;
        }
        Ok(())
    }
}

/// `P_v Z(edges at v)` for each vertex and `X_e S_e Z(later anticommuting
/// edges)` for each edge.
pub fn cluster_stabilizers(lattice: &FermionLattice, order: EntanglerOrder) -> Vec<MixedStabilizer> {
    let edges = lattice.gate_order(order);
    let mut out = Vec::new();
    for m in lattice.modes() {
        let p = MajoranaWord::parity(m);
        let z = edges.iter().filter(|e| !lattice.edge_word(**e).commutes_with(&p)).map(|e| edge_label(*e)).collect();
        out.push(MixedStabilizer { word: p, x: Vec::new(), z });
    }
    for (i, e) in edges.iter().enumerate() {
        let s = lattice.edge_word(*e);
        let z = edges[i + 1..].iter().filter(|f| !lattice.edge_word(**f).commutes_with(&s)).map(|f| edge_label(*f)).collect();
        out.push(MixedStabilizer { word: s, x: vec![edge_label(*e)], z });
    }
    out
}

/// Largest `|<K> - 1|` over the resource stabilizers.
pub fn stabilizer_deviation(reg: &FermionRegister, stabilizers: &[MixedStabilizer]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in stabilizers {
        let mut moved = reg.clone();
        k.apply(&mut moved)?;
        let ev: C64 = reg.amps.iter().zip(&moved.amps).map(|(a, b)| a.conj() * b).sum();
        worst = worst.max((ev - 1.0).norm());
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub enum FermionInit {
    Vacuum,
    Occupations(Vec<bool>),
    /// Bit `v` of the index is the occupation of chain vertex `v`.
    Amplitudes(Vec<C64>),
}

#[derive(Clone, Debug)]
pub struct KitaevPlan {
    pub length: usize,
    pub periodic: bool,
    pub w: f64,
    pub mu: f64,
    pub dt: f64,
    pub steps: usize,
    pub init: FermionInit,
}

impl KitaevPlan {
    pub fn new(length: usize, w: f64, mu: f64, dt: f64, steps: usize) -> Self {
        KitaevPlan { length, periodic: true, w, mu, dt, steps, init: FermionInit::Vacuum }
    }

    pub fn with_init(mut self, init: FermionInit) -> Self {
        self.init = init;
        self
    }

    pub fn open(mut self) -> Self {
        self.periodic = false;
        self
    }

    pub fn lattice(&self) -> Result<FermionLattice> {
        FermionLattice::kitaev(self.length, self.steps, self.periodic)
    }

    /// Input state on the given mode labels.
    pub fn input_on(&self, labels: &[u64]) -> Result<FermionRegister> {
        let dim = 1usize << self.length;
        let amps = match &self.init {
            FermionInit::Vacuum => {
                let mut a = vec![C64::new(0.0, 0.0); dim];
                a[0] = C64::new(1.0, 0.0);
                a
            }
            FermionInit::Occupations(bits) => {
                if bits.len() != self.length {
                    return Err(Error::Invalid(format!("{} occupations for {} sites", bits.len(), self.length)));
                }
                let mut a = vec![C64::new(0.0, 0.0); dim];
                a[bits.iter().enumerate().fold(0, |i, (k, &b)| i | (usize::from(b) << k))] = C64::new(1.0, 0.0);
                a
            }
            FermionInit::Amplitudes(a) => a.clone(),
        };
        FermionRegister::from_modes(labels, amps)
    }

    /// Trotter product with all parity factors of a step before its hops.
    pub fn oracle_state(&self) -> Result<FermionRegister> {
        let chain: Vec<u64> = (0..self.length as u64).collect();
        let lattice = FermionLattice::new(self.length, 1, self.periodic)?;
        let mut reg = self.input_on(&chain)?;
        for _ in 0..self.steps {
            for &v in &chain {
                reg.apply_rotation(&MajoranaWord::parity(v), 0.5 * self.mu * self.dt)?;
            }
            for e in lattice.hops(0) {
                reg.apply_rotation(&lattice.edge_word(e), self.w * self.dt)?;
            }
        }
        Ok(reg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KitaevMeasurement {
    Hop,
    Parity,
    Rise,
}

#[derive(Clone, Debug, Serialize)]
pub struct KitaevEntry {
    pub label: u64,
    pub step: usize,
    pub kind: KitaevMeasurement,
    pub outcome: usize,
    pub angle: f64,
    pub probability: f64,
}

/// How the resource is prepared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preparation {
    /// Gates applied just before the measurements that need them.
    Lazy,
    /// Whole resource entangled up front in the given order.
    Full(EntanglerOrder),
}

#[derive(Clone, Debug)]
pub struct KitaevRun {
    /// Frame-removed state on chain labels `0..length`.
    pub state: FermionRegister,
    /// State before frame removal, same labels.
    pub physical: FermionRegister,
    pub frame: MajoranaWord,
    pub record: Vec<KitaevEntry>,
    /// Largest change of the frame-removed total parity over the run.
    pub parity_drift: f64,
}

/// Runs the measurement pattern; `frame` maps ideal to physical states.
pub fn run_kitaev(plan: &KitaevPlan, mut source: Outcomes, prep: Preparation) -> Result<KitaevRun> {
    let lattice = plan.lattice()?;
    let layer0: Vec<u64> = (0..plan.length).map(|v| mode_label(v, 0)).collect();
    let mut reg = plan.input_on(&layer0)?;
    if let Preparation::Full(order) = prep {
        reg = build_fermionic_cluster(&lattice, order, Some(&reg))?;
    }
    let lazy = prep == Preparation::Lazy;
    let mut frame = MajoranaWord::identity();
    let mut record = Vec::new();
    let parity0 = reg.expectation(&MajoranaWord::total_parity(layer0.iter().copied()))?.re;
    let mut drift: f64 = 0.0;

    for j in 0..plan.steps {
        for rise in lattice.rises(j) {
            let (src, dst) = lattice.ends(rise);
            let q = edge_label(rise);
            if lazy {
                reg.attach_mode(dst)?;
                reg.attach_qubit(q, true)?;
                reg.apply_controlled(q, &MajoranaWord::hop(src, dst))?;
            }
            let (t, pt) = reg.measure_mode(src, &mut source)?;
            record.push(KitaevEntry { label: src, step: j, kind: KitaevMeasurement::Parity, outcome: t, angle: 0.0, probability: pt });
            frame = frame.relabel(src, dst);
            let sigma = if frame.commutes_with(&MajoranaWord::parity(dst)) { 1.0 } else { -1.0 };
            let flip = if t == 1 { -1.0 } else { 1.0 };
            let xi = flip * sigma * 0.5 * plan.mu * plan.dt;
            let (s, ps) = reg.measure_qubit(q, &rise_basis(xi), &mut source)?;
            record.push(KitaevEntry { label: q, step: j, kind: KitaevMeasurement::Rise, outcome: s, angle: xi, probability: ps });
            frame = teleport_byproduct(dst, TeleportOutcome { parity: t, edge: s }).mul(&frame);
        }
        for hop in lattice.hops(j + 1) {
            let word = lattice.edge_word(hop);
            let q = edge_label(hop);
            if lazy {
                reg.attach_qubit(q, true)?;
                reg.apply_controlled(q, &word)?;
            }
            let sigma = if frame.commutes_with(&word) { 1.0 } else { -1.0 };
            let xi = sigma * plan.w * plan.dt;
            let (s, p) = reg.measure_qubit(q, &hop_basis(xi), &mut source)?;
            record.push(KitaevEntry { label: q, step: j, kind: KitaevMeasurement::Hop, outcome: s, angle: xi, probability: p });
            frame = word.pow(s).mul(&frame);
        }
        let layer: Vec<u64> = (0..plan.length).map(|v| mode_label(v, j + 1)).collect();
        if lazy || j + 1 == plan.steps {
            let mut ideal = reg.clone();
            ideal.apply_word(&frame.inverse())?;
            let parity = ideal.expectation(&MajoranaWord::total_parity(layer))?.re;
            drift = drift.max((parity - parity0).abs());
        }
    }

    let last = lattice.layers - 1;
    for v in 0..plan.length {
        let from = mode_label(v, last);
        reg.relabel(from, v as u64)?;
        frame = frame.relabel(from, v as u64);
    }
    let mut state = reg.clone();
    state.apply_word(&frame.inverse())?;
    Ok(KitaevRun { state, physical: reg, frame, record, parity_drift: drift })
}

#[derive(Clone, Debug, Serialize)]
pub struct KitaevReport {
    pub length: usize,
    pub w: f64,
    pub mu: f64,
    pub dt: f64,
    pub steps: usize,
    pub fidelity: f64,
    pub parity_drift: f64,
}

/// Worst oracle fidelity and parity drift over seeded lazy runs.
pub fn kitaev_report(plan: &KitaevPlan, trials: u64, seed: u64) -> Result<KitaevReport> {
    use rayon::prelude::*;
    let oracle = plan.oracle_state()?;
    let results: Vec<(f64, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let run = run_kitaev(plan, Outcomes::seeded(crate::protocol::trial_seed(seed, t)), Preparation::Lazy)?;
            Ok((fermion_fidelity(&oracle, &run.state)?, run.parity_drift))
        })
        .collect::<Result<_>>()?;
    let fidelity = results.iter().map(|r| r.0).fold(1.0, f64::min);
    let parity_drift = results.iter().map(|r| r.1).fold(0.0, f64::max);
    Ok(KitaevReport { length: plan.length, w: plan.w, mu: plan.mu, dt: plan.dt, steps: plan.steps, fidelity, parity_drift })
}

/// Reads `S` on the hop `minus → plus` by measuring `X` on a fresh
/// controlled-`S` qubit. Returns the outcome distribution of the raw `X`
/// bit and the same distribution with the frame's sign folded in.
pub fn hop_readout(physical: &FermionRegister, frame: &MajoranaWord, minus: u64, plus: u64) -> Result<([f64; 2], [f64; 2])> {
    let mut reg = physical.clone();
    let q = u64::MAX;
    reg.attach_qubit(q, true)?;
    reg.apply_controlled(q, &MajoranaWord::hop(minus, plus))?;
    let p = reg.qubit_probabilities(q, &x_basis())?;
    let raw = [p[0], p[1]];
    let corrected = if frame.commutes_with(&MajoranaWord::hop(minus, plus)) { raw } else { [raw[1], raw[0]] };
    Ok((raw, corrected))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReadoutComparison {
    pub samples: u64,
    /// Mean of `(-1)^bit` over corrected readout samples.
    pub readout_mean: f64,
    /// `<S>` on the frame-removed state.
    pub direct_mean: f64,
    pub std_error: f64,
}

/// Samples the corrected readout and compares it with `<S>` on the ideal state.
pub fn compare_hop_readout(run: &KitaevRun, minus: u64, plus: u64, samples: u64, seed: u64) -> Result<ReadoutComparison> {
    use rand::Rng;
    let (_, corrected) = hop_readout(&run.physical, &run.frame, minus, plus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plus_count = (0..samples).filter(|_| rng.gen::<f64>() < corrected[0]).count() as f64;
    let n = samples as f64;
    let readout_mean = (2.0 * plus_count - n) / n;
    let direct_mean = run.state.expectation(&MajoranaWord::hop(minus, plus))?.re;
    let std_error = ((1.0 - direct_mean * direct_mean).max(0.0) / n).sqrt();
    Ok(ReadoutComparison { samples, readout_mean, direct_mean, std_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::Rng;

    fn random_modes(rng: &mut ChaCha8Rng, labels: &[u64]) -> FermionRegister {
        let amps = (0..1 << labels.len()).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        FermionRegister::from_modes(labels, amps).unwrap()
    }

    /// `(1 + S)ψ` normalized for a random ψ on modes 0, 1.
    fn hop_eigenstate(seed: u64) -> FermionRegister {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = random_modes(&mut rng, &[0, 1]);
        let mut moved = r.clone();
        moved.apply_word(&MajoranaWord::hop(0, 1)).unwrap();
        let amps = r.amplitudes().iter().zip(moved.amplitudes()).map(|(a, b)| a + b).collect();
        FermionRegister::from_modes(&[0, 1], amps).unwrap()
    }

    fn word_from_bits(bits: u8, phase: u8) -> MajoranaWord {
        let seq = (0..6u64).filter(|k| bits >> k & 1 == 1).map(|k| Majorana { site: k / 2, primed: k % 2 == 1 });
        MajoranaWord::from_sequence(phase, seq.rev())
    }

    fn max_diff(a: &[C64], b: &[C64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn single_mode_algebra() {
        // P, γ, γ' act like Z, X, Y on one mode
        let mut r = FermionRegister::from_modes(&[0], vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)]).unwrap();
        r.apply_word(&MajoranaWord::single(Majorana::gamma(0))).unwrap();
        assert_eq!(r.amplitudes()[1], C64::new(1.0, 0.0));
        assert!((r.expectation(&MajoranaWord::parity(0)).unwrap() + 1.0).norm() < 1e-15);
        let g = MajoranaWord::single(Majorana::gamma(0));
        let gp = MajoranaWord::single(Majorana::gamma_prime(0));
        assert_eq!(g.mul(&gp), MajoranaWord::parity(0).mul(&MajoranaWord::from_sequence(1, [])));
        assert!(!g.commutes_with(&gp));
        assert!(MajoranaWord::parity(0).mul(&MajoranaWord::parity(0)).is_empty());
    }

    #[test]
    fn distinct_modes_anticommute() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_modes(&mut rng, &[0, 1, 2]);
        let mut a = r.clone();
        a.apply_word(&MajoranaWord::single(Majorana::gamma(2))).unwrap();
        a.apply_word(&MajoranaWord::single(Majorana::gamma_prime(0))).unwrap();
        let mut b = r.clone();
        b.apply_word(&MajoranaWord::single(Majorana::gamma_prime(0))).unwrap();
        b.apply_word(&MajoranaWord::single(Majorana::gamma(2))).unwrap();
        let neg: Vec<C64> = b.amplitudes().iter().map(|z| -z).collect();
        assert!(max_diff(a.amplitudes(), &neg) < 1e-14);
    }

    #[test]
    fn reordering_preserves_operator_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_modes(&mut rng, &[0, 1, 2]);
        let w = MajoranaWord::hop(2, 0);
        let mut a = r.clone();
        a.apply_word(&w).unwrap();
        let mut b = FermionRegister::from_modes(&[2, 0, 1], r.amplitudes_in(&[2, 0, 1]).unwrap()).unwrap();
        b.apply_word(&w).unwrap();
        assert!(max_diff(a.amplitudes(), &b.amplitudes_in(&[0, 1, 2]).unwrap()) < 1e-14);
    }

    #[test]
    fn hop_measurement_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for xi in [0.0, 0.3, -1.1] {
            for s in 0..2 {
                let r = random_modes(&mut rng, &[0, 1, 2]);
                let mut m = r.clone();
                let (k, p) = measure_hop(&mut m, 0, 2, 99, xi, &mut Outcomes::scripted(vec![s])).unwrap();
                assert_eq!(k, s);
                assert!((p - 0.5).abs() < 1e-12);
                let mut want = r.clone();
                want.apply_rotation(&MajoranaWord::hop(0, 2), xi).unwrap();
                want.apply_word(&MajoranaWord::hop(0, 2).pow(s)).unwrap();
                assert!(max_diff(m.amplitudes(), want.amplitudes()) < 1e-12);
            }
        }
    }

    #[test]
    fn hop_on_eigenstate_is_a_phase() {
        let base = hop_eigenstate(12);
        let ev = base.expectation(&MajoranaWord::hop(0, 1)).unwrap().re;
        assert!((ev.abs() - 1.0).abs() < 1e-12);
        let s = usize::from(ev < 0.0);
        let mut m = base.clone();
        measure_hop(&mut m, 0, 1, 9, 0.4, &mut Outcomes::scripted(vec![s])).unwrap();
        assert!((fermion_fidelity(&m, &base).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teleport_factor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for xi in [0.0, 0.25] {
            for t in 0..2 {
                for s in 0..2 {
                    // env mode 5 on either side of the source
                    for labels in [[5u64, 1], [1, 5]] {
                        let r = random_modes(&mut rng, &labels);
                        if r.amplitudes_in(&[1, 5]).unwrap()[0..].iter().enumerate().all(|(i, z)| i & 1 != t || z.norm() < 1e-9) {
                            continue;
                        }
                        let mut m = r.clone();
                        let (out, _) = teleport_fermion(&mut m, 1, 7, 8, |_| xi, &mut Outcomes::scripted(vec![t, s])).unwrap();
                        let mut want = r.clone();
                        want.relabel(1, 7).unwrap();
                        let rot = if t == 1 { -xi } else { xi };
                        want.apply_rotation(&MajoranaWord::parity(7), rot).unwrap();
                        want.apply_word(&teleport_byproduct(7, out)).unwrap();
                        let f = fermion_fidelity(&want, &m).unwrap();
                        assert!((f - 1.0).abs() < 1e-12, "xi {xi} t {t} s {s} {labels:?}: {f}");
                        let ip: C64 = want.amplitudes().iter().zip(m.amplitudes_in(&want.labels()).unwrap()).map(|(a, b)| a.conj() * b).sum();
                        assert!((ip - 1.0).norm() < 1e-12, "phase {ip}");
                    }
                }
            }
        }
    }

    #[test]
    fn teleport_outcomes_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_modes(&mut rng, &[0, 1]);
        for t in 0..2 {
            for s in 0..2 {
                let mut m = r.clone();
                let (_, p) = teleport_fermion(&mut m, 1, 7, 8, |_| 0.3, &mut Outcomes::scripted(vec![t, s])).unwrap();
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn toy_cluster_stabilizer() {
        let lat = FermionLattice::new(2, 1, false).unwrap();
        let stabs = cluster_stabilizers(&lat, EntanglerOrder::Layered);
        assert_eq!(stabs.len(), 3);
        let edge = stabs.last().unwrap();
        assert!(edge.z.is_empty());
        assert_eq!(edge.word, MajoranaWord::hop(mode_label(0, 0), mode_label(1, 0)));
        // U X_e = X_e S_e U on random inputs
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..3 {
            let mut r = random_modes(&mut rng, &[mode_label(0, 0), mode_label(1, 0)]);
            r.attach_qubit(edge_label(FermionEdge::Hop { vertex: 0, layer: 0 }), true).unwrap();
            let q = edge_label(FermionEdge::Hop { vertex: 0, layer: 0 });
            r.apply_word(&MajoranaWord::single(Majorana::gamma(mode_label(1, 0)))).unwrap();
            let mut a = r.clone();
            a.apply_x(q).unwrap();
            apply_entangler(&mut a, &lat, EntanglerOrder::Layered).unwrap();
            let mut b = r.clone();
            apply_entangler(&mut b, &lat, EntanglerOrder::Layered).unwrap();
            edge.apply(&mut b).unwrap();
            assert!(max_diff(a.amplitudes(), b.amplitudes()) < 1e-12);
        }
        let c = build_fermionic_cluster(&lat, EntanglerOrder::Layered, None).unwrap();
        assert!(stabilizer_deviation(&c, &stabs).unwrap() < 1e-12);
    }

    #[test]
    fn stabilizer_shapes() {
        let lat = FermionLattice::new(3, 3, true).unwrap();
        let stabs = cluster_stabilizers(&lat, EntanglerOrder::Layered);
        let find = |e: FermionEdge| stabs.iter().find(|k| k.x == vec![edge_label(e)]).unwrap();
        // rise: Z on the hop of the upper layer ending at v_+
        let k = find(FermionEdge::Rise { vertex: 1, layer: 0 });
        assert_eq!(k.z, vec![edge_label(FermionEdge::Hop { vertex: 0, layer: 1 })]);
        // hop: Z on the rise leaving v_-
        let k = find(FermionEdge::Hop { vertex: 1, layer: 1 });
        assert_eq!(k.z, vec![edge_label(FermionEdge::Rise { vertex: 1, layer: 1 })]);
        // vertex: Z on every incident edge
        let p = stabs.iter().find(|k| k.word == MajoranaWord::parity(mode_label(0, 1))).unwrap();
        assert_eq!(p.z.len(), 4);
    }

    #[test]
    fn cluster_stabilized_in_both_orders() {
        let lat = FermionLattice::new(2, 3, true).unwrap();
        for order in [EntanglerOrder::Layered, EntanglerOrder::HopsFirst] {
            let c = build_fermionic_cluster(&lat, order, None).unwrap();
            assert!(stabilizer_deviation(&c, &cluster_stabilizers(&lat, order)).unwrap() < 1e-12);
        }
    }

    #[test]
    fn conjugation_identities_on_random_inputs() {
        let lat = FermionLattice::new(2, 2, true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let modes = lat.modes();
        let mut r = random_modes(&mut rng, &modes);
        for e in lat.gate_order(EntanglerOrder::Layered) {
            r.attach_qubit(edge_label(e), true).unwrap();
        }
        for k in cluster_stabilizers(&lat, EntanglerOrder::Layered) {
            // U K0 = K U where K0 is the stabilizer's X or P part alone
            let mut a = r.clone();
            if k.x.is_empty() {
                a.apply_word(&k.word).unwrap();
            } else {
                a.apply_x(k.x[0]).unwrap();
            }
            apply_entangler(&mut a, &lat, EntanglerOrder::Layered).unwrap();
            let mut b = r.clone();
            apply_entangler(&mut b, &lat, EntanglerOrder::Layered).unwrap();
            k.apply(&mut b).unwrap();
            assert!(max_diff(a.amplitudes(), b.amplitudes()) < 1e-12);
        }
    }

    #[test]
    fn empty_lattice_is_vacuum() {
        let lat = FermionLattice::new(1, 1, false).unwrap();
        let c = build_fermionic_cluster(&lat, EntanglerOrder::Layered, None).unwrap();
        assert_eq!(c.amplitudes(), &[C64::new(1.0, 0.0), C64::new(0.0, 0.0)]);
    }

    fn worst_fidelity(plan: &KitaevPlan, seeds: u64) -> f64 {
        kitaev_report(plan, seeds, 0).unwrap().fidelity
    }

    #[test]
    fn decoupled_sites() {
        let plan = KitaevPlan::new(3, 0.0, 0.7, 0.1, 2).with_init(FermionInit::Occupations(vec![true, false, true]));
        assert!(worst_fidelity(&plan, 10) > 1.0 - 1e-12);
    }

    #[test]
    fn pure_hopping_pair() {
        let plan = KitaevPlan::new(2, 1.0, 0.0, 0.1, 2);
        assert!(worst_fidelity(&plan, 20) > 1.0 - 1e-9);
    }

    #[test]
    fn three_site_chain_matches_oracle() {
        let plan = KitaevPlan::new(3, 1.0, 0.7, 0.1, 2);
        let rep = kitaev_report(&plan, 100, 1).unwrap();
        assert!(rep.fidelity > 1.0 - 1e-9, "{rep:?}");
        assert!(rep.parity_drift < 1e-12);
    }

    #[test]
    fn generic_input_and_open_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let amps: Vec<C64> = (0..8).map(|_| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)).collect();
        let plan = KitaevPlan::new(3, 0.8, -0.4, 0.2, 3).with_init(FermionInit::Amplitudes(amps));
        assert!(worst_fidelity(&plan, 20) > 1.0 - 1e-9);
        assert!(worst_fidelity(&plan.clone().open(), 20) > 1.0 - 1e-9);
    }

    #[test]
    fn full_resource_matches_lazy() {
        let plan = KitaevPlan::new(2, 1.0, 0.7, 0.1, 2);
        for seed in 0..5 {
            let lazy = run_kitaev(&plan, Outcomes::seeded(seed), Preparation::Lazy).unwrap();
            let script: Vec<usize> = lazy.record.iter().map(|e| e.outcome).collect();
            let full = run_kitaev(&plan, Outcomes::scripted(script), Preparation::Full(EntanglerOrder::Layered)).unwrap();
            assert!((fermion_fidelity(&lazy.physical, &full.physical).unwrap() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn hop_readout_matches_direct() {
        let plan = KitaevPlan::new(3, 1.0, 0.7, 0.3, 2);
        let run = run_kitaev(&plan, Outcomes::seeded(3), Preparation::Lazy).unwrap();
        let cmp = compare_hop_readout(&run, 0, 1, 10_000, 5).unwrap();
        assert!((cmp.readout_mean - cmp.direct_mean).abs() <= 3.0 * cmp.std_error + 1e-12, "{cmp:?}");
    }

    #[test]
    fn readout_flip_from_frame() {
        // S eigenstate with a γ byproduct that anticommutes with S
        let ideal = hop_eigenstate(13);
        let ev = ideal.expectation(&MajoranaWord::hop(0, 1)).unwrap().re;
        let frame = MajoranaWord::single(Majorana::gamma(1));
        let mut physical = ideal.clone();
        physical.apply_word(&frame).unwrap();
        let (raw, corrected) = hop_readout(&physical, &frame, 0, 1).unwrap();
        let want = if ev > 0.0 { [1.0, 0.0] } else { [0.0, 1.0] };
        assert!((corrected[0] - want[0]).abs() < 1e-12);
        assert!((raw[1] - want[0]).abs() < 1e-12);
        let (raw, _) = hop_readout(&ideal, &MajoranaWord::identity(), 0, 1).unwrap();
        assert!((raw[0] - want[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_angles_teleport_cleanly() {
        let plan = KitaevPlan::new(2, 0.0, 0.0, 0.1, 1).with_init(FermionInit::Occupations(vec![true, false]));
        let run = run_kitaev(&plan, Outcomes::seeded(1), Preparation::Lazy).unwrap();
        assert!((fermion_fidelity(&plan.input_on(&[0, 1]).unwrap(), &run.state).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hops_first_order_is_diagnostic_only() {
        let plan = KitaevPlan::new(2, 1.0, 0.7, 0.3, 2);
        let oracle = plan.oracle_state().unwrap();
        let run = run_kitaev(&plan, Outcomes::seeded(2), Preparation::Full(EntanglerOrder::HopsFirst)).unwrap();
        let f = fermion_fidelity(&oracle, &run.state).unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&f));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn word_product_matches_dense(a in 0u8..64, b in 0u8..64, pa in 0u8..4, pb in 0u8..4, seed in any::<u64>()) {
            let wa = word_from_bits(a, pa);
            let wb = word_from_bits(b, pb);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_modes(&mut rng, &[0, 1, 2]);
            let mut seq = r.clone();
            seq.apply_word(&wb).unwrap();
            seq.apply_word(&wa).unwrap();
            let mut prod = r.clone();
            prod.apply_word(&wa.mul(&wb)).unwrap();
            prop_assert!(max_diff(seq.amplitudes(), prod.amplitudes()) < 1e-12);

            let mut rev = r.clone();
            rev.apply_word(&wa).unwrap();
            rev.apply_word(&wb).unwrap();
            let sign = if wa.commutes_with(&wb) { 1.0 } else { -1.0 };
            let flipped: Vec<C64> = rev.amplitudes().iter().map(|z| z * sign).collect();
            prop_assert!(max_diff(seq.amplitudes(), &flipped) < 1e-12);

            let mut back = r.clone();
            back.apply_word(&wa).unwrap();
            back.apply_word(&wa.inverse()).unwrap();
            prop_assert!(max_diff(back.amplitudes(), r.amplitudes()) < 1e-12);
        }

        #[test]
        fn relabel_matches_register_relabel(a in 0u8..64, seed in any::<u64>()) {
            let w = word_from_bits(a, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_modes(&mut rng, &[0, 1, 2]);
            let mut x = r.clone();
            x.apply_word(&w).unwrap();
            x.relabel(1, 9).unwrap();
            let mut y = r.clone();
            y.relabel(1, 9).unwrap();
            y.apply_word(&w.relabel(1, 9)).unwrap();
            prop_assert!(max_diff(x.amplitudes(), y.amplitudes()) < 1e-12);
            prop_assert_eq!(w.relabel(1, 9).relabel(9, 1), w);
        }

        #[test]
        fn byproducts_through_rotations(bits in 0u8..64, xi in -2.0f64..2.0, seed in any::<u64>()) {
            // O e^{-iξA} = e^{-iσξA} O with σ from commutation
            let o = word_from_bits(bits, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_modes(&mut rng, &[0, 1, 2]);
            for a in [MajoranaWord::parity(1), MajoranaWord::hop(0, 2)] {
                let sigma = if o.commutes_with(&a) { 1.0 } else { -1.0 };
                let mut x = r.clone();
                x.apply_rotation(&a, xi).unwrap();
                x.apply_word(&o).unwrap();
                let mut y = r.clone();
                y.apply_word(&o).unwrap();
                y.apply_rotation(&a, sigma * xi).unwrap();
                prop_assert!(max_diff(x.amplitudes(), y.amplitudes()) < 1e-12);
            }
        }
    }
}
