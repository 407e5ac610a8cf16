//! Hypercubic cell complexes with Z_N chains.
//!
//! A cell is a base vertex `x` together with a sorted set of directions, packed
//! into one integer: the mixed-radix vertex index shifted left by [`MASK_BITS`],
//! or-ed with the direction bitmask. Sorting packed keys gives the lexicographic
//! iteration order used everywhere else.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MASK_BITS: u32 = 8;
const MASK: u64 = (1 << MASK_BITS) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell(pub u64);

impl Cell {
    pub fn mask(self) -> u32 {
        (self.0 & MASK) as u32
    }

    pub fn degree(self) -> usize {
        self.mask().count_ones() as usize
    }

    fn vertex_index(self) -> u64 {
        self.0 >> MASK_BITS
    }
}

/// Position of a cell relative to the open (last) direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slab {
    /// `σ × {j}`
    Point(usize),
    /// `σ × [j, j+1]`
    Interval(usize),
}

impl Slab {
    pub fn index(self) -> usize {
        match self {
            Slab::Point(j) | Slab::Interval(j) => j,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Primal,
    Dual,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellComplex {
    extents: Vec<usize>,
    periodic: Vec<bool>,
    modulus: u32,
}

/// Sparse Z_N-valued chain. Zero coefficients are never stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Chain {
    degree: usize,
    modulus: u32,
    coeffs: BTreeMap<Cell, u32>,
}

/// Chain on the dual complex, stored through the identification of a dual
/// `(d-i)`-cell with the primal `i`-cell it crosses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualChain {
    pub degree: usize,
    pub primal: Chain,
}

impl Chain {
    pub fn zero(degree: usize, modulus: u32) -> Self {
        Chain { degree, modulus, coeffs: BTreeMap::new() }
    }

    pub fn from_terms<I: IntoIterator<Item = (Cell, i64)>>(degree: usize, modulus: u32, terms: I) -> Self {
        let mut c = Chain::zero(degree, modulus);
        for (cell, k) in terms {
            c.add_term(cell, k);
        }
        c
    }

    pub fn single(cell: Cell, modulus: u32) -> Self {
        Chain::from_terms(cell.degree(), modulus, [(cell, 1)])
    }

    pub fn add_term(&mut self, cell: Cell, k: i64) {
        debug_assert_eq!(cell.degree(), self.degree);
        let n = self.modulus as i64;
        let cur = self.coeffs.get(&cell).copied().unwrap_or(0) as i64;
        let v = (cur + k).rem_euclid(n) as u32;
        if v == 0 {
            self.coeffs.remove(&cell);
        } else {
            self.coeffs.insert(cell, v);
        }
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn get(&self, cell: Cell) -> u32 {
        self.coeffs.get(&cell).copied().unwrap_or(0)
    }

    pub fn terms(&self) -> impl Iterator<Item = (Cell, u32)> + '_ {
        self.coeffs.iter().map(|(c, k)| (*c, *k))
    }

    pub fn support(&self) -> impl Iterator<Item = Cell> + '_ {
        self.coeffs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn add(&self, other: &Chain) -> Chain {
        assert_eq!(self.degree, other.degree, "adding chains of different degree");
        let mut out = self.clone();
        for (c, k) in other.terms() {
            out.add_term(c, k as i64);
        }
        out
    }

    pub fn neg(&self) -> Chain {
        self.scale(-1)
    }

    pub fn scale(&self, k: i64) -> Chain {
        Chain::from_terms(self.degree, self.modulus, self.terms().map(|(c, v)| (c, v as i64 * k)))
    }

    pub fn dual(&self, dim: usize) -> DualChain {
        DualChain { degree: dim - self.degree, primal: self.clone() }
    }

    /// Number of cells shared with `other` in the support (the `#(a ∩ b)` count).
    pub fn intersection_count(&self, other: &Chain) -> usize {
        self.support().filter(|c| other.get(*c) != 0).count()
    }
}

impl DualChain {
    pub fn dual(&self) -> Chain {
        self.primal.clone()
    }
}

impl CellComplex {
    pub fn new(extents: Vec<usize>, periodic: Vec<bool>, modulus: u32) -> Result<Self> {
        if extents.is_empty() || extents.len() > MASK_BITS as usize {
            return Err(Error::Invalid(format!("dimension {} not in 1..={}", extents.len(), MASK_BITS)));
        }
        if extents.len() != periodic.len() {
            return Err(Error::Invalid("extents and periodic flags differ in length".into()));
        }
        if extents.contains(&0) {
            return Err(Error::Invalid("extents must be positive".into()));
        }
        if modulus < 2 {
            return Err(Error::Invalid("coefficient modulus must be at least 2".into()));
        }
        Ok(CellComplex { extents, periodic, modulus })
    }

    /// Periodic in every direction except the last, which is open.
    pub fn spacetime(extents: Vec<usize>, modulus: u32) -> Result<Self> {
        let d = extents.len();
        let periodic = (0..d).map(|k| k + 1 < d).collect();
        CellComplex::new(extents, periodic, modulus)
    }

    pub fn torus(extents: Vec<usize>, modulus: u32) -> Result<Self> {
        let d = extents.len();
        CellComplex::new(extents, vec![true; d], modulus)
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn modulus(&self) -> u32 {
        self.modulus
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    fn vertex_count(&self) -> u64 {
        self.extents.iter().map(|&l| l as u64).product()
    }

    pub fn coords(&self, cell: Cell) -> Vec<usize> {
        let mut idx = cell.vertex_index();
        let mut out = Vec::with_capacity(self.dim());
        for &l in &self.extents {
            out.push((idx % l as u64) as usize);
            idx /= l as u64;
        }
        out
    }

    pub fn decode(&self, cell: Cell) -> (Vec<usize>, u32) {
        (self.coords(cell), cell.mask())
    }

    /// Packs a cell; `None` if it sticks out of an open direction.
    pub fn encode(&self, coords: &[usize], mask: u32) -> Option<Cell> {
        let mut idx = 0u64;
        let mut stride = 1u64;
        for (k, (&x, &l)) in coords.iter().zip(&self.extents).enumerate() {
            if x >= l {
                return None;
            }
            if mask & (1 << k) != 0 && !self.periodic[k] && x + 1 >= l {
                return None;
            }
            idx += x as u64 * stride;
            stride *= l as u64;
        }
        if mask >> self.dim() != 0 {
            return None;
        }
        Some(Cell((idx << MASK_BITS) | mask as u64))
    }

    /// Coordinates shifted by `delta` along `dir`; `None` when leaving an open direction.
    fn shifted(&self, coords: &[usize], dir: usize, delta: i64) -> Option<Vec<usize>> {
        let l = self.extents[dir] as i64;
        let x = coords[dir] as i64 + delta;
        let mut out = coords.to_vec();
        if self.periodic[dir] {
            out[dir] = x.rem_euclid(l) as usize;
        } else if (0..l).contains(&x) {
            out[dir] = x as usize;
        } else {
            return None;
        }
        Some(out)
    }

    pub fn cells(&self, degree: usize) -> Vec<Cell> {
        let d = self.dim();
        let masks: Vec<u32> = (0u32..1 << d).filter(|m| m.count_ones() as usize == degree).collect();
        let mut out = Vec::new();
        for v in 0..self.vertex_count() {
            let coords = self.coords(Cell(v << MASK_BITS));
            for &m in &masks {
                if let Some(c) = self.encode(&coords, m) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn count(&self, degree: usize) -> usize {
        self.cells(degree).len()
    }

    /// Signed faces of one cell, before reduction mod N. Repeated faces (unit
    /// periodic extents) are kept as separate entries.
    pub fn cell_boundary(&self, cell: Cell) -> Vec<(Cell, i64)> {
        let (coords, mask) = self.decode(cell);
        let dirs: Vec<usize> = (0..self.dim()).filter(|k| mask & (1 << k) != 0).collect();
        let mut out = Vec::with_capacity(2 * dirs.len());
        for (i, &a) in dirs.iter().enumerate() {
            let sign = if i % 2 == 0 { 1 } else { -1 };
            let face_mask = mask & !(1 << a);
            if let Some(up) = self.shifted(&coords, a, 1).and_then(|x| self.encode(&x, face_mask)) {
                out.push((up, sign));
            }
            if let Some(down) = self.encode(&coords, face_mask) {
                out.push((down, -sign));
            }
        }
        out
    }

    /// Signed cofaces of one cell: every `τ` with `σ` in `∂τ`, weighted by
    /// the coefficient of `σ` in `∂τ`.
    pub fn cell_coboundary(&self, cell: Cell) -> Vec<(Cell, i64)> {
        let (coords, mask) = self.decode(cell);
        let mut candidates = BTreeSet::new();
        for b in 0..self.dim() {
            if mask & (1 << b) != 0 {
                continue;
            }
            let m = mask | (1 << b);
            if let Some(c) = self.encode(&coords, m) {
                candidates.insert(c);
            }
            if let Some(c) = self.shifted(&coords, b, -1).and_then(|x| self.encode(&x, m)) {
                candidates.insert(c);
            }
        }
        let mut out = Vec::new();
        for tau in candidates {
            let k: i64 = self.cell_boundary(tau).iter().filter(|(f, _)| *f == cell).map(|(_, s)| s).sum();
            if k.rem_euclid(self.modulus as i64) != 0 {
                out.push((tau, k));
            }
        }
        out
    }

    pub fn boundary(&self, c: &Chain) -> Result<Chain> {
        if c.degree() == 0 {
            return Err(Error::NoBoundary);
        }
        let mut out = Chain::zero(c.degree() - 1, self.modulus);
        for (cell, k) in c.terms() {
            for (f, s) in self.cell_boundary(cell) {
                out.add_term(f, s * k as i64);
            }
        }
        Ok(out)
    }

    /// Transpose of [`CellComplex::boundary`] with respect to the cell basis.
    pub fn coboundary(&self, c: &Chain) -> Result<Chain> {
        if c.degree() >= self.dim() {
            return Err(Error::NoCoboundary);
        }
        let mut out = Chain::zero(c.degree() + 1, self.modulus);
        for (cell, k) in c.terms() {
            for (t, s) in self.cell_coboundary(cell) {
                out.add_term(t, s * k as i64);
            }
        }
        Ok(out)
    }

    /// Coefficient of `face` in `∂cell`, reduced mod N.
    pub fn incidence(&self, cell: Cell, face: Cell) -> u32 {
        let k: i64 = self.cell_boundary(cell).iter().filter(|(f, _)| *f == face).map(|(_, s)| s).sum();
        k.rem_euclid(self.modulus as i64) as u32
    }

    pub fn pairing(&self, c: &Chain, dual: &DualChain) -> Result<u32> {
        if c.degree() + dual.degree != self.dim() {
            return Err(Error::DegreeMismatch { expected: self.dim() - c.degree(), got: dual.degree });
        }
        let n = self.modulus as u64;
        let s: u64 = c.terms().map(|(cell, k)| k as u64 * dual.primal.get(cell) as u64 % n).sum();
        Ok((s % n) as u32)
    }

    /// The complex with the last direction removed.
    pub fn spatial(&self) -> Result<CellComplex> {
        let d = self.dim();
        if d < 2 {
            return Err(Error::Invalid("a 1-dimensional complex has no spatial slice".into()));
        }
        CellComplex::new(self.extents[..d - 1].to_vec(), self.periodic[..d - 1].to_vec(), self.modulus)
    }

    /// Lifts a cell of the spatial slice complex into this complex.
    pub fn product_cell(&self, space: &CellComplex, sigma: Cell, slab: Slab) -> Result<Cell> {
        let d = self.dim();
        let last = self.extents[d - 1];
        let j = slab.index();
        let in_range = match slab {
            Slab::Point(j) => j < last,
            Slab::Interval(j) => j + 1 < last || self.periodic[d - 1] && j < last,
        };
        if !in_range {
            return Err(Error::SliceOutOfRange(j));
        }
        let mut coords = space.coords(sigma);
        coords.push(j);
        let mut mask = sigma.mask();
        if let Slab::Interval(_) = slab {
            mask |= 1 << (d - 1);
        }
        self.encode(&coords, mask).ok_or(Error::SliceOutOfRange(j))
    }

    /// Inverse of [`CellComplex::product_cell`].
    pub fn split_cell(&self, space: &CellComplex, cell: Cell) -> (Cell, Slab) {
        let d = self.dim();
        let (coords, mask) = self.decode(cell);
        let j = coords[d - 1];
        let sigma = space
            .encode(&coords[..d - 1], mask & !(1 << (d - 1)))
            .expect("spatial projection of a valid cell");
        let slab = if mask & (1 << (d - 1)) != 0 { Slab::Interval(j) } else { Slab::Point(j) };
        (sigma, slab)
    }

    /// Small generators of closed chains: boundaries (primal) or coboundaries
    /// (dual) of single cells, plus straight cycles wrapping periodic directions.
    /// Duplicates and empty chains are dropped.
    pub fn kernel_cycles(&self, degree: usize, side: Side, cap: usize) -> Result<Vec<Chain>> {
        let d = self.dim();
        let count = self.count(degree);
        if count > cap {
            return Err(Error::CycleCap { count, cap });
        }
        let n = self.modulus;
        let mut found: Vec<Chain> = Vec::new();
        let push = |c: Chain, found: &mut Vec<Chain>| {
            if !c.is_empty() && !found.contains(&c) {
                found.push(c);
            }
        };
        match side {
            Side::Primal => {
                if degree < d {
                    for cell in self.cells(degree + 1) {
                        push(self.boundary(&Chain::single(cell, n))?, &mut found);
                    }
                }
            }
            Side::Dual => {
                if degree > 0 {
                    for cell in self.cells(degree - 1) {
                        push(self.coboundary(&Chain::single(cell, n))?, &mut found);
                    }
                }
            }
        }
        // Straight cycles: cells with direction mask `m`, summed over every
        // position along the directions in `spread`, with the rest held fixed.
        for m in (0u32..1 << d).filter(|m| m.count_ones() as usize == degree) {
            let spread = match side {
                Side::Primal => m,
                Side::Dual => !m & ((1 << d) - 1),
            };
            if (0..d).any(|k| spread & (1 << k) != 0 && !self.periodic[k]) {
                continue;
            }
            let mut groups: BTreeMap<Vec<usize>, Chain> = BTreeMap::new();
            for cell in self.cells(degree).into_iter().filter(|c| c.mask() == m) {
                let key: Vec<usize> = self
                    .coords(cell)
                    .into_iter()
                    .enumerate()
                    .map(|(k, x)| if spread & (1 << k) != 0 { usize::MAX } else { x })
                    .collect();
                groups.entry(key).or_insert_with(|| Chain::zero(degree, n)).add_term(cell, 1);
            }
            for c in groups.into_values() {
                push(c, &mut found);
            }
        }
        let closed = |c: &Chain| -> Result<bool> {
            Ok(match side {
                Side::Primal => degree == 0 || self.boundary(c)?.is_empty(),
                Side::Dual => degree == d || self.coboundary(c)?.is_empty(),
            })
        };
        let mut out = Vec::new();
        for c in found {
            if closed(&c)? {
                out.push(c);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(n: u32) -> CellComplex {
        CellComplex::spacetime(vec![3, 3, 3], n).unwrap()
    }

    #[test]
    fn encode_roundtrip() {
        let cx = CellComplex::spacetime(vec![2, 3, 4], 3).unwrap();
        for i in 0..=3 {
            for c in cx.cells(i) {
                let (x, m) = cx.decode(c);
                assert_eq!(cx.encode(&x, m), Some(c));
                assert_eq!(c.degree(), i);
            }
        }
    }

    #[test]
    fn cell_counts() {
        // 2x3 torus times an open line of 4 points.
        let cx = CellComplex::spacetime(vec![2, 3, 4], 2).unwrap();
        assert_eq!(cx.count(0), 24);
        assert_eq!(cx.count(1), 6 * 4 * 2 + 6 * 3);
        assert_eq!(cx.count(2), 6 * 4 + 2 * 6 * 3);
        assert_eq!(cx.count(3), 6 * 3);
        let open = CellComplex::new(vec![3, 3], vec![false, false], 2).unwrap();
        assert_eq!(open.count(1), 12);
        assert_eq!(open.count(2), 4);
    }

    #[test]
    fn edge_boundary_mod2() {
        let cx = CellComplex::torus(vec![3, 3], 2).unwrap();
        let e = cx.encode(&[1, 2], 0b01).unwrap();
        let b = cx.boundary(&Chain::single(e, 2)).unwrap();
        let x = cx.encode(&[1, 2], 0).unwrap();
        let y = cx.encode(&[2, 2], 0).unwrap();
        assert_eq!(b, Chain::from_terms(0, 2, [(x, 1), (y, 1)]));
    }

    #[test]
    fn zero_chain_boundary() {
        let cx = cube(3);
        assert!(cx.boundary(&Chain::zero(2, 3)).unwrap().is_empty());
        assert!(cx.coboundary(&Chain::zero(1, 3)).unwrap().is_empty());
        assert_eq!(cx.boundary(&Chain::zero(0, 3)), Err(Error::NoBoundary));
        assert_eq!(cx.coboundary(&Chain::zero(3, 3)), Err(Error::NoCoboundary));
    }

    #[test]
    fn plaquette_boundary_signs() {
        let cx = CellComplex::torus(vec![3, 3], 3).unwrap();
        let p = cx.encode(&[0, 0], 0b11).unwrap();
        let b = cx.boundary(&Chain::single(p, 3)).unwrap();
        // Walk the square counterclockwise: bottom and right sides forward,
        // top and left sides backward.
        let bottom = cx.encode(&[0, 0], 0b01).unwrap();
        let right = cx.encode(&[1, 0], 0b10).unwrap();
        let top = cx.encode(&[0, 1], 0b01).unwrap();
        let left = cx.encode(&[0, 0], 0b10).unwrap();
        let want = Chain::from_terms(1, 3, [(bottom, 1), (right, 1), (top, -1), (left, -1)]);
        assert_eq!(b, want);
    }

    #[test]
    fn vertex_coboundary_degree_four() {
        let cx = CellComplex::torus(vec![3, 3], 2).unwrap();
        let v = cx.encode(&[1, 1], 0).unwrap();
        let cb = cx.coboundary(&Chain::single(v, 2)).unwrap();
        let mut want: Vec<Cell> = cx
            .cells(1)
            .into_iter()
            .filter(|e| cx.cell_boundary(*e).iter().any(|(f, _)| *f == v))
            .collect();
        want.sort();
        assert_eq!(cb.support().collect::<Vec<_>>(), want);
        assert_eq!(cb.len(), 4);
    }

    #[test]
    fn pairing_basics() {
        let cx = cube(2);
        let e = cx.cells(1)[5];
        let c = Chain::single(e, 2);
        assert_eq!(cx.pairing(&c, &c.dual(3)).unwrap(), 1);
        let other = Chain::single(cx.cells(1)[6], 2);
        assert_eq!(cx.pairing(&c, &other.dual(3)).unwrap(), 0);
        assert!(cx.pairing(&c, &Chain::zero(1, 2).dual(2)).is_err());
        let d = c.dual(3);
        assert_eq!(d.dual(), c);
    }

    #[test]
    fn product_cells() {
        let st = CellComplex::spacetime(vec![2, 2, 3], 2).unwrap();
        let sp = st.spatial().unwrap();
        let v = sp.cells(0)[1];
        let at0 = st.product_cell(&sp, v, Slab::Point(0)).unwrap();
        assert_eq!(at0.degree(), 0);
        let tl = st.product_cell(&sp, v, Slab::Interval(0)).unwrap();
        assert_eq!(tl.degree(), 1);
        assert_eq!(tl.mask(), 0b100);
        let e = sp.cells(1)[0];
        let pl = st.product_cell(&sp, e, Slab::Interval(1)).unwrap();
        assert_eq!(pl.degree(), 2);
        assert_eq!(st.split_cell(&sp, pl), (e, Slab::Interval(1)));
        assert!(st.product_cell(&sp, v, Slab::Interval(2)).is_err());
        assert!(st.product_cell(&sp, v, Slab::Point(3)).is_err());
    }

    #[test]
    fn torus_loops_found() {
        let cx = CellComplex::torus(vec![3, 3], 2).unwrap();
        let cycles = cx.kernel_cycles(1, Side::Primal, 1000).unwrap();
        for z in &cycles {
            assert!(cx.boundary(z).unwrap().is_empty());
        }
        let straight = cycles.iter().filter(|z| z.len() == 3).count();
        assert_eq!(straight, 6);
        let p = cx.cells(2)[0];
        let bp = cx.boundary(&Chain::single(p, 2)).unwrap();
        assert!(cycles.contains(&bp));
    }

    #[test]
    fn open_lines_not_cycles() {
        let cx = CellComplex::spacetime(vec![2, 3], 2).unwrap();
        let line = Chain::from_terms(1, 2, cx.cells(1).into_iter().filter(|c| c.mask() == 0b10).take(2).map(|c| (c, 1)));
        assert!(!cx.boundary(&line).unwrap().is_empty());
        let cycles = cx.kernel_cycles(1, Side::Primal, 1000).unwrap();
        assert!(!cycles.contains(&line));
        // No straight loop can wrap the open direction.
        assert!(cycles.iter().all(|z| z.len() == 4 || z.support().all(|c| c.mask() == 0b01)));
    }

    #[test]
    fn dual_cycles_closed() {
        let cx = CellComplex::torus(vec![2, 3, 2], 3).unwrap();
        for i in 1..3 {
            for z in cx.kernel_cycles(i, Side::Dual, 1000).unwrap() {
                assert!(cx.coboundary(&z).unwrap().is_empty());
            }
        }
        assert!(matches!(cx.kernel_cycles(1, Side::Primal, 3), Err(Error::CycleCap { .. })));
    }

    fn random_chain(cx: &CellComplex, degree: usize, picks: &[(usize, i64)]) -> Chain {
        let cells = cx.cells(degree);
        Chain::from_terms(degree, cx.modulus(), picks.iter().map(|(i, k)| (cells[i % cells.len()], *k)))
    }

    proptest! {
        #[test]
        fn boundary_squares_to_zero(n in prop::sample::select(vec![2u32, 3, 5]), deg in 2usize..=3,
                                    picks in prop::collection::vec((0usize..200, -4i64..5), 0..8)) {
            let cx = cube(n);
            let c = random_chain(&cx, deg, &picks);
            prop_assert!(cx.boundary(&cx.boundary(&c).unwrap()).unwrap().is_empty());
        }

        #[test]
        fn coboundary_squares_to_zero(n in prop::sample::select(vec![2u32, 3, 5]), deg in 0usize..=1,
                                      picks in prop::collection::vec((0usize..200, -4i64..5), 0..8)) {
            let cx = cube(n);
            let c = random_chain(&cx, deg, &picks);
            prop_assert!(cx.coboundary(&cx.coboundary(&c).unwrap()).unwrap().is_empty());
        }

        #[test]
        fn coboundary_adjoint(n in prop::sample::select(vec![2u32, 3, 5]), deg in 0usize..3,
                              a in prop::collection::vec((0usize..200, -4i64..5), 0..6),
                              b in prop::collection::vec((0usize..200, -4i64..5), 0..6)) {
            let cx = cube(n);
            let lo = random_chain(&cx, deg, &a);
            let hi = random_chain(&cx, deg + 1, &b);
            // <∂* lo, hi> = <lo, ∂ hi>
            let left = cx.pairing(&cx.coboundary(&lo).unwrap(), &hi.dual(3)).unwrap();
            let right = cx.pairing(&lo, &cx.boundary(&hi).unwrap().dual(3)).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn chain_group_laws(n in prop::sample::select(vec![2u32, 3, 5]),
                            a in prop::collection::vec((0usize..200, -4i64..5), 0..6),
                            b in prop::collection::vec((0usize..200, -4i64..5), 0..6),
                            c in prop::collection::vec((0usize..200, -4i64..5), 0..6),
                            unit in 1i64..5) {
            let cx = CellComplex::torus(vec![2, 2, 2], n).unwrap();
            let (a, b, c) = (random_chain(&cx, 1, &a), random_chain(&cx, 1, &b), random_chain(&cx, 1, &c));
            prop_assert_eq!(a.add(&b), b.add(&a));
            prop_assert_eq!(a.add(&b).add(&c), a.add(&b.add(&c)));
            prop_assert_eq!(a.add(&Chain::zero(1, n)), a.clone());
            prop_assert!(a.add(&a.neg()).is_empty());
            prop_assert!(a.terms().all(|(_, k)| k != 0));
            if n == 2 { prop_assert_eq!(a.neg(), a.clone()); }
            if !(unit as u32).is_multiple_of(n) && (n == 2 || n == 3 || n == 5) {
                let inv = (1..n as i64).find(|v| (v * unit).rem_euclid(n as i64) == 1).unwrap();
                prop_assert_eq!(a.scale(unit).scale(inv), a);
            }
        }
    }
}
