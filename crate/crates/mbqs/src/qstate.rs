//! Dense qudit register with lazily attached sites, generalized Pauli
//! operators and projective measurements.
//!
//! Conventions: `Z|a> = ω^a |a>`, `X|a> = |a+1>`, `F|a> = N^{-1/2} Σ_b ω^{-ab} |b>`,
//! so `F Z F⁻¹ = X` and `F X F⁻¹ = Z⁻¹`. Amplitudes are stored little-endian
//! over the live-site list: the first live site is the least significant digit.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const DEFAULT_EPS: f64 = 1e-10;
pub const DEFAULT_CAP: usize = 24;

pub fn omega(n: u32) -> C64 {
    C64::from_polar(1.0, 2.0 * PI / n as f64)
}

/// `ω^(k/2)`: phases in half-steps so that `i = ω^(1/2)` exists at N = 2.
pub fn half_phase(k: i64, n: u32) -> C64 {
    C64::from_polar(1.0, PI * k as f64 / n as f64)
}

/// `ω^(p/2) Π_s X_s^{x_s} Z_s^{z_s}`, with `p` kept mod 2N.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PauliOp {
    n: u32,
    half_phase: u32,
    ops: BTreeMap<u64, (u32, u32)>,
}

impl PauliOp {
    pub fn identity(n: u32) -> Self {
        PauliOp { n, half_phase: 0, ops: BTreeMap::new() }
    }

    pub fn x(n: u32, site: u64, power: i64) -> Self {
        PauliOp::identity(n).with(site, power, 0)
    }

    pub fn z(n: u32, site: u64, power: i64) -> Self {
        PauliOp::identity(n).with(site, 0, power)
    }

    pub fn x_string<I: IntoIterator<Item = (u64, i64)>>(n: u32, terms: I) -> Self {
        terms.into_iter().fold(PauliOp::identity(n), |p, (s, k)| p.mul(&PauliOp::x(n, s, k)))
    }

    pub fn z_string<I: IntoIterator<Item = (u64, i64)>>(n: u32, terms: I) -> Self {
        terms.into_iter().fold(PauliOp::identity(n), |p, (s, k)| p.mul(&PauliOp::z(n, s, k)))
    }

    /// Sets the exponents on one site, replacing whatever was there.
    pub fn with(mut self, site: u64, x: i64, z: i64) -> Self {
        let n = self.n as i64;
        let (x, z) = (x.rem_euclid(n) as u32, z.rem_euclid(n) as u32);
        if x == 0 && z == 0 {
            self.ops.remove(&site);
        } else {
            self.ops.insert(site, (x, z));
        }
        self
    }

    /// Moves the exponents on `from` onto `to`, which must be unused.
    pub fn relabel(&self, from: u64, to: u64) -> PauliOp {
        let (x, z) = self.get(from);
        debug_assert_eq!(self.get(to), (0, 0));
        self.clone().with(from, 0, 0).with(to, x as i64, z as i64)
    }

    pub fn with_phase(mut self, half_steps: i64) -> Self {
        self.half_phase = (self.half_phase as i64 + half_steps).rem_euclid(2 * self.n as i64) as u32;
        self
    }

    pub fn modulus(&self) -> u32 {
        self.n
    }

    pub fn phase_half_steps(&self) -> u32 {
        self.half_phase
    }

    pub fn phase(&self) -> C64 {
        half_phase(self.half_phase as i64, self.n)
    }

    pub fn get(&self, site: u64) -> (u32, u32) {
        self.ops.get(&site).copied().unwrap_or((0, 0))
    }

    pub fn sites(&self) -> impl Iterator<Item = u64> + '_ {
        self.ops.keys().copied()
    }

    pub fn terms(&self) -> impl Iterator<Item = (u64, u32, u32)> + '_ {
        self.ops.iter().map(|(s, (x, z))| (*s, *x, *z))
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    /// Same operator with the scalar phase dropped.
    pub fn canonical(&self) -> PauliOp {
        PauliOp { n: self.n, half_phase: 0, ops: self.ops.clone() }
    }

    pub fn same_string(&self, other: &PauliOp) -> bool {
        self.ops == other.ops
    }

    /// Operator product `self · other`.
    pub fn mul(&self, other: &PauliOp) -> PauliOp {
        assert_eq!(self.n, other.n, "mixing local dimensions");
        let n = self.n as i64;
        let mut out = self.clone();
        // X^a Z^b X^c Z^d = ω^{bc} X^{a+c} Z^{b+d}
        let mut extra = 0i64;
        for (s, x2, z2) in other.terms() {
            let (x1, z1) = self.get(s);
            extra += 2 * z1 as i64 * x2 as i64;
            out = out.with(s, x1 as i64 + x2 as i64, z1 as i64 + z2 as i64);
        }
        out.half_phase = ((out.half_phase as i64 + other.half_phase as i64 + extra).rem_euclid(2 * n)) as u32;
        out
    }

    pub fn pow(&self, k: u32) -> PauliOp {
        (0..k).fold(PauliOp::identity(self.n), |acc, _| acc.mul(self))
    }

    pub fn inverse(&self) -> PauliOp {
        self.pow(2 * self.n - 1)
    }

    pub fn dagger(&self) -> PauliOp {
        self.inverse()
    }

    /// `k` with `self · other = ω^k other · self`.
    pub fn commutation(&self, other: &PauliOp) -> u32 {
        let n = self.n as i64;
        let k: i64 = other
            .terms()
            .map(|(s, x2, z2)| {
                let (x1, z1) = self.get(s);
                z1 as i64 * x2 as i64 - x1 as i64 * z2 as i64
            })
            .sum();
        k.rem_euclid(n) as u32
    }

    pub fn commutes_with(&self, other: &PauliOp) -> bool {
        self.commutation(other) == 0
    }

    /// `U⁻¹ self U` for Pauli `U`: `self` picks up `ω^k` with `self·U = ω^k U·self`.
    pub fn conjugate_by(&self, u: &PauliOp) -> PauliOp {
        let k = self.commutation(u) as i64;
        self.clone().with_phase(2 * k)
    }

    /// `F_s^p · self · F_s^{-p}` on one site.
    pub fn fourier_conjugate(&self, site: u64, power: i64) -> PauliOp {
        let mut out = self.clone();
        for _ in 0..power.rem_euclid(4) {
            // F X^x Z^z F⁻¹ = Z^{-x} X^{z} = ω^{-xz} X^z Z^{-x}
            let (x, z) = out.get(site);
            let (x, z) = (x as i64, z as i64);
            out = out.with(site, z, -x).with_phase(-2 * x * z);
        }
        out
    }

    /// Matrix on `order` (little-endian, first site least significant).
    pub fn matrix(&self, order: &[u64]) -> DMatrix<C64> {
        let n = self.n as usize;
        let dim = n.pow(order.len() as u32);
        let mut m = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let (row, amp) = self.action(order, col);
            m[(row, col)] = amp;
        }
        m
    }

    /// Image of one basis index: `P|col> = amp |row>`.
    fn action(&self, order: &[u64], col: usize) -> (usize, C64) {
        let n = self.n as usize;
        let mut row = col;
        let mut ph = self.half_phase as i64;
        let mut stride = 1usize;
        for &s in order {
            let (x, z) = self.get(s);
            let a = (col / stride) % n;
            ph += 2 * z as i64 * a as i64;
            let b = (a + x as usize) % n;
            row = row - a * stride + b * stride;
            stride *= n;
        }
        (row, half_phase(ph, self.n))
    }
}

/// Initial single-site state for [`Register::attach`].
#[derive(Clone, Debug)]
pub enum Init {
    Zero,
    Plus,
    Vector(Vec<C64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BasisKind {
    A(C64),
    B(C64),
    X,
    Z,
    Custom,
}

/// Orthonormal measurement family on one or more sites.
#[derive(Clone, Debug)]
pub struct MeasBasis {
    pub kind: BasisKind,
    pub sites: usize,
    pub vectors: Vec<Vec<C64>>,
}

/// `e^{i(ζL + ζ̄L†)/2}` for `L ∈ {X, Z}` as a dense N×N matrix.
pub fn rotation_matrix(n: u32, zeta: C64, along_x: bool) -> DMatrix<C64> {
    let nn = n as usize;
    let w = omega(n);
    let diag: Vec<C64> = (0..nn).map(|k| C64::from_polar(1.0, (zeta * w.powu(k as u32)).re)).collect();
    if !along_x {
        return DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag));
    }
    let f = fourier_matrix(n);
    &f * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * f.adjoint()
}

pub fn x_matrix(n: u32) -> DMatrix<C64> {
    PauliOp::x(n, 0, 1).matrix(&[0])
}

pub fn z_matrix(n: u32) -> DMatrix<C64> {
    PauliOp::z(n, 0, 1).matrix(&[0])
}

pub fn fourier_matrix(n: u32) -> DMatrix<C64> {
    let nn = n as usize;
    let norm = (n as f64).sqrt();
    DMatrix::from_fn(nn, nn, |b, a| half_phase(-2 * (a * b) as i64, n) / norm)
}

impl MeasBasis {
    /// `{ e^{i(ξX + ξ̄X†)/2} |s> }`; at N = 2 with real ξ this is `e^{iξX}|s>`.
    pub fn a_type(n: u32, xi: C64) -> Self {
        let u = rotation_matrix(n, xi, true);
        MeasBasis { kind: BasisKind::A(xi), sites: 1, vectors: columns(&u) }
    }

    /// `{ e^{i(ξZ + ξ̄Z†)/2} F|s> }`.
    pub fn b_type(n: u32, xi: C64) -> Self {
        let u = rotation_matrix(n, xi, false) * fourier_matrix(n);
        MeasBasis { kind: BasisKind::B(xi), sites: 1, vectors: columns(&u) }
    }

    pub fn x_basis(n: u32) -> Self {
        MeasBasis { kind: BasisKind::X, sites: 1, vectors: columns(&fourier_matrix(n)) }
    }

    pub fn z_basis(n: u32) -> Self {
        MeasBasis { kind: BasisKind::Z, sites: 1, vectors: columns(&DMatrix::identity(n as usize, n as usize)) }
    }

    /// Validates orthonormality and completeness of a user-supplied family.
    pub fn custom(n: u32, sites: usize, vectors: Vec<Vec<C64>>, eps: f64) -> Result<Self> {
        let dim = (n as usize).pow(sites as u32);
        if vectors.len() != dim || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::InvalidBasis(format!("need {dim} vectors of length {dim}")));
        }
        for (i, a) in vectors.iter().enumerate() {
            for (j, b) in vectors.iter().enumerate() {
                let ip: C64 = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (ip - want).norm() > eps {
                    return Err(Error::InvalidBasis(format!("<{i}|{j}> = {ip}")));
                }
            }
        }
        Ok(MeasBasis { kind: BasisKind::Custom, sites, vectors })
    }
}

fn columns(m: &DMatrix<C64>) -> Vec<Vec<C64>> {
    (0..m.ncols()).map(|c| m.column(c).iter().copied().collect()).collect()
}

/// How a measurement picks its outcome.
pub enum Outcome<'a, R: Rng> {
    Sample(&'a mut R),
    Forced(usize),
}

#[derive(Clone, Debug)]
pub struct Register {
    n: u32,
    sites: Vec<u64>,
    amps: Vec<C64>,
    eps: f64,
    cap: usize,
}

impl Register {
    pub fn new(n: u32) -> Self {
        Register { n, sites: Vec::new(), amps: vec![C64::new(1.0, 0.0)], eps: DEFAULT_EPS, cap: DEFAULT_CAP }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Register over `sites` holding `amps` (normalized on the way in).
    pub fn from_amplitudes(n: u32, sites: Vec<u64>, amps: Vec<C64>) -> Result<Self> {
        let dim = (n as usize).pow(sites.len() as u32);
        if amps.len() != dim {
            return Err(Error::Invalid(format!("expected {dim} amplitudes, got {}", amps.len())));
        }
        let mut seen = sites.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != sites.len() {
            return Err(Error::Invalid("repeated site label".into()));
        }
        let mut r = Register { n, sites, amps, eps: DEFAULT_EPS, cap: DEFAULT_CAP.max(seen.len()) };
        let norm = r.norm();
        if norm < r.eps {
            return Err(Error::Invalid("zero state".into()));
        }
        r.scale(1.0 / norm);
        Ok(r)
    }

    pub fn modulus(&self) -> u32 {
        self.n
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn sites(&self) -> &[u64] {
        &self.sites
    }

    pub fn amplitudes(&self) -> &[C64] {
        &self.amps
    }

    pub fn is_live(&self, site: u64) -> bool {
        self.sites.contains(&site)
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    fn scale(&mut self, k: f64) {
        for a in &mut self.amps {
            *a *= k;
        }
    }

    fn position(&self, site: u64) -> Result<usize> {
        self.sites.iter().position(|&s| s == site).ok_or(Error::DeadSite(site))
    }

    fn stride(&self, pos: usize) -> usize {
        (self.n as usize).pow(pos as u32)
    }

    pub fn attach(&mut self, site: u64, init: Init) -> Result<()> {
        if self.is_live(site) {
            return Err(Error::DuplicateSite(site));
        }
        if self.sites.len() >= self.cap {
            return Err(Error::SiteCap(self.cap));
        }
        let n = self.n as usize;
        let v = match init {
            Init::Zero => {
                let mut v = vec![C64::new(0.0, 0.0); n];
                v[0] = C64::new(1.0, 0.0);
                v
            }
            Init::Plus => vec![C64::new(1.0 / (n as f64).sqrt(), 0.0); n],
            Init::Vector(v) => {
                if v.len() != n {
                    return Err(Error::Invalid(format!("site vector of length {} for N = {n}", v.len())));
                }
                let norm = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
                if norm < self.eps {
                    return Err(Error::Invalid("zero site vector".into()));
                }
                v.into_iter().map(|a| a / norm).collect()
            }
        };
        let mut out = Vec::with_capacity(self.amps.len() * n);
        for c in &v {
            out.extend(self.amps.iter().map(|a| a * c));
        }
        self.amps = out;
        self.sites.push(site);
        Ok(())
    }

    fn map_diagonal(&mut self, positions: &[usize], f: impl Fn(&[usize]) -> C64) {
        let n = self.n as usize;
        let strides: Vec<usize> = positions.iter().map(|&p| self.stride(p)).collect();
        let mut digits = vec![0usize; positions.len()];
        for (i, a) in self.amps.iter_mut().enumerate() {
            for (d, s) in digits.iter_mut().zip(&strides) {
                *d = (i / s) % n;
            }
            *a *= f(&digits);
        }
    }

    /// `CZ^k|a,b> = ω^{k a b}|a,b>`.
    pub fn apply_cz(&mut self, a: u64, b: u64, power: i64) -> Result<()> {
        let pa = self.position(a)?;
        let pb = self.position(b)?;
        let n = self.n;
        let k = power.rem_euclid(n as i64);
        if k == 0 {
            return Ok(());
        }
        self.map_diagonal(&[pa, pb], |d| half_phase(2 * k * (d[0] * d[1]) as i64, n));
        Ok(())
    }

    pub fn apply_pauli(&mut self, p: &PauliOp) -> Result<()> {
        for s in p.sites() {
            self.position(s)?;
        }
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (i, a) in self.amps.iter().enumerate() {
            let (j, ph) = p.action(&self.sites, i);
            out[j] = a * ph;
        }
        self.amps = out;
        Ok(())
    }

    pub fn apply_single(&mut self, site: u64, m: &DMatrix<C64>) -> Result<()> {
        let p = self.position(site)?;
        let n = self.n as usize;
        assert_eq!(m.nrows(), n);
        let stride = self.stride(p);
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for base in 0..self.amps.len() {
            if !(base / stride).is_multiple_of(n) {
                continue;
            }
            for (a, b) in buf.iter_mut().enumerate() {
                *b = self.amps[base + a * stride];
            }
            for r in 0..n {
                self.amps[base + r * stride] = (0..n).map(|c| m[(r, c)] * buf[c]).sum();
            }
        }
        Ok(())
    }

    /// Applies `F^power` on one site.
    pub fn apply_fourier(&mut self, site: u64, power: i64) -> Result<()> {
        let f = fourier_matrix(self.n);
        let m = match power.rem_euclid(4) {
            0 => return self.position(site).map(|_| ()),
            1 => f,
            2 => &f * &f,
            _ => f.adjoint(),
        };
        self.apply_single(site, &m)
    }

    /// `Σ_k g(λ_k) Π_k` over the spectral projectors of a Pauli string `p`.
    fn apply_spectral(&mut self, p: &PauliOp, g: impl Fn(C64) -> C64) -> Result<()> {
        for s in p.sites() {
            self.position(s)?;
        }
        let n = self.n;
        let nn = n as usize;
        // P^N is a scalar; its eigenvalues are the N-th roots of that scalar.
        let pn = p.pow(n);
        debug_assert!(pn.is_identity());
        let root = half_phase(pn.phase_half_steps() as i64, n).powf(1.0 / n as f64);
        let lambdas: Vec<C64> = (0..nn).map(|k| root * omega(n).powu(k as u32)).collect();
        let coeffs: Vec<C64> = (0..nn)
            .map(|m| lambdas.iter().map(|&l| g(l) * l.powi(-(m as i32))).sum::<C64>() / n as f64)
            .collect();
        let mut acc: Vec<C64> = self.amps.iter().map(|a| a * coeffs[0]).collect();
        let mut cur = self.clone();
        for c in coeffs.iter().skip(1) {
            cur.apply_pauli(p)?;
            for (o, a) in acc.iter_mut().zip(&cur.amps) {
                *o += a * c;
            }
        }
        self.amps = acc;
        Ok(())
    }

    /// `exp(iθ (P + P†)/2)`; at N = 2 this is `exp(iθP)`.
    pub fn apply_exp(&mut self, p: &PauliOp, theta: f64) -> Result<()> {
        self.apply_rotation(p, C64::new(theta, 0.0))
    }

    /// `exp(i(ζP + ζ̄P†)/2)` for complex `ζ`.
    pub fn apply_rotation(&mut self, p: &PauliOp, zeta: C64) -> Result<()> {
        self.apply_spectral(p, |l| C64::from_polar(1.0, (zeta * l).re))
    }

    /// `exp(α (P + P†)/2)` followed by renormalization; returns the log of the
    /// norm that was divided out.
    pub fn apply_imaginary(&mut self, p: &PauliOp, alpha: f64) -> Result<f64> {
        self.apply_spectral(p, |l| C64::new((alpha * l.re).exp(), 0.0))?;
        self.renormalize()
    }

    /// Applies a dense matrix on `sites` (little-endian in the given order).
    /// Does not renormalize.
    pub fn apply_matrix(&mut self, sites: &[u64], m: &DMatrix<C64>) -> Result<()> {
        let positions: Vec<usize> = sites.iter().map(|&s| self.position(s)).collect::<Result<_>>()?;
        let n = self.n as usize;
        let k = n.pow(sites.len() as u32);
        assert_eq!(m.nrows(), k);
        let strides: Vec<usize> = positions.iter().map(|&p| self.stride(p)).collect();
        let offsets: Vec<usize> = (0..k)
            .map(|q| {
                let mut off = 0;
                let mut rem = q;
                for s in &strides {
                    off += (rem % n) * s;
                    rem /= n;
                }
                off
            })
            .collect();
        let mut buf = vec![C64::new(0.0, 0.0); k];
        for base in 0..self.amps.len() {
            if strides.iter().any(|s| (base / s) % n != 0) {
                continue;
            }
            for (q, b) in buf.iter_mut().enumerate() {
                *b = self.amps[base + offsets[q]];
            }
            for r in 0..k {
                self.amps[base + offsets[r]] = (0..k).map(|c| m[(r, c)] * buf[c]).sum();
            }
        }
        Ok(())
    }

    /// Divides out the norm; returns its logarithm.
    pub fn renormalize(&mut self) -> Result<f64> {
        let norm = self.norm();
        if norm < 1e-300 {
            return Err(Error::ImpossibleBranch(0.0));
        }
        self.scale(1.0 / norm);
        Ok(norm.ln())
    }

    /// Contracts `bra` (over `sites`, little-endian) into the state and removes
    /// those sites. The result is not renormalized.
    pub fn contract(&self, sites: &[u64], bra: &[C64]) -> Result<Register> {
        let positions: Vec<usize> = sites.iter().map(|&s| self.position(s)).collect::<Result<_>>()?;
        let n = self.n as usize;
        let rest: Vec<usize> = (0..self.sites.len()).filter(|p| !positions.contains(p)).collect();
        let strides: Vec<usize> = (0..self.sites.len()).map(|p| self.stride(p)).collect();
        // Weight of each live position in the bra index and in the output index.
        let mut bra_w = vec![0usize; self.sites.len()];
        let mut out_w = vec![0usize; self.sites.len()];
        let mut mul = 1;
        for &p in &positions {
            bra_w[p] = mul;
            mul *= n;
        }
        let mut mul = 1;
        for &p in &rest {
            out_w[p] = mul;
            mul *= n;
        }
        let mut out = vec![C64::new(0.0, 0.0); n.pow(rest.len() as u32)];
        for (i, a) in self.amps.iter().enumerate() {
            let (mut q, mut r) = (0, 0);
            for p in 0..strides.len() {
                let d = (i / strides[p]) % n;
                q += d * bra_w[p];
                r += d * out_w[p];
            }
            out[r] += bra[q].conj() * a;
        }
        Ok(Register {
            n: self.n,
            sites: rest.iter().map(|&p| self.sites[p]).collect(),
            amps: out,
            eps: self.eps,
            cap: self.cap,
        })
    }

    /// Born probabilities of every outcome of `basis` on `sites`.
    pub fn probabilities(&self, sites: &[u64], basis: &MeasBasis) -> Result<Vec<f64>> {
        if basis.sites != sites.len() {
            return Err(Error::InvalidBasis(format!("basis spans {} sites, {} given", basis.sites, sites.len())));
        }
        basis.vectors.iter().map(|v| Ok(self.contract(sites, v)?.norm().powi(2))).collect()
    }

    /// Measures `sites` in `basis` and removes them. Returns the outcome index
    /// and its probability.
    pub fn measure<R: Rng>(&mut self, sites: &[u64], basis: &MeasBasis, how: Outcome<'_, R>) -> Result<(usize, f64)> {
        if basis.sites != sites.len() {
            return Err(Error::InvalidBasis(format!("basis spans {} sites, {} given", basis.sites, sites.len())));
        }
        let branches: Vec<Register> =
            basis.vectors.iter().map(|v| self.contract(sites, v)).collect::<Result<_>>()?;
        let probs: Vec<f64> = branches.iter().map(|b| b.norm().powi(2)).collect();
        let k = match how {
            Outcome::Forced(k) => {
                if k >= probs.len() || probs[k] < self.eps * self.eps {
                    return Err(Error::ImpossibleBranch(probs.get(k).copied().unwrap_or(0.0)));
                }
                k
            }
            Outcome::Sample(rng) => sample_index(&probs, rng),
        };
        let mut post = branches.into_iter().nth(k).expect("outcome index");
        post.scale(1.0 / probs[k].sqrt());
        *self = post;
        Ok((k, probs[k]))
    }

    /// Removes a site whose marginal is pure, returning its state vector.
    pub fn detach(&mut self, site: u64) -> Result<Vec<C64>> {
        let p = self.position(site)?;
        let n = self.n as usize;
        let stride = self.stride(p);
        // Column of largest weight fixes the candidate site vector.
        let mut best = (0usize, -1.0f64);
        for base in 0..self.amps.len() {
            if !(base / stride).is_multiple_of(n) {
                continue;
            }
            let w: f64 = (0..n).map(|a| self.amps[base + a * stride].norm_sqr()).sum();
            if w > best.1 {
                best = (base, w);
            }
        }
        let norm = best.1.sqrt();
        let u: Vec<C64> = (0..n).map(|a| self.amps[best.0 + a * stride] / norm).collect();
        let reduced = self.contract(&[site], &u)?;
        if (reduced.norm() - 1.0).abs() > self.eps.sqrt() {
            return Err(Error::Entangled(site));
        }
        *self = reduced;
        Ok(u)
    }

    /// Amplitudes reordered to `order` (a permutation of the live sites).
    pub fn amplitudes_in(&self, order: &[u64]) -> Result<Vec<C64>> {
        if order.len() != self.sites.len() {
            return Err(Error::SiteMismatch);
        }
        let pos: Vec<usize> = order.iter().map(|&s| self.position(s)).collect::<Result<_>>()?;
        let n = self.n as usize;
        let mut out = vec![C64::new(0.0, 0.0); self.amps.len()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut i = 0;
            let mut rem = j;
            for &p in &pos {
                i += (rem % n) * self.stride(p);
                rem /= n;
            }
            *o = self.amps[i];
        }
        Ok(out)
    }

    pub fn relabel(&mut self, from: u64, to: u64) -> Result<()> {
        if self.is_live(to) {
            return Err(Error::DuplicateSite(to));
        }
        let p = self.position(from)?;
        self.sites[p] = to;
        Ok(())
    }

    pub fn expectation(&self, p: &PauliOp) -> Result<C64> {
        let mut q = self.clone();
        q.apply_pauli(p)?;
        Ok(self.amps.iter().zip(&q.amps).map(|(a, b)| a.conj() * b).sum())
    }
}

pub(crate) fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, p) in probs.iter().enumerate() {
        if u < *p {
            return k;
        }
        u -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// `|<a|b>|^2`, insensitive to global phase and to the order of live sites.
pub fn fidelity(a: &Register, b: &Register) -> Result<f64> {
    if a.n != b.n {
        return Err(Error::SiteMismatch);
    }
    let bv = b.amplitudes_in(&a.sites)?;
    let ip: C64 = a.amps.iter().zip(&bv).map(|(x, y)| x.conj() * y).sum();
    Ok(ip.norm_sqr() / (a.norm().powi(2) * b.norm().powi(2)))
}

/// Function of a diagonalizable unitary `u`, applied through its spectral
/// projectors onto eigenvalues `ω^k`: `Σ_k f_k Π_k(u)`.
pub fn spectral_function(u: &DMatrix<C64>, n: u32, f: &[C64]) -> DMatrix<C64> {
    let dim = u.nrows();
    let id = DMatrix::<C64>::identity(dim, dim);
    let mut out = DMatrix::zeros(dim, dim);
    let w = omega(n);
    for (k, fk) in f.iter().enumerate() {
        // Π_k = (1/N) Σ_m (ω^{-k} u)^m
        let step = u * w.powi(-(k as i32));
        let mut term = id.clone();
        let mut proj = id.clone();
        for _ in 1..n {
            term = &term * &step;
            proj += &term;
        }
        out += proj * (*fk / n as f64);
    }
    out
}

/// Largest entry deviation between the single-ancilla projection through a
/// `Π CZ^{ε_q}` fan and `N^{-1/2} f(Π Z^{-ε})† (Π Z^{ε})^s` on the neighbours.
/// `f` lists the phases of `f(X)` on the eigenvalues `ω^k` of `X`.
pub fn a_type_identity_deviation(n: u32, eps: &[i64], f: &[C64], s: usize) -> Result<f64> {
    let m = eps.len();
    let nbrs: Vec<u64> = (1..=m as u64).collect();
    let dim = (n as usize).pow(m as u32);
    let fx = spectral_function(&x_matrix(n), n, f);
    let bra: Vec<C64> = fx.column(s).iter().copied().collect();
    let mut lhs = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let mut amps = vec![C64::new(0.0, 0.0); dim];
        amps[col] = C64::new(1.0, 0.0);
        let mut r = Register::from_amplitudes(n, nbrs.clone(), amps)?;
        r.attach(0, Init::Plus)?;
        for (q, e) in nbrs.iter().zip(eps) {
            r.apply_cz(0, *q, *e)?;
        }
        let out = r.contract(&[0], &bra)?.amplitudes_in(&nbrs)?;
        for (row, v) in out.into_iter().enumerate() {
            lhs[(row, col)] = v;
        }
    }
    let w = PauliOp::z_string(n, nbrs.iter().zip(eps).map(|(q, e)| (*q, -e))).matrix(&nbrs);
    let byproduct = PauliOp::z_string(n, nbrs.iter().zip(eps).map(|(q, e)| (*q, *e))).pow(s as u32).matrix(&nbrs);
    let rhs = spectral_function(&w, n, f).adjoint() * byproduct * C64::new(1.0 / (n as f64).sqrt(), 0.0);
    Ok((lhs - rhs).iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Largest entry deviation between the teleportation map
/// `<s̃|_0 f(Z_0)† CZ^ε |ψ>_0 |+>_1` and `N^{-1/2} F^{-ε} Z^s f(Z)†` on site 1.
/// `f` lists the phases of `f(Z)` on the eigenvalues `ω^k` of `Z`.
pub fn b_type_identity_deviation(n: u32, eps: i64, f: &[C64], s: usize) -> Result<f64> {
    let nn = n as usize;
    let fz = spectral_function(&z_matrix(n), n, f);
    let bra: Vec<C64> = (fz * fourier_matrix(n)).column(s).iter().copied().collect();
    let mut lhs = DMatrix::zeros(nn, nn);
    for col in 0..nn {
        let mut amps = vec![C64::new(0.0, 0.0); nn];
        amps[col] = C64::new(1.0, 0.0);
        let mut r = Register::from_amplitudes(n, vec![0], amps)?;
        r.attach(1, Init::Plus)?;
        r.apply_cz(0, 1, eps)?;
        let out = r.contract(&[0], &bra)?;
        for (row, v) in out.amps.iter().enumerate() {
            lhs[(row, col)] = *v;
        }
    }
    let f_pow = {
        let f = fourier_matrix(n);
        let mut m = DMatrix::identity(nn, nn);
        for _ in 0..(-eps).rem_euclid(4) {
            m = &f * m;
        }
        m
    };
    let zs = PauliOp::z(n, 0, s as i64).matrix(&[0]);
    let rhs = f_pow * zs * spectral_function(&z_matrix(n), n, f).adjoint() * C64::new(1.0 / (n as f64).sqrt(), 0.0);
    Ok((lhs - rhs).iter().map(|z| z.norm()).fold(0.0, f64::max))
}
