//! Pfaffians of skew matrices, kernel block matrices and the factorial
//! moment formulas built from them.

use crate::kernels::{
    delta_n, EqualTimeFamily, EqualTimeKernel, KernelBlock, KernelError, Kernels, Prepared, SpaceTimePoint,
};
use crate::quad::gauss_legendre_on;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest dimension evaluated by the literal word expansion.
pub const MAX_EXPANSION_DIM: usize = 10;
/// Largest asymmetry `max |A + A^T|/2` tolerated when assembling kernel blocks.
pub const SKEW_REPAIR_LIMIT: f64 = 1e-6;
/// Upper limit on quadrature nodes per axis for moment integrals.
pub const MAX_NODES_PER_AXIS: usize = 24;
/// Cap on the total order of a GSE factorial moment.
pub const GSE_ORDER_CAP: usize = 6;
/// Cap on the total order of a small-time factorial moment.
pub const ORIGIN_ORDER_CAP: usize = 4;
/// A half-line is cut where `|K_12(x, x)|` falls below this level.
pub const TAIL_CUTOFF: f64 = 1e-12;
/// Longest stretch scanned for the half-line cut.
const MAX_TAIL_LENGTH: f64 = 32.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PfaffianError {
    #[error("Pfaffian of an odd {0}x{0} matrix")]
    OddDimension(usize),
    #[error("word expansion limited to dimension {MAX_EXPANSION_DIM}, got {0}")]
    ExpansionTooLarge(usize),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("kernel blocks fail skew symmetry by {0:.3e}")]
    NotSkew(f64),
    #[error("intervals [{0}, {1}] and [{2}, {3}] overlap")]
    OverlappingIntervals(f64, f64, f64, f64),
    #[error("total order {total} exceeds the cap {cap}")]
    DimensionCap { total: usize, cap: usize },
    #[error("invalid interval [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("invalid moment request: {0}")]
    InvalidRequest(String),
    #[error("K_12(x, x) = {value:.3e} at x = {reached} has not decayed")]
    TruncationFailure { reached: f64, value: f64 },
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type Result<T> = std::result::Result<T, PfaffianError>;

/// A real skew-symmetric matrix, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewMatrix {
    m: DMatrix<f64>,
}

impl SkewMatrix {
    /// Builds the matrix from its strict upper triangle `f(i, j)`, `i < j`.
    pub fn from_upper<F: FnMut(usize, usize) -> f64>(dim: usize, mut f: F) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i + 1..dim {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = -v;
            }
        }
        SkewMatrix { m }
    }

    /// Replaces `m` by `(m - m^T)/2` and returns the size of the repair,
    /// failing when it exceeds [`SKEW_REPAIR_LIMIT`].
    pub fn repaired(m: DMatrix<f64>) -> Result<(Self, f64)> {
        if m.nrows() != m.ncols() {
            return Err(PfaffianError::DimensionMismatch {
                left: m.nrows(),
                right: m.ncols(),
            });
        }
        let repair = (&m + m.transpose()).amax() / 2.0;
        if !(repair <= SKEW_REPAIR_LIMIT) {
            return Err(PfaffianError::NotSkew(repair));
        }
        Ok((
            SkewMatrix {
                m: (&m - m.transpose()) / 2.0,
            },
            repair,
        ))
    }

    pub fn zeros(dim: usize) -> Self {
        SkewMatrix {
            m: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Restriction to the rows and columns in `idx`, kept in the given order.
    pub fn principal(&self, idx: &[usize]) -> SkewMatrix {
        SkewMatrix::from_upper(idx.len(), |a, b| self.m[(idx[a], idx[b])])
    }

    pub fn add(&self, other: &SkewMatrix) -> Result<SkewMatrix> {
        if self.dim() != other.dim() {
            return Err(PfaffianError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(SkewMatrix { m: &self.m + &other.m })
    }

    pub fn neg(&self) -> SkewMatrix {
        SkewMatrix { m: -&self.m }
    }

    /// Swaps rows `i, j` and columns `i, j` together.
    pub fn swap(&mut self, i: usize, j: usize) {
        self.m.swap_rows(i, j);
        self.m.swap_columns(i, j);
    }

    pub fn determinant(&self) -> f64 {
        self.m.clone().determinant()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PfaffianMode {
    /// Sum over perfect matchings written as words, signed by inversions.
    Expansion,
    /// Skew Householder reduction to tridiagonal form.
    Tridiagonal,
}

pub fn pfaffian(a: &SkewMatrix, mode: PfaffianMode) -> Result<f64> {
    let n = a.dim();
    if n % 2 == 1 {
        return Err(PfaffianError::OddDimension(n));
    }
    match mode {
        PfaffianMode::Expansion => {
            if n > MAX_EXPANSION_DIM {
                return Err(PfaffianError::ExpansionTooLarge(n));
            }
            Ok(word_expansion(&a.m))
        }
        PfaffianMode::Tridiagonal => Ok(householder(a.m.clone())),
    }
}

fn word_expansion(m: &DMatrix<f64>) -> f64 {
    fn rec(m: &DMatrix<f64>, used: &mut [bool], word: &mut Vec<usize>, total: &mut f64) {
        let Some(i) = used.iter().position(|u| !u) else {
            let inversions = (0..word.len())
                .flat_map(|a| (a + 1..word.len()).map(move |b| (a, b)))
                .filter(|&(a, b)| word[a] > word[b])
                .count();
            let sign = if inversions % 2 == 0 { 1.0 } else { -1.0 };
            let prod: f64 = word.chunks(2).map(|p| m[(p[0], p[1])]).product();
            *total += sign * prod;
            return;
        };
        used[i] = true;
        for j in i + 1..used.len() {
            if used[j] {
                continue;
            }
            used[j] = true;
            word.push(i);
            word.push(j);
            rec(m, used, word, total);
            word.truncate(word.len() - 2);
            used[j] = false;
        }
        used[i] = false;
    }
    let mut total = 0.0;
    rec(m, &mut vec![false; m.nrows()], &mut Vec::new(), &mut total);
    total
}

/// Pfaffian by successive Householder reflections, each eliminating one
/// column below the subdiagonal. A reflection has determinant -1.
fn householder(mut a: DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 1.0;
    }
    let mut pf = 1.0;
    for i in 0..n - 2 {
        let len = n - i - 1;
        let x: Vec<f64> = (0..len).map(|r| a[(i + 1 + r, i)]).collect();
        let sigma: f64 = x[1..].iter().map(|v| v * v).sum();
        let alpha;
        if sigma == 0.0 {
            alpha = x[0];
        } else {
            let norm_x = (x[0] * x[0] + sigma).sqrt();
            let mut v = x.clone();
            if x[0] <= 0.0 {
                v[0] -= norm_x;
                alpha = norm_x;
            } else {
                v[0] += norm_x;
                alpha = -norm_x;
            }
            let nv = v.iter().map(|u| u * u).sum::<f64>().sqrt();
            v.iter_mut().for_each(|u| *u /= nv);
            // A' = P A P with P = 1 - 2 v v^T on the trailing block.
            let w: Vec<f64> = (0..len)
                .map(|r| 2.0 * (0..len).map(|c| a[(i + 1 + r, i + 1 + c)] * v[c]).sum::<f64>())
                .collect();
            for r in 0..len {
                for c in 0..len {
                    a[(i + 1 + r, i + 1 + c)] += v[r] * w[c] - w[r] * v[c];
                }
            }
            pf = -pf;
        }
        a[(i + 1, i)] = alpha;
        a[(i, i + 1)] = -alpha;
        for r in i + 2..n {
            a[(r, i)] = 0.0;
            a[(i, r)] = 0.0;
        }
        if i % 2 == 0 {
            pf *= -alpha;
        }
    }
    pf * a[(n - 2, n - 1)]
}

/// `Pf[A + B]` through the expansion over even subsets `I`,
/// `sum (-1)^{Sigma(I) - |I|/2} Pf[A_I] Pf[B_{I^c}]` with 1-based `Sigma`.
pub fn pfaffian_sum(a: &SkewMatrix, b: &SkewMatrix) -> Result<f64> {
    let n = a.dim();
    if b.dim() != n {
        return Err(PfaffianError::DimensionMismatch {
            left: n,
            right: b.dim(),
        });
    }
    if n % 2 == 1 {
        return Err(PfaffianError::OddDimension(n));
    }
    if n > 24 {
        return Err(PfaffianError::ExpansionTooLarge(n));
    }
    let mut total = 0.0;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() % 2 == 1 {
            continue;
        }
        let inside: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let outside: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
        let sigma: usize = inside.iter().map(|i| i + 1).sum::<usize>() - inside.len() / 2;
        let sign = if sigma % 2 == 0 { 1.0 } else { -1.0 };
        let pa = householder(a.principal(&inside).m);
        if pa == 0.0 {
            continue;
        }
        let pb = householder(b.principal(&outside).m);
        total += sign * pa * pb;
    }
    Ok(total)
}

/// A skew matrix assembled from kernel blocks, with the size of the
/// symmetrization that made it exactly skew.
#[derive(Debug, Clone)]
pub struct BlockMatrix {
    pub matrix: SkewMatrix,
    pub repair: f64,
}

/// The `2n x 2n` matrix whose `(i, j)` block is `family(p_i; p_j)`.
pub fn kernel_block_matrix<F>(mut family: F, points: &[SpaceTimePoint]) -> Result<BlockMatrix>
where
    F: FnMut(SpaceTimePoint, SpaceTimePoint) -> std::result::Result<KernelBlock, KernelError>,
{
    let n = points.len();
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for (i, &p) in points.iter().enumerate() {
        for (j, &q) in points.iter().enumerate() {
            let b = family(p, q)?;
            m[(2 * i, 2 * j)] = b.k11;
            m[(2 * i, 2 * j + 1)] = b.k12;
            m[(2 * i + 1, 2 * j)] = b.k21;
            m[(2 * i + 1, 2 * j + 1)] = b.k22;
        }
    }
    let (matrix, repair) = SkewMatrix::repaired(m)?;
    Ok(BlockMatrix { matrix, repair })
}

/// A closed interval `[lo, hi]`; `lo == hi` is allowed and has no mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalSpec {
    pub lo: f64,
    pub hi: f64,
}

impl IntervalSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(PfaffianError::InvalidInterval { lo, hi });
        }
        Ok(IntervalSpec { lo, hi })
    }

    fn overlaps(&self, o: &IntervalSpec) -> bool {
        self.lo.max(o.lo) < self.hi.min(o.hi)
    }
}

/// Region of an expected count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CountRegion {
    Interval(IntervalSpec),
    /// `[lo, inf)`
    HalfLine(f64),
}

/// Expected number of atoms of an equal-time family in `region`, by
/// Gauss-Legendre panels of unit width with `n_nodes` nodes each.
pub fn expected_count(kernels: &Kernels, family: EqualTimeFamily, region: CountRegion, n_nodes: usize) -> Result<f64> {
    let n_nodes = n_nodes.max(2);
    let (lo, hi) = match region {
        CountRegion::Interval(iv) => (iv.lo, iv.hi),
        CountRegion::HalfLine(lo) => (lo, tail_cut(kernels, family, lo)?),
    };
    if hi <= lo {
        return Ok(0.0);
    }
    let k = EqualTimeKernel::new(kernels, family, lo.abs().max(hi.abs()))?;
    let panels = (hi - lo).ceil().max(1.0) as usize;
    let h = (hi - lo) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let a = lo + p as f64 * h;
        let (xs, ws) = gauss_legendre_on(a, a + h, n_nodes);
        for (x, w) in xs.iter().zip(&ws) {
            let px = k.prepare(*x);
            total += w * k.k12(&px, &px)?;
        }
    }
    Ok(total)
}

/// First integer step `b > lo` with `|K_12(b, b)| < TAIL_CUTOFF`, checked
/// again one step further on so an oscillation zero is not mistaken for decay.
fn tail_cut(kernels: &Kernels, family: EqualTimeFamily, lo: f64) -> Result<f64> {
    let k = EqualTimeKernel::new(kernels, family, lo.abs().max(lo + MAX_TAIL_LENGTH))?;
    let diag = |x: f64| -> Result<f64> {
        let p = k.prepare(x);
        Ok(k.k12(&p, &p)?)
    };
    let mut b = lo + 1.0;
    while b <= lo + MAX_TAIL_LENGTH {
        if diag(b)?.abs() < TAIL_CUTOFF && diag(b + 1.0)?.abs() < TAIL_CUTOFF {
            return Ok(b);
        }
        b += 1.0;
    }
    Err(PfaffianError::TruncationFailure {
        reached: b,
        value: diag(lo + MAX_TAIL_LENGTH)?,
    })
}

/// Joint factorial moment request: orders `n_i` on pairwise disjoint intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRequest {
    pub intervals: Vec<IntervalSpec>,
    pub orders: Vec<usize>,
    pub nodes_per_axis: usize,
}

impl MomentRequest {
    pub fn single(interval: IntervalSpec, order: usize) -> Self {
        MomentRequest {
            intervals: vec![interval],
            orders: vec![order],
            nodes_per_axis: MAX_NODES_PER_AXIS,
        }
    }

    fn validate(&self, cap: usize) -> Result<usize> {
        if self.intervals.len() != self.orders.len() || self.intervals.is_empty() {
            return Err(PfaffianError::InvalidRequest(format!(
                "{} intervals for {} orders",
                self.intervals.len(),
                self.orders.len()
            )));
        }
        if self.orders.contains(&0) {
            return Err(PfaffianError::InvalidRequest("orders must be positive".into()));
        }
        if !(1..=MAX_NODES_PER_AXIS).contains(&self.nodes_per_axis) {
            return Err(PfaffianError::InvalidRequest(format!(
                "{} nodes per axis, expected 1..={MAX_NODES_PER_AXIS}",
                self.nodes_per_axis
            )));
        }
        for (i, a) in self.intervals.iter().enumerate() {
            IntervalSpec::new(a.lo, a.hi)?;
            for b in &self.intervals[i + 1..] {
                if a.overlaps(b) {
                    return Err(PfaffianError::OverlappingIntervals(a.lo, a.hi, b.lo, b.hi));
                }
            }
        }
        let total: usize = self.orders.iter().sum();
        if total > cap {
            return Err(PfaffianError::DimensionCap { total, cap });
        }
        Ok(total)
    }

    fn level_box(&self) -> f64 {
        self.intervals
            .iter()
            .fold(0.0, |m, iv| m.max(iv.lo.abs()).max(iv.hi.abs()))
    }
}

/// `Q_n(2x)` and its expansion `sum_k n! 2^{2k-n} / ((n-k)! (2k-n)!) Q_k(x)`
/// over `ceil(n/2) <= k <= n`, where `Q_n(x) = x!/(x-n)!`.
pub fn falling_factorial_doubling(n: u32, x: u32) -> (u128, u128) {
    let lhs = falling(2 * x, n);
    let rhs = (n.div_ceil(2)..=n)
        .map(|k| doubling_coefficient(n, k) * falling(x, k))
        .sum();
    (lhs, rhs)
}

fn falling(x: u32, n: u32) -> u128 {
    if n > x {
        return 0;
    }
    (0..n).map(|i| (x - i) as u128).product()
}

fn factorial(n: u32) -> u128 {
    (1..=n as u128).product()
}

/// `n! 2^{2k-n} / ((n-k)! (2k-n)!)`
fn doubling_coefficient(n: u32, k: u32) -> u128 {
    factorial(n) / (factorial(n - k) * factorial(2 * k - n)) << (2 * k - n)
}

/// Gauss-Legendre nodes of one interval with their kernel vectors.
struct AxisNodes {
    x: Vec<f64>,
    w: Vec<f64>,
    prepared: Vec<Prepared>,
}

fn axis_nodes(k: &EqualTimeKernel, iv: &IntervalSpec, n: usize) -> AxisNodes {
    let (x, w) = gauss_legendre_on(iv.lo, iv.hi, n);
    let prepared = x.iter().map(|&v| k.prepare(v)).collect();
    AxisNodes { x, w, prepared }
}

/// Kernel blocks between every pair of nodes, flattened over all intervals.
struct BlockTable {
    n: usize,
    blocks: Vec<KernelBlock>,
}

impl BlockTable {
    fn build(k: &EqualTimeKernel, axes: &[AxisNodes]) -> Result<Self> {
        let all: Vec<&Prepared> = axes.iter().flat_map(|a| a.prepared.iter()).collect();
        let n = all.len();
        let rows: Vec<Vec<KernelBlock>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| k.block(all[i], all[j]))
                    .collect::<std::result::Result<_, _>>()
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(BlockTable {
            n,
            blocks: rows.into_iter().flatten().collect(),
        })
    }

    fn get(&self, i: usize, j: usize) -> &KernelBlock {
        &self.blocks[i * self.n + j]
    }

    /// The `2m x 2m` matrix of blocks at the given global nodes.
    fn matrix(&self, nodes: &[usize]) -> DMatrix<f64> {
        let m = nodes.len();
        let mut a = DMatrix::zeros(2 * m, 2 * m);
        for (i, &p) in nodes.iter().enumerate() {
            for (j, &q) in nodes.iter().enumerate().skip(i) {
                let b = self.get(p, q);
                if i == j {
                    a[(2 * i, 2 * i + 1)] = b.k12;
                    a[(2 * i + 1, 2 * i)] = -b.k12;
                    continue;
                }
                a[(2 * i, 2 * j)] = b.k11;
                a[(2 * i, 2 * j + 1)] = b.k12;
                a[(2 * i + 1, 2 * j)] = b.k21;
                a[(2 * i + 1, 2 * j + 1)] = b.k22;
                a[(2 * j, 2 * i)] = -b.k11;
                a[(2 * j + 1, 2 * i)] = -b.k12;
                a[(2 * j, 2 * i + 1)] = -b.k21;
                a[(2 * j + 1, 2 * i + 1)] = -b.k22;
            }
        }
        a
    }
}

/// Strictly increasing `k`-subsets of `0..n`.
fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Joint factorial moments of the doubled GSE edge process,
/// `E[prod_i (2M[a_i,b_i])!/(2M[a_i,b_i] - n_i)!]`.
///
/// The Pfaffian of kernel blocks is symmetric in its points and vanishes
/// when two coincide, so each `k`-fold integral over one interval is `k!`
/// times the sum over strictly increasing node tuples.
pub fn gse_factorial_moment(kernels: &Kernels, req: &MomentRequest) -> Result<f64> {
    req.validate(GSE_ORDER_CAP)?;
    let k = EqualTimeKernel::new(kernels, EqualTimeFamily::Gse, req.level_box())?;
    let axes: Vec<AxisNodes> = req
        .intervals
        .iter()
        .map(|iv| axis_nodes(&k, iv, req.nodes_per_axis))
        .collect();
    let table = BlockTable::build(&k, &axes)?;
    let offsets: Vec<usize> = axes
        .iter()
        .scan(0, |acc, a| {
            let o = *acc;
            *acc += a.x.len();
            Some(o)
        })
        .collect();

    let ranges: Vec<Vec<u32>> = req
        .orders
        .iter()
        .map(|&n| ((n as u32).div_ceil(2)..=n as u32).collect())
        .collect();
    let mut total = 0.0;
    for ks in cartesian(&ranges) {
        let coeff: f64 = req
            .orders
            .iter()
            .zip(&ks)
            .map(|(&n, &k)| doubling_coefficient(n as u32, k) as f64 * factorial(k) as f64)
            .product();
        // Every interval contributes its increasing tuples of local nodes.
        let per_axis: Vec<Vec<Vec<usize>>> = ks
            .iter()
            .zip(&axes)
            .map(|(&k, a)| combinations(a.x.len(), k as usize))
            .collect();
        let lens: Vec<u32> = per_axis.iter().map(|c| c.len() as u32).collect();
        let choices: Vec<Vec<u32>> = lens.iter().map(|&l| (0..l).collect()).collect();
        let terms: Vec<f64> = cartesian(&choices)
            .par_iter()
            .map(|pick| {
                let mut nodes = Vec::new();
                let mut weight = 1.0;
                for (ax, &c) in pick.iter().enumerate() {
                    for &local in &per_axis[ax][c as usize] {
                        nodes.push(offsets[ax] + local);
                        weight *= axes[ax].w[local];
                    }
                }
                weight * householder(table.matrix(&nodes))
            })
            .collect();
        total += coeff * terms.iter().sum::<f64>();
    }
    Ok(total)
}

/// All tuples with entry `i` drawn from `ranges[i]`, in lexicographic order.
fn cartesian(ranges: &[Vec<u32>]) -> Vec<Vec<u32>> {
    ranges.iter().fold(vec![Vec::new()], |acc, r| {
        acc.iter()
            .flat_map(|prefix| {
                r.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

/// One pairing term of the small-time expansion: points `u_j < v_j` joined
/// by `delta_N`, with the Pfaffian sign of the word `(u_1, v_1, ...)`.
#[derive(Debug, Clone)]
struct Pairing {
    pairs: Vec<(usize, usize)>,
    /// `(-1)^r (-1)^w`
    sign: f64,
    /// Matrix rows kept in `Pf[K^N_{I^c}]`: the (2,2) rows of paired points go.
    keep: Vec<usize>,
}

/// Matchings of the even subsets of `0..n`, one per word of the expansion.
fn pairings(n: usize) -> Vec<Pairing> {
    let mut out = Vec::new();
    for r in 0..=n / 2 {
        for subset in combinations(n, 2 * r) {
            for word in matchings(&subset) {
                let inversions = (0..word.len())
                    .flat_map(|a| (a + 1..word.len()).map(move |b| (a, b)))
                    .filter(|&(a, b)| word[a] > word[b])
                    .count();
                let sign = if (inversions + r) % 2 == 0 { 1.0 } else { -1.0 };
                let keep = (0..2 * n)
                    .filter(|row| row % 2 == 0 || !subset.contains(&(row / 2)))
                    .collect();
                out.push(Pairing {
                    pairs: word.chunks(2).map(|p| (p[0], p[1])).collect(),
                    sign,
                    keep,
                });
            }
        }
    }
    out
}

/// Words `(u_1, v_1, ..., u_r, v_r)` over `set` with increasing `u` and `u_j < v_j`.
fn matchings(set: &[usize]) -> Vec<Vec<usize>> {
    if set.is_empty() {
        return vec![Vec::new()];
    }
    let first = set[0];
    let mut out = Vec::new();
    for (i, &v) in set.iter().enumerate().skip(1) {
        let rest: Vec<usize> = set[1..]
            .iter()
            .enumerate()
            .filter(|&(j, _)| j + 1 != i)
            .map(|(_, &u)| u)
            .collect();
        for mut tail in matchings(&rest) {
            let mut word = vec![first, v];
            word.append(&mut tail);
            out.push(word);
        }
    }
    out
}

/// Joint factorial moments of the small-time pinned process at time `t_n`,
/// summed over the pairings of its singular part: every word
/// `(u_1, v_1, ...)` contributes `(-1)^r (-1)^w` times the integral of
/// `prod_j delta_N(x_{u_j}, x_{v_j}) Pf[K^N_{I^c}(x)]` over the full box.
pub fn origin_factorial_moment(kernels: &Kernels, t_n: f64, req: &MomentRequest) -> Result<f64> {
    if !(t_n > 0.0 && t_n <= 0.5) {
        return Err(KernelError::InvalidTime {
            value: t_n,
            range: "(0, 1/2]",
        }
        .into());
    }
    let n = req.validate(ORIGIN_ORDER_CAP)?;
    let k = EqualTimeKernel::new(kernels, EqualTimeFamily::OriginRegular { t_n }, req.level_box())?;
    let axes: Vec<AxisNodes> = req
        .intervals
        .iter()
        .map(|iv| axis_nodes(&k, iv, req.nodes_per_axis))
        .collect();
    let table = BlockTable::build(&k, &axes)?;
    // Point p ranges over the global nodes of its interval.
    let mut point_nodes: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut offset = 0;
    for (a, &order) in axes.iter().zip(&req.orders) {
        for _ in 0..order {
            point_nodes.push((offset..offset + a.x.len()).collect());
        }
        offset += a.x.len();
    }
    let xs: Vec<f64> = axes.iter().flat_map(|a| a.x.iter().copied()).collect();
    let ws: Vec<f64> = axes.iter().flat_map(|a| a.w.iter().copied()).collect();
    let terms = pairings(n);
    let ranges: Vec<Vec<u32>> = point_nodes
        .iter()
        .map(|v| v.iter().map(|&g| g as u32).collect())
        .collect();
    let grid = cartesian(&ranges);
    let parts: Vec<f64> = grid
        .par_iter()
        .map(|pick| {
            let nodes: Vec<usize> = pick.iter().map(|&g| g as usize).collect();
            let weight: f64 = nodes.iter().map(|&g| ws[g]).product();
            let full = table.matrix(&nodes);
            let mut sum = 0.0;
            for term in &terms {
                let singular: f64 = term
                    .pairs
                    .iter()
                    .map(|&(u, v)| delta_n(t_n, xs[nodes[u]], xs[nodes[v]]))
                    .product();
                if singular == 0.0 {
                    continue;
                }
                let sub = full.select_rows(&term.keep).select_columns(&term.keep);
                sum += term.sign * singular * householder(sub);
            }
            weight * sum
        })
        .collect();
    Ok(parts.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_skew(dim: usize, rng: &mut ChaCha8Rng) -> SkewMatrix {
        SkewMatrix::from_upper(dim, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_by_two_pfaffian_is_the_entry() {
        let a = SkewMatrix::from_upper(2, |_, _| 3.5);
        for mode in [PfaffianMode::Expansion, PfaffianMode::Tridiagonal] {
            assert_eq!(pfaffian(&a, mode).unwrap(), 3.5);
        }
    }

    #[test]
    fn four_by_four_matches_the_three_term_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_skew(4, &mut rng);
        let g = |i: usize, j: usize| a.get(i - 1, j - 1);
        let want = g(1, 2) * g(3, 4) - g(1, 3) * g(2, 4) + g(1, 4) * g(2, 3);
        assert!((pfaffian(&a, PfaffianMode::Expansion).unwrap() - want).abs() < 1e-15);
        assert!((pfaffian(&a, PfaffianMode::Tridiagonal).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn reduction_agrees_with_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for dim in [2, 4, 6, 8, 10] {
            let a = random_skew(dim, &mut rng);
            let e = pfaffian(&a, PfaffianMode::Expansion).unwrap();
            let h = pfaffian(&a, PfaffianMode::Tridiagonal).unwrap();
            assert!((e - h).abs() <= 1e-10 * e.abs().max(1e-3), "{dim}: {e} {h}");
        }
    }

    #[test]
    fn square_is_the_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in [2, 4, 6, 8, 10, 12] {
            let a = random_skew(dim, &mut rng);
            let p = pfaffian(&a, PfaffianMode::Tridiagonal).unwrap();
            let d = a.determinant();
            assert!((p * p - d).abs() <= 1e-8 * d.abs(), "{dim}");
        }
    }

    #[test]
    fn odd_and_oversized_inputs_are_rejected() {
        let a = SkewMatrix::zeros(3);
        assert_eq!(
            pfaffian(&a, PfaffianMode::Tridiagonal),
            Err(PfaffianError::OddDimension(3))
        );
        let b = SkewMatrix::zeros(12);
        assert_eq!(
            pfaffian(&b, PfaffianMode::Expansion),
            Err(PfaffianError::ExpansionTooLarge(12))
        );
        assert_eq!(pfaffian(&b, PfaffianMode::Tridiagonal), Ok(0.0));
    }

    #[test]
    fn sum_formula_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_skew(6, &mut rng);
        let pf = pfaffian(&a, PfaffianMode::Expansion).unwrap();
        assert!((pfaffian_sum(&a, &SkewMatrix::zeros(6)).unwrap() - pf).abs() < 1e-13);
        assert!(pfaffian_sum(&a, &a.neg()).unwrap().abs() < 1e-13);
        assert!(matches!(
            pfaffian_sum(&a, &SkewMatrix::zeros(4)),
            Err(PfaffianError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn repair_rejects_large_asymmetry() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = 1.0;
        m[(1, 0)] = -1.0 + 1e-3;
        assert!(matches!(SkewMatrix::repaired(m), Err(PfaffianError::NotSkew(_))));
    }

    #[test]
    fn single_point_block_matrix_is_its_k12() {
        let k = Kernels::default();
        let p = SpaceTimePoint::new(0.0, 0.0);
        let b = kernel_block_matrix(|p, q| k.gse(p.x, q.x), &[p]).unwrap();
        let k12 = k.gse(0.0, 0.0).unwrap().k12;
        assert!((pfaffian(&b.matrix, PfaffianMode::Expansion).unwrap() - k12).abs() < 1e-12);
        assert!(b.repair < 1e-12);
    }

    #[test]
    fn coincident_points_have_vanishing_pfaffian() {
        let k = Kernels::default();
        let p = SpaceTimePoint::new(0.0, 0.4);
        let b = kernel_block_matrix(|p, q| k.gse(p.x, q.x), &[p, p]).unwrap();
        assert!(b.matrix.determinant().abs() < 1e-16);
        assert!(pfaffian(&b.matrix, PfaffianMode::Tridiagonal).unwrap().abs() < 1e-8);
    }

    #[test]
    fn two_point_block_pfaffian_squares_to_determinant() {
        let k = Kernels::default();
        let pts = [SpaceTimePoint::new(0.5, 0.1), SpaceTimePoint::new(1.0, -0.3)];
        let b = kernel_block_matrix(|p, q| k.hs_inf(p.t, p.x, q.t, q.x), &pts).unwrap();
        let p = pfaffian(&b.matrix, PfaffianMode::Tridiagonal).unwrap();
        let d = b.matrix.determinant();
        assert!((p * p - d).abs() <= 1e-8 * d.abs());
    }

    #[test]
    fn doubling_identity_examples() {
        assert_eq!(falling_factorial_doubling(1, 3), (6, 6));
        assert_eq!(falling_factorial_doubling(2, 2), (12, 12));
        assert_eq!(falling_factorial_doubling(5, 0), (0, 0));
    }

    #[test]
    fn word_signs_match_permutation_signs() {
        // (1,3,2,4) has one inversion; as a permutation it is one transposition.
        let a = SkewMatrix::from_upper(4, |i, j| ((i + 1) * 10 + j + 1) as f64);
        let e = pfaffian(&a, PfaffianMode::Expansion).unwrap();
        let want = 12.0 * 34.0 - 13.0 * 24.0 + 14.0 * 23.0;
        assert_eq!(e, want);
        let signs: Vec<f64> = pairings(2).iter().map(|p| p.sign).collect();
        // r = 0, then the single pair with (-1)^1.
        assert_eq!(signs, vec![1.0, -1.0]);
    }

    #[test]
    fn interval_validation() {
        assert!(IntervalSpec::new(1.0, 0.0).is_err());
        let req = MomentRequest {
            intervals: vec![
                IntervalSpec::new(0.0, 2.0).unwrap(),
                IntervalSpec::new(1.0, 3.0).unwrap(),
            ],
            orders: vec![1, 1],
            nodes_per_axis: 8,
        };
        assert!(matches!(
            gse_factorial_moment(&Kernels::default(), &req),
            Err(PfaffianError::OverlappingIntervals(..))
        ));
        let big = MomentRequest::single(IntervalSpec::new(0.0, 1.0).unwrap(), 7);
        assert_eq!(
            gse_factorial_moment(&Kernels::default(), &big),
            Err(PfaffianError::DimensionCap { total: 7, cap: 6 })
        );
    }

    #[test]
    fn first_gse_moment_is_twice_the_diagonal_integral() {
        let k = Kernels::default();
        let iv = IntervalSpec::new(-1.0, 1.0).unwrap();
        let got = gse_factorial_moment(&k, &MomentRequest::single(iv, 1)).unwrap();
        // Pointwise kernel evaluations on an independent 40-node rule.
        let (xs, ws) = gauss_legendre_on(-1.0, 1.0, 40);
        let want: f64 = 2.0
            * xs.iter()
                .zip(&ws)
                .map(|(&x, w)| w * k.gse(x, x).unwrap().k12)
                .sum::<f64>();
        assert!((got - want).abs() < 1e-10, "{got} {want}");
        let empty = IntervalSpec::new(0.5, 0.5).unwrap();
        assert_eq!(gse_factorial_moment(&k, &MomentRequest::single(empty, 2)).unwrap(), 0.0);
    }

    #[test]
    fn first_origin_moment_is_the_diagonal_integral() {
        let k = Kernels::default();
        let iv = IntervalSpec::new(-1.0, 1.0).unwrap();
        let got = origin_factorial_moment(&k, 0.2, &MomentRequest::single(iv, 1)).unwrap();
        let (xs, ws) = gauss_legendre_on(-1.0, 1.0, 40);
        let want: f64 = xs
            .iter()
            .zip(&ws)
            .map(|(&x, w)| w * k.origin_split(0.2, x, x).unwrap().regular.k12)
            .sum();
        assert!((got - want).abs() < 1e-10);
        assert!(matches!(
            origin_factorial_moment(&k, 0.6, &MomentRequest::single(iv, 1)),
            Err(PfaffianError::Kernel(KernelError::InvalidTime { .. }))
        ));
    }

    #[test]
    fn origin_expansion_matches_the_direct_pfaffian() {
        // The pairing expansion against Pf[K^N + Delta^N] summed on the same grid.
        let k = Kernels::default();
        let t_n = 0.2;
        let iv = IntervalSpec::new(-1.0, 0.5).unwrap();
        let req = MomentRequest {
            nodes_per_axis: 10,
            ..MomentRequest::single(iv, 2)
        };
        let got = origin_factorial_moment(&k, t_n, &req).unwrap();
        let (xs, ws) = gauss_legendre_on(-1.0, 0.5, 10);
        let mut want = 0.0;
        for (i, &x) in xs.iter().enumerate() {
            for (j, &y) in xs.iter().enumerate() {
                let pts = [SpaceTimePoint::new(t_n, x), SpaceTimePoint::new(t_n, y)];
                let b = kernel_block_matrix(|p, q| k.hs_inf(t_n, p.x, t_n, q.x), &pts).unwrap();
                want += ws[i] * ws[j] * pfaffian(&b.matrix, PfaffianMode::Expansion).unwrap();
            }
        }
        assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} {want}");
    }

    #[test]
    fn half_line_count_matches_closed_form_tail() {
        let k = Kernels::default();
        let p = crate::kernels::BoundaryParam::new(2.0);
        let direct = expected_count(
            &k,
            EqualTimeFamily::Varpi { varpi: 2.0, t: 1.0 },
            CountRegion::HalfLine(0.0),
            24,
        )
        .unwrap();
        let closed = k.tail_count(p, 1.0, 0.0).unwrap();
        assert!((direct - closed).abs() < 1e-6, "{direct} {closed}");
        let z = expected_count(
            &k,
            EqualTimeFamily::Gse,
            CountRegion::Interval(IntervalSpec::new(1.0, 1.0).unwrap()),
            8,
        );
        assert_eq!(z.unwrap(), 0.0);
    }
}
