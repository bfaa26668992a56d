//! Monte Carlo samplers: reverse Brownian motions, 3D Bessel bridges,
//! avoiding and pinned line ensembles, and GSE spectra at the soft edge.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::FRAC_1_SQRT_2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("rejection budget of {attempts} proposals exhausted (acceptance below {acceptance:.3e})")]
    RejectionBudgetExceeded { attempts: u64, acceptance: f64 },
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// Default proposal budget per accepted sample for `k` conditioned curves.
pub fn default_max_rejects(k: usize) -> u64 {
    if k <= 2 {
        1_000_000
    } else {
        10_000_000
    }
}

/// Strictly increasing times on `[0, b]` including both endpoints.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(EnsembleError::InvalidGrid("need 0 and b > 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || !times[times.len() - 1].is_finite() {
            return Err(EnsembleError::InvalidGrid("times must increase strictly".into()));
        }
        Ok(TimeGrid { times })
    }

    /// `steps + 1` equally spaced times.
    pub fn uniform(b: f64, steps: usize) -> Result<Self> {
        if !(b > 0.0) || steps == 0 {
            return Err(EnsembleError::InvalidGrid(format!("b = {b}, steps = {steps}")));
        }
        let mut times: Vec<f64> = (0..=steps).map(|j| b * j as f64 / steps as f64).collect();
        times[steps] = b;
        TimeGrid::new(times)
    }

    pub fn b(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the grid time closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        let mut best = 0;
        for (j, &s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = j;
            }
        }
        best
    }
}

/// Seed and sample index; the pair fixes the random stream of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub index: u64,
}

impl SeedRecord {
    pub fn rng(&self) -> ChaCha8Rng {
        substream(self.seed, self.index)
    }
}

/// Independent ChaCha stream number `index` under `seed`.
pub fn substream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Seed for an independent batch `tag` under `seed`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut rng = substream(seed, u64::MAX - tag);
    rng.next_u64()
}

/// Runs `f` on sample indices `0..n` in parallel. Each index owns its stream,
/// so the output does not depend on the worker count.
pub fn sample_many<T, F>(seed: u64, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(SeedRecord) -> T + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map(|index| f(SeedRecord { seed, index }))
        .collect()
}

/// A lower boundary for the bottom curve, given on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Floor {
    NegInfinity,
    Path(Vec<f64>),
}

impl Floor {
    fn at(&self, j: usize) -> f64 {
        match self {
            Floor::NegInfinity => f64::NEG_INFINITY,
            Floor::Path(g) => g[j],
        }
    }

    fn check(&self, grid: &TimeGrid, bottom: f64) -> Result<()> {
        if let Floor::Path(g) = self {
            if g.len() != grid.len() {
                return Err(EnsembleError::InvalidParameter(format!(
                    "floor has {} values on a grid of {}",
                    g.len(),
                    grid.len()
                )));
            }
            if !(g[g.len() - 1] < bottom) {
                return Err(EnsembleError::InvalidParameter(
                    "floor must end below the lowest y".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSample {
    pub times: Vec<f64>,
    /// One row per curve, top curve first.
    pub paths: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub seed: SeedRecord,
    /// Proposals rejected before acceptance.
    pub rejections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectrumSample {
    pub n: usize,
    /// Descending eigenvalues under the weight `prod e^{-2 x^2}`.
    pub raw: Vec<f64>,
    /// `2^{7/6} N^{1/6} (raw - (2N)^{1/2})`
    pub scaled: Vec<f64>,
    pub seed: SeedRecord,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Reverse Brownian motion with drift `mu` ending at `y` at time `b`:
/// `path(t) = y + W_{b-t} + mu (b - t)`.
pub fn sample_reverse_bm<R: Rng>(y: f64, mu: f64, grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
    let t = grid.times();
    let b = grid.b();
    let n = t.len();
    let mut path = vec![0.0; n];
    path[n - 1] = y;
    let mut w = 0.0;
    for j in (0..n - 1).rev() {
        let dt = t[j + 1] - t[j];
        w += dt.sqrt() * normal(rng);
        path[j] = y + w + mu * (b - t[j]);
    }
    path
}

/// 3D Brownian bridge from `a` at time 0 to `c_at_b` at the last grid time.
fn bridge3<R: Rng>(a: [f64; 3], c: [f64; 3], grid: &TimeGrid, rng: &mut R) -> Vec<[f64; 3]> {
    let t = grid.times();
    let b = grid.b();
    let mut w = vec![[0.0; 3]; t.len()];
    for j in 1..t.len() {
        let s = (t[j] - t[j - 1]).sqrt();
        for d in 0..3 {
            w[j][d] = w[j - 1][d] + s * normal(rng);
        }
    }
    let wb = w[t.len() - 1];
    w.iter()
        .zip(t)
        .map(|(wj, &tj)| {
            let r = tj / b;
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = a[d] + wj[d] - r * wb[d] + r * (c[d] - a[d]);
            }
            p
        })
        .collect()
}

/// Norm process of a 3D Brownian bridge between points of norms `a` and `c`.
/// Given the start `(a, 0, 0)`, the endpoint direction on the sphere of
/// radius `c` has the von Mises-Fisher law with concentration `a c / b`.
fn bes3_bridge<R: Rng>(a: f64, c: f64, grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
    let kappa = a * c / grid.b();
    let u: f64 = rng.random();
    let cos = if kappa < 1e-12 {
        2.0 * u - 1.0
    } else {
        (1.0 + (u + (1.0 - u) * (-2.0 * kappa).exp()).ln() / kappa).clamp(-1.0, 1.0)
    };
    let phi = 2.0 * std::f64::consts::PI * rng.random::<f64>();
    let sin = (1.0 - cos * cos).sqrt();
    let end = [c * cos, c * sin * phi.cos(), c * sin * phi.sin()];
    let n = grid.len();
    let mut path: Vec<f64> = bridge3([a, 0.0, 0.0], end, grid, rng)
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .collect();
    path[0] = a;
    path[n - 1] = c;
    path
}

/// 3D Bessel bridge on `[0, b]` from 0 to `z`, as the norm of a 3D Brownian
/// bridge from the origin to `(z, 0, 0)`.
pub fn sample_bessel_bridge<R: Rng>(z: f64, grid: &TimeGrid, rng: &mut R) -> Result<Vec<f64>> {
    if !(z > 0.0) {
        return Err(EnsembleError::InvalidParameter(format!(
            "bridge endpoint {z} must be positive"
        )));
    }
    Ok(bes3_bridge(0.0, z, grid, rng))
}

/// `N(mean, sd^2)` conditioned on `(0, inf)`, with an exponential proposal
/// once the cut sits far in the left tail.
fn positive_normal<R: Rng>(mean: f64, sd: f64, rng: &mut R) -> f64 {
    let alpha = -mean / sd;
    if alpha < 0.5 {
        loop {
            let v = mean + sd * normal(rng);
            if v > 0.0 {
                return v;
            }
        }
    }
    let lambda = (alpha + (alpha * alpha + 4.0).sqrt()) / 2.0;
    loop {
        let u: f64 = rng.random();
        let z = alpha - (1.0 - u).ln() / lambda;
        let accept: f64 = rng.random();
        if accept <= (-(z - lambda) * (z - lambda) / 2.0).exp() {
            return mean + sd * z;
        }
    }
}

fn descending(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] > w[1])
}

/// `k` reverse Brownian motions with drifts `mu` ending at `y`, conditioned
/// to stay ordered above the floor at every grid time.
///
/// Two curves without a floor are sampled exactly: `(B_1 - B_2)/sqrt 2` is a
/// drifted Brownian motion killed at 0 and independent of `(B_1 + B_2)/sqrt 2`.
/// Its time-0 value has the density `e^{m v}(p_b(v - a) - p_b(v + a))` and,
/// given both ends, it is a 3D Bessel bridge. Otherwise proposals from the
/// free law are rejected until one is ordered.
pub fn sample_avoiding_ensemble(
    y: &[f64],
    mu: &[f64],
    floor: &Floor,
    grid: &TimeGrid,
    seed: SeedRecord,
    max_rejects: u64,
) -> Result<EnsembleSample> {
    let k = y.len();
    if k == 0 || mu.len() != k {
        return Err(EnsembleError::InvalidParameter(format!(
            "{k} levels with {} drifts",
            mu.len()
        )));
    }
    if !descending(y) {
        return Err(EnsembleError::InvalidParameter("y must be strictly descending".into()));
    }
    floor.check(grid, y[k - 1])?;
    let mut rng = seed.rng();
    let sample = |paths, rejections| EnsembleSample {
        times: grid.times().to_vec(),
        paths,
        y: y.to_vec(),
        mu: mu.to_vec(),
        seed,
        rejections,
    };
    if k == 2 && *floor == Floor::NegInfinity {
        let b = grid.b();
        let a = (y[0] - y[1]) * FRAC_1_SQRT_2;
        let m = (mu[0] - mu[1]) * FRAC_1_SQRT_2;
        let mut rejections = 0;
        // Proposal N(a + m b, b) on (0, inf), kept with probability 1 - e^{-2 a v / b}.
        let c = loop {
            let v = positive_normal(a + m * b, b.sqrt(), &mut rng);
            let keep: f64 = rng.random();
            if keep < -(-2.0 * a * v / b).exp_m1() {
                break v;
            }
            rejections += 1;
            if rejections >= max_rejects {
                return Err(EnsembleError::RejectionBudgetExceeded {
                    attempts: rejections,
                    acceptance: 1.0 / rejections as f64,
                });
            }
        };
        // Time 0 carries c and time b carries a.
        let v = bes3_bridge(c, a, grid, &mut rng);
        let u = sample_reverse_bm(
            (y[0] + y[1]) * FRAC_1_SQRT_2,
            (mu[0] + mu[1]) * FRAC_1_SQRT_2,
            grid,
            &mut rng,
        );
        let top = u
            .iter()
            .zip(&v)
            .map(|(u, v)| (u + v) * FRAC_1_SQRT_2)
            .collect::<Vec<_>>();
        let mut bottom: Vec<f64> = u.iter().zip(&v).map(|(u, v)| (u - v) * FRAC_1_SQRT_2).collect();
        let last = bottom.len() - 1;
        bottom[last] = y[1];
        let mut top = top;
        top[last] = y[0];
        return Ok(sample(vec![top, bottom], rejections));
    }
    for rejections in 0..max_rejects {
        let paths: Vec<Vec<f64>> = (0..k).map(|i| sample_reverse_bm(y[i], mu[i], grid, &mut rng)).collect();
        let ok = (0..grid.len()).all(|j| {
            (0..k).all(|i| {
                let below = if i + 1 < k { paths[i + 1][j] } else { floor.at(j) };
                paths[i][j] > below
            })
        });
        if ok {
            return Ok(sample(paths, rejections));
        }
    }
    Err(EnsembleError::RejectionBudgetExceeded {
        attempts: max_rejects,
        acceptance: 1.0 / max_rejects as f64,
    })
}

/// `2k` curves built pairwise as `2^{-1/2}(U_i +- V_i)` from driftless
/// reverse Brownian motions `U_i` and Bessel bridges `V_i`, conditioned on
/// `B_{2i} > B_{2i+1}` at interior grid times with `B_{2k+1}` the floor.
pub fn sample_pinned_ensemble(
    y: &[f64],
    floor: &Floor,
    grid: &TimeGrid,
    seed: SeedRecord,
    max_rejects: u64,
) -> Result<EnsembleSample> {
    let n = y.len();
    if n == 0 || n % 2 == 1 {
        return Err(EnsembleError::InvalidParameter(format!("need 2k levels, got {n}")));
    }
    if !descending(y) {
        return Err(EnsembleError::InvalidParameter("y must be strictly descending".into()));
    }
    floor.check(grid, y[n - 1])?;
    let k = n / 2;
    let last = grid.len() - 1;
    let mut rng = seed.rng();
    for rejections in 0..max_rejects {
        let mut paths = Vec::with_capacity(n);
        for i in 0..k {
            let u = sample_reverse_bm((y[2 * i] + y[2 * i + 1]) * FRAC_1_SQRT_2, 0.0, grid, &mut rng);
            let v = bes3_bridge(0.0, (y[2 * i] - y[2 * i + 1]) * FRAC_1_SQRT_2, grid, &mut rng);
            let mut top: Vec<f64> = u.iter().zip(&v).map(|(u, v)| (u + v) * FRAC_1_SQRT_2).collect();
            let mut bottom: Vec<f64> = u.iter().zip(&v).map(|(u, v)| (u - v) * FRAC_1_SQRT_2).collect();
            top[last] = y[2 * i];
            bottom[last] = y[2 * i + 1];
            // Both members of a pair start at U(0)/sqrt 2.
            bottom[0] = top[0];
            paths.push(top);
            paths.push(bottom);
        }
        let ok = (1..last).all(|j| {
            (0..k).all(|i| {
                let below = if i + 1 < k { paths[2 * i + 2][j] } else { floor.at(j) };
                paths[2 * i + 1][j] > below
            })
        });
        if ok {
            return Ok(EnsembleSample {
                times: grid.times().to_vec(),
                paths,
                y: y.to_vec(),
                mu: vec![0.0; n],
                seed,
                rejections,
            });
        }
    }
    Err(EnsembleError::RejectionBudgetExceeded {
        attempts: max_rejects,
        acceptance: 1.0 / max_rejects as f64,
    })
}

/// Diagonal and off-diagonal of the beta = 4 tridiagonal model: `N(0, 1)`
/// on the diagonal and `chi_{4(n-i)}/sqrt 2` beside it. Its eigenvalues
/// `lambda` carry the weight `e^{-lambda^2/2}`, so `x = lambda/2` carries
/// `e^{-2 x^2}`.
fn gse_tridiagonal(n: usize, seed: SeedRecord) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(2..=1000).contains(&n) {
        return Err(EnsembleError::InvalidParameter(format!(
            "matrix size {n} outside 2..=1000"
        )));
    }
    let mut rng = seed.rng();
    let diag: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let off = (0..n - 1)
        .map(|i| {
            let dof = 4.0 * (n - 1 - i) as f64;
            ChiSquared::new(dof)
                .expect("positive degrees of freedom")
                .sample(&mut rng)
                .sqrt()
                * FRAC_1_SQRT_2
        })
        .collect();
    Ok((diag, off))
}

fn edge_scale(n: usize) -> (f64, f64) {
    (
        2f64.powf(7.0 / 6.0) * (n as f64).powf(1.0 / 6.0),
        (2.0 * n as f64).sqrt(),
    )
}

/// GSE eigenvalues and their edge-scaled atoms.
pub fn sample_gse_spectrum(n: usize, seed: SeedRecord) -> Result<SpectrumSample> {
    let (diag, off) = gse_tridiagonal(n, seed)?;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = diag[i];
    }
    for i in 0..n - 1 {
        h[(i, i + 1)] = off[i];
        h[(i + 1, i)] = off[i];
    }
    let mut raw: Vec<f64> = h.symmetric_eigenvalues().iter().map(|l| l / 2.0).collect();
    raw.sort_by(|a, b| b.total_cmp(a));
    let (scale, centre) = edge_scale(n);
    let scaled = raw.iter().map(|x| scale * (x - centre)).collect();
    Ok(SpectrumSample { n, raw, scaled, seed })
}

/// Eigenvalues of the tridiagonal matrix below `v`, by the Sturm sequence.
fn sturm_below(diag: &[f64], off: &[f64], v: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0;
    for i in 0..diag.len() {
        let b2 = if i == 0 { 0.0 } else { off[i - 1] * off[i - 1] };
        d = diag[i] - v - b2 / d;
        if d == 0.0 {
            d = -f64::EPSILON * (diag[i].abs() + v.abs()).max(1.0);
        }
        if d < 0.0 {
            count += 1;
        }
    }
    count
}

/// Scaled-atom counts in each region for the spectrum drawn from `seed`,
/// without diagonalizing: the same draws as [`sample_gse_spectrum`].
pub fn sample_gse_edge_counts(n: usize, regions: &[Region], seed: SeedRecord) -> Result<Vec<usize>> {
    let (diag, off) = gse_tridiagonal(n, seed)?;
    let (scale, centre) = edge_scale(n);
    // Scaled level u sits at lambda = 2 (centre + u / scale).
    let below = |u: f64| -> usize {
        if u == f64::NEG_INFINITY {
            0
        } else if u == f64::INFINITY {
            n
        } else {
            sturm_below(&diag, &off, 2.0 * (centre + u / scale))
        }
    };
    Ok(regions
        .iter()
        .map(|r| match *r {
            Region::Interval { lo, hi } => below(hi).saturating_sub(below(lo)),
            Region::HalfLine { lo } => n - below(lo),
            Region::Line => n,
        })
        .collect())
}

/// Region of the line used for counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Region {
    /// `[lo, hi)`
    Interval {
        lo: f64,
        hi: f64,
    },
    /// `[lo, inf)`
    HalfLine {
        lo: f64,
    },
    Line,
}

impl Region {
    pub fn contains(&self, x: f64) -> bool {
        match *self {
            Region::Interval { lo, hi } => lo <= x && x < hi,
            Region::HalfLine { lo } => lo <= x,
            Region::Line => true,
        }
    }
}

/// Number of atoms in `region`.
pub fn count_in(atoms: &[f64], region: Region) -> usize {
    atoms.iter().filter(|&&a| region.contains(a)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::SQRT_2;

    fn mean_sd(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn grids_are_validated() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        let g = TimeGrid::uniform(2.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.nearest(1.1), 2);
    }

    #[test]
    fn reverse_bm_ends_at_y_with_the_right_law_at_zero() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let starts = sample_many(5, 20_000, |s| {
            let p = sample_reverse_bm(0.5, 1.5, &g, &mut s.rng());
            assert_eq!(p[8], 0.5);
            p[0]
        });
        let (m, sd) = mean_sd(&starts);
        let se = sd / (starts.len() as f64).sqrt();
        assert!((m - 2.0).abs() < 3.0 * se + 1e-12, "{m}");
        assert!((sd - 1.0).abs() < 0.03);
    }

    #[test]
    fn bessel_bridge_hits_its_ends_and_stays_positive() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let mut rng = substream(3, 0);
        for _ in 0..500 {
            let p = sample_bessel_bridge(1.0, &g, &mut rng).unwrap();
            assert_eq!(p[0], 0.0);
            assert_eq!(p[32], 1.0);
            assert!(p[1..32].iter().all(|&v| v > 0.0));
        }
        assert!(sample_bessel_bridge(0.0, &g, &mut rng).is_err());
    }

    #[test]
    fn positive_normal_matches_the_truncated_mean() {
        // E[X | X > 0] for N(mu, 1) is mu + phi(mu)/Phi(mu).
        let mut rng = substream(4, 0);
        for mu in [1.0, -3.0] {
            let v: Vec<f64> = (0..40_000).map(|_| positive_normal(mu, 1.0, &mut rng)).collect();
            let (m, sd) = mean_sd(&v);
            let phi = (-mu * mu / 2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let cdf = 0.5 * statrs::function::erf::erfc(-mu / SQRT_2);
            let want = mu + phi / cdf;
            assert!((m - want).abs() < 4.0 * sd / 200.0, "{mu}: {m} {want}");
        }
    }

    #[test]
    fn pinned_pair_is_exactly_pinned_and_never_rejects() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        for i in 0..50 {
            let s = sample_pinned_ensemble(
                &[1.0, 0.0],
                &Floor::NegInfinity,
                &g,
                SeedRecord { seed: 7, index: i },
                1,
            )
            .unwrap();
            assert_eq!(s.rejections, 0);
            assert_eq!(s.paths[0][0], s.paths[1][0]);
            assert_eq!(s.paths[0][64], 1.0);
            assert_eq!(s.paths[1][64], 0.0);
            assert!((1..64).all(|j| s.paths[0][j] > s.paths[1][j]));
        }
    }

    #[test]
    fn pinned_sum_process_has_variance_b() {
        let g = TimeGrid::uniform(1.5, 16).unwrap();
        let sums = sample_many(8, 20_000, |s| {
            let e = sample_pinned_ensemble(&[1.0, 0.0], &Floor::NegInfinity, &g, s, 1).unwrap();
            (e.paths[0][0] + e.paths[1][0]) * FRAC_1_SQRT_2
        });
        let (m, sd) = mean_sd(&sums);
        assert!((m - FRAC_1_SQRT_2).abs() < 3.0 * sd / (sums.len() as f64).sqrt());
        assert!((sd * sd - 1.5).abs() < 0.06);
    }

    #[test]
    fn pinned_ensemble_with_two_pairs_respects_the_order() {
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let floor = Floor::Path(vec![-3.0; 17]);
        let s = sample_pinned_ensemble(
            &[3.0, 2.0, 1.0, 0.0],
            &floor,
            &g,
            SeedRecord { seed: 1, index: 0 },
            100_000,
        )
        .unwrap();
        for j in 1..16 {
            assert!(s.paths[1][j] > s.paths[2][j]);
            assert!(s.paths[3][j] > -3.0);
        }
        assert!(sample_pinned_ensemble(&[1.0, 2.0], &Floor::NegInfinity, &g, s.seed, 10).is_err());
    }

    #[test]
    fn single_avoiding_curve_is_a_reverse_bm() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let seed = SeedRecord { seed: 2, index: 9 };
        let s = sample_avoiding_ensemble(&[0.3], &[0.7], &Floor::NegInfinity, &g, seed, 1).unwrap();
        assert_eq!(s.rejections, 0);
        assert_eq!(s.paths[0], sample_reverse_bm(0.3, 0.7, &g, &mut seed.rng()));
    }

    #[test]
    fn two_curve_gap_matches_the_killed_density() {
        // Mean of sqrt 2 v under e^{m v}(p_1(v - a) - p_1(v + a)) on v > 0, by quadrature.
        let (a, m) = (FRAC_1_SQRT_2, -2.0 * SQRT_2);
        let dens = |v: f64| (m * v).exp() * ((-(v - a) * (v - a) / 2.0).exp() - (-(v + a) * (v + a) / 2.0).exp());
        let (mut z, mut first) = (0.0, 0.0);
        for p in 0..40 {
            let (xs, ws) = crate::quad::gauss_legendre_on(0.25 * p as f64, 0.25 * (p + 1) as f64, 20);
            for (x, w) in xs.iter().zip(&ws) {
                z += w * dens(*x);
                first += w * x * dens(*x);
            }
        }
        let want = SQRT_2 * first / z;
        let g = TimeGrid::uniform(1.0, 16).unwrap();
        let gaps = sample_many(11, 20_000, |s| {
            let e = sample_avoiding_ensemble(&[1.0, 0.0], &[-2.0, 2.0], &Floor::NegInfinity, &g, s, 1_000_000).unwrap();
            assert!((1..=16).all(|j| e.paths[0][j] > e.paths[1][j]));
            e.paths[0][0] - e.paths[1][0]
        });
        let (mean, sd) = mean_sd(&gaps);
        assert!(
            (mean - want).abs() < 3.0 * sd / (gaps.len() as f64).sqrt(),
            "{mean} {want}"
        );
    }

    #[test]
    fn rejection_budget_is_reported() {
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let floor = Floor::Path(vec![-0.01; 65]);
        let e = sample_avoiding_ensemble(
            &[1.0, 0.0],
            &[-8.0, 8.0],
            &floor,
            &g,
            SeedRecord { seed: 0, index: 0 },
            50,
        );
        assert!(matches!(
            e,
            Err(EnsembleError::RejectionBudgetExceeded { attempts: 50, .. })
        ));
    }

    #[test]
    fn gse_spectrum_is_descending_and_scaled() {
        let s = sample_gse_spectrum(50, SeedRecord { seed: 1, index: 0 }).unwrap();
        assert!(s.raw.windows(2).all(|w| w[0] >= w[1]));
        let c = 2f64.powf(7.0 / 6.0) * 50f64.powf(1.0 / 6.0);
        for (r, x) in s.raw.iter().zip(&s.scaled) {
            assert!((x - c * (r - 10.0)).abs() < 1e-12);
        }
        assert!(sample_gse_spectrum(1, s.seed).is_err());
    }

    #[test]
    fn gse_top_eigenvalue_sits_at_the_edge() {
        let tops = sample_many(3, 1000, |s| sample_gse_spectrum(200, s).unwrap().raw[0]);
        let (m, _) = mean_sd(&tops);
        assert!((m / 20.0 - 1.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn sturm_counts_match_the_spectrum() {
        let regions = [
            Region::HalfLine { lo: 0.0 },
            Region::Interval { lo: -2.0, hi: 0.0 },
            Region::Interval { lo: -4.0, hi: -2.0 },
            Region::Interval { lo: -40.0, hi: -3.0 },
            Region::Line,
        ];
        for index in 0..200 {
            let seed = SeedRecord { seed: 4, index };
            let sp = sample_gse_spectrum(60, seed).unwrap();
            let fast = sample_gse_edge_counts(60, &regions, seed).unwrap();
            let slow: Vec<usize> = regions.iter().map(|&r| count_in(&sp.scaled, r)).collect();
            assert_eq!(fast, slow);
        }
    }

    #[test]
    fn counting() {
        let atoms = [2.0, 1.0, -1.0];
        assert_eq!(count_in(&atoms, Region::HalfLine { lo: 0.0 }), 2);
        assert_eq!(count_in(&atoms, Region::Line), 3);
        assert_eq!(count_in(&atoms, Region::Interval { lo: 0.5, hi: 0.5 }), 0);
        assert_eq!(count_in(&[], Region::Line), 0);
    }

    #[test]
    fn samples_are_reproducible() {
        let g = TimeGrid::uniform(1.0, 32).unwrap();
        let run = || {
            sample_many(9, 64, |s| {
                sample_avoiding_ensemble(&[1.0, 0.0], &[-2.0, 2.0], &Floor::NegInfinity, &g, s, 1000).unwrap()
            })
        };
        assert_eq!(run(), run());
    }
}
