//! Desk-scale studies: each sweeps a parameter, records error metrics and
//! returns a verdict that depends only on those metrics and the declared
//! tolerances.

use crate::ensembles::{
    derive_seed, sample_avoiding_ensemble, sample_gse_edge_counts, sample_many, sample_pinned_ensemble, EnsembleError,
    Floor, Region, TimeGrid,
};
use crate::kernels::{BoundaryParam, EqualTimeFamily, KernelError, Kernels};
use crate::pfaffian::{
    expected_count, gse_factorial_moment, origin_factorial_moment, CountRegion, IntervalSpec, MomentRequest,
    PfaffianError,
};
use crate::quad::QuadSettings;
use serde::Serialize;
use serde_json::{json, Value};
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

/// Two-sided KS level matching a 3 sigma normal tail.
pub const KS_ALPHA: f64 = 0.0027;
/// Final relative error required of the small-time moments.
pub const ORIGIN_REL_TOL: f64 = 0.05;
/// Largest deviation allowed at the last boundary parameter.
pub const VARPI_LIMIT_TOL: f64 = 1e-3;
/// Largest `K_12` deviation from the Airy kernel at the last shift.
pub const T_LIMIT_TOL: f64 = 1e-3;
/// Window for the log-log decay slope of `|K_11|`.
pub const K11_SLOPE_RANGE: (f64, f64) = (-3.5, -2.5);
/// Median of the time-0 gap required at the last boundary parameter.
pub const PINNING_GAP_TOL: f64 = 0.5;
/// Nodes per axis of the moment quadrature.
pub const MOMENT_NODES: usize = 24;
/// Nodes per panel for expected counts.
pub const COUNT_NODES: usize = 24;
/// Atoms seen in a region below which its count error falls back to Poisson.
pub const RARE_ATOMS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid study input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Pfaffian(#[from] PfaffianError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("cannot write {path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, VerifyError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(VerifyError::InvalidInput(msg.into()))
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
}

impl MCEstimate {
    pub fn from_samples(v: &[f64]) -> Result<Self> {
        let n = v.len();
        if n < 2 {
            return invalid(format!("{n} samples; a standard error needs at least 2"));
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Ok(MCEstimate {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_samples: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub target: Option<f64>,
    pub error: f64,
}

impl Metric {
    pub fn new(name: impl Into<String>, value: f64, target: Option<f64>) -> Self {
        let error = target.map_or(value.abs(), |t| (value - t).abs());
        Metric {
            name: name.into(),
            value,
            target,
            error,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub metrics: Vec<Metric>,
}

impl SweepRow {
    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub study: String,
    pub config: Value,
    pub sweep: Vec<SweepRow>,
    pub verdict: bool,
    pub reasons: Vec<String>,
    pub warnings: Vec<String>,
    pub runtime_ms: u128,
    pub seed: Option<u64>,
}

impl StudyReport {
    fn new(study: &str, config: Value, seed: Option<u64>) -> Self {
        StudyReport {
            study: study.into(),
            config,
            sweep: Vec::new(),
            verdict: false,
            reasons: Vec::new(),
            warnings: Vec::new(),
            runtime_ms: 0,
            seed,
        }
    }

    /// Fails the verdict with `reason` unless `ok`.
    fn require(&mut self, ok: bool, reason: String) {
        if !ok {
            self.reasons.push(reason);
        }
    }

    fn close(mut self, start: Instant) -> Self {
        self.verdict = self.reasons.is_empty();
        self.runtime_ms = start.elapsed().as_millis();
        self
    }

    /// Metric `name` along the sweep, in sweep order.
    pub fn series(&self, name: &str) -> Vec<f64> {
        self.sweep
            .iter()
            .filter_map(|r| r.metric(name).map(|m| m.value))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| io_error(path, e))
    }

    /// One row per metric: `param, metric, value, target, error`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path, e))?;
        let rows = self.sweep.iter().flat_map(|r| r.metrics.iter().map(move |m| (r, m)));
        w.write_record(["param", "metric", "value", "target", "error"])
            .map_err(|e| io_error(path, e))?;
        for (r, m) in rows {
            let target = m.target.map(|t| t.to_string()).unwrap_or_default();
            w.write_record([
                r.param.clone(),
                m.name.clone(),
                m.value.to_string(),
                target,
                m.error.to_string(),
            ])
            .map_err(|e| io_error(path, e))?;
        }
        w.flush().map_err(|e| io_error(path, e))
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> VerifyError {
    VerifyError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn quad_echo(k: &Kernels) -> Value {
    json!({ "tol": k.quad.tol, "nodes_per_ray": k.quad.nodes_per_ray })
}

/// The same kernels with twice the nodes per ray.
fn refined(k: &Kernels) -> Kernels {
    Kernels::new(QuadSettings {
        nodes_per_ray: 2 * k.quad.nodes_per_ray,
        max_nodes: 2 * k.quad.max_nodes,
        ..k.quad
    })
}

/// A space-time pair `(s, x, t, y)`.
pub type PointPair = (f64, f64, f64, f64);

/// Generic points for the two contour layouts, clear of the branch line.
pub const MATCH_POINTS: [PointPair; 5] = [
    (0.5, 0.3, 0.8, -0.4),
    (1.0, 0.2, 0.5, 0.9),
    (0.2, 0.1, 0.4, -0.3),
    (0.3, -0.5, 0.7, 0.2),
    (0.5, 1.0, 2.0, -1.0),
];

/// Points for the large boundary parameter sweep.
pub const VARPI_LIMIT_POINTS: [PointPair; 6] = [
    (0.5, -1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0, 0.0),
    (2.0, 1.0, 0.5, -1.0),
    (1.0, -1.0, 2.0, 1.0),
    (0.5, 0.0, 0.5, 1.0),
    (2.0, 0.0, 2.0, -1.0),
];

/// Points for the large time sweep.
pub const T_LIMIT_POINTS: [PointPair; 4] = [
    (0.0, 0.0, 1.0, 0.5),
    (0.0, 0.0, 1.0, 0.0),
    (0.5, -1.0, 0.0, 1.0),
    (1.0, 1.0, 1.0, -1.0),
];

fn point_label(p: &PointPair) -> String {
    format!("({}, {}, {}, {})", p.0, p.1, p.2, p.3)
}

/// Largest entrywise gap between the boundary-parameter kernel in its two
/// contour layouts.
pub fn study_kernel_match(kernels: &Kernels, varpis: &[f64], points: &[PointPair], tol: f64) -> Result<StudyReport> {
    let start = Instant::now();
    let mut r = StudyReport::new(
        "kernel-match",
        json!({ "varpi": varpis, "points": points, "tol": tol, "quad": quad_echo(kernels) }),
        None,
    );
    for &v in varpis {
        if !(v > 1.0) {
            return Err(KernelError::InvalidBoundaryParam(v).into());
        }
    }
    for p in points {
        if !(p.0 > 0.0 && p.2 > 0.0) || p.1 - p.0 * p.0 == p.3 - p.2 * p.2 {
            return invalid(format!("point {} needs s, t > 0 off the branch line", point_label(p)));
        }
    }
    if points.is_empty() || varpis.is_empty() {
        r.warnings.push("empty sweep: vacuous pass".into());
    }
    for &v in varpis {
        let bp = BoundaryParam::new(v);
        for p in points {
            let a = kernels.hs_varpi(bp, p.0, p.1, p.2, p.3)?;
            let b = kernels.varpi(bp, p.0, p.1, p.2, p.3)?;
            let d = a.max_abs_diff(&b);
            r.require(
                d < tol,
                format!("varpi {v} at {}: {d:.3e} >= {tol:.1e}", point_label(p)),
            );
            r.sweep.push(SweepRow {
                param: format!("varpi={v} point={}", point_label(p)),
                metrics: vec![Metric::new("max_abs_diff", d, Some(0.0))],
            });
        }
    }
    Ok(r.close(start))
}

/// Deviations of `(K11/(4 varpi^2), K12, K21, 4 varpi^2 K22)` from the pinned kernel.
pub fn study_varpi_limit(kernels: &Kernels, varpis: &[f64], points: &[PointPair]) -> Result<StudyReport> {
    let start = Instant::now();
    if varpis.len() < 3 {
        return invalid("need at least 3 boundary parameters to judge monotonicity");
    }
    if !strictly_decreasing(&varpis.iter().map(|v| -v).collect::<Vec<_>>()) {
        return invalid("boundary parameters must ascend");
    }
    for p in points {
        if !(p.0 > 0.0 && p.2 > 0.0) {
            return invalid(format!("point {} needs s, t > 0", point_label(p)));
        }
    }
    let mut r = StudyReport::new(
        "varpi-limit",
        json!({ "varpi": varpis, "points": points, "threshold": VARPI_LIMIT_TOL, "quad": quad_echo(kernels) }),
        None,
    );
    for p in points {
        let limit = kernels.hs_inf(p.0, p.1, p.2, p.3)?;
        let mut devs = Vec::new();
        for &v in varpis {
            let k = kernels.varpi(BoundaryParam::new(v), p.0, p.1, p.2, p.3)?;
            let c = 4.0 * v * v;
            let e = [
                (k.k11 / c - limit.k11).abs(),
                (k.k12 - limit.k12).abs(),
                (k.k21 - limit.k21).abs(),
                (k.k22 * c - limit.k22).abs(),
            ];
            let dev = e.iter().cloned().fold(0.0, f64::max);
            devs.push(dev);
            r.sweep.push(SweepRow {
                param: format!("varpi={v} point={}", point_label(p)),
                metrics: vec![
                    Metric::new("e11", e[0], Some(0.0)),
                    Metric::new("e12", e[1], Some(0.0)),
                    Metric::new("e21", e[2], Some(0.0)),
                    Metric::new("e22", e[3], Some(0.0)),
                    Metric::new("deviation", dev, Some(0.0)),
                ],
            });
        }
        let label = point_label(p);
        r.require(
            strictly_decreasing(&devs),
            format!("{label}: deviations {} not decreasing", sci(&devs)),
        );
        let last = devs[devs.len() - 1];
        r.require(
            last < VARPI_LIMIT_TOL,
            format!("{label}: final deviation {last:.3e} >= {VARPI_LIMIT_TOL:.0e}"),
        );
    }
    Ok(r.close(start))
}

/// Least-squares slope of `log |v|` against `log T`.
pub fn log_log_slope(ts: &[f64], v: &[f64]) -> f64 {
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = v.iter().map(|a| a.abs().ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Large-time behaviour of the pinned kernel at `(T+s, x; T+t, y)`.
pub fn study_t_limit(kernels: &Kernels, shifts: &[f64], points: &[PointPair]) -> Result<StudyReport> {
    let start = Instant::now();
    if shifts.len() < 2 || !strictly_decreasing(&shifts.iter().map(|v| -v).collect::<Vec<_>>()) {
        return invalid("shifts must ascend with at least two entries");
    }
    let mut r = StudyReport::new(
        "T-limit",
        json!({ "T": shifts, "points": points, "k12_tol": T_LIMIT_TOL, "k11_slope": K11_SLOPE_RANGE,
                "quad": quad_echo(kernels) }),
        None,
    );
    for p in points {
        let airy = kernels.airy(p.0, p.1, p.2, p.3)?;
        let (mut e12, mut k11, mut k22) = (Vec::new(), Vec::new(), Vec::new());
        for &big in shifts {
            let k = kernels.hs_inf_shifted(big, p.0, p.1, p.2, p.3)?;
            e12.push((k.k12 - airy).abs());
            k11.push(k.k11.abs());
            k22.push(k.k22.abs());
            r.sweep.push(SweepRow {
                param: format!("T={big} point={}", point_label(p)),
                metrics: vec![
                    Metric::new("k12", k.k12, Some(airy)),
                    Metric::new("abs_k11", k.k11.abs(), Some(0.0)),
                    Metric::new("abs_k22", k.k22.abs(), Some(0.0)),
                ],
            });
        }
        let label = point_label(p);
        let slope = log_log_slope(shifts, &k11);
        r.sweep.push(SweepRow {
            param: format!("slope point={label}"),
            metrics: vec![Metric::new("k11_slope", slope, Some(-3.0))],
        });
        r.require(
            strictly_decreasing(&e12),
            format!("{label}: K12 errors {} not decreasing", sci(&e12)),
        );
        let last = e12[e12.len() - 1];
        r.require(
            last < T_LIMIT_TOL,
            format!("{label}: final K12 error {last:.3e} >= {T_LIMIT_TOL:.0e}"),
        );
        r.require(
            (K11_SLOPE_RANGE.0..=K11_SLOPE_RANGE.1).contains(&slope),
            format!("{label}: K11 slope {slope:.3} outside {K11_SLOPE_RANGE:?}"),
        );
        r.require(
            strictly_decreasing(&k22),
            format!("{label}: |K22| {} not decreasing", sci(&k22)),
        );
    }
    Ok(r.close(start))
}

/// Two-sample Kolmogorov-Smirnov distance.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic critical KS distance at level `alpha` for sample sizes `n, m`.
pub fn ks_critical(n: usize, m: usize, alpha: f64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    (-(alpha / 2.0).ln() / 2.0).sqrt() * ((n + m) / (n * m)).sqrt()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Settings of the pinning study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PinningConfig {
    pub varpis: Vec<f64>,
    pub b: f64,
    pub y: (f64, f64),
    pub n_samples: usize,
    pub grid_steps: usize,
    pub seed: u64,
}

/// Two avoiding curves with drifts `(-varpi, varpi)` against the pinned pair.
pub fn study_pinning_convergence(cfg: &PinningConfig) -> Result<StudyReport> {
    let start = Instant::now();
    if cfg.n_samples < 2 {
        return invalid("need at least 2 samples");
    }
    if !(cfg.y.0 > cfg.y.1) {
        return invalid("y must be strictly descending");
    }
    if cfg.varpis.is_empty() || !strictly_decreasing(&cfg.varpis.iter().map(|v| -v).collect::<Vec<_>>()) {
        return invalid("boundary parameters must ascend");
    }
    let grid = TimeGrid::uniform(cfg.b, cfg.grid_steps)?;
    let mid = grid.nearest(cfg.b / 2.0);
    let y = [cfg.y.0, cfg.y.1];
    let mut r = StudyReport::new(
        "pinning",
        json!({ "config": cfg, "mid_time": grid.times()[mid], "ks_alpha": KS_ALPHA, "gap_tol": PINNING_GAP_TOL }),
        Some(cfg.seed),
    );
    let marginals = |s: crate::ensembles::EnsembleSample| {
        let p = &s.paths;
        let sum = (p[0][mid] + p[1][mid]) / std::f64::consts::SQRT_2;
        let gap = (p[0][mid] - p[1][mid]) / std::f64::consts::SQRT_2;
        (sum, gap, p[0][0] - p[1][0])
    };
    let pinned: Vec<(f64, f64, f64)> = sample_many(derive_seed(cfg.seed, 0), cfg.n_samples, |s| {
        sample_pinned_ensemble(&y, &Floor::NegInfinity, &grid, s, 1).map(marginals)
    })
    .into_iter()
    .collect::<std::result::Result<_, _>>()?;
    let pin_sum: Vec<f64> = pinned.iter().map(|m| m.0).collect();
    let pin_gap: Vec<f64> = pinned.iter().map(|m| m.1).collect();
    let critical = ks_critical(cfg.n_samples, cfg.n_samples, KS_ALPHA);
    let (mut medians, mut gap_ks) = (Vec::new(), Vec::new());
    for (i, &v) in cfg.varpis.iter().enumerate() {
        let samples: Vec<(f64, f64, f64)> = sample_many(derive_seed(cfg.seed, 1 + i as u64), cfg.n_samples, |s| {
            sample_avoiding_ensemble(&y, &[-v, v], &Floor::NegInfinity, &grid, s, 1_000_000).map(marginals)
        })
        .into_iter()
        .collect::<std::result::Result<_, _>>()?;
        let sum: Vec<f64> = samples.iter().map(|m| m.0).collect();
        let gap: Vec<f64> = samples.iter().map(|m| m.1).collect();
        let start_gap: Vec<f64> = samples.iter().map(|m| m.2).collect();
        let med = median(&start_gap);
        let ks_sum = ks_distance(&sum, &pin_sum);
        let ks_gap = ks_distance(&gap, &pin_gap);
        medians.push(med);
        gap_ks.push(ks_gap);
        r.require(
            ks_sum <= critical,
            format!("varpi {v}: sum KS {ks_sum:.4} above {critical:.4}"),
        );
        r.sweep.push(SweepRow {
            param: format!("varpi={v}"),
            metrics: vec![
                Metric::new("median_gap_at_0", med, Some(0.0)),
                Metric::new("ks_sum_mid", ks_sum, Some(0.0)),
                Metric::new("ks_sum_critical", critical, None),
                Metric::new("ks_gap_mid", ks_gap, Some(0.0)),
            ],
        });
    }
    r.require(
        strictly_decreasing(&medians),
        format!("median gaps {medians:.4?} not decreasing"),
    );
    r.require(
        strictly_decreasing(&gap_ks),
        format!("gap KS {gap_ks:.4?} not decreasing"),
    );
    let last = medians[medians.len() - 1];
    r.require(
        last < PINNING_GAP_TOL,
        format!("final median gap {last:.4} >= {PINNING_GAP_TOL}"),
    );
    Ok(r.close(start))
}

/// Settings of the GSE edge study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GseEdgeConfig {
    pub n_matrix: usize,
    pub n_samples: usize,
    pub regions: Vec<Region>,
    /// Finite-size allowance: the target may move by as much as the region
    /// shifted by this much in scaled units.
    pub edge_shift: f64,
    pub seed: u64,
}

/// Edge shift `N^{-1/3}/2` used as the finite-size allowance at matrix size
/// `n`. Centring at `(2N)^{1/2}` is off by `O(N^{-1/2})` before scaling, which
/// becomes `O(N^{-1/3})` after it.
pub fn finite_n_edge_shift(n: usize) -> f64 {
    0.5 * (n as f64).powf(-1.0 / 3.0)
}

fn shifted(region: Region, d: f64) -> Region {
    match region {
        Region::Interval { lo, hi } => Region::Interval { lo: lo + d, hi: hi + d },
        Region::HalfLine { lo } => Region::HalfLine { lo: lo + d },
        Region::Line => Region::Line,
    }
}

fn count_region(region: Region) -> Result<CountRegion> {
    match region {
        Region::Interval { lo, hi } => Ok(CountRegion::Interval(IntervalSpec::new(lo, hi)?)),
        Region::HalfLine { lo } => Ok(CountRegion::HalfLine(lo)),
        Region::Line => invalid("the whole line has infinitely many atoms in the limit"),
    }
}

fn bounds(region: Region) -> (f64, f64) {
    match region {
        Region::Interval { lo, hi } => (lo, hi),
        Region::HalfLine { lo } => (lo, f64::INFINITY),
        Region::Line => (f64::NEG_INFINITY, f64::INFINITY),
    }
}

/// Scaled GSE atom counts against the integrated kernel diagonal.
pub fn study_gse_edge(kernels: &Kernels, cfg: &GseEdgeConfig) -> Result<StudyReport> {
    let start = Instant::now();
    for (i, a) in cfg.regions.iter().enumerate() {
        let (alo, ahi) = bounds(*a);
        for b in &cfg.regions[i + 1..] {
            let (blo, bhi) = bounds(*b);
            if alo.max(blo) < ahi.min(bhi) {
                return invalid(format!("regions {a:?} and {b:?} overlap"));
            }
        }
    }
    let count = |reg: Region| -> Result<f64> {
        Ok(expected_count(
            kernels,
            EqualTimeFamily::Gse,
            count_region(reg)?,
            COUNT_NODES,
        )?)
    };
    let mut targets = Vec::new();
    let mut allowances = Vec::new();
    for &reg in &cfg.regions {
        let t = count(reg)?;
        let up = count(shifted(reg, cfg.edge_shift))?;
        let down = count(shifted(reg, -cfg.edge_shift))?;
        targets.push(t);
        allowances.push((up - t).abs().max((down - t).abs()));
    }
    let mut r = StudyReport::new(
        "gse-edge",
        json!({ "config": cfg, "count_nodes": COUNT_NODES, "quad": quad_echo(kernels) }),
        Some(cfg.seed),
    );
    let counts: Vec<Vec<f64>> = sample_many(cfg.seed, cfg.n_samples, |s| {
        sample_gse_edge_counts(cfg.n_matrix, &cfg.regions, s).map(|c| c.iter().map(|&v| v as f64).collect::<Vec<f64>>())
    })
    .into_iter()
    .collect::<std::result::Result<_, _>>()?;
    for (i, (&reg, &target)) in cfg.regions.iter().zip(&targets).enumerate() {
        let column: Vec<f64> = counts.iter().map(|c| c[i]).collect();
        let est = MCEstimate::from_samples(&column)?;
        // With only a handful of atoms seen the empirical error is unreliable
        // (zero when none are); fall back to the Poisson error under the target.
        let seen = est.mean * cfg.n_samples as f64;
        let stderr = if seen < RARE_ATOMS {
            est.stderr.max((target.max(0.0) / cfg.n_samples as f64).sqrt())
        } else {
            est.stderr
        };
        let margin = 3.0 * stderr + allowances[i];
        let err = (est.mean - target).abs();
        r.require(
            err < margin,
            format!("{reg:?}: |{:.4} - {target:.4}| >= {margin:.4}", est.mean),
        );
        r.sweep.push(SweepRow {
            param: format!("{reg:?}"),
            metrics: vec![
                Metric::new("mean_count", est.mean, Some(target)),
                Metric::new("stderr", est.stderr, None),
                Metric::new("stderr_used", stderr, None),
                Metric::new("allowance", allowances[i], None),
                Metric::new("margin", margin, None),
            ],
        });
    }
    Ok(r.close(start))
}

/// Small-time factorial moments against the doubled GSE moment of the same order.
pub fn study_origin_moments(
    kernels: &Kernels,
    tns: &[f64],
    interval: IntervalSpec,
    order: usize,
) -> Result<StudyReport> {
    let start = Instant::now();
    if !(1..=2).contains(&order) {
        return invalid(format!("order {order} outside 1..=2"));
    }
    for &t in tns {
        if !(t > 0.0 && t <= 0.5) {
            return Err(KernelError::InvalidTime {
                value: t,
                range: "(0, 1/2]",
            }
            .into());
        }
    }
    if tns.is_empty() || !strictly_decreasing(tns) {
        return invalid("times must descend");
    }
    let req = MomentRequest {
        intervals: vec![interval],
        orders: vec![order],
        nodes_per_axis: MOMENT_NODES,
    };
    let target = gse_factorial_moment(kernels, &req)?;
    let mut r = StudyReport::new(
        "origin-moments",
        json!({ "t_n": tns, "interval": interval, "order": order, "nodes_per_axis": MOMENT_NODES,
                "rel_tol": ORIGIN_REL_TOL, "quad": quad_echo(kernels) }),
        None,
    );
    let mut rel = Vec::new();
    for &t in tns {
        let v = origin_factorial_moment(kernels, t, &req)?;
        let e = ((v - target) / target).abs();
        rel.push(e);
        r.sweep.push(SweepRow {
            param: format!("t_n={t}"),
            metrics: vec![
                Metric::new("moment", v, Some(target)),
                Metric::new("rel_error", e, Some(0.0)),
            ],
        });
    }
    // Consistency of the last point with a coarser tensor rule.
    let half = MomentRequest {
        nodes_per_axis: MOMENT_NODES / 2,
        ..req.clone()
    };
    let last_t = tns[tns.len() - 1];
    let coarse = origin_factorial_moment(kernels, last_t, &half)?;
    let fine = r.sweep[r.sweep.len() - 1].metrics[0].value;
    r.sweep.push(SweepRow {
        param: format!("refinement t_n={last_t}"),
        metrics: vec![Metric::new("coarse_moment", coarse, Some(fine))],
    });
    r.require(
        (coarse - fine).abs() <= 1e-6 * fine.abs().max(1e-3),
        format!("rule not settled: {coarse} vs {fine}"),
    );
    r.require(
        strictly_decreasing(&rel),
        format!("relative errors {rel:.4?} not decreasing"),
    );
    let last = rel[rel.len() - 1];
    r.require(
        last < ORIGIN_REL_TOL,
        format!("final relative error {last:.4} >= {ORIGIN_REL_TOL}"),
    );
    Ok(r.close(start))
}

/// Confirms the kernel studies do not move when the rule is doubled, at one
/// boundary-parameter point.
pub fn refinement_delta(kernels: &Kernels, varpi: f64, p: PointPair) -> Result<f64> {
    let bp = BoundaryParam::new(varpi);
    let a = kernels.varpi(bp, p.0, p.1, p.2, p.3)?;
    let b = refined(kernels).varpi(bp, p.0, p.1, p.2, p.3)?;
    Ok(a.max_abs_diff(&b))
}

/// Pearson chi-square statistic of `samples` against `cdf` on `edges`, plus
/// the upper `level` quantile with `edges.len() - 2` degrees of freedom.
/// Mass outside the edges joins the end bins.
pub fn chi_square(samples: &[f64], cdf: impl Fn(f64) -> f64, edges: &[f64], level: f64) -> (f64, f64) {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let bins = edges.len() - 1;
    let mut observed = vec![0.0; bins];
    for &x in samples {
        let i = edges[1..bins].partition_point(|&e| e <= x);
        observed[i] += 1.0;
    }
    let n = samples.len() as f64;
    let mut stat = 0.0;
    for i in 0..bins {
        let lo = if i == 0 { 0.0 } else { cdf(edges[i]) };
        let hi = if i + 1 == bins { 1.0 } else { cdf(edges[i + 1]) };
        let expected = n * (hi - lo);
        stat += (observed[i] - expected).powi(2) / expected;
    }
    let critical = ChiSquared::new((bins - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(1.0 - level);
    (stat, critical)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_error_needs_two_samples() {
        assert!(MCEstimate::from_samples(&[1.0]).is_err());
        let e = MCEstimate::from_samples(&[1.0, 3.0]).unwrap();
        assert_eq!(e.mean, 2.0);
        assert!((e.stderr - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ks_distance_examples() {
        assert_eq!(ks_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_distance(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        assert_eq!(ks_distance(&[0.0, 2.0], &[1.0, 3.0]), 0.5);
        assert!((ks_critical(10_000, 10_000, KS_ALPHA) - 1.8175 * (2e-4f64).sqrt()).abs() < 1e-4);
    }

    #[test]
    fn slope_of_a_power_law() {
        let ts = [5.0, 10.0, 20.0, 40.0];
        let v: Vec<f64> = ts.iter().map(|t: &f64| 7.0 * t.powi(-3)).collect();
        assert!((log_log_slope(&ts, &v) + 3.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_match_edge_cases() {
        let k = Kernels::default();
        let r = study_kernel_match(&k, &[2.0], &[], 1e-6).unwrap();
        assert!(r.verdict);
        assert_eq!(r.warnings.len(), 1);
        let p = [(1.0, 0.0, 1.0, 0.5)];
        assert!(study_kernel_match(&k, &[2.0], &p, 1e-6).unwrap().verdict);
        assert!(!study_kernel_match(&k, &[2.0], &p, 0.0).unwrap().verdict);
        assert!(study_kernel_match(&k, &[2.0], &[(0.0, 0.0, 1.0, 0.5)], 1e-6).is_err());
    }

    #[test]
    fn sweep_inputs_are_checked() {
        let k = Kernels::default();
        assert!(study_varpi_limit(&k, &[2.0, 4.0], &[(1.0, 0.0, 1.0, 0.0)]).is_err());
        assert!(study_varpi_limit(&k, &[2.0, 4.0, 8.0], &[(0.0, 0.0, 1.0, 0.0)]).is_err());
        assert!(study_t_limit(&k, &[10.0, 5.0], &[]).is_err());
        let iv = IntervalSpec::new(-1.0, 1.0).unwrap();
        assert!(matches!(
            study_origin_moments(&k, &[0.6, 0.1], iv, 1),
            Err(VerifyError::Kernel(KernelError::InvalidTime { .. }))
        ));
        let overlap = GseEdgeConfig {
            n_matrix: 10,
            n_samples: 10,
            regions: vec![Region::HalfLine { lo: 0.0 }, Region::Interval { lo: -1.0, hi: 1.0 }],
            edge_shift: 0.0,
            seed: 0,
        };
        assert!(study_gse_edge(&k, &overlap).is_err());
        let pin = PinningConfig {
            varpis: vec![2.0],
            b: 1.0,
            y: (1.0, 0.0),
            n_samples: 1,
            grid_steps: 8,
            seed: 0,
        };
        assert!(study_pinning_convergence(&pin).is_err());
    }

    #[test]
    fn chi_square_accepts_uniform_samples() {
        let mut rng = crate::ensembles::substream(1, 0);
        use rand::Rng;
        let v: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let edges: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let (stat, crit) = chi_square(&v, |x| x, &edges, 0.01);
        assert!(stat < crit, "{stat} {crit}");
        assert!((crit - 21.666).abs() < 1e-2);
    }

    #[test]
    fn reports_serialize() {
        let k = Kernels::default();
        let r = study_kernel_match(&k, &[2.0], &[(1.0, 0.0, 1.0, 0.5)], 1e-6).unwrap();
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["study", "config", "sweep", "verdict", "runtime_ms", "seed"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let dir = std::env::temp_dir().join("hsairy-report-test.csv");
        r.write_csv(&dir).unwrap();
        let text = std::fs::read_to_string(&dir).unwrap();
        assert!(text.starts_with("param,metric,value,target,error"));
    }
}
