//! Truncated quadrature on wedge contours and the special functions built on it.
//!
//! A wedge contour with apex `a` and opening angle `phi` is the pair of rays
//! `a + r e^{-i phi}` (traversed inward) and `a + r e^{i phi}` (traversed
//! outward). Each ray is cut at a radius where the integrand envelope drops
//! below the requested tolerance and discretized with Gauss-Legendre panels
//! whose lengths grow geometrically away from the apex.

use num_complex::Complex64;
use std::f64::consts::PI;
use thiserror::Error;

/// Default truncation tolerance for contour integrals.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default number of quadrature nodes on each ray of a wedge.
pub const DEFAULT_NODES_PER_RAY: usize = 256;
/// Default quadratic coefficient in the cubic envelope `exp(-r^3/3 + c r^2)`.
///
/// For `|x| <= 10` and apexes up to `1 + 10` the linear and quadratic parts of
/// `Re(z^3/3 - x z)` along a pi/3 ray are dominated by `2 r^2` once `r >= 2`.
pub const DEFAULT_ENVELOPE_C: f64 = 2.0;
/// Default cap on the number of nodes of a single rule.
pub const DEFAULT_MAX_NODES: usize = 1 << 14;

const PANEL_NODES: usize = 16;
const PANEL_RATIO: f64 = 1.15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("wedge angle {0} is outside (0, pi)")]
    InvalidAngle(f64),
    #[error("invalid quadrature parameter: {0}")]
    InvalidParameter(String),
    #[error("rule needs {needed} nodes but the budget is {max}")]
    BudgetExceeded { needed: usize, max: usize },
    #[error("integrand is not finite at node {0}")]
    NonFiniteIntegrand(Complex64),
    #[error("heat kernel needs a positive time, got {0}")]
    NonPositiveTime(f64),
}

pub type Result<T> = std::result::Result<T, QuadError>;

/// Decay model used to pick the truncation radius of a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Envelope {
    /// `exp(-r^3/3 + c r^2)`, the generic bound for cubic exponents.
    Cubic { c: f64 },
    /// `exp(-rate r^2 + c r)`, for vertical contours where the cubic term is
    /// purely oscillatory.
    Gaussian { rate: f64, c: f64 },
}

impl Envelope {
    fn log_value(&self, r: f64) -> f64 {
        match *self {
            Envelope::Cubic { c } => -r * r * r / 3.0 + c * r * r,
            Envelope::Gaussian { rate, c } => -rate * r * r + c * r,
        }
    }

    /// Smallest radius (on a 1/64 grid) beyond which the envelope is below
    /// `tol` and decreasing.
    pub fn radius(&self, tol: f64) -> Result<f64> {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(QuadError::InvalidParameter(format!("tol = {tol}")));
        }
        if let Envelope::Gaussian { rate, .. } = *self {
            if !(rate > 0.0) {
                return Err(QuadError::InvalidParameter(format!("gaussian envelope rate = {rate}")));
            }
        }
        let target = tol.ln();
        // Start past the envelope maximum so the tail is monotone.
        let mut r = match *self {
            Envelope::Cubic { c } => (2.0 * c).max(0.0),
            Envelope::Gaussian { rate, c } => (c / (2.0 * rate)).max(0.0),
        };
        let step = 1.0 / 64.0;
        while self.log_value(r) >= target {
            r += step;
            if r > 1e4 {
                return Err(QuadError::InvalidParameter(
                    "envelope never drops below tolerance".into(),
                ));
            }
        }
        Ok(r.max(step))
    }

    /// Upper bound on the integral of the envelope over `[r, inf)`.
    pub fn tail_bound(&self, r: f64) -> f64 {
        let slope = match *self {
            Envelope::Cubic { c } => r * r - 2.0 * c * r,
            Envelope::Gaussian { rate, c } => 2.0 * rate * r - c,
        };
        if slope <= 0.0 {
            return f64::INFINITY;
        }
        self.log_value(r).exp() / slope
    }
}

/// The truncated contour `apex + r e^{+-i angle}`, `r in [0, half_length]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WedgeContour {
    pub apex: f64,
    pub angle: f64,
    pub half_length: f64,
    pub nodes_per_ray: usize,
}

impl WedgeContour {
    pub fn new(apex: f64, angle: f64, half_length: f64, nodes_per_ray: usize) -> Result<Self> {
        if !(angle > 0.0 && angle < PI) {
            return Err(QuadError::InvalidAngle(angle));
        }
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(QuadError::InvalidParameter(format!("half_length = {half_length}")));
        }
        if nodes_per_ray < 2 {
            return Err(QuadError::InvalidParameter(format!("nodes_per_ray = {nodes_per_ray}")));
        }
        if !apex.is_finite() {
            return Err(QuadError::InvalidParameter(format!("apex = {apex}")));
        }
        Ok(WedgeContour {
            apex,
            angle,
            half_length,
            nodes_per_ray,
        })
    }
}

/// Nodes and complex weights discretizing a [`WedgeContour`].
///
/// The first half of the nodes lies on the lower ray, the second half on the
/// upper ray, and node `i` of the lower ray is the conjugate of node `i` of the
/// upper ray.
#[derive(Debug, Clone)]
pub struct WedgeRule {
    pub nodes: Vec<Complex64>,
    pub weights: Vec<Complex64>,
    pub source: WedgeContour,
    pub est_tail_bound: f64,
}

/// Tunable parameters shared by every contour integral in the crate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadSettings {
    pub tol: f64,
    pub nodes_per_ray: usize,
    pub max_nodes: usize,
    pub envelope_c: f64,
}

impl Default for QuadSettings {
    fn default() -> Self {
        QuadSettings {
            tol: DEFAULT_TOL,
            nodes_per_ray: DEFAULT_NODES_PER_RAY,
            max_nodes: DEFAULT_MAX_NODES,
            envelope_c: DEFAULT_ENVELOPE_C,
        }
    }
}

impl QuadSettings {
    /// Rule for integrands with cubic decay along the rays.
    pub fn cubic_rule(&self, apex: f64, angle: f64) -> Result<WedgeRule> {
        self.rule(apex, angle, Envelope::Cubic { c: self.envelope_c })
    }

    /// Rule with an explicit decay model.
    pub fn rule(&self, apex: f64, angle: f64, envelope: Envelope) -> Result<WedgeRule> {
        if !(angle > 0.0 && angle < PI) {
            return Err(QuadError::InvalidAngle(angle));
        }
        let r = envelope.radius(self.tol)?;
        let mut rule = self.rule_with_radius(apex, angle, r)?;
        rule.est_tail_bound = 2.0 * envelope.tail_bound(r);
        Ok(rule)
    }

    /// Rule truncated at a radius chosen by the caller, e.g. from
    /// [`truncation_radius`]. The tail bound is set to `tol`.
    pub fn rule_with_radius(&self, apex: f64, angle: f64, radius: f64) -> Result<WedgeRule> {
        let needed = 2 * self.nodes_per_ray;
        if needed > self.max_nodes {
            return Err(QuadError::BudgetExceeded {
                needed,
                max: self.max_nodes,
            });
        }
        let contour = WedgeContour::new(apex, angle, radius, self.nodes_per_ray)?;
        let mut rule = WedgeRule::from_contour(&contour);
        rule.est_tail_bound = self.tol;
        Ok(rule)
    }
}

/// Builds the default rule for `apex + r e^{+-i angle}` with the cubic
/// envelope and [`DEFAULT_NODES_PER_RAY`] nodes per ray.
pub fn build_wedge_rule(apex: f64, angle: f64, tol: f64, max_nodes: usize) -> Result<WedgeRule> {
    if !(tol > 0.0) {
        return Err(QuadError::InvalidParameter(format!("tol = {tol}")));
    }
    QuadSettings {
        tol,
        max_nodes,
        ..QuadSettings::default()
    }
    .cubic_rule(apex, angle)
}

impl WedgeRule {
    /// Discretizes a contour. The tail bound is left at zero; use
    /// [`QuadSettings::rule`] to get one tied to a decay model.
    pub fn from_contour(contour: &WedgeContour) -> WedgeRule {
        let (r, w) = graded_panels(contour.half_length, contour.nodes_per_ray);
        let up = Complex64::from_polar(1.0, contour.angle);
        let down = up.conj();
        let n = r.len();
        let mut nodes = Vec::with_capacity(2 * n);
        let mut weights = Vec::with_capacity(2 * n);
        // Lower ray, traversed toward the apex: dz = -e^{-i phi} dr.
        for k in 0..n {
            nodes.push(contour.apex + r[k] * down);
            weights.push(-w[k] * down);
        }
        for k in 0..n {
            nodes.push(contour.apex + r[k] * up);
            weights.push(w[k] * up);
        }
        WedgeRule {
            nodes,
            weights,
            source: *contour,
            est_tail_bound: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance from a node to `p`.
    pub fn distance_to(&self, p: Complex64) -> f64 {
        self.nodes.iter().map(|z| (z - p).norm()).fold(f64::INFINITY, f64::min)
    }
}

/// Truncation radius for an integrand whose log-modulus along the upper ray
/// `apex + r e^{i angle}` is `log_modulus`. Scans `r` on a 1/32 grid up to
/// [`MAX_RADIUS`] and returns the point past which the integrand stays below
/// `tol` times its maximum on the ray.
///
/// Only the exponential part should go into `log_modulus`; rational factors
/// are bounded on the contours used in this crate.
pub fn truncation_radius<F>(apex: f64, angle: f64, tol: f64, log_modulus: F) -> Result<f64>
where
    F: Fn(Complex64) -> f64,
{
    if !(angle > 0.0 && angle < PI) {
        return Err(QuadError::InvalidAngle(angle));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(QuadError::InvalidParameter(format!("tol = {tol}")));
    }
    let dir = Complex64::from_polar(1.0, angle);
    let step = 1.0 / 32.0;
    let steps = (MAX_RADIUS / step) as usize;
    let vals: Vec<f64> = (0..=steps)
        .map(|k| log_modulus(apex + (k as f64 * step) * dir))
        .collect();
    let peak = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(QuadError::InvalidParameter("log-modulus is not finite".into()));
    }
    let cut = peak + tol.ln();
    let last = vals.iter().rposition(|v| *v >= cut).unwrap_or(0);
    if last == steps {
        return Err(QuadError::InvalidParameter(format!(
            "integrand does not decay within radius {MAX_RADIUS}"
        )));
    }
    Ok((last + 1) as f64 * step)
}

/// Largest truncation radius [`truncation_radius`] will consider.
pub const MAX_RADIUS: f64 = 64.0;

/// Radial nodes and weights on `[0, len]`: Gauss-Legendre panels whose widths
/// grow geometrically away from the apex. When `n` is not a multiple of the
/// panel size the remainder goes into a final panel.
fn graded_panels(len: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let panels = (n / PANEL_NODES).max(1);
    let mut sizes = vec![n / panels; panels];
    for s in sizes.iter_mut().take(n % panels) {
        *s += 1;
    }
    let total: f64 = (0..panels).map(|i| PANEL_RATIO.powi(i as i32)).sum();
    let mut r = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut lo = 0.0;
    for (i, &q) in sizes.iter().enumerate() {
        let h = len * PANEL_RATIO.powi(i as i32) / total;
        let hi = if i + 1 == panels { len } else { lo + h };
        let (x, wx) = gauss_legendre(q);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for k in 0..q {
            r.push(mid + half * x[k]);
            w.push(half * wx[k]);
        }
        lo = hi;
    }
    (r, w)
}

/// Gauss-Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped to `[a, b]`.
pub fn gauss_legendre_on(a: f64, b: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    (
        x.iter().map(|t| mid + half * t).collect(),
        w.iter().map(|v| half * v).collect(),
    )
}

/// `sum_k weights[k] f(nodes[k])`; the `1/(2 pi i)` factor is the caller's.
pub fn integrate_single<F>(f: F, rule: &WedgeRule) -> Result<Complex64>
where
    F: Fn(Complex64) -> Complex64,
{
    let mut acc = Complex64::new(0.0, 0.0);
    for (z, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = f(*z);
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(QuadError::NonFiniteIntegrand(*z));
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Tensor-product rule for `f(z, w)`; the `1/(2 pi i)^2` factor is the
/// caller's.
pub fn integrate_double<F>(f: F, rule_z: &WedgeRule, rule_w: &WedgeRule) -> Result<Complex64>
where
    F: Fn(Complex64, Complex64) -> Complex64,
{
    let mut acc = Complex64::new(0.0, 0.0);
    for (z, wz) in rule_z.nodes.iter().zip(&rule_z.weights) {
        let mut inner = Complex64::new(0.0, 0.0);
        for (w, ww) in rule_w.nodes.iter().zip(&rule_w.weights) {
            let v = f(*z, *w);
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(QuadError::NonFiniteIntegrand(*z));
            }
            inner += ww * v;
        }
        acc += wz * inner;
    }
    Ok(acc)
}

/// `2 pi i`, the normalization of every contour integral in the crate.
pub fn two_pi_i() -> Complex64 {
    Complex64::new(0.0, 2.0 * PI)
}

/// Ai, Ai' and the tail integral of Ai at one point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct AirySuiteValue {
    pub ai: f64,
    pub ai_prime: f64,
    pub tail_integral: f64,
}

/// Ai(x), Ai'(x) and the integral of Ai over `[x, inf)` from the contour
/// representation `Ai(x) = (2 pi i)^{-1} int e^{z^3/3 - x z} dz`.
///
/// The apex sits at the saddle point `sqrt(x)` when `x > 1`, which keeps the
/// relative accuracy in the decaying regime. The tail integral divides the
/// integrand by `z`; the pole at the origin stays to the left of the contour.
pub fn airy_suite(x: f64) -> AirySuiteValue {
    airy_suite_with(x, &QuadSettings::default())
}

pub fn airy_suite_with(x: f64, settings: &QuadSettings) -> AirySuiteValue {
    let apex = if x > 1.0 { x.sqrt() } else { 1.0 };
    let c = settings.envelope_c.max(0.5 * x.abs().sqrt());
    let rule = settings
        .rule(apex, PI / 3.0, Envelope::Cubic { c })
        .expect("default Airy rule is always constructible");
    let mut ai = Complex64::new(0.0, 0.0);
    let mut aip = Complex64::new(0.0, 0.0);
    let mut tail = Complex64::new(0.0, 0.0);
    for (z, w) in rule.nodes.iter().zip(&rule.weights) {
        let e = (z * z * z / 3.0 - x * z).exp() * w;
        ai += e;
        aip -= z * e;
        tail += e / z;
    }
    let n = two_pi_i();
    AirySuiteValue {
        ai: (ai / n).re,
        ai_prime: (aip / n).re,
        tail_integral: (tail / n).re,
    }
}

/// Gaussian heat kernel `(2 pi t)^{-1/2} exp(-(x-y)^2 / (2t))`.
pub fn heat_kernel(t: f64, x: f64, y: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(QuadError::NonPositiveTime(t));
    }
    let d = x - y;
    Ok((-d * d / (2.0 * t)).exp() / (2.0 * PI * t).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    const AI0: f64 = 0.355_028_053_887_817_2;
    const AIP0: f64 = -0.258_819_403_792_806_8;

    /// Maclaurin series for Ai, summed until terms stop mattering.
    fn ai_series(x: f64) -> f64 {
        let (mut f, mut g) = (0.0, 0.0);
        let mut tf: f64 = 1.0;
        let mut tg: f64 = x;
        let mut k = 0.0;
        while tf.abs() + tg.abs() > 1e-30 || k < 3.0 {
            f += tf;
            g += tg;
            tf *= x * x * x / ((3.0 * k + 2.0) * (3.0 * k + 3.0));
            tg *= x * x * x / ((3.0 * k + 3.0) * (3.0 * k + 4.0));
            k += 1.0;
            if k > 400.0 {
                break;
            }
        }
        AI0 * f + AIP0 * g
    }

    fn ai_prime_series(x: f64) -> f64 {
        let h = 1e-5;
        (ai_series(x + h) - ai_series(x - h)) / (2.0 * h)
    }

    /// Leading terms of the large-x asymptotic expansion.
    fn ai_asymptotic(x: f64) -> f64 {
        let zeta = 2.0 / 3.0 * x.powf(1.5);
        let u1 = 5.0 / 72.0;
        let u2 = 385.0 / 10368.0;
        let u3 = 85085.0 / 2239488.0;
        let s = 1.0 - u1 / zeta + u2 / (zeta * zeta) - u3 / zeta.powi(3);
        (-zeta).exp() / (2.0 * PI.sqrt() * x.powf(0.25)) * s
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(16);
        for p in 0..32 {
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
            assert!((q - exact).abs() < 1e-14, "degree {p}: {q} vs {exact}");
        }
        let (_, w) = gauss_legendre(24);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn rule_has_conjugate_pairs_and_small_tail() {
        let rule = build_wedge_rule(1.0, PI / 3.0, 1e-10, 4096).unwrap();
        let n = rule.len() / 2;
        for k in 0..n {
            assert_eq!(rule.nodes[k], rule.nodes[n + k].conj());
            assert_eq!(rule.weights[k], -rule.weights[n + k].conj());
        }
        assert!(rule.est_tail_bound < 1e-10);
        let r = rule.source.half_length;
        assert!((-r * r * r / 3.0 + DEFAULT_ENVELOPE_C * r * r).exp() < 1e-10);
    }

    #[test]
    fn vertical_and_invalid_angles() {
        let rule = build_wedge_rule(1.0, PI / 2.0, 1e-8, 4096).unwrap();
        assert!(rule.nodes.iter().all(|z| (z.re - 1.0).abs() < 1e-12));
        assert!(matches!(
            build_wedge_rule(1.0, 1.5 * PI, 1e-8, 4096),
            Err(QuadError::InvalidAngle(_))
        ));
        assert!(matches!(
            build_wedge_rule(1.0, PI / 3.0, 1e-10, 100),
            Err(QuadError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn airy_contour_matches_series() {
        let rule = build_wedge_rule(1.0, PI / 3.0, 1e-10, 4096).unwrap();
        let ai0 = integrate_single(|z| (z * z * z / 3.0).exp(), &rule).unwrap() / two_pi_i();
        assert!((ai0.re - AI0).abs() < 1e-12 && ai0.im.abs() < 1e-12);
        let ai5 = integrate_single(|z| (z * z * z / 3.0 - 5.0 * z).exp(), &rule).unwrap() / two_pi_i();
        assert!((ai5.re - ai_series(5.0)).abs() < 1e-12);
        assert!((ai5.re - 1.0834e-4).abs() < 1e-8);
        let zero = integrate_single(|_| Complex64::new(0.0, 0.0), &rule).unwrap();
        assert_eq!(zero, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn airy_suite_against_oracles() {
        for &x in &[-4.0, -2.5, -1.0, 0.0, 0.7, 2.0, 4.0] {
            let v = airy_suite(x);
            assert!((v.ai - ai_series(x)).abs() < 1e-11, "Ai({x})");
            assert!((v.ai_prime - ai_prime_series(x)).abs() < 1e-8, "Ai'({x})");
        }
        let v0 = airy_suite(0.0);
        assert!((v0.ai_prime - AIP0).abs() < 1e-12);
        assert!((v0.tail_integral - 1.0 / 3.0).abs() < 1e-12);
        for &x in &[8.0, 10.0, 14.0] {
            let v = airy_suite(x);
            let a = ai_asymptotic(x);
            assert!(((v.ai - a) / a).abs() < 1e-4, "Ai({x}) = {} vs {a}", v.ai);
        }
        assert!(airy_suite(10.0).ai < 1e-9);
    }

    #[test]
    fn tail_integral_derivative_is_minus_ai() {
        let h = 1e-4;
        let x = -1.0;
        let d = (airy_suite(x + h).tail_integral - airy_suite(x - h).tail_integral) / (2.0 * h);
        assert!((d + airy_suite(x).ai).abs() < 1e-6);
    }

    #[test]
    fn airy_ode_residual() {
        let h = 1e-3;
        for &x in &[-1.0, 0.0, 1.0] {
            let d2 = (airy_suite(x + h).ai - 2.0 * airy_suite(x).ai + airy_suite(x - h).ai) / (h * h);
            assert!((d2 - x * airy_suite(x).ai).abs() < 1e-5);
        }
    }

    #[test]
    fn tail_integral_against_direct_quadrature() {
        // Series on [0, 6] (cancellation grows past that), asymptotic
        // expansion on [6, 16], remainder below 1e-20.
        let mut acc = 0.0;
        for k in 0..32 {
            let (x, w) = gauss_legendre_on(0.5 * k as f64, 0.5 * (k + 1) as f64, 20);
            let f = if k < 12 { ai_series } else { ai_asymptotic };
            acc += x.iter().zip(&w).map(|(x, w)| w * f(*x)).sum::<f64>();
        }
        assert!((acc - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn double_integral_is_tensor_product() {
        let rule = build_wedge_rule(1.0, PI / 3.0, 1e-10, 4096).unwrap();
        let g = |z: Complex64| (z * z * z / 3.0 - 0.3 * z).exp();
        let h = |w: Complex64| (w * w * w / 3.0 + 0.2 * w).exp() * w;
        let d = integrate_double(|z, w| g(z) * h(w), &rule, &rule).unwrap();
        let s = integrate_single(g, &rule).unwrap() * integrate_single(h, &rule).unwrap();
        assert!(((d - s) / s).norm() < 1e-12);
    }

    #[test]
    fn gse_22_diagonal_against_finer_rule() {
        let f = |z: Complex64, w: Complex64| (z * z * z / 3.0 + w * w * w / 3.0).exp() * (z - w) / (z + w);
        let coarse = build_wedge_rule(1.0, PI / 3.0, 1e-10, 4096).unwrap();
        let fine_settings = QuadSettings {
            tol: 1e-14,
            nodes_per_ray: 10 * 64,
            ..QuadSettings::default()
        };
        let fine = fine_settings.cubic_rule(1.0, PI / 3.0).unwrap();
        let norm = two_pi_i() * two_pi_i();
        let a = integrate_double(f, &coarse, &coarse).unwrap() / norm;
        let b = integrate_double(f, &fine, &fine).unwrap() / norm;
        assert!((a - b).norm() < 1e-12);
        // Antisymmetric integrand on a symmetric pair of contours.
        assert!(a.norm() < 1e-12);
    }

    #[test]
    fn scanned_radius_matches_envelope() {
        let r = truncation_radius(0.0, PI / 3.0, 1e-10, |z| (z * z * z / 3.0).re).unwrap();
        // Along the pi/3 ray Re(z^3/3) = -r^3/3.
        assert!((r - (3.0 * 10f64.ln() * 10.0).cbrt()).abs() < 0.05);
        let g = truncation_radius(1.0, PI / 2.0, 1e-10, |z| (z * z * z / 3.0).re).unwrap();
        assert!((g - (10.0 * 10f64.ln()).sqrt()).abs() < 0.05);
        assert!(truncation_radius(0.0, PI / 3.0, 1e-10, |_| 0.0).is_err());
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let rule = build_wedge_rule(0.0, PI / 3.0, 1e-10, 4096).unwrap();
        let r = integrate_single(|z| 1.0 / (z - rule.nodes[3]), &rule);
        assert!(matches!(r, Err(QuadError::NonFiniteIntegrand(_))));
    }

    #[test]
    fn heat_kernel_basics() {
        assert!((heat_kernel(1.0, 0.0, 0.0).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert_eq!(heat_kernel(0.3, 1.2, -0.4), heat_kernel(0.3, -0.4, 1.2));
        assert!(matches!(heat_kernel(0.0, 0.0, 0.0), Err(QuadError::NonPositiveTime(_))));
        let mut acc = 0.0;
        for k in 0..40 {
            let (x, w) = gauss_legendre_on(-10.0 + 0.5 * k as f64, -9.5 + 0.5 * k as f64, 20);
            acc += x
                .iter()
                .zip(&w)
                .map(|(y, w)| w * heat_kernel(0.5, 0.0, *y).unwrap())
                .sum::<f64>();
        }
        assert!((acc - 1.0).abs() < 1e-10);
    }
}
