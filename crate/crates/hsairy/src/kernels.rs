//! Correlation kernels of the half-space Airy family and their relatives.
//!
//! Every double contour integral here has the separable form
//! `sum_{i,j} e_z(z_i; x) G(z_i, w_j) e_w(w_j; y)` where `e` carries the
//! quadrature weight and `exp(+-(z^3/3 - x z))`, and `G` is the rational part.
//! Building `G` once per contour pair makes grid evaluation a bilinear form.

use crate::precise::{to_f64, Ctx, Cx, UpperRay};
use crate::quad::{self, QuadError, QuadSettings, WedgeRule};
use astro_float::{BigFloat, RoundingMode};
use num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

/// Minimum distance between quadrature nodes and any pole of the integrand.
pub const POLE_CLEARANCE: f64 = 1e-3;
/// A term is rejected when `f64::EPSILON` times its absolute quadrature mass
/// exceeds this absolute level: rounding alone could then corrupt the sixth
/// decimal. The level is not scaled by the value, since a term whose mass
/// dwarfs it can return an arbitrarily large wrong value.
pub const CANCELLATION_LIMIT: f64 = 1e-6;
/// Allowed imaginary residue relative to `max(1, |value|)`.
pub const IMAG_LIMIT: f64 = 1e-8;
/// Spacing of the compressed apex offsets used for the boundary-parameter
/// kernel in its original contour layout.
pub const APEX_STEP: f64 = 0.1;
/// The f64 (2,2) entry of `K^{hs;varpi}` is recomputed in extended precision
/// once its rounding bound exceeds this level.
pub const PRECISE_SWITCH: f64 = 1e-12;
/// Largest working precision used when f64 terms cancel too deeply.
pub const MAX_PRECISION_BITS: usize = 1024;
const RM: RoundingMode = RoundingMode::ToEven;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("quadrature failed in {term}: {source}")]
    QuadratureFailure { term: &'static str, source: QuadError },
    #[error("{term}: contour passes within {distance:.3e} of a pole")]
    PoleTooClose { term: &'static str, distance: f64 },
    #[error("{term}: rounding bound {bound:.3e} swamps the value {value:.3e}")]
    IllConditioned { term: &'static str, bound: f64, value: f64 },
    #[error("{term}: imaginary residue {im:.3e} on a real kernel")]
    NonReal { term: &'static str, im: f64 },
    #[error("boundary parameter varpi = {0} must exceed 1")]
    InvalidBoundaryParam(f64),
    #[error("time {value} outside {range}")]
    InvalidTime { value: f64, range: &'static str },
    #[error("shift T = {shift} too small for (s, t) = ({s}, {t})")]
    InvalidShift { shift: f64, s: f64, t: f64 },
}

pub type Result<T> = std::result::Result<T, KernelError>;

fn quad_err(term: &'static str) -> impl Fn(QuadError) -> KernelError {
    move |source| KernelError::QuadratureFailure { term, source }
}

/// A time-level pair `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceTimePoint {
    pub t: f64,
    pub x: f64,
}

impl SpaceTimePoint {
    pub fn new(t: f64, x: f64) -> Self {
        SpaceTimePoint { t, x }
    }
}

/// The 2x2 block `K(p; q)` of a matrix kernel.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KernelBlock {
    pub k11: f64,
    pub k12: f64,
    pub k21: f64,
    pub k22: f64,
}

impl KernelBlock {
    pub fn max_abs_diff(&self, other: &KernelBlock) -> f64 {
        [
            self.k11 - other.k11,
            self.k12 - other.k12,
            self.k21 - other.k21,
            self.k22 - other.k22,
        ]
        .iter()
        .fold(0.0, |m, d| m.max(d.abs()))
    }

    pub fn entries(&self) -> [f64; 4] {
        [self.k11, self.k12, self.k21, self.k22]
    }
}

/// The boundary parameter varpi.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryParam {
    pub varpi: f64,
}

impl BoundaryParam {
    pub fn new(varpi: f64) -> Self {
        BoundaryParam { varpi }
    }

    /// The apex offsets `|varpi| + 3i` of the original contour layout.
    pub fn apex_offset(&self, i: u32) -> f64 {
        self.varpi.abs() + 3.0 * i as f64
    }

    fn require_above_one(&self) -> Result<()> {
        if self.varpi > 1.0 && self.varpi.is_finite() {
            Ok(())
        } else {
            Err(KernelError::InvalidBoundaryParam(self.varpi))
        }
    }
}

/// The small-time kernel split into its smooth part and the singular
/// Gaussian-derivative part of the (2,2) entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OriginSplit {
    pub regular: KernelBlock,
    pub singular: f64,
    pub t_n: f64,
}

/// Running sum of one kernel entry with its absolute mass.
#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    value: Complex64,
    mass: f64,
}

impl Acc {
    fn real(v: f64) -> Acc {
        Acc {
            value: Complex64::new(v, 0.0),
            mass: v.abs(),
        }
    }

    fn add(self, o: Acc) -> Acc {
        Acc {
            value: self.value + o.value,
            mass: self.mass + o.mass,
        }
    }

    fn neg(self) -> Acc {
        Acc {
            value: -self.value,
            mass: self.mass,
        }
    }

    fn finish(self, term: &'static str) -> Result<f64> {
        let v = self.value.re;
        let scale = v.abs().max(1.0);
        let bound = f64::EPSILON * self.mass;
        if !(bound <= CANCELLATION_LIMIT) {
            return Err(KernelError::IllConditioned { term, bound, value: v });
        }
        if self.value.im.abs() > IMAG_LIMIT * scale + 8.0 * bound {
            return Err(KernelError::NonReal {
                term,
                im: self.value.im,
            });
        }
        Ok(v)
    }
}

/// One integration variable: a wedge rule and the sign of its cubic exponent
/// `sign (z^3/3 - x z)`.
#[derive(Debug, Clone)]
struct Axis {
    rule: WedgeRule,
    sign: f64,
}

impl Axis {
    /// Truncates where the exponent has dropped by `ln(1/tol)` from its peak,
    /// for every level with `|x| <= level_box`.
    fn new(q: &QuadSettings, apex: f64, angle: f64, sign: f64, level_box: f64, term: &'static str) -> Result<Axis> {
        let r = quad::truncation_radius(apex, angle, q.tol, |z| {
            (sign * z * z * z / 3.0).re + level_box * (sign * z).re.abs()
        })
        .map_err(quad_err(term))?;
        let rule = q.rule_with_radius(apex, angle, r).map_err(quad_err(term))?;
        Ok(Axis { rule, sign })
    }

    fn weighted(&self, x: f64) -> Vec<Complex64> {
        self.rule
            .nodes
            .iter()
            .zip(&self.rule.weights)
            .map(|(z, w)| w * (self.sign * (z * z * z / 3.0 - x * z)).exp())
            .collect()
    }
}

/// The affine form `a z + b w + c` of a denominator factor.
#[derive(Debug, Clone, Copy)]
struct Lin(f64, f64, f64);

/// Rational part of a double integral tabulated on a pair of rules, already
/// multiplied by `(2 pi i)^{-2}`.
#[derive(Debug, Clone)]
struct DoubleTerm {
    nw: usize,
    g: Vec<Complex64>,
}

impl DoubleTerm {
    fn build<F>(term: &'static str, z: &Axis, w: &Axis, poles: &[Lin], rational: F) -> Result<Self>
    where
        F: Fn(Complex64, Complex64) -> Complex64,
    {
        let mut nearest = f64::INFINITY;
        for p in poles {
            for zi in &z.rule.nodes {
                for wj in &w.rule.nodes {
                    nearest = nearest.min((p.0 * zi + p.1 * wj + p.2).norm());
                }
            }
        }
        if nearest < POLE_CLEARANCE {
            return Err(KernelError::PoleTooClose {
                term,
                distance: nearest,
            });
        }
        let norm = -1.0 / (4.0 * PI * PI);
        let nw = w.rule.len();
        let mut g = Vec::with_capacity(z.rule.len() * nw);
        for zi in &z.rule.nodes {
            for wj in &w.rule.nodes {
                let v = rational(*zi, *wj) * norm;
                if !(v.re.is_finite() && v.im.is_finite()) {
                    return Err(KernelError::QuadratureFailure {
                        term,
                        source: QuadError::NonFiniteIntegrand(*zi),
                    });
                }
                g.push(v);
            }
        }
        Ok(DoubleTerm { nw, g })
    }

    fn eval(&self, ez: &[Complex64], ew: &[Complex64]) -> Acc {
        let aw: Vec<f64> = ew.iter().map(|v| v.norm()).collect();
        let mut value = Complex64::new(0.0, 0.0);
        let mut mass = 0.0;
        for (i, ezi) in ez.iter().enumerate() {
            let row = &self.g[i * self.nw..(i + 1) * self.nw];
            let mut acc = Complex64::new(0.0, 0.0);
            let mut m = 0.0;
            for ((gij, ewj), awj) in row.iter().zip(ew).zip(&aw) {
                acc += gij * ewj;
                m += (gij.re.abs() + gij.im.abs()) * awj;
            }
            value += ezi * acc;
            mass += ezi.norm() * m;
        }
        Acc { value, mass }
    }
}

/// A double integral over fixed contours, ready to evaluate at one level pair.
struct Double {
    z: Axis,
    w: Axis,
    term: DoubleTerm,
}

impl Double {
    fn eval(&self, x: f64, y: f64) -> Acc {
        self.term.eval(&self.z.weighted(x), &self.w.weighted(y))
    }
}

/// `(2 pi i)^{-1} int f` over a wedge, with the truncation radius chosen from
/// `log_modulus`.
fn single_integral<L, F>(
    q: &QuadSettings,
    term: &'static str,
    apex: f64,
    angle: f64,
    poles: &[Complex64],
    log_modulus: L,
    f: F,
) -> Result<Acc>
where
    L: Fn(Complex64) -> f64,
    F: Fn(Complex64) -> Complex64,
{
    let r = quad::truncation_radius(apex, angle, q.tol, log_modulus).map_err(quad_err(term))?;
    let rule = q.rule_with_radius(apex, angle, r).map_err(quad_err(term))?;
    for p in poles {
        let d = rule.distance_to(*p);
        if d < POLE_CLEARANCE {
            return Err(KernelError::PoleTooClose { term, distance: d });
        }
    }
    let mut value = Complex64::new(0.0, 0.0);
    let mut mass = 0.0;
    for (z, w) in rule.nodes.iter().zip(&rule.weights) {
        let v = w * f(*z);
        if !(v.re.is_finite() && v.im.is_finite()) {
            return Err(KernelError::QuadratureFailure {
                term,
                source: QuadError::NonFiniteIntegrand(*z),
            });
        }
        value += v;
        mass += v.norm();
    }
    Ok(Acc {
        value: value / quad::two_pi_i(),
        mass: mass / (2.0 * PI),
    })
}

const P3: f64 = PI / 3.0;
const P2: f64 = PI / 2.0;
const P23: f64 = 2.0 * PI / 3.0;

fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// The R-term of the extended Airy kernel; zero unless `s < t`.
pub fn airy_r(s: f64, x: f64, t: f64, y: f64) -> f64 {
    if s >= t {
        return 0.0;
    }
    let d = s - t;
    let e = (-d.powi(4) + 6.0 * (x + y) * d * d + 3.0 * (x - y) * (x - y)) / (12.0 * d);
    -e.exp() / (4.0 * PI * (t - s)).sqrt()
}

/// `H(s, x; t, y) = exp(s^3/3 + t^3/3 - x s - y t)` at real arguments.
pub fn h_real(s: f64, x: f64, t: f64, y: f64) -> f64 {
    (s * s * s / 3.0 + t * t * t / 3.0 - x * s - y * t).exp()
}

/// Kernel evaluator carrying the quadrature settings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kernels {
    pub quad: QuadSettings,
}

impl Kernels {
    pub fn new(quad: QuadSettings) -> Self {
        Kernels { quad }
    }

    fn axis(&self, apex: f64, angle: f64, sign: f64, level: f64, term: &'static str) -> Result<Axis> {
        Axis::new(&self.quad, apex, angle, sign, level.abs(), term)
    }

    #[allow(clippy::too_many_arguments)]
    fn double<F>(
        &self,
        term: &'static str,
        (za, zang, zsign, x): (f64, f64, f64, f64),
        (wa, wang, wsign, y): (f64, f64, f64, f64),
        poles: &[Lin],
        rational: F,
    ) -> Result<Acc>
    where
        F: Fn(Complex64, Complex64) -> Complex64,
    {
        let z = self.axis(za, zang, zsign, x, term)?;
        let w = self.axis(wa, wang, wsign, y, term)?;
        let term_g = DoubleTerm::build(term, &z, &w, poles, rational)?;
        Ok(Double { z, w, term: term_g }.eval(x, y))
    }

    /// Extended Airy kernel with contours `C_{1-s}` and `C_{1+t}`.
    pub fn airy(&self, s: f64, x: f64, t: f64, y: f64) -> Result<f64> {
        let i = self.double(
            "K_Airy",
            (1.0 - s, P3, 1.0, x),
            (1.0 + t, P3, 1.0, y),
            &[Lin(1.0, 1.0, s - t)],
            |z, w| 1.0 / (z + s + w - t),
        )?;
        i.add(Acc::real(airy_r(s, x, t, y))).finish("K_Airy")
    }

    /// The kernel `K^varpi` on the contours `C_{1+s}`, `C_{1+t}`.
    pub fn varpi(&self, p: BoundaryParam, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
        p.require_above_one()?;
        positive_times(s, t)?;
        let v = p.varpi;
        let i11 = self.double(
            "I11^varpi",
            (1.0, P3, 1.0, x),
            (1.0, P3, 1.0, y),
            &[Lin(1.0, 1.0, s + t), Lin(1.0, 0.0, s), Lin(0.0, 1.0, t)],
            |z, w| (z + s - w - t) * (v + z + s) * (v + w + t) / ((z + s + w + t) * (z + s) * (w + t)),
        )?;
        let i12 = |s: f64, x: f64, t: f64, y: f64| {
            self.double(
                "I12^varpi",
                (1.0, P3, 1.0, x),
                (low_apex(s, t), P3, 1.0, y),
                &[Lin(1.0, 0.0, s), Lin(1.0, 1.0, s - t), Lin(0.0, -1.0, v + t)],
                |z, w| (z + s - w + t) * (v + z + s) / (2.0 * (z + s) * (z + s + w - t) * (v - w + t)),
            )
        };
        let (za, wa, ang) = balanced_apex(s, t, v);
        let i22 = self.double(
            "I22^varpi",
            (za, ang, 1.0, x),
            (wa, ang, 1.0, y),
            &[Lin(1.0, 1.0, -s - t), Lin(-1.0, 0.0, v + s), Lin(0.0, -1.0, v + t)],
            |z, w| (z - s - w + t) / (4.0 * (z - s + w - t) * (v - z + s) * (v - w + t)),
        )?;
        let r22 = self.r22_varpi(v, s, x, t, y)?;
        Ok(KernelBlock {
            k11: i11.finish("K11^varpi")?,
            k12: i12(s, x, t, y)?
                .add(Acc::real(airy_r(s, x, t, y)))
                .finish("K12^varpi")?,
            k21: i12(t, y, s, x)?
                .add(Acc::real(airy_r(t, y, s, x)))
                .neg()
                .finish("K21^varpi")?,
            k22: i22.add(r22).finish("K22^varpi")?,
        })
    }

    /// Vertical-line integral for the (2,2) residual term of `K^varpi`.
    fn r22_varpi(&self, v: f64, s: f64, x: f64, t: f64, y: f64) -> Result<Acc> {
        let pre = t * t * t / 3.0 + s * s * s / 3.0 - y * t - x * s;
        let expo = move |w: Complex64| w * w * (t + s) - w * (t * t - s * s) + (y - x) * w;
        single_integral(
            &self.quad,
            "R22^varpi",
            0.0,
            P2,
            &[c(v), c(-v)],
            |w| expo(w).re,
            |w| w * (pre + expo(w)).exp() / (2.0 * (w - v) * (w + v)),
        )
    }

    /// The pinned kernel `K^{hs;inf}`.
    pub fn hs_inf(&self, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
        positive_times(s, t)?;
        let i11 = self.double(
            "I11^hs",
            (1.0, P3, 1.0, x),
            (1.0, P3, 1.0, y),
            &[Lin(1.0, 1.0, s + t), Lin(1.0, 0.0, s), Lin(0.0, 1.0, t)],
            |z, w| (z + s - w - t) / (4.0 * (z + s + w + t) * (z + s) * (w + t)),
        )?;
        let i12 = |s: f64, x: f64, t: f64, y: f64| {
            self.double(
                "I12^hs",
                (1.0, P3, 1.0, x),
                (low_apex(s, t), P3, 1.0, y),
                &[Lin(1.0, 0.0, s), Lin(1.0, 1.0, s - t)],
                |z, w| (z + s - w + t) / (2.0 * (z + s) * (z + s + w - t)),
            )
        };
        let (za, wa, ang) = balanced_apex(s, t, f64::INFINITY);
        let i22 = self.double(
            "I22^hs",
            (za, ang, 1.0, x),
            (wa, ang, 1.0, y),
            &[Lin(1.0, 1.0, -s - t)],
            |z, w| (z - s - w + t) / (z - s + w - t),
        )?;
        Ok(KernelBlock {
            k11: i11.finish("K11^hs")?,
            k12: i12(s, x, t, y)?.add(Acc::real(airy_r(s, x, t, y))).finish("K12^hs")?,
            k21: i12(t, y, s, x)?
                .add(Acc::real(airy_r(t, y, s, x)))
                .neg()
                .finish("K21^hs")?,
            k22: i22.add(Acc::real(r22_hs_inf(s, x, t, y))).finish("K22^hs")?,
        })
    }

    /// The Gaussian residual term of `K^{hs;inf}_22` in its contour form,
    /// `-H(s,x;t,y)/(pi i) int_{C_0^{pi/2}} w e^{...} dw`.
    pub fn r22_hs_inf_contour(&self, s: f64, x: f64, t: f64, y: f64) -> Result<f64> {
        positive_times(s, t)?;
        let pre = t * t * t / 3.0 + s * s * s / 3.0 - y * t - x * s;
        let expo = move |w: Complex64| w * w * (t + s) - w * (t * t - s * s) + (y - x) * w;
        let acc = single_integral(
            &self.quad,
            "R22^hs contour",
            0.0,
            P2,
            &[],
            |w| expo(w).re,
            |w| -2.0 * w * (pre + expo(w)).exp(),
        )?;
        acc.finish("R22^hs contour")
    }

    /// `K^{hs;inf}(T+s, x; T+t, y)` on contours pulled back to `C_{1+s}`,
    /// `C_{1-s}`, `C_{1+t}` so that no `exp(T^3)` factors appear. The (2,2)
    /// entry uses [`Kernels::k22_vertical`].
    pub fn hs_inf_shifted(&self, shift: f64, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
        vertical_shift_ok(shift, s, t)?;
        let big = shift;
        let i11 = self.double(
            "I11^hs shifted",
            (1.0 + s, P3, 1.0, x),
            (1.0 + t, P3, 1.0, y),
            &[
                Lin(1.0, 1.0, s + t + 2.0 * big),
                Lin(1.0, 0.0, s + big),
                Lin(0.0, 1.0, t + big),
            ],
            |z, w| (z + s - w - t) / (4.0 * (z + s + w + t + 2.0 * big) * (z + s + big) * (w + t + big)),
        )?;
        let i12 = |s: f64, x: f64, t: f64, y: f64| {
            self.double(
                "I12^hs shifted",
                (1.0 - s, P3, 1.0, x),
                (1.0 + t, P3, 1.0, y),
                &[Lin(1.0, 0.0, s + big), Lin(1.0, 1.0, s - t)],
                |z, w| (z + s - w + t + 2.0 * big) / (2.0 * (z + s + big) * (z + s + w - t)),
            )
        };
        Ok(KernelBlock {
            k11: i11.finish("K11^hs shifted")?,
            k12: i12(s, x, t, y)?
                .add(Acc::real(airy_r(s, x, t, y)))
                .finish("K12^hs shifted")?,
            k21: i12(t, y, s, x)?
                .add(Acc::real(airy_r(t, y, s, x)))
                .neg()
                .finish("K21^hs shifted")?,
            k22: self.k22_vertical(shift, s, x, t, y)?,
        })
    }

    /// `K^{hs;inf}_22(T+s, x; T+t, y)` as one double integral over the
    /// vertical lines `Re z = Re w = 1`.
    pub fn k22_vertical(&self, shift: f64, s: f64, x: f64, t: f64, y: f64) -> Result<f64> {
        vertical_shift_ok(shift, s, t)?;
        let big = shift;
        self.double(
            "K22 vertical",
            (1.0, P2, 1.0, x),
            (1.0, P2, 1.0, y),
            &[Lin(1.0, 1.0, -s - t - 2.0 * big)],
            |z, w| (z - s - w + t) / (z - s + w - t - 2.0 * big),
        )?
        .finish("K22 vertical")
    }

    /// The boundary-parameter kernel `K^{hs;varpi}` in its original contour
    /// layout: the same wedge shapes and the same side of every pole as the
    /// defining formula, with the apex offsets `|varpi| + 3i` compressed to
    /// [`APEX_STEP`] spacing so the exponentials stay inside `f64` range.
    /// The (2,2) entry still carries the intrinsic `exp((varpi+s)^3/3)`
    /// cancellation and is rejected as ill-conditioned when it cannot reach
    /// the [`CANCELLATION_LIMIT`].
    pub fn hs_varpi(&self, p: BoundaryParam, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
        if !(s >= 0.0 && t >= 0.0) {
            return Err(KernelError::InvalidTime {
                value: s.min(t),
                range: "[0, inf)",
            });
        }
        let v = p.varpi;
        let lo = 1.0 + (-v).max(0.0);
        let a1 = lo + APEX_STEP;
        let a3 = lo + 3.0 * APEX_STEP;
        let b2 = v.abs() + 2.0 * APEX_STEP;
        let i11 = self.double(
            "I11^hs;varpi",
            (a1 - s, P3, 1.0, x),
            (a3 - t, P3, 1.0, y),
            &[Lin(1.0, 1.0, s + t), Lin(1.0, 0.0, s), Lin(0.0, 1.0, t)],
            |z, w| (z + s - w - t) * (z + s + v) * (w + t + v) / ((z + s + w + t) * (z + s) * (w + t)),
        )?;
        let i12 = |s: f64, x: f64, t: f64, y: f64| {
            self.double(
                "I12^hs;varpi",
                (a3 - s, P3, 1.0, x),
                (a1 - t, P23, -1.0, y),
                &[Lin(1.0, 0.0, s), Lin(1.0, -1.0, s - t), Lin(0.0, 1.0, v + t)],
                |z, w| (z + s + w + t) / (2.0 * (z + s) * (z + s - w - t)) * (z + v + s) / (w + v + t),
            )
        };
        // The (2,2) terms are of size exp((|varpi|+s)^3/3 + (|varpi|+t)^3/3)
        // before they cancel, so truncate relative to that and double the
        // resolution. Vertical lines through the printed apexes keep the
        // cubic peak at the apex; no pole lies between them and the wedges.
        let growth = ((v.abs() + s).powi(3) + (v.abs() + t).powi(3)) / 3.0;
        let fine = Kernels::new(QuadSettings {
            tol: (self.quad.tol * (-growth).exp()).max(f64::MIN_POSITIVE),
            nodes_per_ray: 2 * self.quad.nodes_per_ray,
            ..self.quad
        });
        let i22 = fine.double(
            "I22^hs;varpi",
            (-b2 - s, P2, -1.0, x),
            (-b2 - t, P2, -1.0, y),
            &[Lin(1.0, 1.0, s + t), Lin(1.0, 0.0, s + v), Lin(0.0, 1.0, t + v)],
            |z, w| (z + s - w - t) / (4.0 * (z + s + w + t) * (z + s + v) * (w + t + v)),
        )?;
        let d = (x - s * s) - (y - t * t);
        let r22 = if d > 0.0 {
            fine.r22_hs_varpi_branch(v, s, x, t, y)?
        } else if d < 0.0 {
            fine.r22_hs_varpi_branch(v, t, y, s, x)?.neg()
        } else {
            Acc::default()
        };
        Ok(KernelBlock {
            k11: i11.finish("K11^hs;varpi")?,
            k12: i12(s, x, t, y)?
                .add(Acc::real(airy_r(s, x, t, y)))
                .finish("K12^hs;varpi")?,
            k21: i12(t, y, s, x)?
                .add(Acc::real(airy_r(t, y, s, x)))
                .neg()
                .finish("K21^hs;varpi")?,
            k22: {
                let acc = i22.add(r22);
                if f64::EPSILON * acc.mass > PRECISE_SWITCH {
                    fine.hs_varpi_k22_precise(v, s, x, t, y, acc.mass)?
                } else {
                    acc.finish("K22^hs;varpi")?
                }
            },
        })
    }

    /// `K^{hs;varpi}_22` on the same contours in extended precision. The
    /// f64 estimate of the absolute quadrature `mass` fixes the working
    /// precision, and each ray is refined until its sum is stable to
    /// `1e-13 / mass`.
    fn hs_varpi_k22_precise(&self, v: f64, s: f64, x: f64, t: f64, y: f64, mass: f64) -> Result<f64> {
        let term = "K22^hs;varpi extended";
        let bits = (mass.log2() + 90.0).max(128.0).ceil() as usize;
        if !mass.is_finite() || bits > MAX_PRECISION_BITS {
            return Err(KernelError::IllConditioned {
                term,
                bound: f64::EPSILON * mass,
                value: f64::NAN,
            });
        }
        let rel = 1e-13 / mass.max(1.0);
        let mut ctx = Ctx::new(bits);
        let b2 = v.abs() + 2.0 * APEX_STEP;

        // I22: both variables on vertical lines, exponents -(z^3/3 - x z).
        let axis = |ctx: &mut Ctx, shift: f64, level: f64| {
            converged_ray(
                ctx,
                term,
                -b2 - shift,
                P2,
                rel,
                |z| (-(z * z * z) / 3.0 + level * z).re,
                |ctx, z| {
                    let e = ctx.exp(&ctx.sub(&ctx.scale(z, &ctx.real(level)), &ctx.cube_third(z)));
                    ctx.div(&e, &ctx.add_re(&ctx.add_re(z, shift), v))
                },
            )
        };
        let (zn, a) = axis(&mut ctx, s, x)?;
        let (wn, mut b) = axis(&mut ctx, t, y)?;
        let big_z: Vec<Cx> = zn.iter().map(|z| ctx.add_re(z, s)).collect();
        let mut big_w: Vec<Cx> = wn.iter().map(|w| ctx.add_re(w, t)).collect();
        // The lower ray of w: nodes conjugate, values minus conjugate.
        let conj = |u: &Cx| Cx {
            re: u.re.clone(),
            im: u.im.neg(),
        };
        big_w.extend(wn.iter().map(|w| conj(&ctx.add_re(w, t))).collect::<Vec<_>>());
        b.extend(b.clone().iter().map(|u| Cx {
            re: u.re.neg(),
            im: u.im.clone(),
        }));
        let c: Vec<Cx> = b.iter().zip(&big_w).map(|(bj, wj)| ctx.mul(bj, wj)).collect();
        // (Z - W)/(Z + W) = 1 - 2W/(Z + W)
        let mut cross = ctx.zero();
        for (ai, zi) in a.iter().zip(&big_z) {
            let mut row = ctx.zero();
            for (cj, wj) in c.iter().zip(&big_w) {
                row = ctx.add(&row, &ctx.div(cj, &ctx.add(zi, wj)));
            }
            cross = ctx.add(&cross, &ctx.mul(ai, &row));
        }
        let sum = |ctx: &Ctx, v: &[Cx]| v.iter().fold(ctx.zero(), |acc, u| ctx.add(&acc, u));
        let ab = ctx.mul(&sum(&ctx, &a), &sum(&ctx, &b));
        let two = ctx.real(2.0);
        let s_uu = ctx.sub(&ab, &ctx.scale(&cross, &two));
        let pi = ctx.pi();
        let p = ctx.bits;
        let i22 = s_uu.re.div(&pi.mul(&pi, p, RM).mul(&ctx.real(8.0), p, RM), p, RM).neg();

        let d = (x - s * s) - (y - t * t);
        let r22 = if d == 0.0 {
            ctx.real(0.0)
        } else {
            let (s, x, t, y, sign) = if d > 0.0 { (s, x, t, y, 1.0) } else { (t, y, s, x, -1.0) };
            let a1 = v.abs() + APEX_STEP;
            // Every constant in the exponents is formed at working precision:
            // an f64 rounding there is amplified by the size of the terms.
            let re = |ctx: &Ctx, u: f64| ctx.cx(u, 0.0);
            let vt = ctx.add_re(&re(&ctx, v), t);
            let k1 = ctx.sub(&ctx.cube_third(&vt), &ctx.scale(&vt, &ctx.real(y)));
            let line1 = line_integral(
                &mut ctx,
                term,
                a1,
                P23,
                rel,
                |z| {
                    let u = s - z;
                    (u * u * u / 3.0 - x * u).re
                },
                |ctx, z| {
                    let u = ctx.sub(&re(ctx, s), z);
                    let e = ctx.add(&ctx.sub(&ctx.cube_third(&u), &ctx.scale(&u, &ctx.real(x))), &k1);
                    let ez = ctx.exp(&e);
                    ctx.div(&ez, &ctx.scale(&ctx.add_re(z, -v), &ctx.real(4.0)))
                },
            )?;
            let vs = ctx.add_re(&re(&ctx, v), s);
            let k2 = ctx.sub(&ctx.cube_third(&vs), &ctx.scale(&vs, &ctx.real(x)));
            let line2 = line_integral(
                &mut ctx,
                term,
                -b2,
                P2,
                rel,
                |w| {
                    let u = t - w;
                    (u * u * u / 3.0 - y * u).re
                },
                |ctx, w| {
                    let u = ctx.sub(&re(ctx, t), w);
                    let e = ctx.add(&ctx.sub(&ctx.cube_third(&u), &ctx.scale(&u, &ctx.real(y))), &k2);
                    let ew = ctx.exp(&e);
                    ctx.div(&ew, &ctx.scale(&ctx.add_re(w, -v), &ctx.real(4.0)))
                },
            )?;
            let mut out = line1.sub(&line2, p, RM);
            if s + t > 0.0 {
                let line3 = line_integral(
                    &mut ctx,
                    term,
                    -b2,
                    P2,
                    rel,
                    |w| {
                        let (a, b) = (t - w, w + s);
                        (a * a * a / 3.0 + b * b * b / 3.0 - y * a - x * b).re
                    },
                    |ctx, w| {
                        // (t - w)^3/3 + (w + s)^3/3 loses nothing at working precision.
                        let a = ctx.sub(&re(ctx, t), w);
                        let b = ctx.add_re(w, s);
                        let cubes = ctx.add(&ctx.cube_third(&a), &ctx.cube_third(&b));
                        let lin = ctx.add(&ctx.scale(&a, &ctx.real(y)), &ctx.scale(&b, &ctx.real(x)));
                        let ew = ctx.exp(&ctx.sub(&cubes, &lin));
                        let den = ctx.scale(&ctx.mul(&ctx.add_re(w, -v), &ctx.add_re(w, v)), &ctx.real(2.0));
                        ctx.div(&ctx.mul(w, &ew), &den)
                    },
                )?;
                out = out.add(&line3, p, RM);
            }
            out.mul(&ctx.real(sign), p, RM)
        };
        let value = to_f64(&i22.add(&r22, p, RM));
        if !value.is_finite() {
            return Err(KernelError::IllConditioned {
                term,
                bound: f64::EPSILON * mass,
                value,
            });
        }
        Ok(value)
    }

    /// The three-line residual term on the branch `x - s^2 > y - t^2`.
    fn r22_hs_varpi_branch(&self, v: f64, s: f64, x: f64, t: f64, y: f64) -> Result<Acc> {
        let a1 = v.abs() + APEX_STEP;
        let b2 = v.abs() + 2.0 * APEX_STEP;
        let cube = |u: Complex64| u * u * u / 3.0;
        let e1 = move |z: Complex64| cube(s - z) + (v + t).powi(3) / 3.0 - x * (s - z) - y * (v + t);
        let line1 = single_integral(
            &self.quad,
            "R22^hs;varpi line 1",
            a1,
            P23,
            &[c(v)],
            |z| e1(z).re,
            |z| e1(z).exp() / (4.0 * (z - v)),
        )?;
        let e2 = move |w: Complex64| cube(t - w) + (v + s).powi(3) / 3.0 - y * (t - w) - x * (v + s);
        let line2 = single_integral(
            &self.quad,
            "R22^hs;varpi line 2",
            -b2,
            P2,
            &[c(v)],
            |w| e2(w).re,
            |w| e2(w).exp() / (4.0 * (w - v)),
        )?;
        let mut out = line1.add(line2.neg());
        if s + t > 0.0 {
            // (t - w)^3/3 + (w + s)^3/3 expanded so the cubes cancel exactly.
            let e3 = move |w: Complex64| {
                (t * t * t + s * s * s) / 3.0 + w * w * (t + s) + w * (s * s - t * t) - y * (t - w) - x * (w + s)
            };
            let line3 = single_integral(
                &self.quad,
                "R22^hs;varpi line 3",
                -b2,
                P2,
                &[c(v), c(-v)],
                |w| e3(w).re,
                |w| w * e3(w).exp() / (2.0 * (w - v) * (w + v)),
            )?;
            out = out.add(line3);
        }
        Ok(out)
    }

    /// The GSE edge kernel on `C_1 x C_1`.
    pub fn gse(&self, x: f64, y: f64) -> Result<KernelBlock> {
        EqualTimeKernel::new(self, EqualTimeFamily::Gse, x.abs().max(y.abs()))?.block_at(x, y)
    }

    /// Expected number of atoms of the equal-time `K^varpi` process in
    /// `[a, inf)`, with the level integral done in closed form.
    pub fn tail_count(&self, p: BoundaryParam, t: f64, a: f64) -> Result<f64> {
        p.require_above_one()?;
        positive_times(t, t)?;
        let v = p.varpi;
        self.double(
            "tail count",
            (1.0, P3, 1.0, a),
            (1.0, P3, 1.0, a),
            &[Lin(1.0, 0.0, t), Lin(1.0, 1.0, 0.0), Lin(0.0, -1.0, v + t)],
            |z, w| (z - w + 2.0 * t) * (v + z + t) / (2.0 * (z + t) * (z + w) * (z + w) * (v - w + t)),
        )?
        .finish("tail count")
    }

    /// The small-time split of `K^{hs;inf}(t_n, x; t_n, y)`.
    pub fn origin_split(&self, t_n: f64, x: f64, y: f64) -> Result<OriginSplit> {
        let k = EqualTimeKernel::new(self, EqualTimeFamily::OriginRegular { t_n }, x.abs().max(y.abs()))?;
        Ok(OriginSplit {
            regular: k.block_at(x, y)?,
            singular: delta_n(t_n, x, y),
            t_n,
        })
    }
}

/// Upper-ray nodes and values `w f(z)` of a rule whose sum has settled to
/// `rel` times its absolute mass. Panels gain 16 nodes per round.
fn converged_ray<L, F>(
    ctx: &mut Ctx,
    term: &'static str,
    apex: f64,
    angle: f64,
    rel: f64,
    log_modulus: L,
    mut f: F,
) -> Result<(Vec<Cx>, Vec<Cx>)>
where
    L: Fn(Complex64) -> f64,
    F: FnMut(&mut Ctx, &Cx) -> Cx,
{
    let radius = quad::truncation_radius(apex, angle, rel * 1e-3, log_modulus).map_err(quad_err(term))?;
    let mut prev: Option<Cx> = None;
    for per_panel in (32..=160).step_by(16) {
        let ray = UpperRay::new(ctx, apex, angle, radius, per_panel);
        let vals: Vec<Cx> = ray
            .nodes
            .iter()
            .zip(&ray.weights)
            .map(|(z, w)| {
                let fz = f(ctx, z);
                ctx.mul(w, &fz)
            })
            .collect();
        let total = vals.iter().fold(ctx.zero(), |acc, u| ctx.add(&acc, u));
        let mass: f64 = vals.iter().map(|u| to_f64(&u.re).abs() + to_f64(&u.im).abs()).sum();
        if let Some(prev) = prev {
            let d = ctx.sub(&total, &prev);
            if to_f64(&d.re).abs() + to_f64(&d.im).abs() <= rel * mass {
                return Ok((ray.nodes, vals));
            }
        }
        prev = Some(total);
    }
    Err(KernelError::QuadratureFailure {
        term,
        source: QuadError::InvalidParameter("extended-precision rule did not settle".into()),
    })
}

/// `(2 pi i)^{-1} int f` over a wedge at working precision, as its real value.
fn line_integral<L, F>(
    ctx: &mut Ctx,
    term: &'static str,
    apex: f64,
    angle: f64,
    rel: f64,
    log_modulus: L,
    f: F,
) -> Result<BigFloat>
where
    L: Fn(Complex64) -> f64,
    F: FnMut(&mut Ctx, &Cx) -> Cx,
{
    let (_, vals) = converged_ray(ctx, term, apex, angle, rel, log_modulus, f)?;
    let total = vals.iter().fold(ctx.zero(), |acc, u| ctx.add(&acc, u));
    let pi = ctx.pi();
    Ok(total.im.div(&pi, ctx.bits, RM))
}

fn positive_times(s: f64, t: f64) -> Result<()> {
    for v in [s, t] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(KernelError::InvalidTime {
                value: v,
                range: "(0, inf)",
            });
        }
    }
    Ok(())
}

fn vertical_shift_ok(shift: f64, s: f64, t: f64) -> Result<()> {
    let ok = shift > -s && shift > -t && shift > 2.0 - s && 2.0 * shift > 2.0 - s - t;
    if ok && shift.is_finite() {
        Ok(())
    } else {
        Err(KernelError::InvalidShift { shift, s, t })
    }
}

/// Apex of `w` for the (1,2) terms once `z` sits at 1: the poles `z = -s`
/// and `z + w = t - s` stay to the left, and `w = varpi + t` to the right.
fn low_apex(s: f64, t: f64) -> f64 {
    (t - s).max(1.0)
}

/// Contours for the (2,2) integrals. The cubic factor peaks at the apex on
/// vertical lines, so both variables move down to the balanced apex just
/// right of the pole `z + w = s + t`, as long as that stays left of the poles
/// at `varpi + s` and `varpi + t`. Otherwise keep `C_{1+s}`, `C_{1+t}`.
fn balanced_apex(s: f64, t: f64, v: f64) -> (f64, f64, f64) {
    let a = 0.5 * (s + t) + 0.5;
    if a + 0.5 < v + s.min(t) {
        (a, a, P2)
    } else {
        (1.0 + s, 1.0 + t, P3)
    }
}

/// Closed Gaussian form of the (2,2) residual term of `K^{hs;inf}`.
pub fn r22_hs_inf(s: f64, x: f64, t: f64, y: f64) -> f64 {
    let big_y = y - t * t - x + s * s;
    let st = t + s;
    let e = s * s * s / 3.0 + t * t * t / 3.0 - x * s - y * t - big_y * big_y / (4.0 * st);
    e.exp() * big_y / (2.0 * PI.sqrt() * st.powf(1.5))
}

/// The singular part `delta_N(x, y)` of the small-time kernel.
pub fn delta_n(t_n: f64, x: f64, y: f64) -> f64 {
    let d = y - x;
    let e = 2.0 * t_n.powi(3) / 3.0 - t_n * (x + y) - d * d / (8.0 * t_n);
    e.exp() * d / (2.0 * PI.sqrt() * (2.0 * t_n).powf(1.5))
}

/// `S_4(x, y) = K_Ai(x, y)/2 - Ai(y) int_x^inf Ai / 4` from the Airy suite.
/// Near the diagonal the Airy kernel uses `Ai'(x)^2 - x Ai(x)^2 - h Ai(x)^2/2`
/// with `h = y - x`.
pub fn s4_airy_form(x: f64, y: f64) -> f64 {
    s4_airy_form_with(x, y, &QuadSettings::default())
}

pub fn s4_airy_form_with(x: f64, y: f64, q: &QuadSettings) -> f64 {
    let ax = quad::airy_suite_with(x, q);
    let ay = quad::airy_suite_with(y, q);
    0.5 * airy_kernel_from(x, y, &ax, &ay) - 0.25 * ay.ai * ax.tail_integral
}

/// The Airy kernel `(Ai(x)Ai'(y) - Ai'(x)Ai(y))/(x - y)`.
pub fn airy_kernel(x: f64, y: f64) -> f64 {
    let q = QuadSettings::default();
    airy_kernel_from(x, y, &quad::airy_suite_with(x, &q), &quad::airy_suite_with(y, &q))
}

const CONFLUENT_GAP: f64 = 1e-5;

fn airy_kernel_from(x: f64, y: f64, ax: &quad::AirySuiteValue, ay: &quad::AirySuiteValue) -> f64 {
    let h = y - x;
    if h.abs() < CONFLUENT_GAP {
        ax.ai_prime * ax.ai_prime - x * ax.ai * ax.ai - 0.5 * h * ax.ai * ax.ai
    } else {
        (ax.ai * ay.ai_prime - ax.ai_prime * ay.ai) / (x - y)
    }
}

/// Families whose both points sit at one time, evaluated on a shared rule so
/// a grid of levels costs one bilinear form per pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum EqualTimeFamily {
    Gse,
    /// The regular part `K^N` of the small-time split.
    OriginRegular {
        t_n: f64,
    },
    /// `K^{hs;inf}(t, .; t, .)`.
    HsInf {
        t: f64,
    },
    /// `K^varpi(t, .; t, .)`.
    Varpi {
        varpi: f64,
        t: f64,
    },
}

/// Equal-time kernel with tabulated rational parts. Levels must satisfy
/// `|x| <= level_box` for the truncation to be valid.
pub struct EqualTimeKernel {
    kernels: Kernels,
    family: EqualTimeFamily,
    axis: Axis,
    g11: DoubleTerm,
    g12: DoubleTerm,
    g22: DoubleTerm,
    level_box: f64,
}

/// Level-dependent quadrature vector of an [`EqualTimeKernel`].
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: f64,
    e: Vec<Complex64>,
}

impl EqualTimeKernel {
    pub fn new(kernels: &Kernels, family: EqualTimeFamily, level_box: f64) -> Result<Self> {
        let level_box = level_box.abs().max(1.0);
        let (apex, name) = match family {
            EqualTimeFamily::Gse => (1.0, "K^GSE"),
            EqualTimeFamily::OriginRegular { t_n } => {
                if !(t_n > 0.0 && t_n <= 0.5) {
                    return Err(KernelError::InvalidTime {
                        value: t_n,
                        range: "(0, 1/2]",
                    });
                }
                (1.0, "K^N")
            }
            EqualTimeFamily::HsInf { t } => {
                positive_times(t, t)?;
                (1.0 + t, "K^hs equal time")
            }
            EqualTimeFamily::Varpi { varpi, t } => {
                BoundaryParam::new(varpi).require_above_one()?;
                positive_times(t, t)?;
                (1.0 + t, "K^varpi equal time")
            }
        };
        let axis = Axis::new(&kernels.quad, apex, P3, 1.0, level_box, name)?;
        let a = &axis;
        let (g11, g12, g22) = match family {
            EqualTimeFamily::Gse => (
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 1.0, 0.0), Lin(1.0, 0.0, 0.0), Lin(0.0, 1.0, 0.0)],
                    |z, w| (z - w) / (4.0 * (z + w) * z * w),
                )?,
                DoubleTerm::build(name, a, a, &[Lin(1.0, 1.0, 0.0), Lin(1.0, 0.0, 0.0)], |z, w| {
                    (z - w) / (4.0 * z * (z + w))
                })?,
                DoubleTerm::build(name, a, a, &[Lin(1.0, 1.0, 0.0)], |z, w| (z - w) / (4.0 * (z + w)))?,
            ),
            EqualTimeFamily::OriginRegular { t_n: tn } => (
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 1.0, 2.0 * tn), Lin(1.0, 0.0, tn), Lin(0.0, 1.0, tn)],
                    |z, w| (z - w) / (4.0 * (z + w + 2.0 * tn) * (z + tn) * (w + tn)),
                )?,
                // The pinned kernel at s = t = t_n carries z - w + 2 t_n here.
                DoubleTerm::build(name, a, a, &[Lin(1.0, 0.0, tn), Lin(1.0, 1.0, 0.0)], |z, w| {
                    (z - w + 2.0 * tn) / (2.0 * (z + tn) * (z + w))
                })?,
                DoubleTerm::build(name, a, a, &[Lin(1.0, 1.0, -2.0 * tn)], |z, w| {
                    (z - w) / (z + w - 2.0 * tn)
                })?,
            ),
            EqualTimeFamily::HsInf { t } => (
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 1.0, 2.0 * t), Lin(1.0, 0.0, t), Lin(0.0, 1.0, t)],
                    |z, w| (z - w) / (4.0 * (z + w + 2.0 * t) * (z + t) * (w + t)),
                )?,
                DoubleTerm::build(name, a, a, &[Lin(1.0, 0.0, t), Lin(1.0, 1.0, 0.0)], |z, w| {
                    (z - w + 2.0 * t) / (2.0 * (z + t) * (z + w))
                })?,
                DoubleTerm::build(name, a, a, &[Lin(1.0, 1.0, -2.0 * t)], |z, w| {
                    (z - w) / (z + w - 2.0 * t)
                })?,
            ),
            EqualTimeFamily::Varpi { varpi: v, t } => (
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 1.0, 2.0 * t), Lin(1.0, 0.0, t), Lin(0.0, 1.0, t)],
                    |z, w| (z - w) * (v + z + t) * (v + w + t) / ((z + w + 2.0 * t) * (z + t) * (w + t)),
                )?,
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 0.0, t), Lin(1.0, 1.0, 0.0), Lin(0.0, -1.0, v + t)],
                    |z, w| (z - w + 2.0 * t) * (v + z + t) / (2.0 * (z + t) * (z + w) * (v - w + t)),
                )?,
                DoubleTerm::build(
                    name,
                    a,
                    a,
                    &[Lin(1.0, 1.0, -2.0 * t), Lin(-1.0, 0.0, v + t), Lin(0.0, -1.0, v + t)],
                    |z, w| (z - w) / (4.0 * (z + w - 2.0 * t) * (v - z + t) * (v - w + t)),
                )?,
            ),
        };
        Ok(EqualTimeKernel {
            kernels: *kernels,
            family,
            axis,
            g11,
            g12,
            g22,
            level_box,
        })
    }

    pub fn family(&self) -> EqualTimeFamily {
        self.family
    }

    pub fn level_box(&self) -> f64 {
        self.level_box
    }

    pub fn prepare(&self, x: f64) -> Prepared {
        Prepared {
            x,
            e: self.axis.weighted(x),
        }
    }

    /// `K_12(x, y)`.
    pub fn k12(&self, px: &Prepared, py: &Prepared) -> Result<f64> {
        self.g12.eval(&px.e, &py.e).finish("K12 equal time")
    }

    pub fn block(&self, px: &Prepared, py: &Prepared) -> Result<KernelBlock> {
        let r22 = match self.family {
            EqualTimeFamily::HsInf { t } => Acc::real(r22_hs_inf(t, px.x, t, py.x)),
            EqualTimeFamily::Varpi { varpi, t } => self.kernels.r22_varpi(varpi, t, px.x, t, py.x)?,
            _ => Acc::default(),
        };
        Ok(KernelBlock {
            k11: self.g11.eval(&px.e, &py.e).finish("K11 equal time")?,
            k12: self.k12(px, py)?,
            k21: self.g12.eval(&py.e, &px.e).neg().finish("K21 equal time")?,
            k22: self.g22.eval(&px.e, &py.e).add(r22).finish("K22 equal time")?,
        })
    }

    pub fn block_at(&self, x: f64, y: f64) -> Result<KernelBlock> {
        self.block(&self.prepare(x), &self.prepare(y))
    }
}

/// A two-point kernel family usable for block matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum KernelFamily {
    Gse,
    HsInf,
    Varpi(f64),
    HsVarpi(f64),
    /// The full small-time kernel `K^N + Delta^N` at time `t_n`; point times
    /// are ignored.
    Origin(f64),
}

impl KernelFamily {
    pub fn block(&self, k: &Kernels, p: SpaceTimePoint, q: SpaceTimePoint) -> Result<KernelBlock> {
        match *self {
            KernelFamily::Gse => k.gse(p.x, q.x),
            KernelFamily::HsInf => k.hs_inf(p.t, p.x, q.t, q.x),
            KernelFamily::Varpi(v) => k.varpi(BoundaryParam::new(v), p.t, p.x, q.t, q.x),
            KernelFamily::HsVarpi(v) => k.hs_varpi(BoundaryParam::new(v), p.t, p.x, q.t, q.x),
            KernelFamily::Origin(tn) => {
                let o = k.origin_split(tn, p.x, q.x)?;
                Ok(KernelBlock {
                    k22: o.regular.k22 + o.singular,
                    ..o.regular
                })
            }
        }
    }
}

pub fn k_airy(s: f64, x: f64, t: f64, y: f64) -> Result<f64> {
    Kernels::default().airy(s, x, t, y)
}

pub fn k_hs_varpi(p: BoundaryParam, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
    Kernels::default().hs_varpi(p, s, x, t, y)
}

pub fn k_varpi(p: BoundaryParam, s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
    Kernels::default().varpi(p, s, x, t, y)
}

pub fn k_hs_inf(s: f64, x: f64, t: f64, y: f64) -> Result<KernelBlock> {
    Kernels::default().hs_inf(s, x, t, y)
}

pub fn k_gse(x: f64, y: f64) -> Result<KernelBlock> {
    Kernels::default().gse(x, y)
}

pub fn k_origin_split(t_n: f64, x: f64, y: f64) -> Result<OriginSplit> {
    Kernels::default().origin_split(t_n, x, y)
}

pub fn k22_vertical(shift: f64, s: f64, x: f64, t: f64, y: f64) -> Result<f64> {
    Kernels::default().k22_vertical(shift, s, x, t, y)
}

pub fn tail_count_closed_form(p: BoundaryParam, t: f64, a: f64) -> Result<f64> {
    Kernels::default().tail_count(p, t, a)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Ai'(0) = -1/(3^{1/3} Gamma(1/3))
    const AI_PRIME_0: f64 = -0.258_819_403_792_806_8;

    fn k() -> Kernels {
        Kernels::default()
    }

    #[test]
    fn extended_airy_kernel_at_origin_is_ai_prime_squared() {
        let v = k().airy(0.0, 0.0, 0.0, 0.0).unwrap();
        assert!((v - AI_PRIME_0 * AI_PRIME_0).abs() < 1e-10, "{v}");
    }

    #[test]
    fn equal_time_extended_kernel_is_the_airy_kernel() {
        for (x, y) in [(0.5, -0.3), (1.0, 2.0), (-1.5, 0.0)] {
            let a = k().airy(0.0, x, 0.0, y).unwrap();
            assert!((a - airy_kernel(x, y)).abs() < 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn residual_term_vanishes_at_equal_times() {
        assert_eq!(airy_r(1.0, 0.3, 1.0, -0.2), 0.0);
        assert_eq!(airy_r(2.0, 0.3, 1.0, -0.2), 0.0);
        assert!(airy_r(1.0, 0.3, 2.0, -0.2) < 0.0);
    }

    #[test]
    fn varpi_kernel_is_antisymmetric_between_points() {
        let p = BoundaryParam::new(2.5);
        let a = k().varpi(p, 0.5, 0.3, 1.2, -0.4).unwrap();
        let b = k().varpi(p, 1.2, -0.4, 0.5, 0.3).unwrap();
        assert!((a.k12 + b.k21).abs() < 1e-10);
        assert!((a.k11 + b.k11).abs() < 1e-10);
        assert!((a.k22 + b.k22).abs() < 1e-10);
    }

    #[test]
    fn small_boundary_parameter_is_rejected() {
        let err = k().varpi(BoundaryParam::new(0.5), 1.0, 0.0, 1.0, 0.0).unwrap_err();
        assert_eq!(err, KernelError::InvalidBoundaryParam(0.5));
    }

    #[test]
    fn apex_offsets_step_by_three() {
        let p = BoundaryParam::new(-2.0);
        assert_eq!(p.apex_offset(1), 5.0);
        assert_eq!(p.apex_offset(3), 11.0);
    }

    #[test]
    fn boundary_kernel_matches_its_deformed_form() {
        let p = BoundaryParam::new(2.0);
        let a = k().hs_varpi(p, 1.0, 0.0, 1.0, 0.0).unwrap();
        let b = k().varpi(p, 1.0, 0.0, 1.0, 0.0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6, "{a:?} {b:?}");
        // R_12 is the extended Airy residual term itself.
        let c = k().hs_varpi(p, 0.5, 0.2, 1.5, -0.1).unwrap();
        let d = k().varpi(p, 0.5, 0.2, 1.5, -0.1).unwrap();
        assert!((c.k12 - d.k12).abs() < 1e-6);
    }

    #[test]
    fn boundary_kernel_vanishes_on_the_diagonal() {
        let b = k().hs_varpi(BoundaryParam::new(2.0), 0.7, 0.4, 0.7, 0.4).unwrap();
        assert!(b.k11.abs() < 1e-10 && b.k22.abs() < 1e-10, "{b:?}");
    }

    #[test]
    fn boundary_kernel_accepts_zero_time_but_not_negative() {
        assert!(k().hs_varpi(BoundaryParam::new(2.0), 0.0, 0.2, 0.5, 0.1).is_ok());
        assert!(matches!(
            k().hs_varpi(BoundaryParam::new(2.0), -0.1, 0.2, 0.5, 0.1),
            Err(KernelError::InvalidTime { .. })
        ));
    }

    #[test]
    fn pinned_residual_vanishes_on_the_branch_line() {
        // y - t^2 = x - s^2
        assert_eq!(r22_hs_inf(1.0, 0.5, 2.0, 3.5), 0.0);
    }

    #[test]
    fn pinned_residual_closed_form_matches_contour_form() {
        let closed = r22_hs_inf(1.0, 0.0, 2.0, 1.0);
        let contour = k().r22_hs_inf_contour(1.0, 0.0, 2.0, 1.0).unwrap();
        assert!((closed - contour).abs() < 1e-8, "{closed} {contour}");
    }

    #[test]
    fn pinned_kernel_is_antisymmetric_between_points() {
        let a = k().hs_inf(0.6, 0.1, 1.1, -0.5).unwrap();
        let b = k().hs_inf(1.1, -0.5, 0.6, 0.1).unwrap();
        assert!((a.k12 + b.k21).abs() < 1e-9);
        assert!((a.k22 + b.k22).abs() < 1e-9);
    }

    #[test]
    fn vertical_form_matches_the_pinned_kernel() {
        let direct = k().hs_inf(2.1, 0.0, 2.0, 0.3).unwrap().k22;
        let vertical = k().k22_vertical(1.5, 0.6, 0.0, 0.5, 0.3).unwrap();
        assert!((direct - vertical).abs() < 1e-7, "{direct} {vertical}");
        let shifted = k().hs_inf_shifted(1.5, 0.6, 0.0, 0.5, 0.3).unwrap();
        let plain = k().hs_inf(2.1, 0.0, 2.0, 0.3).unwrap();
        assert!(shifted.max_abs_diff(&plain) < 1e-7);
    }

    #[test]
    fn vertical_form_rejects_small_shifts() {
        assert!(matches!(
            k().k22_vertical(0.0, 0.0, 0.0, 0.0, 0.0),
            Err(KernelError::InvalidShift { .. })
        ));
    }

    #[test]
    fn vertical_form_decays_with_the_shift() {
        let a = k().k22_vertical(10.0, 0.0, 0.0, 1.0, 0.5).unwrap();
        let b = k().k22_vertical(20.0, 0.0, 0.0, 1.0, 0.5).unwrap();
        assert!(b.abs() < a.abs(), "{a} {b}");
    }

    #[test]
    fn gse_kernel_matches_the_airy_form_at_origin() {
        let b = k().gse(0.0, 0.0).unwrap();
        assert!((b.k12 - s4_airy_form(0.0, 0.0)).abs() < 1e-8);
        assert!(b.k11.abs() < 1e-12 && b.k22.abs() < 1e-12);
    }

    #[test]
    fn gse_kernel_is_antisymmetric() {
        let a = k().gse(0.4, -1.1).unwrap();
        let b = k().gse(-1.1, 0.4).unwrap();
        assert!((a.k12 + b.k21).abs() < 1e-10);
    }

    #[test]
    fn airy_form_decays_to_the_right() {
        assert!(s4_airy_form(0.0, 8.0).abs() < 1e-6);
    }

    #[test]
    fn confluent_airy_kernel_matches_nearby_quotient() {
        let x = 0.7;
        let confluent = airy_kernel(x, x);
        let q = QuadSettings::default();
        let (a, b) = (quad::airy_suite_with(x, &q), quad::airy_suite_with(x + 1e-4, &q));
        let quotient = (a.ai * b.ai_prime - a.ai_prime * b.ai) / (-1e-4);
        let corrected = confluent - 0.5e-4 * a.ai * a.ai;
        assert!((corrected - quotient).abs() < 1e-8, "{corrected} {quotient}");
    }

    #[test]
    fn singular_part_is_odd() {
        assert_eq!(delta_n(0.1, 0.3, 0.3), 0.0);
        assert_eq!(delta_n(0.1, 0.3, -0.2), -delta_n(0.1, -0.2, 0.3));
    }

    #[test]
    fn small_time_kernel_doubles_the_gse_kernel() {
        let o = k().origin_split(1e-3, 0.0, 0.0).unwrap();
        let g = k().gse(0.0, 0.0).unwrap();
        assert!((o.regular.k12 - 2.0 * g.k12).abs() < 1e-3);
        assert!(matches!(
            k().origin_split(0.6, 0.0, 0.0),
            Err(KernelError::InvalidTime { .. })
        ));
    }

    #[test]
    fn small_time_split_reassembles_the_pinned_kernel() {
        let o = k().origin_split(0.2, 0.3, -0.4).unwrap();
        let h = k().hs_inf(0.2, 0.3, 0.2, -0.4).unwrap();
        let whole = KernelBlock {
            k22: o.regular.k22 + o.singular,
            ..o.regular
        };
        assert!(whole.max_abs_diff(&h) < 1e-9, "{whole:?} {h:?}");
    }

    #[test]
    fn equal_time_tables_match_pointwise_kernels() {
        let kk = k();
        let hs = EqualTimeKernel::new(&kk, EqualTimeFamily::HsInf { t: 0.8 }, 2.0).unwrap();
        let a = hs.block_at(0.3, -1.2).unwrap();
        let b = kk.hs_inf(0.8, 0.3, 0.8, -1.2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{a:?} {b:?}");
        let vp = EqualTimeKernel::new(&kk, EqualTimeFamily::Varpi { varpi: 3.0, t: 0.5 }, 2.0).unwrap();
        let a = vp.block_at(1.0, 0.2).unwrap();
        let b = kk.varpi(BoundaryParam::new(3.0), 0.5, 1.0, 0.5, 0.2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9, "{a:?} {b:?}");
        let gse = EqualTimeKernel::new(&kk, EqualTimeFamily::Gse, 2.0).unwrap();
        assert!(
            gse.block_at(0.5, -0.5)
                .unwrap()
                .max_abs_diff(&kk.gse(0.5, -0.5).unwrap())
                < 1e-12
        );
    }
}
