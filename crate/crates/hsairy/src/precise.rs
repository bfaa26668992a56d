//! Extended-precision contour sums for integrals whose pieces cancel far
//! beyond what f64 resolves.
//!
//! Rules are built on the upper ray of a wedge only. For the real-parameter
//! kernels evaluated here, `f(conj z) = conj f(z)` and the lower-ray weights
//! are minus the conjugates of the upper ones, so `(2 pi i)^{-1} int f` is
//! `Im(S_up)/pi`, and `(2 pi i)^{-2} int int g` is
//! `-Re(S_up,up + S_up,low)/(2 pi^2)` with `z` on the upper ray only.

use crate::quad;
use astro_float::{BigFloat, Consts, RoundingMode};

const RM: RoundingMode = RoundingMode::ToEven;
/// Growth of successive panel widths away from the apex.
const PANEL_GROWTH: f64 = 1.2;
/// Width of the panel at the apex.
const FIRST_PANEL: f64 = 0.1;

/// A complex number at working precision.
#[derive(Debug, Clone)]
pub struct Cx {
    pub re: BigFloat,
    pub im: BigFloat,
}

/// Working precision plus the constant cache transcendental functions need.
pub struct Ctx {
    pub bits: usize,
    cc: Consts,
}

impl Ctx {
    pub fn new(bits: usize) -> Ctx {
        Ctx {
            bits,
            cc: Consts::new().expect("astro-float constant cache"),
        }
    }

    pub fn real(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, self.bits)
    }

    pub fn cx(&self, re: f64, im: f64) -> Cx {
        Cx {
            re: self.real(re),
            im: self.real(im),
        }
    }

    pub fn zero(&self) -> Cx {
        self.cx(0.0, 0.0)
    }

    pub fn pi(&mut self) -> BigFloat {
        self.cc.pi(self.bits, RM)
    }

    pub fn add(&self, a: &Cx, b: &Cx) -> Cx {
        Cx {
            re: a.re.add(&b.re, self.bits, RM),
            im: a.im.add(&b.im, self.bits, RM),
        }
    }

    pub fn sub(&self, a: &Cx, b: &Cx) -> Cx {
        Cx {
            re: a.re.sub(&b.re, self.bits, RM),
            im: a.im.sub(&b.im, self.bits, RM),
        }
    }

    pub fn add_re(&self, a: &Cx, r: f64) -> Cx {
        Cx {
            re: a.re.add(&self.real(r), self.bits, RM),
            im: a.im.clone(),
        }
    }

    pub fn scale(&self, a: &Cx, r: &BigFloat) -> Cx {
        Cx {
            re: a.re.mul(r, self.bits, RM),
            im: a.im.mul(r, self.bits, RM),
        }
    }

    pub fn mul(&self, a: &Cx, b: &Cx) -> Cx {
        let p = self.bits;
        Cx {
            re: a.re.mul(&b.re, p, RM).sub(&a.im.mul(&b.im, p, RM), p, RM),
            im: a.re.mul(&b.im, p, RM).add(&a.im.mul(&b.re, p, RM), p, RM),
        }
    }

    pub fn div(&self, a: &Cx, b: &Cx) -> Cx {
        let p = self.bits;
        let inv =
            b.re.mul(&b.re, p, RM)
                .add(&b.im.mul(&b.im, p, RM), p, RM)
                .reciprocal(p, RM);
        let re = a.re.mul(&b.re, p, RM).add(&a.im.mul(&b.im, p, RM), p, RM);
        let im = a.im.mul(&b.re, p, RM).sub(&a.re.mul(&b.im, p, RM), p, RM);
        Cx {
            re: re.mul(&inv, p, RM),
            im: im.mul(&inv, p, RM),
        }
    }

    pub fn cube_third(&self, z: &Cx) -> Cx {
        let z3 = self.mul(&self.mul(z, z), z);
        self.scale(&z3, &self.real(3.0).reciprocal(self.bits, RM))
    }

    pub fn exp(&mut self, a: &Cx) -> Cx {
        let p = self.bits;
        let m = a.re.exp(p, RM, &mut self.cc);
        let c = a.im.cos(p, RM, &mut self.cc);
        let s = a.im.sin(p, RM, &mut self.cc);
        Cx {
            re: m.mul(&c, p, RM),
            im: m.mul(&s, p, RM),
        }
    }

    /// Gauss-Legendre nodes and weights on `[-1, 1]`, polished by Newton
    /// steps from the f64 rule.
    fn gauss_legendre(&self, n: usize) -> (Vec<BigFloat>, Vec<BigFloat>) {
        let p = self.bits;
        let (x0, _) = quad::gauss_legendre(n);
        let one = self.real(1.0);
        let two = self.real(2.0);
        let mut xs = Vec::with_capacity(n);
        let mut ws = Vec::with_capacity(n);
        for &start in &x0 {
            let mut x = self.real(start);
            // Each step doubles the correct bits; start from about 50.
            let steps = 2 + (p as f64 / 50.0).log2().ceil().max(0.0) as usize;
            let mut dp = one.clone();
            for _ in 0..steps {
                let (pn, pm) = legendre_pair(&x, n, p);
                // P_n'(x) = n (x P_n - P_{n-1}) / (x^2 - 1)
                let x2m1 = x.mul(&x, p, RM).sub(&one, p, RM);
                dp = x
                    .mul(&pn, p, RM)
                    .sub(&pm, p, RM)
                    .mul(&self.real(n as f64), p, RM)
                    .div(&x2m1, p, RM);
                x = x.sub(&pn.div(&dp, p, RM), p, RM);
            }
            let x2 = x.mul(&x, p, RM);
            let w = two.div(&one.sub(&x2, p, RM).mul(&dp.mul(&dp, p, RM), p, RM), p, RM);
            xs.push(x);
            ws.push(w);
        }
        (xs, ws)
    }
}

/// `(P_n(x), P_{n-1}(x))` by the three-term recurrence.
fn legendre_pair(x: &BigFloat, n: usize, p: usize) -> (BigFloat, BigFloat) {
    let mut p0 = BigFloat::from_f64(1.0, p);
    let mut p1 = x.clone();
    for j in 2..=n {
        let a = BigFloat::from_f64((2 * j - 1) as f64, p);
        let b = BigFloat::from_f64((j - 1) as f64, p);
        let jj = BigFloat::from_f64(j as f64, p);
        let p2 = a
            .mul(x, p, RM)
            .mul(&p1, p, RM)
            .sub(&b.mul(&p0, p, RM), p, RM)
            .div(&jj, p, RM);
        p0 = p1;
        p1 = p2;
    }
    (p1, p0)
}

/// Nodes and weights on the upper ray `apex + r e^{i angle}`, `0 <= r <= radius`.
#[derive(Debug, Clone)]
pub struct UpperRay {
    pub nodes: Vec<Cx>,
    pub weights: Vec<Cx>,
}

impl UpperRay {
    /// Geometric panels starting at [`FIRST_PANEL`] with `per_panel` nodes
    /// each; the last panel ends exactly at `radius`.
    pub fn new(ctx: &mut Ctx, apex: f64, angle: f64, radius: f64, per_panel: usize) -> UpperRay {
        let p = ctx.bits;
        let mut widths = Vec::new();
        let mut covered = 0.0;
        let mut h = FIRST_PANEL;
        while covered + h < radius {
            widths.push(h);
            covered += h;
            h *= PANEL_GROWTH;
        }
        widths.push(radius - covered);
        let (gx, gw) = ctx.gauss_legendre(per_panel);
        let dir = Cx {
            re: ctx.real(angle).cos(p, RM, &mut ctx.cc),
            im: ctx.real(angle).sin(p, RM, &mut ctx.cc),
        };
        let half = ctx.real(0.5);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut lo = ctx.real(0.0);
        for wd in widths {
            let width = ctx.real(wd);
            let hw = width.mul(&half, p, RM);
            let mid = lo.add(&hw, p, RM);
            for (x, w) in gx.iter().zip(&gw) {
                let r = mid.add(&hw.mul(x, p, RM), p, RM);
                let z = ctx.scale(&dir, &r);
                nodes.push(Cx {
                    re: z.re.add(&ctx.real(apex), p, RM),
                    im: z.im,
                });
                weights.push(ctx.scale(&dir, &hw.mul(w, p, RM)));
            }
            lo = lo.add(&width, p, RM);
        }
        UpperRay { nodes, weights }
    }
}

/// Nearest f64 value.
pub fn to_f64(v: &BigFloat) -> f64 {
    if v.is_zero() {
        return 0.0;
    }
    v.to_string().parse().unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_f64() {
        let ctx = Ctx::new(256);
        for v in [1.0, -2.5, 1e-30, 3.0e40, 0.1] {
            assert_eq!(to_f64(&ctx.real(v)), v);
        }
    }

    #[test]
    fn legendre_rule_is_exact_for_high_degree_polynomials() {
        let ctx = Ctx::new(256);
        let (x, w) = ctx.gauss_legendre(20);
        // int_{-1}^1 u^38 du = 2/39
        let mut sum = ctx.real(0.0);
        for (xi, wi) in x.iter().zip(&w) {
            sum = sum.add(&xi.powi(38, 256, RM).mul(wi, 256, RM), 256, RM);
        }
        let err = sum.sub(&ctx.real(2.0).div(&ctx.real(39.0), 256, RM), 256, RM);
        assert!(to_f64(&err).abs() < 1e-70);
    }

    #[test]
    fn vertical_line_integral_of_a_gaussian_matches_the_closed_form() {
        // (2 pi i)^{-1} int_{C_0^{pi/2}} e^{w^2} dw = 1/(2 sqrt(pi))
        let mut ctx = Ctx::new(200);
        let ray = UpperRay::new(&mut ctx, 0.0, std::f64::consts::FRAC_PI_2, 9.0, 32);
        let mut s = ctx.zero();
        for (z, w) in ray.nodes.iter().zip(&ray.weights) {
            let e = ctx.exp(&ctx.mul(z, z));
            s = ctx.add(&s, &ctx.mul(w, &e));
        }
        let pi = ctx.pi();
        let v = to_f64(&s.im.div(&pi, 200, RM));
        assert!((v - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }
}
