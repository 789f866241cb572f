//! The product Kähler surface `M₁ × M₂` with block metric, complex structure,
//! Kähler forms and curvature, all assembled from per-factor conformal data.
//!
//! Coordinates are `(x₁, y₁, x₂, y₂)`; on a sphere factor `(x, y)` is read as
//! `(θ, φ)`. Each factor metric is `e^{2u}·diag(1, s²)` with `s = 1` on the
//! torus and `s = sin θ` on the sphere.

use crate::base_geometry::ConformalSurfaceMetric;
use crate::error::Error;
use crate::grid::{Bc, PeriodicGrid, Stencil, Topology};

/// Per-node factor jet layout: `u, u_1, u_2, u_11, u_12, u_22, R, R_1, R_2`.
const JET: usize = 9;
/// Sign picked up by each jet entry when reflected through a pole.
const MIRROR: [f64; JET] = [1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0];

/// A conformal factor metric together with its stencil derivatives and
/// curvature, ready for off-grid evaluation.
#[derive(Clone, Debug)]
pub struct FactorField {
    metric: ConformalSurfaceMetric,
    jet: Vec<[f64; JET]>,
    uniform: bool,
}

impl FactorField {
    pub fn new(metric: ConformalSurfaceMetric) -> Result<Self, Error> {
        let grid = metric.grid();
        let u = metric.u();
        let r = metric.scalar_curvature()?;
        let uniform = metric.is_uniform();
        let jet = if uniform {
            vec![[u[0], 0.0, 0.0, 0.0, 0.0, 0.0, r[0], 0.0, 0.0]; grid.len()]
        } else {
            let (du, d2u) = grid.jet(u, Bc::SCALAR);
            let dr = [grid.d1(&r, 0, Bc::SCALAR), grid.d1(&r, 1, Bc::SCALAR)];
            (0..grid.len())
                .map(|k| {
                    [
                        u[k], du[0][k], du[1][k], d2u[0][k], d2u[1][k], d2u[2][k], r[k],
                        dr[0][k], dr[1][k],
                    ]
                })
                .collect()
        };
        Ok(FactorField {
            metric,
            jet,
            uniform,
        })
    }

    pub fn metric(&self) -> &ConformalSurfaceMetric {
        &self.metric
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.metric.grid()
    }

    pub fn topology(&self) -> Topology {
        self.grid().topology()
    }

    /// Scalar curvature at the nodes.
    pub fn scalar_curvature(&self) -> Vec<f64> {
        self.jet.iter().map(|j| j[6]).collect()
    }

    fn shape(&self, x: f64) -> (f64, f64) {
        match self.topology() {
            Topology::Torus => (1.0, 0.0),
            Topology::SphereRotSym => (x.sin(), x.cos()),
        }
    }

    fn point_from(&self, j: &[f64; JET], x: f64) -> FactorPoint {
        let (s, ds) = self.shape(x);
        FactorPoint {
            u: j[0],
            du: [j[1], j[2]],
            d2u: [j[3], j[4], j[5]],
            r: j[6],
            dr: [j[7], j[8]],
            s,
            ds,
        }
    }

    /// Factor data at a grid node.
    pub fn at_node(&self, k: usize) -> FactorPoint {
        let x = self.grid().coord_of(k)[0];
        self.point_from(&self.jet[k], x)
    }

    /// Factor data at an arbitrary chart point (cubic interpolation).
    pub fn at_point(&self, p: [f64; 2]) -> Result<FactorPoint, Error> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::ChartDomain([p[0], p[1], f64::NAN, f64::NAN]));
        }
        if self.topology() == Topology::SphereRotSym && !(p[0] > 0.0 && p[0] < std::f64::consts::PI)
        {
            return Err(Error::ChartDomain([p[0], p[1], f64::NAN, f64::NAN]));
        }
        if self.uniform {
            return Ok(self.point_from(&self.jet[0], p[0]));
        }
        let st = self.grid().stencil_at(p);
        Ok(self.point_from(&self.gather(&st), p[0]))
    }

    fn gather(&self, st: &Stencil) -> [f64; JET] {
        let mut acc = [0.0; JET];
        self.grid().for_each_stencil_node(st, |k, w, mirrored| {
            let v = &self.jet[k];
            if mirrored {
                for c in 0..JET {
                    acc[c] += w * MIRROR[c] * v[c];
                }
            } else {
                for c in 0..JET {
                    acc[c] += w * v[c];
                }
            }
        });
        acc
    }
}

/// Geometry of one factor at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FactorPoint {
    pub u: f64,
    pub du: [f64; 2],
    pub d2u: [f64; 3],
    pub r: f64,
    pub dr: [f64; 2],
    /// `s` and `ds/dx` of the base shape function.
    pub s: f64,
    pub ds: f64,
}

impl FactorPoint {
    pub fn metric(&self) -> [f64; 2] {
        let e = (2.0 * self.u).exp();
        [e, e * self.s * self.s]
    }

    /// `Γ[c][a][b]` of `e^{2u}·diag(1, s²)`.
    pub fn christoffel(&self) -> [[[f64; 2]; 2]; 2] {
        let [u1, u2] = self.du;
        let s = self.s;
        let ds = self.ds;
        let mut g = [[[0.0; 2]; 2]; 2];
        g[0][0][0] = u1;
        g[0][0][1] = u2;
        g[0][1][0] = u2;
        g[0][1][1] = -(s * s * u1 + s * ds);
        g[1][0][0] = -u2 / (s * s);
        g[1][0][1] = u1 + ds / s;
        g[1][1][0] = u1 + ds / s;
        g[1][1][1] = u2;
        g
    }

    /// `ω(∂_x, ∂_y)` of the factor Kähler form.
    pub fn omega(&self) -> f64 {
        (2.0 * self.u).exp() * self.s
    }

    /// Directional derivative of the scalar curvature.
    pub fn dr_along(&self, x: [f64; 2]) -> f64 {
        self.dr[0] * x[0] + self.dr[1] * x[1]
    }
}

/// Both factors at a point of `M`, with tensor evaluation on vectors given
/// by their four coordinate components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProductPoint {
    pub f: [FactorPoint; 2],
}

pub type V4 = [f64; 4];

#[inline]
fn part(x: &V4, f: usize) -> [f64; 2] {
    [x[2 * f], x[2 * f + 1]]
}

impl ProductPoint {
    pub fn metric_diag(&self) -> V4 {
        let a = self.f[0].metric();
        let b = self.f[1].metric();
        [a[0], a[1], b[0], b[1]]
    }

    /// Inner product restricted to factor `f`.
    #[inline]
    pub fn inner_factor(&self, f: usize, x: &V4, y: &V4) -> f64 {
        let g = self.f[f].metric();
        g[0] * x[2 * f] * y[2 * f] + g[1] * x[2 * f + 1] * y[2 * f + 1]
    }

    #[inline]
    pub fn inner(&self, x: &V4, y: &V4) -> f64 {
        self.inner_factor(0, x, y) + self.inner_factor(1, x, y)
    }

    pub fn norm(&self, x: &V4) -> f64 {
        self.inner(x, x).sqrt()
    }

    /// `Γ̄(X, Y)^A = Γ̄^A_BC X^B Y^C`.
    pub fn gamma(&self, x: &V4, y: &V4) -> V4 {
        let mut out = [0.0; 4];
        for f in 0..2 {
            let g = self.f[f].christoffel();
            let (xa, ya) = (part(x, f), part(y, f));
            for c in 0..2 {
                out[2 * f + c] = g[c][0][0] * xa[0] * ya[0]
                    + g[c][0][1] * (xa[0] * ya[1] + xa[1] * ya[0])
                    + g[c][1][1] * xa[1] * ya[1];
            }
        }
        out
    }

    /// The complex structure: `J∂_x = ∂_y/s`, `J∂_y = −s∂_x` per factor.
    pub fn j(&self, x: &V4) -> V4 {
        let s0 = self.f[0].s;
        let s1 = self.f[1].s;
        [-s0 * x[1], x[0] / s0, -s1 * x[3], x[2] / s1]
    }

    pub fn omega_factor(&self, f: usize, x: &V4, y: &V4) -> f64 {
        let (a, b) = (part(x, f), part(y, f));
        self.f[f].omega() * (a[0] * b[1] - a[1] * b[0])
    }

    pub fn omega(&self, x: &V4, y: &V4) -> f64 {
        self.omega_factor(0, x, y) + self.omega_factor(1, x, y)
    }

    /// Volume form `ω²/2` evaluated on four vectors.
    pub fn volume(&self, e: &[V4; 4]) -> f64 {
        let g = self.metric_diag();
        let sq = (g[0] * g[1] * g[2] * g[3]).sqrt();
        det4(e) * sq
    }

    pub fn scalar(&self) -> f64 {
        self.f[0].r + self.f[1].r
    }

    /// `R(X,Y,Z,W)` with `R(X,Y,X,Y) = K·|X∧Y|²`.
    pub fn riemann(&self, x: &V4, y: &V4, z: &V4, w: &V4) -> f64 {
        (0..2)
            .map(|f| {
                0.5 * self.f[f].r
                    * (self.inner_factor(f, x, z) * self.inner_factor(f, y, w)
                        - self.inner_factor(f, x, w) * self.inner_factor(f, y, z))
            })
            .sum()
    }

    pub fn ricci(&self, x: &V4, y: &V4) -> f64 {
        (0..2)
            .map(|f| 0.5 * self.f[f].r * self.inner_factor(f, x, y))
            .sum()
    }

    /// `(∇̄_V Ric)(X, Y)`.
    pub fn nabla_ricci(&self, v: &V4, x: &V4, y: &V4) -> f64 {
        (0..2)
            .map(|f| 0.5 * self.f[f].dr_along(part(v, f)) * self.inner_factor(f, x, y))
            .sum()
    }

    /// `(∇̄_V R)(X, Y, Z, W)`.
    pub fn nabla_riemann(&self, v: &V4, x: &V4, y: &V4, z: &V4, w: &V4) -> f64 {
        (0..2)
            .map(|f| {
                0.5 * self.f[f].dr_along(part(v, f))
                    * (self.inner_factor(f, x, z) * self.inner_factor(f, y, w)
                        - self.inner_factor(f, x, w) * self.inner_factor(f, y, z))
            })
            .sum()
    }
}

fn det4(m: &[V4; 4]) -> f64 {
    let mut a = *m;
    let mut det = 1.0;
    for c in 0..4 {
        let p = (c..4)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap_or(c);
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            det = -det;
        }
        det *= a[c][c];
        for i in c + 1..4 {
            let f = a[i][c] / a[c][c];
            for k in c..4 {
                a[i][k] -= f * a[c][k];
            }
        }
    }
    det
}

/// Dense assembled ambient tensors at a point.
#[derive(Clone, Debug, PartialEq)]
pub struct AmbientPointData {
    pub point: V4,
    pub metric: [[f64; 4]; 4],
    pub inverse: [[f64; 4]; 4],
    /// `christoffel[a][b][c] = Γ̄^a_bc`.
    pub christoffel: [[[f64; 4]; 4]; 4],
    pub riemann: [[[[f64; 4]; 4]; 4]; 4],
    pub ricci: [[f64; 4]; 4],
    pub scalar: f64,
    pub omega: [[f64; 4]; 4],
}

fn basis(a: usize) -> V4 {
    let mut e = [0.0; 4];
    e[a] = 1.0;
    e
}

impl AmbientPointData {
    fn assemble(point: V4, p: &ProductPoint) -> Self {
        let g = p.metric_diag();
        let mut metric = [[0.0; 4]; 4];
        let mut inverse = [[0.0; 4]; 4];
        for a in 0..4 {
            metric[a][a] = g[a];
            inverse[a][a] = 1.0 / g[a];
        }
        let mut christoffel = [[[0.0; 4]; 4]; 4];
        for f in 0..2 {
            let gf = p.f[f].christoffel();
            for c in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        christoffel[2 * f + c][2 * f + a][2 * f + b] = gf[c][a][b];
                    }
                }
            }
        }
        let e: Vec<V4> = (0..4).map(basis).collect();
        let mut riemann = [[[[0.0; 4]; 4]; 4]; 4];
        let mut ricci = [[0.0; 4]; 4];
        let mut omega = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                ricci[a][b] = p.ricci(&e[a], &e[b]);
                omega[a][b] = p.omega(&e[a], &e[b]);
                for c in 0..4 {
                    for d in 0..4 {
                        if a / 2 == b / 2 && b / 2 == c / 2 && c / 2 == d / 2 {
                            riemann[a][b][c][d] = p.riemann(&e[a], &e[b], &e[c], &e[d]);
                        }
                    }
                }
            }
        }
        AmbientPointData {
            point,
            metric,
            inverse,
            christoffel,
            riemann,
            ricci,
            scalar: p.scalar(),
            omega,
        }
    }

    /// `J^a_b = ḡ^{ac} ω_bc`, so that `ω(X, Y) = ḡ(JX, Y)`.
    pub fn complex_structure(&self) -> [[f64; 4]; 4] {
        let mut j = [[0.0; 4]; 4];
        for a in 0..4 {
            for b in 0..4 {
                j[a][b] = (0..4).map(|c| self.inverse[a][c] * self.omega[b][c]).sum();
            }
        }
        j
    }
}

/// `(M₁ × M₂, ḡ₁ ⊕ ḡ₂)` evolving by the Kähler–Ricci flow.
#[derive(Clone, Debug)]
pub struct ProductKahlerAmbient {
    factors: [FactorField; 2],
}

impl ProductKahlerAmbient {
    /// Assemble the product. Both factors must share `r` and their average
    /// scalar curvatures must agree.
    pub fn new(m1: ConformalSurfaceMetric, m2: ConformalSurfaceMetric) -> Result<Self, Error> {
        if m1.r() != m2.r() {
            return Err(Error::Mismatch(format!(
                "factors use different normalization constants r = {} and r = {}",
                m1.r(),
                m2.r()
            )));
        }
        let a1 = m1.average_scalar_curvature()?;
        let a2 = m2.average_scalar_curvature()?;
        if (a1 - a2).abs() > 1e-6 {
            return Err(Error::Mismatch(format!(
                "factors have different average scalar curvatures {a1} and {a2}"
            )));
        }
        Self::unchecked(m1, m2)
    }

    fn unchecked(m1: ConformalSurfaceMetric, m2: ConformalSurfaceMetric) -> Result<Self, Error> {
        Ok(ProductKahlerAmbient {
            factors: [FactorField::new(m1)?, FactorField::new(m2)?],
        })
    }

    pub fn factor(&self, i: usize) -> &FactorField {
        &self.factors[i]
    }

    pub fn metric(&self, i: usize) -> &ConformalSurfaceMetric {
        self.factors[i].metric()
    }

    pub fn r(&self) -> f64 {
        self.factors[0].metric().r()
    }

    pub fn is_stationary(&self) -> bool {
        self.factors.iter().all(|f| {
            let m = f.metric();
            m.is_uniform()
                && m.base().curvature() * (-2.0 * m.u()[0]).exp() - m.r() == 0.0
        })
    }

    /// Fast evaluation at `p`. When `node1` is given, factor 1 is read at that
    /// grid node instead of being interpolated.
    pub fn point(&self, p: V4, node1: Option<usize>) -> Result<ProductPoint, Error> {
        let a = match node1 {
            Some(k) => self.factors[0].at_node(k),
            None => self.factors[0]
                .at_point([p[0], p[1]])
                .map_err(|_| Error::ChartDomain(p))?,
        };
        let b = self.factors[1]
            .at_point([p[2], p[3]])
            .map_err(|_| Error::ChartDomain(p))?;
        Ok(ProductPoint { f: [a, b] })
    }

    pub fn ambient_at(&self, p: V4) -> Result<AmbientPointData, Error> {
        let pp = self.point(p, None)?;
        Ok(AmbientPointData::assemble(p, &pp))
    }

    /// `(ω₁, ω₂, ω)` in coordinates.
    pub fn kahler_form_pair(&self, p: V4) -> Result<[[[f64; 4]; 4]; 3], Error> {
        let pp = self.point(p, None)?;
        let mut out = [[[0.0; 4]; 4]; 3];
        for a in 0..4 {
            for b in 0..4 {
                let (x, y) = (basis(a), basis(b));
                out[0][a][b] = pp.omega_factor(0, &x, &y);
                out[1][a][b] = pp.omega_factor(1, &x, &y);
                out[2][a][b] = pp.omega(&x, &y);
            }
        }
        Ok(out)
    }

    /// One RK4 step of the Kähler–Ricci flow; on a product of surfaces this
    /// is the normalized Ricci flow on each factor.
    pub fn kahler_ricci_step(&self, dt: f64, t: f64) -> Result<Self, Error> {
        if self.is_stationary() {
            return Ok(self.clone());
        }
        let m1 = self.metric(0).ricci_flow_step(dt, t)?;
        let m2 = self.metric(1).ricci_flow_step(dt, t)?;
        Self::unchecked(m1, m2)
    }

    /// Conformal-factor velocities of both factors.
    pub fn velocity(&self) -> Result<[Vec<f64>; 2], Error> {
        Ok([
            self.metric(0).ricci_velocity()?,
            self.metric(1).ricci_velocity()?,
        ])
    }

    /// Replace the conformal factors (keeping grids and `r`).
    pub fn with_factors(&self, u1: Vec<f64>, u2: Vec<f64>) -> Result<Self, Error> {
        Self::unchecked(self.metric(0).with_u(u1)?, self.metric(1).with_u(u2)?)
    }

    pub fn stable_dt(&self) -> f64 {
        self.metric(0).stable_dt().min(self.metric(1).stable_dt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn torus_factor(n: usize, u: impl Fn([f64; 2]) -> f64, r: f64) -> ConformalSurfaceMetric {
        let g = PeriodicGrid::torus(n).unwrap();
        let u = g.field_from_fn(u);
        ConformalSurfaceMetric::new(g, u, r).unwrap()
    }

    fn round_factor(n: usize, u: impl Fn([f64; 2]) -> f64) -> ConformalSurfaceMetric {
        let g = PeriodicGrid::sphere(n).unwrap();
        let u = g.field_from_fn(u);
        ConformalSurfaceMetric::new(g, u, 2.0)
            .unwrap()
            .rescaled_to_area(4.0 * PI)
            .unwrap()
    }

    fn bumpy_torus() -> ProductKahlerAmbient {
        ProductKahlerAmbient::new(
            torus_factor(32, |[x, y]| 0.1 * x.cos() + 0.05 * (x - y).sin(), 0.0),
            torus_factor(32, |[x, y]| 0.08 * y.sin() * x.cos(), 0.0),
        )
        .unwrap()
    }

    fn bumpy_round() -> ProductKahlerAmbient {
        ProductKahlerAmbient::new(
            round_factor(32, |[t, _]| 0.05 * t.cos().powi(2)),
            round_factor(32, |[t, _]| 0.04 * (2.0 * t).cos()),
        )
        .unwrap()
    }

    #[test]
    fn flat_product_is_flat() {
        let a = ProductKahlerAmbient::new(
            torus_factor(16, |_| 0.0, 0.0),
            torus_factor(16, |_| 0.0, 0.0),
        )
        .unwrap();
        let d = a.ambient_at([0.3, 1.0, 2.0, 5.0]).unwrap();
        assert!(d.christoffel.iter().flatten().flatten().all(|&v| v == 0.0));
        assert!(d
            .riemann
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .all(|&v| v == 0.0));
        let [_, _, w] = a.kahler_form_pair([0.3, 1.0, 2.0, 5.0]).unwrap();
        assert_eq!(w[0][1], 1.0);
        assert_eq!(w[2][3], 1.0);
        assert_eq!(w[0][2], 0.0);
        assert_eq!(w[1][0], -1.0);
    }

    #[test]
    fn round_factor_curvature_block() {
        let a = ProductKahlerAmbient::new(round_factor(16, |_| 0.0), round_factor(16, |_| 0.0))
            .unwrap();
        let p = [1.1, 0.4, 0.7, 2.0];
        let d = a.ambient_at(p).unwrap();
        let det1 = 1.1_f64.sin().powi(2);
        assert!((d.riemann[0][1][0][1] - det1).abs() < 1e-12);
        assert!((d.scalar - 4.0).abs() < 1e-12);
        assert!((d.ricci[2][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn christoffels_match_analytic_conformal_formula() {
        let mut errs = Vec::new();
        for n in [32, 64] {
            let a = ProductKahlerAmbient::new(
                torus_factor(n, |[x, _]| 0.1 * x.cos(), 0.0),
                torus_factor(n, |_| 0.0, 0.0),
            )
            .unwrap();
            let mut e: f64 = 0.0;
            for k in 0..a.factor(0).grid().len() {
                let [x, _] = a.factor(0).grid().coord_of(k);
                let g = a.factor(0).at_node(k).christoffel();
                let ux = -0.1 * x.sin();
                e = e.max((g[0][0][0] - ux).abs());
                e = e.max((g[0][1][1] + ux).abs());
                e = e.max((g[1][0][1] - ux).abs());
                e = e.max(g[0][0][1].abs());
            }
            errs.push(e);
        }
        assert!(errs[1] < 2e-4);
        assert!((errs[0] / errs[1]).log2() > 1.9);
    }

    #[test]
    fn assembled_tensors_have_block_structure_and_symmetries() {
        for a in [bumpy_torus(), bumpy_round()] {
            for p in [[0.4, 0.2, 1.3, 0.9], [2.0, 3.0, 0.8, 5.5]] {
                let d = a.ambient_at(p).unwrap();
                for i in 0..4 {
                    for j in 0..4 {
                        assert_eq!(d.ricci[i][j], d.ricci[j][i]);
                        if i / 2 != j / 2 {
                            assert_eq!(d.ricci[i][j], 0.0);
                            assert_eq!(d.metric[i][j], 0.0);
                        }
                        for k in 0..4 {
                            if i / 2 != j / 2 || j / 2 != k / 2 {
                                assert_eq!(d.christoffel[i][j][k], 0.0);
                            }
                            assert_eq!(d.christoffel[i][j][k], d.christoffel[i][k][j]);
                            for l in 0..4 {
                                let r = d.riemann[i][j][k][l];
                                let blocks = [i / 2, j / 2, k / 2, l / 2];
                                if blocks.iter().any(|&b| b != blocks[0]) {
                                    assert_eq!(r, 0.0);
                                }
                                assert!((r + d.riemann[j][i][k][l]).abs() < 1e-14);
                                assert!((r + d.riemann[i][j][l][k]).abs() < 1e-14);
                                assert!((r - d.riemann[k][l][i][j]).abs() < 1e-14);
                                let bianchi =
                                    r + d.riemann[i][k][l][j] + d.riemann[i][l][j][k];
                                assert!(bianchi.abs() < 1e-12);
                            }
                        }
                    }
                }
                let fr = a.factor(0).at_point([p[0], p[1]]).unwrap().r
                    + a.factor(1).at_point([p[2], p[3]]).unwrap().r;
                assert_eq!(d.scalar, fr);
            }
        }
    }

    #[test]
    fn kahler_form_is_compatible_with_metric() {
        let a = bumpy_round();
        let d = a.ambient_at([0.9, 0.0, 1.7, 0.0]).unwrap();
        let j = d.complex_structure();
        for a_ in 0..4 {
            for b in 0..4 {
                let jj: f64 = (0..4).map(|c| j[a_][c] * j[c][b]).sum();
                let id = if a_ == b { -1.0 } else { 0.0 };
                assert!((jj - id).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_chart_domain_is_enforced() {
        let a = bumpy_round();
        assert!(matches!(
            a.ambient_at([1.0, 0.0, 0.0, 0.0]),
            Err(Error::ChartDomain(_))
        ));
        assert!(a.ambient_at([1.0, 0.0, PI + 0.1, 0.0]).is_err());
        assert!(a.ambient_at([1.0, 0.0, 0.5, 0.0]).is_ok());
    }

    #[test]
    fn mismatched_factors_are_rejected() {
        let err = ProductKahlerAmbient::new(
            torus_factor(16, |_| 0.0, 0.0),
            torus_factor(16, |_| 0.0, 2.0),
        );
        assert!(matches!(err, Err(Error::Mismatch(_))));
        let err = ProductKahlerAmbient::new(
            round_factor(16, |_| 0.0),
            {
                let g = PeriodicGrid::torus(16).unwrap();
                ConformalSurfaceMetric::standard(g, 2.0)
            },
        );
        assert!(matches!(err, Err(Error::Mismatch(_))));
    }

    #[test]
    fn kahler_ricci_fixed_points() {
        let flat = ProductKahlerAmbient::new(
            torus_factor(16, |_| 0.0, 0.0),
            torus_factor(16, |_| 0.0, 0.0),
        )
        .unwrap();
        let next = flat.kahler_ricci_step(0.01, 0.0).unwrap();
        assert_eq!(next.metric(0), flat.metric(0));
        let round = ProductKahlerAmbient::new(round_factor(16, |_| 0.0), round_factor(16, |_| 0.0))
            .unwrap();
        let next = round.kahler_ricci_step(round.stable_dt(), 0.0).unwrap();
        assert!(next.metric(1).u().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn product_step_is_componentwise() {
        let m1 = torus_factor(32, |[x, y]| 0.1 * x.cos() * y.cos(), 0.0);
        let m2 = torus_factor(32, |_| 0.0, 0.0);
        let a = ProductKahlerAmbient::new(m1.clone(), m2.clone()).unwrap();
        let dt = a.stable_dt();
        let next = a.kahler_ricci_step(dt, 0.0).unwrap();
        assert_eq!(next.metric(0), &m1.ricci_flow_step(dt, 0.0).unwrap());
        assert_eq!(next.metric(1), &m2);
    }

    #[test]
    fn kahler_form_evolves_by_ricci_form() {
        let a = bumpy_round();
        let p = [0.8, 0.0, 2.1, 0.0];
        let dt = 1e-4;
        let w0 = a.kahler_form_pair(p).unwrap()[2];
        let w1 = a.kahler_ricci_step(dt, 0.0).unwrap().kahler_form_pair(p).unwrap()[2];
        let d = a.ambient_at(p).unwrap();
        let j = d.complex_structure();
        for x in 0..4 {
            for y in 0..4 {
                // −Ric(J∂_x, ∂_y) + (r/2)ω(∂_x, ∂_y)
                let ric_j: f64 = (0..4).map(|c| j[c][x] * d.ricci[c][y]).sum();
                let expect = -ric_j + 0.5 * a.r() * w0[x][y];
                let got = (w1[x][y] - w0[x][y]) / dt;
                assert!((got - expect).abs() < 1e-3, "{x}{y}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn kahler_form_is_parallel_to_second_order() {
        let mut errs = Vec::new();
        for n in [32, 64, 128] {
            let a = ProductKahlerAmbient::new(
                torus_factor(n, |[x, y]| 0.1 * x.cos() + 0.05 * y.sin(), 0.0),
                torus_factor(n, |[x, _]| 0.07 * (2.0 * x).sin(), 0.0),
            )
            .unwrap();
            let p = [0.71, 2.3, 4.1, 1.37];
            let d = a.ambient_at(p).unwrap();
            let dl = 1e-4;
            let mut e: f64 = 0.0;
            for c in 0..4 {
                let mut pp = p;
                let mut pm = p;
                pp[c] += dl;
                pm[c] -= dl;
                let wp = a.kahler_form_pair(pp).unwrap()[2];
                let wm = a.kahler_form_pair(pm).unwrap()[2];
                for x in 0..4 {
                    for y in 0..4 {
                        let dw = (wp[x][y] - wm[x][y]) / (2.0 * dl);
                        let conn: f64 = (0..4)
                            .map(|q| {
                                d.christoffel[q][c][x] * d.omega[q][y]
                                    + d.christoffel[q][c][y] * d.omega[x][q]
                            })
                            .sum();
                        e = e.max((dw - conn).abs());
                    }
                }
            }
            errs.push(e);
        }
        assert!(errs[2] < 5e-4, "{errs:?}");
        assert!((errs[1] / errs[2]).log2() > 1.6, "{errs:?}");
    }

    proptest! {
        #[test]
        fn complex_structure_is_orthogonal_and_squares_to_minus_one(
            p in (0.1f64..3.0, 0.0f64..6.2, 0.1f64..3.0, 0.0f64..6.2),
            x in prop::array::uniform4(-1.0f64..1.0),
            y in prop::array::uniform4(-1.0f64..1.0),
        ) {
            let a = bumpy_round();
            let pt = a.point([p.0, p.1, p.2, p.3], None).unwrap();
            let jx = pt.j(&x);
            let jjx = pt.j(&jx);
            for c in 0..4 {
                prop_assert!((jjx[c] + x[c]).abs() < 1e-9 * (1.0 + x[c].abs()));
            }
            let jy = pt.j(&y);
            let lhs = pt.inner(&jx, &jy);
            prop_assert!((lhs - pt.inner(&x, &y)).abs() < 1e-12 * (1.0 + lhs.abs()) * 10.0);
            // ω(X, JX) = |X|².
            prop_assert!((pt.omega(&x, &jx) - pt.inner(&x, &x)).abs() < 1e-12);
            prop_assert!((pt.omega(&x, &y) - pt.inner(&jx, &y)).abs() < 1e-12);
        }
    }
}
