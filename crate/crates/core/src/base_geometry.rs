//! A compact Riemann surface carrying a conformal metric `e^{2u}·g_base`
//! that evolves by the normalized Ricci flow `∂g/∂t = −½(R − r)g`.

use crate::error::Error;
use crate::grid::{pairwise_sum, Field, PeriodicGrid, Topology};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseKind {
    Flat,
    RoundUnitSphere,
}

impl BaseKind {
    fn of(topology: Topology) -> Self {
        match topology {
            Topology::Torus => BaseKind::Flat,
            Topology::SphereRotSym => BaseKind::RoundUnitSphere,
        }
    }

    /// Scalar curvature of the base metric.
    pub fn curvature(self) -> f64 {
        match self {
            BaseKind::Flat => 0.0,
            BaseKind::RoundUnitSphere => 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConformalSurfaceMetric {
    grid: PeriodicGrid,
    u: Field,
    r: f64,
}

impl ConformalSurfaceMetric {
    pub fn new(grid: PeriodicGrid, u: Field, r: f64) -> Result<Self, Error> {
        grid.check_field(&u)?;
        if let Some(k) = u.iter().position(|v| !v.is_finite()) {
            return Err(Error::blow_up(
                f64::NAN,
                format!("conformal factor not finite at node {k}"),
            ));
        }
        Ok(ConformalSurfaceMetric { grid, u, r })
    }

    /// The base metric itself (`u ≡ 0`).
    pub fn standard(grid: PeriodicGrid, r: f64) -> Self {
        let u = vec![0.0; grid.len()];
        ConformalSurfaceMetric { grid, u, r }
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn u(&self) -> &[f64] {
        &self.u
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn base(&self) -> BaseKind {
        BaseKind::of(self.grid.topology())
    }

    /// True when the conformal factor is identically constant, in which
    /// case every derivative of it vanishes exactly.
    pub fn is_uniform(&self) -> bool {
        self.u.iter().all(|&v| v == self.u[0])
    }

    /// `R = e^{−2u}(R_base − 2Δ_base u)`.
    pub fn scalar_curvature(&self) -> Result<Field, Error> {
        let lap = self.grid.base_laplacian(&self.u);
        let kb = self.base().curvature();
        let r: Field = self
            .u
            .iter()
            .zip(&lap)
            .map(|(u, l)| (-2.0 * u).exp() * (kb - 2.0 * l))
            .collect();
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::blow_up(f64::NAN, "scalar curvature not finite"));
        }
        Ok(r)
    }

    /// `Δ_g f = e^{−2u} Δ_base f` (conformal invariance in two dimensions).
    pub fn laplace_beltrami(&self, f: &[f64]) -> Result<Field, Error> {
        self.grid.check_field(f)?;
        let lap = self.grid.base_laplacian(f);
        Ok(self
            .u
            .iter()
            .zip(&lap)
            .map(|(u, l)| (-2.0 * u).exp() * l)
            .collect())
    }

    /// Velocity of the conformal factor, `∂u/∂t = −¼(R − r)`.
    pub fn ricci_velocity(&self) -> Result<Field, Error> {
        let r = self.r;
        Ok(self
            .scalar_curvature()?
            .into_iter()
            .map(|big_r| -0.25 * (big_r - r))
            .collect())
    }

    /// Ricci tensor `Ric = ½R·g` in chart components (diagonal metrics only,
    /// so the result is `[Ric_11, Ric_22]`).
    pub fn ricci_tensor(&self) -> Result<Vec<[f64; 2]>, Error> {
        let r = self.scalar_curvature()?;
        Ok((0..self.grid.len())
            .map(|k| {
                let [g11, g22] = self.metric_at(k);
                [0.5 * r[k] * g11, 0.5 * r[k] * g22]
            })
            .collect())
    }

    /// Diagonal chart metric at a node.
    pub fn metric_at(&self, k: usize) -> [f64; 2] {
        let e = (2.0 * self.u[k]).exp();
        let s = self.grid.base_density(k);
        [e, e * s * s]
    }

    pub fn with_u(&self, u: Field) -> Result<Self, Error> {
        ConformalSurfaceMetric::new(self.grid.clone(), u, self.r)
    }

    /// Shift `u` by a constant so the total area equals `target`.
    pub fn rescaled_to_area(&self, target: f64) -> Result<Self, Error> {
        let c = 0.5 * (target / self.total_area()).ln();
        self.with_u(self.u.iter().map(|u| u + c).collect())
    }

    /// One classical RK4 step of the normalized Ricci flow.
    pub fn ricci_flow_step(&self, dt: f64, t: f64) -> Result<Self, Error> {
        if self.is_uniform() && (self.base().curvature() * (-2.0 * self.u[0]).exp() - self.r) == 0.0
        {
            return Ok(self.clone());
        }
        let stage = |m: &ConformalSurfaceMetric| {
            m.ricci_velocity()
                .map_err(|_| Error::blow_up(t, "scalar curvature not finite"))
        };
        let shifted = |k: &[f64], c: f64| -> Result<ConformalSurfaceMetric, Error> {
            let u: Field = self.u.iter().zip(k).map(|(u, k)| u + c * k).collect();
            ConformalSurfaceMetric::new(self.grid.clone(), u, self.r)
                .map_err(|_| Error::blow_up(t, "conformal factor not finite"))
        };
        let k1 = stage(self)?;
        let k2 = stage(&shifted(&k1, 0.5 * dt)?)?;
        let k3 = stage(&shifted(&k2, 0.5 * dt)?)?;
        let k4 = stage(&shifted(&k3, dt)?)?;
        let u: Field = (0..self.u.len())
            .map(|i| self.u[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        ConformalSurfaceMetric::new(self.grid.clone(), u, self.r)
            .map_err(|_| Error::blow_up(t + dt, "conformal factor not finite after Ricci step"))
    }

    /// Largest RK4-stable step for the Ricci flow: `0.2·h²` divided by the
    /// diffusion coefficient `½e^{−2u}`.
    pub fn stable_dt(&self) -> f64 {
        let h = self.grid.h();
        let min_e = self
            .u
            .iter()
            .map(|u| (2.0 * u).exp())
            .fold(f64::INFINITY, f64::min);
        0.4 * h * h * min_e
    }

    /// Area of each cell, `e^{2u}·dμ_base`.
    pub fn area_form(&self) -> Field {
        let w = self.grid.cell_measure();
        (0..self.grid.len())
            .map(|k| (2.0 * self.u[k]).exp() * self.grid.base_density(k) * w)
            .collect()
    }

    pub fn total_area(&self) -> f64 {
        pairwise_sum(&self.area_form())
    }

    pub fn total_curvature(&self) -> Result<f64, Error> {
        let r = self.scalar_curvature()?;
        let dmu = self.area_form();
        let prod: Field = r.iter().zip(&dmu).map(|(a, b)| a * b).collect();
        Ok(pairwise_sum(&prod))
    }

    pub fn average_scalar_curvature(&self) -> Result<f64, Error> {
        Ok(self.total_curvature()? / self.total_area())
    }

    /// `∫R dμ − 4πχ`.
    pub fn gauss_bonnet_defect(&self) -> Result<f64, Error> {
        Ok(self.total_curvature()?
            - 4.0 * std::f64::consts::PI * self.grid.topology().euler_characteristic())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn torus(n: usize, u: impl Fn([f64; 2]) -> f64, r: f64) -> ConformalSurfaceMetric {
        let g = PeriodicGrid::torus(n).unwrap();
        let u = g.field_from_fn(u);
        ConformalSurfaceMetric::new(g, u, r).unwrap()
    }

    #[test]
    fn flat_and_round_curvatures() {
        let t = torus(16, |_| 0.0, 0.0);
        assert!(t.scalar_curvature().unwrap().iter().all(|&v| v == 0.0));
        let s = ConformalSurfaceMetric::standard(PeriodicGrid::sphere(16).unwrap(), 2.0);
        assert!(s
            .scalar_curvature()
            .unwrap()
            .iter()
            .all(|&v| (v - 2.0).abs() < 1e-14));
        assert!((s.total_area() - 4.0 * PI).abs() < 1e-12);
        assert!((s.average_scalar_curvature().unwrap() - 2.0).abs() < 1e-12);
        assert!((t.total_area() - 4.0 * PI * PI).abs() < 1e-10);
    }

    #[test]
    fn curvature_of_cosine_bump_matches_analytic_formula() {
        // u = 0.1 cos x: R = −2 e^{−2u} u_xx = 0.2 e^{−0.2 cos x} cos x.
        let exact = |x: f64| 0.2 * (-0.2 * x.cos()).exp() * x.cos();
        let mut errs = Vec::new();
        for n in [32, 64] {
            let m = torus(n, |[x, _]| 0.1 * x.cos(), 0.0);
            let r = m.scalar_curvature().unwrap();
            let e = (0..m.grid().len())
                .map(|k| (r[k] - exact(m.grid().coord_of(k)[0])).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!(errs[1] < 1e-3);
        assert!((errs[0] / errs[1]).log2() > 1.9);
    }

    #[test]
    fn laplace_beltrami_examples() {
        let m = torus(64, |_| 0.0, 0.0);
        let ones = vec![1.0; m.grid().len()];
        assert!(m.laplace_beltrami(&ones).unwrap().iter().all(|v| v.abs() < 1e-12));
        let mut errs = Vec::new();
        for n in [32, 64] {
            let m = torus(n, |[_, y]| 0.05 * y.sin(), 0.0);
            let f = m.grid().field_from_fn(|[x, _]| (2.0 * x).cos());
            let l = m.laplace_beltrami(&f).unwrap();
            let e = (0..m.grid().len())
                .map(|k| {
                    let [x, y] = m.grid().coord_of(k);
                    (l[k] - (-0.1 * y.sin()).exp() * (-4.0 * (2.0 * x).cos())).abs()
                })
                .fold(0.0, f64::max);
            errs.push(e);
        }
        assert!((errs[0] / errs[1]).log2() > 1.9);
    }

    #[test]
    fn gauss_bonnet_holds_on_torus_and_sphere() {
        let m = torus(32, |[x, y]| 0.1 * x.cos() + 0.07 * (x + 2.0 * y).sin(), 0.0);
        assert!(m.gauss_bonnet_defect().unwrap().abs() < 1e-10);
        assert!(m.average_scalar_curvature().unwrap().abs() < 1e-10);
        let g = PeriodicGrid::sphere(32).unwrap();
        let u = g.field_from_fn(|[t, _]| 0.1 * (2.0 * t).cos());
        let s = ConformalSurfaceMetric::new(g, u, 2.0).unwrap();
        assert!(s.gauss_bonnet_defect().unwrap().abs() < 1e-10);
    }

    #[test]
    fn fixed_points_of_the_normalized_flow() {
        let t = torus(16, |_| 0.0, 0.0);
        assert_eq!(t.ricci_flow_step(0.01, 0.0).unwrap(), t);
        let s = ConformalSurfaceMetric::standard(PeriodicGrid::sphere(16).unwrap(), 2.0);
        let s1 = s.ricci_flow_step(s.stable_dt(), 0.0).unwrap();
        assert!(s1.u().iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn ricci_tensor_is_half_scalar_times_metric() {
        let m = torus(16, |[x, y]| 0.1 * x.cos() * y.sin(), 0.0);
        let ric = m.ricci_tensor().unwrap();
        let vel = m.ricci_velocity().unwrap();
        for k in 0..m.grid().len() {
            let g = m.metric_at(k);
            for a in 0..2 {
                // −Ric + (r/2)g equals ∂g/∂t = 2 u_t g.
                let generic = -ric[k][a] + 0.5 * m.r() * g[a];
                assert!((generic - 2.0 * vel[k] * g[a]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rescaling_fixes_area_and_average_curvature() {
        let g = PeriodicGrid::sphere(32).unwrap();
        let u = g.field_from_fn(|[t, _]| 0.2 * t.cos().powi(2));
        let s = ConformalSurfaceMetric::new(g, u, 2.0).unwrap();
        let s = s.rescaled_to_area(4.0 * PI).unwrap();
        assert!((s.total_area() - 4.0 * PI).abs() < 1e-12);
        assert!((s.average_scalar_curvature().unwrap() - 2.0).abs() < 1e-10);
    }

    #[test]
    fn stable_dt_shrinks_with_smaller_conformal_factor() {
        let flat = torus(32, |_| 0.0, 0.0);
        let squeezed = torus(32, |[x, _]| -0.5 + 0.1 * x.cos(), 0.0);
        assert!(squeezed.stable_dt() < flat.stable_dt());
    }

    #[test]
    fn torus_area_is_conserved_by_the_unnormalized_flow() {
        let mut m = torus(32, |[x, y]| 0.3 * x.cos() + 0.2 * (x + y).sin(), 0.0);
        let a0 = m.total_area();
        let spread0 = max_u_spread(&m);
        let dt = m.stable_dt();
        for k in 0..200 {
            m = m.ricci_flow_step(dt, k as f64 * dt).unwrap();
        }
        assert!(max_u_spread(&m) < 0.9 * spread0, "the flow should smooth u");
        assert!((m.total_area() - a0).abs() < 1e-9 * a0);
    }

    fn max_u_spread(m: &ConformalSurfaceMetric) -> f64 {
        let u = m.u();
        let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
        hi - lo
    }

    /// Centered-difference residual of `∂R/∂t = ½ΔR + R²/2 − rR/2`.
    fn curvature_law_residual(m: &ConformalSurfaceMetric, dt: f64) -> f64 {
        let before = m.ricci_flow_step(-dt, 0.0).unwrap().scalar_curvature().unwrap();
        let after = m.ricci_flow_step(dt, 0.0).unwrap().scalar_curvature().unwrap();
        let r = m.scalar_curvature().unwrap();
        let lap = m.laplace_beltrami(&r).unwrap();
        (0..r.len())
            .map(|k| {
                let lhs = (after[k] - before[k]) / (2.0 * dt);
                let rhs = 0.5 * lap[k] + 0.5 * r[k] * r[k] - 0.5 * m.r() * r[k];
                (lhs - rhs).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn scalar_curvature_evolves_by_its_heat_law() {
        let g = PeriodicGrid::sphere(32).unwrap();
        let sphere = ConformalSurfaceMetric::new(g.clone(), g.field_from_fn(|[t, _]| 0.2 * t.cos()), 2.0).unwrap();
        let bumpy = torus(32, |[x, y]| 0.2 * x.cos() * y.sin(), 0.0);
        for m in [sphere, bumpy] {
            let dt = 0.5 * m.stable_dt();
            let e1 = curvature_law_residual(&m, dt);
            let e2 = curvature_law_residual(&m, 0.5 * dt);
            assert!((e1 / e2).log2() >= 1.0, "{e1:e} {e2:e}");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn gauss_bonnet_on_random_conformal_factors(
            c in proptest::array::uniform4(-0.3f64..0.3),
            n in proptest::sample::select(vec![16usize, 32]),
        ) {
            let m = torus(n, |[x, y]| c[0] * x.cos() + c[1] * (x + y).sin() + c[2] * (2.0 * y).cos(), 0.0);
            proptest::prop_assert!(m.gauss_bonnet_defect().unwrap().abs() < 1e-9);
            let g = PeriodicGrid::sphere(n).unwrap();
            let u = g.field_from_fn(|[t, _]| c[0] * t.cos() + c[3] * (2.0 * t).cos());
            let s = ConformalSurfaceMetric::new(g, u, 2.0).unwrap();
            proptest::prop_assert!(s.gauss_bonnet_defect().unwrap().abs() < 1e-9);
        }
    }
}
