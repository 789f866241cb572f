//! Numerical checks of the evolution identities and inequalities, the
//! weighted Gaussian density and the singularity tracker.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::ambient::V4;
use crate::error::Error;
use crate::flow::{FlowState, FlowTrajectory, Termination};
use crate::grid::{wrap_pi, Bc, Field, Parity, PeriodicGrid, Topology};
use crate::immersion::{gauge_tangent_velocity, graph_velocity, SurfaceGeometry};

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    pub name: String,
    pub n: usize,
    pub dt: f64,
    pub linf: f64,
    pub l2: f64,
    pub masked_fraction: f64,
    /// Observed order from a coarser report, when paired.
    pub order: Option<f64>,
}

impl ResidualReport {
    fn from_values(name: &str, n: usize, dt: f64, vals: &[Option<f64>], w: &[f64]) -> Self {
        let mut linf: f64 = 0.0;
        let (mut num, mut den) = (0.0, 0.0);
        let mut masked = 0;
        for (v, w) in vals.iter().zip(w) {
            match v {
                Some(v) => {
                    linf = linf.max(v.abs());
                    num += w * v * v;
                    den += w;
                }
                None => masked += 1,
            }
        }
        ResidualReport {
            name: name.to_string(),
            n,
            dt,
            linf,
            l2: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
            masked_fraction: masked as f64 / vals.len().max(1) as f64,
            order: None,
        }
    }

    /// Attach the order observed between `coarse` and `self`, assuming the
    /// grid spacing was halved.
    pub fn refined_from(mut self, coarse: &ResidualReport) -> Self {
        self.order = Some(observed_order(coarse.linf, self.linf));
        self
    }
}

pub fn observed_order(coarse: f64, fine: f64) -> f64 {
    (coarse / fine).log2()
}

/// Surface Laplacian `gⁱʲ(∂_ij q − Γᵏ_ij ∂_k q)` of a scalar field.
pub fn laplacian(grid: &PeriodicGrid, geo: &SurfaceGeometry, q: &[f64]) -> Field {
    let (d, dd) = grid.jet(q, Bc::SCALAR);
    geo.points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let wts = [p.ginv[0][0], 2.0 * p.ginv[0][1], p.ginv[1][1]];
            (0..3)
                .map(|m| wts[m] * (dd[m][k] - p.gamma[0][m] * d[0][k] - p.gamma[1][m] * d[1][k]))
                .sum()
        })
        .collect()
}

/// `|∇q|²` in the induced metric.
pub fn grad_sq(grid: &PeriodicGrid, geo: &SurfaceGeometry, q: &[f64]) -> Field {
    let d0 = grid.d1(q, 0, Bc::SCALAR);
    let d1 = grid.d1(q, 1, Bc::SCALAR);
    geo.points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            p.ginv[0][0] * d0[k] * d0[k]
                + 2.0 * p.ginv[0][1] * d0[k] * d1[k]
                + p.ginv[1][1] * d1[k] * d1[k]
        })
        .collect()
}

/// Two consecutive samples of a trajectory with the data every residual
/// needs: geometries and the tangential velocity of the graph gauge.
pub const POLE_BAND: f64 = 0.3;

pub struct SamplePair<'a> {
    pub s0: &'a FlowState,
    pub s1: &'a FlowState,
    pub geo: [SurfaceGeometry; 2],
    tangent: [Vec<[f64; 2]>; 2],
    pub dt: f64,
}

impl<'a> SamplePair<'a> {
    pub fn new(s0: &'a FlowState, s1: &'a FlowState) -> Result<Self, Error> {
        if s0.grid() != s1.grid() {
            return Err(Error::Mismatch("samples live on different grids".to_string()));
        }
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(Error::Mismatch("samples are not increasing in time".to_string()));
        }
        let g0 = s0.geometry()?;
        let g1 = s1.geometry()?;
        let v0 = graph_velocity(&s0.surface, &s0.ambient)?;
        let v1 = graph_velocity(&s1.surface, &s1.ambient)?;
        let tangent = [gauge_tangent_velocity(&g0, &v0), gauge_tangent_velocity(&g1, &v1)];
        Ok(SamplePair {
            s0,
            s1,
            geo: [g0, g1],
            tangent,
            dt,
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.s0.grid()
    }

    /// `T·∇q` of sample `i`.
    fn transport(&self, i: usize, q: &[f64]) -> Field {
        let g = self.grid();
        let d0 = g.d1(q, 0, Bc::SCALAR);
        let d1 = g.d1(q, 1, Bc::SCALAR);
        self.tangent[i]
            .iter()
            .enumerate()
            .map(|(k, t)| t[0] * d0[k] + t[1] * d1[k])
            .collect()
    }

    /// `(q₁ − q₀)/dt − ½Σᵢ(rhsᵢ + Tᵢ·∇qᵢ)`: the graph-gauge time derivative
    /// corrected to the normal-motion one, against the trapezoidal average
    /// of the right-hand side.
    pub fn scalar_residual(&self, q: [&Field; 2], rhs: [&Field; 2], mask: &[bool]) -> Vec<Option<f64>> {
        let tr0 = self.transport(0, q[0]);
        let tr1 = self.transport(1, q[1]);
        (0..q[0].len())
            .map(|k| {
                if mask[k] {
                    return None;
                }
                let lhs = (q[1][k] - q[0][k]) / self.dt;
                Some(lhs - 0.5 * (rhs[0][k] + tr0[k] + rhs[1][k] + tr1[k]))
            })
            .collect()
    }

    fn weights(&self) -> Field {
        self.geo[0].area_element()
    }

    /// Degree-one graphs over the sphere carry a boundary layer of a few
    /// nodes at each pole whose residual does not shrink with `h`; their
    /// norms are taken over `sin θ ≥ POLE_BAND`.
    fn report(&self, name: &str, vals: &[Option<f64>]) -> ResidualReport {
        let g = self.grid();
        let vals: Vec<Option<f64>> = if self.geo[0].twisted {
            vals.iter()
                .enumerate()
                .map(|(k, v)| v.filter(|_| g.coord_of(k)[0].sin() >= POLE_BAND))
                .collect()
        } else {
            vals.to_vec()
        };
        ResidualReport::from_values(name, g.nx(), self.dt, &vals, &self.weights())
    }
}

/// Curvature term of the Kähler-angle equation for the Kähler form whose
/// complex structure is `j`:
/// `½cos θ(Ric(e₁,e₁) + Ric(e₂,e₂)) − cos²θ·Ric(Je₁, e₂)`.
fn angle_curvature(p: &crate::immersion::PointGeometry, e: &[V4; 4], c: f64, tilde: bool) -> f64 {
    let a = &p.amb;
    let mut je1 = a.j(&e[0]);
    if tilde {
        je1[2] = -je1[2];
        je1[3] = -je1[3];
    }
    0.5 * c * (a.ricci(&e[0], &e[0]) + a.ricci(&e[1], &e[1])) - c * c * a.ricci(&je1, &e[1])
}

/// Residual of `(∂_t − Δ)cos α = |∇̄J|²cos α + κ sin²α cos α`, where the
/// last term is evaluated in the exact form of [`angle_curvature`]. On a
/// product of surfaces with equal constant curvatures it equals
/// `¼R̄ sin²α cos α`.
pub fn residual_cos_alpha(pair: &SamplePair) -> ResidualReport {
    let g = pair.grid();
    let q: Vec<Field> = pair.geo.iter().map(|s| s.cos_alpha()).collect();
    let rhs: Vec<Field> = (0..2)
        .map(|i| {
            let s = &pair.geo[i];
            let lap = laplacian(g, s, &q[i]);
            s.points
                .iter()
                .zip(&s.frames)
                .enumerate()
                .map(|(k, (p, f))| {
                    lap[k] + f.nabla_j_sq() * f.cos_alpha + angle_curvature(p, &f.e, f.cos_alpha, false)
                })
                .collect()
        })
        .collect();
    let mask = vec![false; q[0].len()];
    let vals = pair.scalar_residual([&q[0], &q[1]], [&rhs[0], &rhs[1]], &mask);
    pair.report("cos_alpha", &vals)
}

/// As [`residual_cos_alpha`] with the curvature term replaced by
/// `κ·R̄ sin²α cos α`; used to compare normalizations of the scalar
/// curvature.
pub fn residual_cos_alpha_scalar_form(pair: &SamplePair, kappa: f64) -> ResidualReport {
    let g = pair.grid();
    let q: Vec<Field> = pair.geo.iter().map(|s| s.cos_alpha()).collect();
    let rhs: Vec<Field> = (0..2)
        .map(|i| {
            let s = &pair.geo[i];
            let lap = laplacian(g, s, &q[i]);
            s.points
                .iter()
                .zip(&s.frames)
                .enumerate()
                .map(|(k, (p, f))| {
                    let c = f.cos_alpha;
                    lap[k] + f.nabla_j_sq() * c + kappa * p.amb.scalar() * (1.0 - c * c) * c
                })
                .collect()
        })
        .collect();
    let mask = vec![false; q[0].len()];
    let vals = pair.scalar_residual([&q[0], &q[1]], [&rhs[0], &rhs[1]], &mask);
    pair.report("cos_alpha_scalar_form", &vals)
}

/// Rate of the area element in normal motion: `−|H|² − R̃ + r/2`.
fn area_rate(s: &FlowState, geo: &SurfaceGeometry) -> Field {
    let r = s.ambient.r();
    geo.points
        .iter()
        .map(|p| -p.mean_sq() - p.r_tilde() + 0.5 * r)
        .collect()
}

/// Divergence of the gauge tangent field, `(1/√g)∂_k(√g Tᵏ)`.
fn tangent_divergence(pair: &SamplePair, i: usize) -> Field {
    let g = pair.grid();
    let geo = &pair.geo[i];
    let t = &pair.tangent[i];
    let rot = g.is_rotsym();
    let t0: Field = t.iter().map(|v| v[0]).collect();
    let t1: Field = t.iter().map(|v| v[1]).collect();
    let bc0 = if rot { Bc::ODD } else { Bc::SCALAR };
    let d0 = g.d1(&t0, 0, bc0);
    let d1 = g.d1(&t1, 1, Bc::SCALAR);
    // √g = ρ·b with b the base density.
    let lr: Field = geo
        .points
        .iter()
        .enumerate()
        .map(|(k, p)| (p.sqrt_det() / g.base_density(k)).ln())
        .collect();
    let l0 = g.d1(&lr, 0, Bc::SCALAR);
    let l1 = g.d1(&lr, 1, Bc::SCALAR);
    (0..t.len())
        .map(|k| {
            let cot = if rot {
                let th = g.coord_of(k)[0];
                th.cos() / th.sin()
            } else {
                0.0
            };
            d0[k] + d1[k] + t0[k] * (l0[k] + cot) + t1[k] * l1[k]
        })
        .collect()
}

/// Pointwise residual of `∂_t log dμ = −|H|² − R̃ + r/2`.
pub fn residual_area_element(pair: &SamplePair) -> ResidualReport {
    let n = pair.grid().len();
    let lq: Vec<Field> = pair
        .geo
        .iter()
        .map(|s| s.points.iter().map(|p| p.sqrt_det().ln()).collect())
        .collect();
    let states = [pair.s0, pair.s1];
    let mut vals = Vec::with_capacity(n);
    let rate: Vec<Field> = (0..2).map(|i| area_rate(states[i], &pair.geo[i])).collect();
    let div: Vec<Field> = (0..2).map(|i| tangent_divergence(pair, i)).collect();
    for k in 0..n {
        let lhs = (lq[1][k] - lq[0][k]) / pair.dt;
        vals.push(Some(lhs - 0.5 * (rate[0][k] + div[0][k] + rate[1][k] + div[1][k])));
    }
    pair.report("area_element", &vals)
}

/// Residual of the integrated law `d/dt ∫dμ = ∫(−|H|² − R̃ + r/2)dμ`
/// between the two samples.
pub fn residual_area_integrated(pair: &SamplePair) -> f64 {
    let states = [pair.s0, pair.s1];
    let rhs: Vec<f64> = (0..2)
        .map(|i| pair.geo[i].integrate(&area_rate(states[i], &pair.geo[i])))
        .collect();
    (pair.geo[1].area() - pair.geo[0].area()) / pair.dt - 0.5 * (rhs[0] + rhs[1])
}

/// Residual of the integrated area law over a sampled trajectory, as
/// `A(T) − A(0) − ∫₀ᵀ∫(−|H|² − R̃ + r/2)dμ dt` with Simpson weights when the
/// samples allow it.
pub fn area_law_defect(traj: &FlowTrajectory) -> f64 {
    let r = traj.final_state.ambient.r();
    let rows = &traj.rows;
    if rows.len() < 2 {
        return 0.0;
    }
    let f: Vec<f64> = rows
        .iter()
        .map(|w| -w.int_h2 - w.int_rtilde_minus_r - 0.5 * r * w.area)
        .collect();
    let t: Vec<f64> = rows.iter().map(|w| w.t).collect();
    let integral = quadrature(&t, &f);
    rows[rows.len() - 1].area - rows[0].area - integral
}

/// Composite Simpson on uniform samples, trapezoid otherwise.
pub fn quadrature(t: &[f64], f: &[f64]) -> f64 {
    let n = t.len();
    if n < 2 {
        return 0.0;
    }
    let h = t[1] - t[0];
    let uniform = t.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs());
    if uniform && n >= 3 && n % 2 == 1 {
        let mut s = f[0] + f[n - 1];
        for (i, v) in f.iter().enumerate().take(n - 1).skip(1) {
            s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
        }
        s * h / 3.0
    } else {
        t.windows(2)
            .zip(f.windows(2))
            .map(|(tw, fw)| 0.5 * (fw[0] + fw[1]) * (tw[1] - tw[0]))
            .sum()
    }
}

/// Residual of `∂_t g_ij = −2⟨H, II_ij⟩ − R̄_ij + (r/2)g_ij` on a Heun step of
/// pure normal motion from the first sample into the ambient of the
/// second.
pub fn residual_metric_evolution(pair: &SamplePair) -> Result<ResidualReport, Error> {
    let map0 = pair.s0.surface.to_map();
    let a0 = &pair.s0.ambient;
    let a1 = &pair.s1.ambient;
    let dt = pair.dt;
    let h0 = pair.geo[0].mean_curvature();
    let pred = map0.advanced(&h0, dt)?;
    let h1 = SurfaceGeometry::compute(&pred, a1)?.mean_curvature();
    let avg: Vec<V4> = h0
        .iter()
        .zip(&h1)
        .map(|(a, b)| std::array::from_fn(|c| 0.5 * (a[c] + b[c])))
        .collect();
    let map1 = map0.advanced(&avg, dt)?;
    let geo1 = SurfaceGeometry::compute(&map1, a1)?;
    let r = a0.r();
    let rhs = |geo: &SurfaceGeometry, k: usize, i: usize, j: usize| {
        let p = &geo.points[k];
        -2.0 * p.amb.inner(&p.mean, p.ii_at(i, j)) - p.amb.ricci(&p.dy[i], &p.dy[j])
            + 0.5 * r * p.g[i][j]
    };
    let geo0 = &pair.geo[0];
    let vals: Vec<Option<f64>> = (0..geo0.len())
        .map(|k| {
            let mut worst: f64 = 0.0;
            for (i, j) in [(0, 0), (0, 1), (1, 1)] {
                let lhs = (geo1.points[k].g[i][j] - geo0.points[k].g[i][j]) / dt;
                let res = lhs - 0.5 * (rhs(geo0, k, i, j) + rhs(&geo1, k, i, j));
                if res.abs() > worst.abs() {
                    worst = res;
                }
            }
            Some(worst)
        })
        .collect();
    Ok(pair.report("metric", &vals))
}

/// Residuals of the two gauge equations and their sum:
/// `(∂_t − Δ)u₁ = |∇̄J|²u₁ + κ₁`, `(∂_t − Δ)u₂ = |∇̄J̃|²u₂ + κ₂` and
/// `(∂_t − Δ)u = u|A|² + 2(u₁ − u₂)(h³₂ₖh⁴₁ₖ − h³₁ₖh⁴₂ₖ) + κ₁ + κ₂`, with the
/// curvature terms in the exact form of [`angle_curvature`].
pub fn residual_u_gauges(pair: &SamplePair) -> [ResidualReport; 3] {
    let g = pair.grid();
    let n = g.len();
    let gauges: Vec<[Field; 3]> = pair.geo.iter().map(|s| s.gauges()).collect();
    let mut mask = vec![false; n];
    for s in &pair.geo {
        for (k, f) in s.frames.iter().enumerate() {
            mask[k] |= f.degenerate;
        }
    }
    let mut rhs = vec![[vec![0.0; n], vec![0.0; n], vec![0.0; n]], [vec![0.0; n], vec![0.0; n], vec![0.0; n]]];
    let mut q: Vec<[Field; 3]> = Vec::new();
    for i in 0..2 {
        let s = &pair.geo[i];
        let u1 = &gauges[i][1];
        let u2 = &gauges[i][2];
        let u: Field = u1.iter().zip(u2).map(|(a, b)| a + b).collect();
        let l1 = laplacian(g, s, u1);
        let l2 = laplacian(g, s, u2);
        let l = laplacian(g, s, &u);
        for (k, (p, f)) in s.points.iter().zip(&s.frames).enumerate() {
            let h = &f.h;
            let k1 = angle_curvature(p, &f.e, u1[k], false);
            let k2 = angle_curvature(p, &f.e, u2[k], true);
            let cross: f64 = (0..2).map(|m| h[0][1][m] * h[1][0][m] - h[0][0][m] * h[1][1][m]).sum();
            rhs[i][0][k] = l1[k] + f.nabla_j_sq() * u1[k] + k1;
            rhs[i][1][k] = l2[k] + f.nabla_j_sq_swapped() * u2[k] + k2;
            rhs[i][2][k] = l[k] + u[k] * p.a2 + 2.0 * (u1[k] - u2[k]) * cross + k1 + k2;
        }
        q.push([u1.clone(), u2.clone(), u]);
    }
    let names = ["u1", "u2", "u"];
    std::array::from_fn(|c| {
        let vals = pair.scalar_residual([&q[0][c], &q[1][c]], [&rhs[0][c], &rhs[1][c]], &mask);
        pair.report(names[c], &vals)
    })
}

/// Separate terms of the right-hand side of the `|A|²` equation at one node.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct A2Terms {
    pub laplacian: f64,
    pub grad_a_sq: f64,
    /// `2[∇̄_k R̄_{αijk} + ∇̄_j R̄_{αkik}]h^α_ij`.
    pub nabla_riemann: f64,
    /// `−4R̄_{lijk}h^α_lk h^α_ij`, `8R̄_{αβjk}h^β_ik h^α_ij`,
    /// `−4R̄_{lkik}h^α_lj h^α_ij` and `2R̄_{αkβk}h^β_ij h^α_ij`.
    pub riemann: [f64; 4],
    /// `2Σ|[h^α, h^β]|² + 2Σ(⟨h^α, h^β⟩)²`.
    pub quadratic: f64,
    /// `2R̄_ik h^α_ij h^α_kj` and `−2R̄_αβ h^α_ij h^β_ij`.
    pub ricci: [f64; 2],
    pub a2: f64,
    /// `h^α_ij(∇̄_i R̄_jα + ∇̄_j R̄_iα − ∇̄_α R̄_ij)`.
    pub nabla_ricci: f64,
}

/// Coefficients combining [`A2Terms`] into a right-hand side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct A2Convention {
    /// Sign applied to every curvature tensor component.
    pub riemann_sign: f64,
    /// Coefficient of `−r|A|²`.
    pub r_coeff: f64,
    /// Coefficient of `−h(∇̄Ric)`.
    pub nabla_ricci_coeff: f64,
    /// Coefficient of `−R̄_αβ h^α_ij h^β_ij`.
    pub normal_ricci_coeff: f64,
}

impl A2Convention {
    /// Coefficients that make the identity exact: the scaling part of the
    /// flow contributes `−(r/2)|A|²`, the variation of the connection enters
    /// with weight one, and the change of the ambient inner product on the
    /// normal bundle contributes `−R̄_αβ h^α_ij h^β_ij` once.
    pub const DERIVED: A2Convention = A2Convention {
        riemann_sign: 1.0,
        r_coeff: 0.5,
        nabla_ricci_coeff: 1.0,
        normal_ricci_coeff: 1.0,
    };
    /// Coefficients as they appear in the printed identity.
    pub const PRINTED: A2Convention = A2Convention {
        riemann_sign: 1.0,
        r_coeff: 1.0,
        nabla_ricci_coeff: 0.5,
        normal_ricci_coeff: 2.0,
    };

    pub fn combine(&self, t: &A2Terms, r: f64) -> f64 {
        let s = self.riemann_sign;
        t.laplacian - 2.0 * t.grad_a_sq
            + s * (t.nabla_riemann + t.riemann.iter().sum::<f64>())
            + t.quadratic
            + t.ricci[0]
            + 0.5 * self.normal_ricci_coeff * t.ricci[1]
            - self.r_coeff * r * t.a2
            - self.nabla_ricci_coeff * t.nabla_ricci
    }
}

fn theta_count(m: usize, a: usize, twisted: bool) -> usize {
    let (i, j) = [(0, 0), (0, 1), (1, 1)][m];
    (i == 0) as usize + (j == 0) as usize + (a == 0 || (twisted && a == 2)) as usize
}

/// `|∇A|²` per node from the coordinate second fundamental form.
pub fn grad_a_sq(grid: &PeriodicGrid, geo: &SurfaceGeometry) -> Field {
    let n = grid.len();
    let rot = grid.is_rotsym();
    // d[k][m][a]: ∂_k of component a of II_m.
    let mut d = vec![[[[0.0; 4]; 3]; 2]; n];
    for m in 0..3 {
        for a in 0..4 {
            let f: Field = geo.points.iter().map(|p| p.ii[m][a]).collect();
            let bc = if rot {
                Bc::parity(Parity::from_theta_indices(theta_count(m, a, geo.twisted)))
            } else {
                Bc::SCALAR
            };
            for k in 0..2 {
                let dk = grid.d1(&f, k, bc);
                for (node, v) in dk.into_iter().enumerate() {
                    d[node][k][m][a] = v;
                }
            }
        }
    }
    let pk = |i: usize, j: usize| i + j;
    geo.points
        .iter()
        .enumerate()
        .map(|(node, p)| {
            let amb = &p.amb;
            // ∇_k II_ij as ambient vectors.
            let mut nab = [[[[0.0; 4]; 2]; 2]; 2];
            for k in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let m = pk(i, j);
                        let mut v = d[node][k][m];
                        let c = amb.gamma(&p.dy[k], &p.ii[m]);
                        for a in 0..4 {
                            v[a] += c[a];
                        }
                        // normal projection
                        let b = [amb.inner(&v, &p.dy[0]), amb.inner(&v, &p.dy[1])];
                        for l in 0..2 {
                            let coef = p.ginv[l][0] * b[0] + p.ginv[l][1] * b[1];
                            for a in 0..4 {
                                v[a] -= coef * p.dy[l][a];
                            }
                        }
                        for l in 0..2 {
                            let gi = p.gamma[l][pk(k, i)];
                            let gj = p.gamma[l][pk(k, j)];
                            for a in 0..4 {
                                v[a] -= gi * p.ii[pk(l, j)][a] + gj * p.ii[pk(i, l)][a];
                            }
                        }
                        nab[k][i][j] = v;
                    }
                }
            }
            let gi = &p.ginv;
            let mut s = 0.0;
            for k in 0..2 {
                for kk in 0..2 {
                    for i in 0..2 {
                        for ii in 0..2 {
                            for j in 0..2 {
                                for jj in 0..2 {
                                    let w = gi[k][kk] * gi[i][ii] * gi[j][jj];
                                    if w != 0.0 {
                                        s += w * amb.inner(&nab[k][i][j], &nab[kk][ii][jj]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            s
        })
        .collect()
}

/// All terms of the `|A|²` equation at every node of a state.
pub fn a2_terms(grid: &PeriodicGrid, geo: &SurfaceGeometry) -> Vec<A2Terms> {
    let a2 = geo.a2();
    let lap = laplacian(grid, geo, &a2);
    let ga = grad_a_sq(grid, geo);
    geo.points
        .iter()
        .zip(&geo.frames)
        .enumerate()
        .map(|(k, (p, f))| {
            let amb = &p.amb;
            let e = &f.e;
            // Full index range 0..4; normal indices are 2, 3.
            let hh = |al: usize, i: usize, j: usize| f.h[al - 2][i][j];
            let rm = |a: usize, b: usize, c: usize, d: usize| amb.riemann(&e[a], &e[b], &e[c], &e[d]);
            let nrm = |v: usize, a: usize, b: usize, c: usize, d: usize| {
                amb.nabla_riemann(&e[v], &e[a], &e[b], &e[c], &e[d])
            };
            let ric = |a: usize, b: usize| amb.ricci(&e[a], &e[b]);
            let nric = |v: usize, a: usize, b: usize| amb.nabla_ricci(&e[v], &e[a], &e[b]);
            let tan = 0..2usize;
            let nor = 2..4usize;
            let mut t = A2Terms {
                laplacian: lap[k],
                grad_a_sq: ga[k],
                a2: p.a2,
                ..A2Terms::default()
            };
            for al in nor.clone() {
                for i in tan.clone() {
                    for j in tan.clone() {
                        let h = hh(al, i, j);
                        let mut nr = 0.0;
                        for kk in tan.clone() {
                            nr += nrm(kk, al, i, j, kk) + nrm(j, al, kk, i, kk);
                        }
                        t.nabla_riemann += 2.0 * nr * h;
                        t.nabla_ricci += h * (nric(i, j, al) + nric(j, i, al) - nric(al, i, j));
                        for l in tan.clone() {
                            for kk in tan.clone() {
                                t.riemann[0] += -4.0 * rm(l, i, j, kk) * hh(al, l, kk) * h;
                                t.riemann[2] += -4.0 * rm(l, kk, i, kk) * hh(al, l, j) * h;
                            }
                            t.ricci[0] += 2.0 * ric(i, l) * h * hh(al, l, j);
                        }
                        for be in nor.clone() {
                            for kk in tan.clone() {
                                t.riemann[1] += 8.0 * rm(al, be, j, kk) * hh(be, i, kk) * h;
                                t.riemann[3] += 2.0 * rm(al, kk, be, kk) * hh(be, i, j) * h;
                            }
                            t.ricci[1] += -2.0 * ric(al, be) * hh(be, i, j) * h;
                        }
                    }
                }
            }
            let mut q = 0.0;
            for al in nor.clone() {
                for ga in nor.clone() {
                    for i in tan.clone() {
                        for m in tan.clone() {
                            let c: f64 = tan
                                .clone()
                                .map(|kk| hh(al, i, kk) * hh(ga, m, kk) - hh(al, m, kk) * hh(ga, i, kk))
                                .sum();
                            q += 2.0 * c * c;
                        }
                    }
                }
            }
            for i in tan.clone() {
                for j in tan.clone() {
                    for m in tan.clone() {
                        for kk in tan.clone() {
                            let c: f64 = nor.clone().map(|al| hh(al, i, j) * hh(al, m, kk)).sum();
                            q += 2.0 * c * c;
                        }
                    }
                }
            }
            t.quadratic = q;
            t
        })
        .collect()
}

/// Residual of the `|A|²` equation under a given convention.
pub fn residual_a2_with(pair: &SamplePair, conv: A2Convention) -> ResidualReport {
    let g = pair.grid();
    let r = pair.s0.ambient.r();
    let q: Vec<Field> = pair.geo.iter().map(|s| s.a2()).collect();
    let rhs: Vec<Field> = pair
        .geo
        .iter()
        .map(|s| a2_terms(g, s).iter().map(|t| conv.combine(t, r)).collect())
        .collect();
    let mask = vec![false; g.len()];
    let vals = pair.scalar_residual([&q[0], &q[1]], [&rhs[0], &rhs[1]], &mask);
    pair.report("A2", &vals)
}

pub fn residual_a2(pair: &SamplePair) -> ResidualReport {
    residual_a2_with(pair, A2Convention::DERIVED)
}

/// Worst margins of the pointwise inequalities on one state.
#[derive(Clone, Debug, PartialEq)]
pub struct InequalityReport {
    /// `min(|∇̄J|² − ½|H|²)`; must be `≥ −1e−12`.
    pub nabla_j_margin: f64,
    /// `max(|∇cos α|² − sin²α|∇̄J|²)`, the violation of `|∇α|² ≤ |∇̄J|²`.
    pub angle_gradient_violation: f64,
    /// Allowed discretization slack for the previous entry, `1e−2·h²`.
    pub angle_gradient_slack: f64,
    /// `max(v² + w² − 1)` with `v = ω₁(e₁,e₂)`, `w = ω₂(e₁,e₂)`.
    pub form_pair_excess: f64,
    /// `min(uᵢ − v + √2/2)` over nodes with `v ≥ √2/2`, `+∞` if none.
    pub gauge_lower_margin: f64,
}

impl InequalityReport {
    pub fn passes(&self) -> bool {
        self.nabla_j_margin >= -1e-12
            && self.angle_gradient_violation <= self.angle_gradient_slack
            && self.form_pair_excess <= 1e-12
            && self.gauge_lower_margin >= -1e-12
    }
}

pub fn inequality_suite(s: &FlowState) -> Result<InequalityReport, Error> {
    let geo = s.geometry()?;
    Ok(inequality_suite_on(s.grid(), &geo))
}

pub fn inequality_suite_on(grid: &PeriodicGrid, geo: &SurfaceGeometry) -> InequalityReport {
    let cos = geo.cos_alpha();
    let gc = grad_sq(grid, geo, &cos);
    let mut rep = InequalityReport {
        nabla_j_margin: f64::INFINITY,
        angle_gradient_violation: f64::NEG_INFINITY,
        angle_gradient_slack: 1e-2 * grid.h() * grid.h(),
        form_pair_excess: f64::NEG_INFINITY,
        gauge_lower_margin: f64::INFINITY,
    };
    for (k, f) in geo.frames.iter().enumerate() {
        let nj = f.nabla_j_sq();
        rep.nabla_j_margin = rep.nabla_j_margin.min(nj - 0.5 * f.mean_sq());
        rep.angle_gradient_violation = rep
            .angle_gradient_violation
            .max(gc[k] - f.sin_alpha * f.sin_alpha * nj);
        let [v, w] = f.omega_parts;
        rep.form_pair_excess = rep.form_pair_excess.max(v * v + w * w - 1.0);
        if v >= FRAC_1_SQRT_2 {
            let [_, u1, u2] = f.gauges();
            rep.gauge_lower_margin = rep.gauge_lower_margin.min(u1.min(u2) - v + FRAC_1_SQRT_2);
        }
    }
    rep
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightMode {
    /// `1/v` with `v = e^{R̄₀t}cos α`.
    Angle,
    /// `1/(u₁ + u₂)`.
    Gauge,
}

/// Gaussian density probe centred at an ambient point.
#[derive(Clone, Debug, PartialEq)]
pub struct MonotonicityProbe {
    pub center: V4,
    pub t0: f64,
    pub r_tilde: f64,
    pub mode: WeightMode,
    /// `max{0, −min R̄}`, frozen for the probe.
    pub r0_bar: f64,
}

/// Azimuthal nodes used to integrate a rotationally symmetric surface
/// against an off-axis Gaussian.
const N_PHI: usize = 64;

impl MonotonicityProbe {
    pub fn new(s: &FlowState, center: V4, t0: f64, r_tilde: f64, mode: WeightMode) -> Result<Self, Error> {
        let min_r = (0..2)
            .flat_map(|f| s.ambient.factor(f).scalar_curvature())
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let probe = MonotonicityProbe {
            center,
            t0,
            r_tilde,
            mode,
            r0_bar: (-2.0 * min_r).max(0.0),
        };
        probe.check_state(s)?;
        Ok(probe)
    }

    /// Probe centred at the surface point of largest `|A|²`.
    pub fn at_max_curvature(s: &FlowState, t0: f64, r_tilde: f64, mode: WeightMode) -> Result<Self, Error> {
        let geo = s.geometry()?;
        let a2 = geo.a2();
        let k = (0..a2.len())
            .max_by(|&i, &j| a2[i].total_cmp(&a2[j]))
            .unwrap_or(0);
        let map = s.surface.to_map();
        let mut c = map.point(k);
        if s.grid().is_rotsym() {
            c[1] = 0.0;
        }
        Self::new(s, c, t0, r_tilde, mode)
    }

    /// Injectivity-radius proxy of the ambient.
    fn injectivity_proxy(s: &FlowState) -> f64 {
        let min_u = (0..2)
            .flat_map(|f| s.ambient.metric(f).u().iter().cloned())
            .fold(f64::INFINITY, f64::min);
        let base = match s.grid().topology() {
            Topology::Torus => PI,
            Topology::SphereRotSym => PI / 2.0,
        };
        base * min_u.exp()
    }

    pub fn check_state(&self, s: &FlowState) -> Result<(), Error> {
        if !(self.r_tilde > 0.0) || 2.0 * self.r_tilde >= Self::injectivity_proxy(s) {
            return Err(Error::InvalidProbe(format!(
                "cutoff radius {} too large for the injectivity radius",
                self.r_tilde
            )));
        }
        if !(s.t < self.t0) {
            return Err(Error::InvalidProbe(format!(
                "sample time {} is not before t0 = {}",
                s.t, self.t0
            )));
        }
        Ok(())
    }

    /// `φ`: 1 inside `r̃`, 0 outside `2r̃`, smooth in between.
    pub fn cutoff(&self, r: f64) -> f64 {
        let s = (r - self.r_tilde) / self.r_tilde;
        if s <= 0.0 {
            return 1.0;
        }
        if s >= 1.0 {
            return 0.0;
        }
        let a = (-1.0 / s).exp();
        let b = (-1.0 / (1.0 - s)).exp();
        1.0 - a / (a + b)
    }

    /// `Φ(t) = ∫ weight·φ·ρ dμ` at one state.
    pub fn phi(&self, s: &FlowState, geo: &SurfaceGeometry) -> Result<f64, Error> {
        self.check_state(s)?;
        let tau = self.t0 - s.t;
        let x0 = self.center;
        let c0 = s.ambient.point(x0, None)?;
        let scale = [
            c0.f[0].u.exp(),
            c0.f[0].u.exp() * c0.f[0].s,
            c0.f[1].u.exp(),
            c0.f[1].u.exp() * c0.f[1].s,
        ];
        let map = s.surface.to_map();
        let grid = s.grid();
        let rot = grid.is_rotsym();
        let w = geo.area_element();
        let mut total = Vec::with_capacity(grid.len());
        for (k, f) in geo.frames.iter().enumerate() {
            let weight = match self.mode {
                WeightMode::Angle => {
                    let v = (self.r0_bar * s.t).exp() * f.cos_alpha;
                    if !(v > 0.0) {
                        return Err(Error::InvalidProbe("weight needs cos α > 0".to_string()));
                    }
                    1.0 / v
                }
                WeightMode::Gauge => {
                    let [_, u1, u2] = f.gauges();
                    if !(u1 + u2 > 0.0) {
                        return Err(Error::InvalidProbe("weight needs u₁ + u₂ > 0".to_string()));
                    }
                    1.0 / (u1 + u2)
                }
            };
            let y = map.point(k);
            let dens = |phi_off: f64| {
                let twist = if geo.twisted { phi_off } else { 0.0 };
                let mut d = [y[0] - x0[0], y[1] + phi_off - x0[1], y[2] - x0[2], y[3] + twist - x0[3]];
                match grid.topology() {
                    Topology::Torus => {
                        for c in d.iter_mut() {
                            *c = wrap_pi(*c);
                        }
                    }
                    Topology::SphereRotSym => {
                        d[1] = wrap_pi(d[1]);
                        d[3] = wrap_pi(d[3]);
                    }
                }
                let r2: f64 = (0..4).map(|c| (scale[c] * d[c]).powi(2)).sum();
                self.cutoff(r2.sqrt()) * (-r2 / (4.0 * tau)).exp() / (4.0 * PI * tau)
            };
            let g = if rot {
                (0..N_PHI)
                    .map(|j| dens(2.0 * PI * j as f64 / N_PHI as f64))
                    .sum::<f64>()
                    / N_PHI as f64
            } else {
                dens(0.0)
            };
            total.push(w[k] * weight * g);
        }
        Ok(crate::grid::pairwise_sum(&total))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhiReport {
    pub times: Vec<f64>,
    pub phi: Vec<f64>,
    /// Largest increase of `Φ` between consecutive samples.
    pub max_increase: f64,
    /// Smallest `c₁` making `e^{c₁√(t₀−t)}Φ` non-increasing, if one below
    /// [`C1_MAX`] exists.
    pub c1: Option<f64>,
    /// Smallest `c₂` making `Φ + c₂(t₀ − t)` non-increasing.
    pub c2: f64,
}

pub const C1_MAX: f64 = 100.0;

/// Analyse a sampled `Φ` series.
pub fn phi_functional_series(times: &[f64], phi: &[f64], probe: &MonotonicityProbe, tol: f64) -> Result<PhiReport, Error> {
    if times.len() != phi.len() || times.iter().any(|t| !(*t < probe.t0)) {
        return Err(Error::InvalidProbe("samples must precede t0".to_string()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidProbe("sample times must increase".to_string()));
    }
    let weighted = |c1: f64| -> Vec<f64> {
        times
            .iter()
            .zip(phi)
            .map(|(t, p)| (c1 * (probe.t0 - t).sqrt()).exp() * p)
            .collect()
    };
    let max_inc = |v: &[f64]| v.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let max_increase = max_inc(phi);
    let c1 = if max_increase <= tol {
        Some(0.0)
    } else if max_inc(&weighted(C1_MAX)) > tol {
        None
    } else {
        let (mut lo, mut hi) = (0.0, C1_MAX);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if max_inc(&weighted(mid)) <= tol {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(hi)
    };
    let c2 = times
        .windows(2)
        .zip(phi.windows(2))
        .map(|(t, p)| (p[1] - p[0] - tol) / (t[1] - t[0]))
        .fold(0.0, f64::max);
    Ok(PhiReport {
        times: times.to_vec(),
        phi: phi.to_vec(),
        max_increase,
        c1,
        c2,
    })
}

/// Analyse the `Φ` column `column` of the observer values of a trajectory.
pub fn phi_functional(traj: &FlowTrajectory, column: usize, probe: &MonotonicityProbe, tol: f64) -> Result<PhiReport, Error> {
    let mut t = Vec::new();
    let mut p = Vec::new();
    for r in &traj.rows {
        let v = *r
            .extra
            .get(column)
            .ok_or_else(|| Error::InvalidProbe(format!("no observer column {column}")))?;
        t.push(r.t);
        p.push(v);
    }
    phi_functional_series(&t, &p, probe, tol)
}

/// Relative agreement of two fitted constants within `tol`.
pub fn stable_within(a: f64, b: f64, tol: f64) -> bool {
    let m = a.abs().max(b.abs());
    m < 1e-9 || (a - b).abs() <= tol * m
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingularityReport {
    /// Extrapolated blow-up time and its uncertainty.
    pub t_blow: f64,
    pub t_blow_err: f64,
    pub times: Vec<f64>,
    /// `(T − t)·U(t)`.
    pub scaled: Vec<f64>,
    pub sup_scaled: f64,
    /// Worst `U(t)·4√2(T + δT − t) − 1` over the final window (≥ 0 means
    /// the lower bound holds there).
    pub lower_bound_margin: f64,
    pub type_one: bool,
}

/// Classify a terminated trajectory from `U(t) = max|A|²`.
pub fn singularity_tracker(traj: &FlowTrajectory) -> Result<SingularityReport, Error> {
    if matches!(traj.termination, Termination::Completed) {
        return Err(Error::NoBlowUp);
    }
    let pts: Vec<(f64, f64)> = traj
        .rows
        .iter()
        .filter(|r| r.max_a2 > 0.0)
        .map(|r| (r.t, r.max_a2))
        .collect();
    if pts.len() < 4 {
        return Err(Error::InvalidProbe(
            "too few samples before termination to extrapolate".to_string(),
        ));
    }
    let m = pts.len();
    // 1/U is close to linear in t near a type I singularity; extrapolate its
    // zero with two and three points.
    let (t1, y1) = (pts[m - 2].0, 1.0 / pts[m - 2].1);
    let (t2, y2) = (pts[m - 1].0, 1.0 / pts[m - 1].1);
    let slope = (y2 - y1) / (t2 - t1);
    let lin = if slope < 0.0 { t2 - y2 / slope } else { f64::INFINITY };
    let (t0, y0) = (pts[m - 3].0, 1.0 / pts[m - 3].1);
    let quad = quadratic_root_after(t0, y0, t1, y1, t2, y2).unwrap_or(lin);
    let (t_blow, t_blow_err) = if quad.is_finite() {
        (quad, (quad - lin).abs())
    } else {
        (lin, 0.0)
    };
    if !t_blow.is_finite() {
        return Err(Error::InvalidProbe("U(t) is not growing at termination".to_string()));
    }
    let times: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let scaled: Vec<f64> = pts.iter().map(|(t, u)| (t_blow - t) * u).collect();
    let sup_scaled = scaled.iter().cloned().fold(0.0, f64::max);
    // Final window: the last decade of resolvable times before T.
    let tau_max = t_blow - times[0];
    let window: Vec<usize> = (0..m).filter(|&i| t_blow - times[i] <= 0.1 * tau_max).collect();
    let window = if window.len() < 2 { vec![m - 2, m - 1] } else { window };
    let lower_bound_margin = window
        .iter()
        .map(|&i| pts[i].1 * 4.0 * 2f64.sqrt() * (t_blow + t_blow_err - times[i]) - 1.0)
        .fold(f64::INFINITY, f64::min);
    let first = scaled[window[0]];
    let last = scaled[*window.last().unwrap_or(&(m - 1))];
    Ok(SingularityReport {
        t_blow,
        t_blow_err,
        times,
        scaled,
        sup_scaled,
        lower_bound_margin,
        type_one: last <= 2.0 * first,
    })
}

/// Smallest root after `t2` of the parabola through three points.
fn quadratic_root_after(t0: f64, y0: f64, t1: f64, y1: f64, t2: f64, y2: f64) -> Option<f64> {
    let d01 = (y1 - y0) / (t1 - t0);
    let d12 = (y2 - y1) / (t2 - t1);
    let a = (d12 - d01) / (t2 - t0);
    let b = d12 + a * (t2 - t1);
    // y(t) ≈ y2 + b (t − t2) + a (t − t2)².
    if a.abs() < 1e-300 {
        return (b < 0.0).then(|| t2 - y2 / b);
    }
    let disc = b * b - 4.0 * a * y2;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let mut roots = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)];
    roots.sort_by(f64::total_cmp);
    roots.into_iter().find(|s| *s >= 0.0).map(|s| t2 + s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceReport {
    pub times: Vec<f64>,
    /// Centered `d/dt ∫(1 − cos α)dμ`.
    pub lhs: Vec<f64>,
    /// `−∫|H|² − ∫(R̃ − r/2) + ∫(Ric(Je₁,e₂) − (r/2)cos α)`.
    pub rhs: Vec<f64>,
    /// `−∫|H|² − ∫(R̃ − r)`.
    pub rhs_printed: Vec<f64>,
    pub max_residual: f64,
    pub max_residual_printed: f64,
    /// `∫₀ᵗ∫|H| dμ ds` at every sample.
    pub l1_h: Vec<f64>,
}

/// Balance of `∫(1 − cos α)dμ` along a trajectory.
pub fn symplectic_balance(traj: &FlowTrajectory) -> BalanceReport {
    let r = traj.final_state.ambient.r();
    let rows = &traj.rows;
    let mut rep = BalanceReport {
        times: Vec::new(),
        lhs: Vec::new(),
        rhs: Vec::new(),
        rhs_printed: Vec::new(),
        max_residual: 0.0,
        max_residual_printed: 0.0,
        l1_h: rows.iter().map(|w| w.l1_h_cum).collect(),
    };
    for k in 1..rows.len().saturating_sub(1) {
        let (a, b, c) = (&rows[k - 1], &rows[k], &rows[k + 1]);
        let lhs = (c.int_one_minus_cos - a.int_one_minus_cos) / (c.t - a.t);
        let rhs = -b.int_h2 - b.int_rtilde_minus_r - 0.5 * r * b.area + b.int_ricci_form;
        let printed = -b.int_h2 - b.int_rtilde_minus_r;
        rep.max_residual = rep.max_residual.max((lhs - rhs).abs());
        rep.max_residual_printed = rep.max_residual_printed.max((lhs - printed).abs());
        rep.times.push(b.t);
        rep.lhs.push(lhs);
        rep.rhs.push(rhs);
        rep.rhs_printed.push(printed);
    }
    rep
}

/// Least-squares rate `λ` of `y ≈ c·e^{−λt}` over positive samples.
pub fn fit_decay_rate(t: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(y)
        .filter(|(_, y)| **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    (sxx > 0.0).then(|| -sxy / sxx)
}
