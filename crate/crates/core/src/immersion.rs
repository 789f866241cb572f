//! Geometry of the evolving surface: graph and general parametrizations,
//! induced metric, adapted frames, second fundamental form, mean curvature,
//! Kähler angle and the graph gauges.

use std::f64::consts::PI;

use crate::ambient::{ProductKahlerAmbient, ProductPoint, V4};
use crate::error::Error;
use crate::grid::{Bc, Field, Parity, PeriodicGrid, Topology};

/// Below this `sin α` the frame construction through `J` is not used.
pub const FRAME_TOL: f64 = 1e-6;
/// Smallest admissible `det g` of the induced metric.
pub const DET_TOL: f64 = 1e-14;
/// Winding tag of a degree-one equivariant graph over the sphere.
pub const SPHERE_DEGREE_ONE: [[i32; 2]; 2] = [[0, 0], [0, 1]];

/// The graph `F(x) = (x, f(x))` of a map `M₁ → M₂`.
///
/// On the torus `f` is stored as a lift together with integer winding
/// numbers: `wind[a][d]` full turns of `fᵃ` per period in direction `d`. On
/// the sphere `f = (ψ(θ), χ(θ))` is constant along latitude circles, or with
/// `wind = [[0, 0], [0, 1]]` the map is equivariant of degree one,
/// `(θ, φ) ↦ (ψ(θ), φ + χ(θ))`, and `ψ` runs from pole to pole.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphImmersion {
    grid: PeriodicGrid,
    f: [Field; 2],
    wind: [[i32; 2]; 2],
}

impl GraphImmersion {
    pub fn new(grid: PeriodicGrid, f: [Field; 2], wind: [[i32; 2]; 2]) -> Result<Self, Error> {
        grid.check_field(&f[0])?;
        grid.check_field(&f[1])?;
        if grid.is_rotsym() && wind != [[0; 2]; 2] && wind != SPHERE_DEGREE_ONE {
            return Err(Error::Mismatch(
                "graphs over the sphere have azimuthal degree zero or one".to_string(),
            ));
        }
        if f.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::blow_up(f64::NAN, "graph map not finite"));
        }
        Ok(GraphImmersion { grid, f, wind })
    }

    pub fn from_fn(
        grid: PeriodicGrid,
        f: impl Fn([f64; 2]) -> [f64; 2],
        wind: [[i32; 2]; 2],
    ) -> Result<Self, Error> {
        let vals: Vec<[f64; 2]> = (0..grid.len()).map(|k| f(grid.coord_of(k))).collect();
        let f1 = vals.iter().map(|v| v[0]).collect();
        let f2 = vals.iter().map(|v| v[1]).collect();
        Self::new(grid, [f1, f2], wind)
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn f(&self) -> &[Field; 2] {
        &self.f
    }

    pub fn wind(&self) -> [[i32; 2]; 2] {
        self.wind
    }

    pub fn bc(&self, a: usize) -> Bc {
        match self.grid.topology() {
            Topology::Torus => Bc::winding(
                2.0 * PI * self.wind[a][0] as f64,
                2.0 * PI * self.wind[a][1] as f64,
            ),
            Topology::SphereRotSym if a == 0 && self.is_twisted() => Bc::POLAR,
            Topology::SphereRotSym => Bc::SCALAR,
        }
    }

    /// Degree-one equivariant graph over the sphere.
    pub fn is_twisted(&self) -> bool {
        self.grid.is_rotsym() && self.wind == SPHERE_DEGREE_ONE
    }

    pub fn with_f(&self, f: [Field; 2]) -> Result<Self, Error> {
        Self::new(self.grid.clone(), f, self.wind)
    }

    pub fn to_map(&self) -> SurfaceMap {
        let g = &self.grid;
        let (c0, c1, b0, b1) = match g.topology() {
            Topology::Torus => (
                g.field_from_fn(|p| p[0]),
                g.field_from_fn(|p| p[1]),
                Bc::winding(2.0 * PI, 0.0),
                Bc::winding(0.0, 2.0 * PI),
            ),
            Topology::SphereRotSym => (
                g.field_from_fn(|p| p[0]),
                vec![0.0; g.len()],
                Bc::POLAR,
                Bc::SCALAR,
            ),
        };
        SurfaceMap {
            grid: g.clone(),
            comps: [c0, c1, self.f[0].clone(), self.f[1].clone()],
            bcs: [b0, b1, self.bc(0), self.bc(1)],
            graph: true,
            twisted: self.is_twisted(),
        }
    }
}

/// A general parametrized surface `Y: Σ → M` with four lifted coordinate
/// fields. On the sphere the second component is the azimuthal offset, so
/// the actual point is `(Y⁰, φ + Y¹, Y², Y³)` and `∂_φ Y = ∂_{y₁}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMap {
    grid: PeriodicGrid,
    comps: [Field; 4],
    bcs: [Bc; 4],
    graph: bool,
    twisted: bool,
}

/// First and second parameter derivatives of `Y` at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub dy: [V4; 2],
    /// `∂₁₁Y, ∂₁₂Y, ∂₂₂Y`.
    pub ddy: [V4; 3],
}

impl SurfaceMap {
    pub fn new(grid: PeriodicGrid, comps: [Field; 4], bcs: [Bc; 4]) -> Result<Self, Error> {
        for c in &comps {
            grid.check_field(c)?;
        }
        if comps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::blow_up(f64::NAN, "surface map not finite"));
        }
        Ok(SurfaceMap {
            grid,
            comps,
            bcs,
            graph: false,
            twisted: false,
        })
    }

    /// On the sphere, take the last component as an azimuthal offset too, so
    /// the point is `(Y⁰, φ + Y¹, Y², φ + Y³)`.
    pub fn with_twist(mut self, twisted: bool) -> Self {
        self.twisted = twisted && self.grid.is_rotsym();
        self
    }

    pub fn is_twisted(&self) -> bool {
        self.twisted
    }

    pub fn grid(&self) -> &PeriodicGrid {
        &self.grid
    }

    pub fn comps(&self) -> &[Field; 4] {
        &self.comps
    }

    /// True when the first two components are exactly the grid coordinates.
    pub fn is_graph(&self) -> bool {
        self.graph
    }

    #[inline]
    pub fn point(&self, k: usize) -> V4 {
        [
            self.comps[0][k],
            self.comps[1][k],
            self.comps[2][k],
            self.comps[3][k],
        ]
    }

    /// `Y + dt·V`, no longer in graph form.
    pub fn advanced(&self, vel: &[V4], dt: f64) -> Result<SurfaceMap, Error> {
        let comps = std::array::from_fn(|a| {
            self.comps[a]
                .iter()
                .zip(vel)
                .map(|(y, v)| y + dt * v[a])
                .collect()
        });
        Ok(SurfaceMap::new(self.grid.clone(), comps, self.bcs)?.with_twist(self.twisted))
    }

    pub fn jets(&self) -> Vec<Jet> {
        let g = &self.grid;
        let d: Vec<([Field; 2], [Field; 3])> =
            (0..4).map(|a| g.jet(&self.comps[a], self.bcs[a])).collect();
        let rot = g.is_rotsym();
        (0..g.len())
            .map(|k| {
                let mut dy = [[0.0; 4]; 2];
                let mut ddy = [[0.0; 4]; 3];
                for a in 0..4 {
                    dy[0][a] = d[a].0[0][k];
                    dy[1][a] = d[a].0[1][k];
                    for m in 0..3 {
                        ddy[m][a] = d[a].1[m][k];
                    }
                }
                if rot {
                    dy[1][1] += 1.0;
                    if self.twisted {
                        dy[1][3] += 1.0;
                    }
                }
                Jet { dy, ddy }
            })
            .collect()
    }

    /// Ambient data at every node.
    pub fn ambient_points(&self, amb: &ProductKahlerAmbient) -> Result<Vec<ProductPoint>, Error> {
        (0..self.grid.len())
            .map(|k| amb.point(self.point(k), self.graph.then_some(k)))
            .collect()
    }

    /// Quadrature weight of a parameter cell; multiplied by
    /// `√det g` it gives the area of the cell. On the sphere `√det g`
    /// already carries the `sin θ` the weight integrates exactly.
    pub fn coordinate_weight(&self) -> f64 {
        self.grid.cell_measure()
    }
}

#[inline]
fn sym(m: usize) -> (usize, usize) {
    [(0, 0), (0, 1), (1, 1)][m]
}

#[inline]
fn pack(i: usize, j: usize) -> usize {
    i + j
}

#[inline]
fn axpy(y: &mut V4, a: f64, x: &V4) {
    for c in 0..4 {
        y[c] += a * x[c];
    }
}

/// Extrinsic geometry at one node, in parameter coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointGeometry {
    pub amb: ProductPoint,
    pub dy: [V4; 2],
    pub g: [[f64; 2]; 2],
    pub ginv: [[f64; 2]; 2],
    pub det: f64,
    /// `g^{ij}(∂_ijY + Γ̄(∂_iY, ∂_jY))`; mean curvature plus a tangent part.
    pub w: V4,
    /// Second fundamental form `II_11, II_12, II_22` as ambient vectors.
    pub ii: [V4; 3],
    /// Surface Christoffels `Γ^k_{ij}` from the tangential projection.
    pub gamma: [[f64; 3]; 2],
    pub mean: V4,
    pub a2: f64,
}

impl PointGeometry {
    pub fn new(jet: &Jet, amb: ProductPoint, node: usize) -> Result<Self, Error> {
        let dy = jet.dy;
        let mut g = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                g[i][j] = amb.inner(&dy[i], &dy[j]);
            }
        }
        let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
        if !(det > DET_TOL) {
            return Err(Error::DegenerateImmersion { node, det });
        }
        let ginv = [
            [g[1][1] / det, -g[0][1] / det],
            [-g[1][0] / det, g[0][0] / det],
        ];
        let mut q = [[0.0; 4]; 3];
        for m in 0..3 {
            let (i, j) = sym(m);
            let c = amb.gamma(&dy[i], &dy[j]);
            for a in 0..4 {
                q[m][a] = jet.ddy[m][a] + c[a];
            }
        }
        let mut w = [0.0; 4];
        axpy(&mut w, ginv[0][0], &q[0]);
        axpy(&mut w, 2.0 * ginv[0][1], &q[1]);
        axpy(&mut w, ginv[1][1], &q[2]);
        let mut gamma = [[0.0; 3]; 2];
        let mut ii = q;
        for m in 0..3 {
            let b = [amb.inner(&q[m], &dy[0]), amb.inner(&q[m], &dy[1])];
            for k in 0..2 {
                gamma[k][m] = ginv[k][0] * b[0] + ginv[k][1] * b[1];
                axpy(&mut ii[m], -gamma[k][m], &dy[k]);
            }
        }
        let mut mean = [0.0; 4];
        axpy(&mut mean, ginv[0][0], &ii[0]);
        axpy(&mut mean, 2.0 * ginv[0][1], &ii[1]);
        axpy(&mut mean, ginv[1][1], &ii[2]);
        let mut a2 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        a2 += ginv[i][k]
                            * ginv[j][l]
                            * amb.inner(&ii[pack(i, j)], &ii[pack(k, l)]);
                    }
                }
            }
        }
        Ok(PointGeometry {
            amb,
            dy,
            g,
            ginv,
            det,
            w,
            ii,
            gamma,
            mean,
            a2,
        })
    }

    pub fn ii_at(&self, i: usize, j: usize) -> &V4 {
        &self.ii[pack(i, j)]
    }

    pub fn mean_sq(&self) -> f64 {
        self.amb.inner(&self.mean, &self.mean)
    }

    /// Smallest eigenvalue of the induced metric.
    pub fn lambda_min(&self) -> f64 {
        let tr = self.g[0][0] + self.g[1][1];
        let disc = ((self.g[0][0] - self.g[1][1]).powi(2) + 4.0 * self.g[0][1].powi(2)).sqrt();
        0.5 * (tr - disc)
    }

    pub fn sqrt_det(&self) -> f64 {
        self.det.sqrt()
    }

    /// `½ gⁱʲ R̄_ij`.
    pub fn r_tilde(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                s += self.ginv[i][j] * self.amb.ricci(&self.dy[i], &self.dy[j]);
            }
        }
        0.5 * s
    }
}

/// Orthonormal frame adapted to the Kähler form together with the frame
/// components of the second fundamental form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Frame {
    pub e: [V4; 4],
    /// `e_k = c[k][i] ∂_i Y` for the tangent vectors.
    pub c: [[f64; 2]; 2],
    pub cos_alpha: f64,
    pub sin_alpha: f64,
    pub degenerate: bool,
    /// `h[α−3][k][l] = ḡ(II(e_k, e_l), e_α)`.
    pub h: [[[f64; 2]; 2]; 2],
    /// `H^α = h^α_kk`.
    pub mean: [f64; 2],
    /// `ω₁(e₁, e₂)` and `ω₂(e₁, e₂)`.
    pub omega_parts: [f64; 2],
}

impl Frame {
    /// Build the frame; `rotation` turns `(e₁, e₂)` by an angle before the
    /// normal pair is aligned.
    pub fn new(pg: &PointGeometry, rotation: f64) -> Self {
        let amb = &pg.amb;
        let g = pg.g;
        let c1 = [1.0 / g[0][0].sqrt(), 0.0];
        let n2 = (pg.det / g[0][0]).sqrt();
        let c2 = [-g[0][1] / g[0][0] / n2, 1.0 / n2];
        let (sr, cr) = rotation.sin_cos();
        let c = [
            [cr * c1[0] + sr * c2[0], cr * c1[1] + sr * c2[1]],
            [-sr * c1[0] + cr * c2[0], -sr * c1[1] + cr * c2[1]],
        ];
        let tangent = |k: usize| {
            let mut v = [0.0; 4];
            axpy(&mut v, c[k][0], &pg.dy[0]);
            axpy(&mut v, c[k][1], &pg.dy[1]);
            v
        };
        let e1 = tangent(0);
        let e2 = tangent(1);
        let omega_parts = [amb.omega_factor(0, &e1, &e2), amb.omega_factor(1, &e1, &e2)];
        let cos_alpha = (omega_parts[0] + omega_parts[1]).clamp(-1.0, 1.0);
        let sin_alpha = (1.0 - cos_alpha * cos_alpha).max(0.0).sqrt();
        let (e3, e4, degenerate) = if sin_alpha >= FRAME_TOL {
            let je1 = amb.j(&e1);
            let je2 = amb.j(&e2);
            let mut e3 = je1;
            axpy(&mut e3, -cos_alpha, &e2);
            let mut e4 = je2;
            axpy(&mut e4, cos_alpha, &e1);
            for a in 0..4 {
                e3[a] /= sin_alpha;
                e4[a] /= -sin_alpha;
            }
            (e3, e4, false)
        } else {
            let (e3, e4) = fallback_normals(amb, &e1, &e2);
            (e3, e4, true)
        };
        let e = [e1, e2, e3, e4];
        let mut h = [[[0.0; 2]; 2]; 2];
        for k in 0..2 {
            for l in k..2 {
                let mut v = [0.0; 4];
                for i in 0..2 {
                    for j in 0..2 {
                        axpy(&mut v, c[k][i] * c[l][j], pg.ii_at(i, j));
                    }
                }
                for al in 0..2 {
                    let val = amb.inner(&v, &e[2 + al]);
                    h[al][k][l] = val;
                    h[al][l][k] = val;
                }
            }
        }
        let mean = [h[0][0][0] + h[0][1][1], h[1][0][0] + h[1][1][1]];
        Frame {
            e,
            c,
            cos_alpha,
            sin_alpha,
            degenerate,
            h,
            mean,
            omega_parts,
        }
    }

    /// `|∇̄J|² = Σ_k (h⁴_1k + h³_2k)² + (h⁴_2k − h³_1k)²`.
    pub fn nabla_j_sq(&self) -> f64 {
        nabla_j_sq(&self.h)
    }

    /// The same expression with `e₃` and `e₄` exchanged, which is `|∇̄J̃|²`
    /// for the structure of `ω₁ − ω₂`.
    pub fn nabla_j_sq_swapped(&self) -> f64 {
        let h = &self.h;
        (0..2)
            .map(|k| (h[0][0][k] + h[1][1][k]).powi(2) + (h[0][1][k] - h[1][0][k]).powi(2))
            .sum()
    }

    pub fn mean_sq(&self) -> f64 {
        self.mean[0] * self.mean[0] + self.mean[1] * self.mean[1]
    }

    pub fn a2(&self) -> f64 {
        self.h.iter().flatten().flatten().map(|v| v * v).sum()
    }

    /// Graph gauges `(v, u₁, u₂)`.
    pub fn gauges(&self) -> [f64; 3] {
        let [w1, w2] = self.omega_parts;
        [w1, w1 + w2, w1 - w2]
    }
}

/// `|∇̄J|²` of a frame second fundamental form.
pub fn nabla_j_sq(h: &[[[f64; 2]; 2]; 2]) -> f64 {
    (0..2)
        .map(|k| (h[1][0][k] + h[0][1][k]).powi(2) + (h[1][1][k] - h[0][0][k]).powi(2))
        .sum()
}

/// Orthonormal normal pair by Gram–Schmidt on the coordinate axes, oriented
/// so that `(e₁, e₂, e₃, e₄)` is positive.
fn fallback_normals(amb: &ProductPoint, e1: &V4, e2: &V4) -> (V4, V4) {
    let project = |v: &V4, basis: &[V4]| {
        let mut r = *v;
        for b in basis {
            let p = amb.inner(&r, b);
            axpy(&mut r, -p, b);
        }
        r
    };
    let pick = |basis: &[V4]| {
        let mut best = [0.0; 4];
        let mut best_n = -1.0;
        for a in 0..4 {
            let mut ax = [0.0; 4];
            ax[a] = 1.0;
            let r = project(&ax, basis);
            let n = amb.norm(&r);
            if n > best_n {
                best_n = n;
                best = r;
            }
        }
        best.map(|x| x / best_n)
    };
    let e3 = pick(&[*e1, *e2]);
    let mut e4 = pick(&[*e1, *e2, e3]);
    if amb.volume(&[*e1, *e2, e3, e4]) < 0.0 {
        e4 = e4.map(|x| -x);
    }
    (e3, e4)
}

/// Complete geometric state of a surface on its grid.
#[derive(Clone, Debug)]
pub struct SurfaceGeometry {
    pub points: Vec<PointGeometry>,
    pub frames: Vec<Frame>,
    weights: Vec<f64>,
    /// Copied from the map: the `ψ`-component then flips across poles.
    pub twisted: bool,
}

impl SurfaceGeometry {
    pub fn compute(map: &SurfaceMap, amb: &ProductKahlerAmbient) -> Result<Self, Error> {
        Self::compute_rotated(map, amb, |_| 0.0)
    }

    /// As `compute`, with the tangent frame at node `k` turned by `rot(k)`.
    pub fn compute_rotated(
        map: &SurfaceMap,
        amb: &ProductKahlerAmbient,
        rot: impl Fn(usize) -> f64,
    ) -> Result<Self, Error> {
        let jets = map.jets();
        let ambs = map.ambient_points(amb)?;
        let points = jets
            .iter()
            .zip(ambs)
            .enumerate()
            .map(|(k, (j, a))| PointGeometry::new(j, a, k))
            .collect::<Result<Vec<_>, _>>()?;
        let frames = points
            .iter()
            .enumerate()
            .map(|(k, p)| Frame::new(p, rot(k)))
            .collect();
        let weights = vec![map.coordinate_weight(); map.grid().len()];
        Ok(SurfaceGeometry {
            points,
            frames,
            weights,
            twisted: map.is_twisted(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Area of each parameter cell.
    pub fn area_element(&self) -> Field {
        self.points
            .iter()
            .zip(&self.weights)
            .map(|(p, w)| p.sqrt_det() * w)
            .collect()
    }

    /// `∫ q dμ` with pairwise summation.
    pub fn integrate(&self, q: &[f64]) -> f64 {
        let prod: Field = self
            .area_element()
            .iter()
            .zip(q)
            .map(|(a, b)| a * b)
            .collect();
        crate::grid::pairwise_sum(&prod)
    }

    pub fn area(&self) -> f64 {
        crate::grid::pairwise_sum(&self.area_element())
    }

    pub fn cos_alpha(&self) -> Field {
        self.frames.iter().map(|f| f.cos_alpha).collect()
    }

    pub fn a2(&self) -> Field {
        self.points.iter().map(|p| p.a2).collect()
    }

    pub fn mean_sq(&self) -> Field {
        self.points.iter().map(|p| p.mean_sq()).collect()
    }

    pub fn nabla_j_sq(&self) -> Field {
        self.frames.iter().map(|f| f.nabla_j_sq()).collect()
    }

    pub fn gauges(&self) -> [Field; 3] {
        let g: Vec<[f64; 3]> = self.frames.iter().map(|f| f.gauges()).collect();
        std::array::from_fn(|i| g.iter().map(|x| x[i]).collect())
    }

    pub fn induced_metric(&self) -> Vec<[[f64; 2]; 2]> {
        self.points.iter().map(|p| p.g).collect()
    }

    pub fn mean_curvature(&self) -> Vec<V4> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// Parameter gradient of a scalar field expressed in the frame:
    /// `∇_{e_k} q = c[k][i] ∂_i q`.
    pub fn frame_gradient(&self, grid: &PeriodicGrid, q: &[f64]) -> Vec<[f64; 2]> {
        let d0 = grid.d1(q, 0, Bc::SCALAR);
        let d1 = grid.d1(q, 1, Bc::SCALAR);
        self.frames
            .iter()
            .enumerate()
            .map(|(k, f)| {
                [
                    f.c[0][0] * d0[k] + f.c[0][1] * d1[k],
                    f.c[1][0] * d0[k] + f.c[1][1] * d1[k],
                ]
            })
            .collect()
    }

    /// Residuals `∇₁cos α − (h⁴₁₁ + h³₁₂) sin α` and
    /// `∇₂cos α − (h³₂₂ + h⁴₁₂) sin α`; `None` where the frame is degenerate.
    pub fn grad_cos_alpha_identity(&self, grid: &PeriodicGrid) -> Vec<Option<[f64; 2]>> {
        let grad = self.frame_gradient(grid, &self.cos_alpha());
        self.frames
            .iter()
            .zip(grad)
            .map(|(f, d)| {
                if f.degenerate {
                    return None;
                }
                let h = &f.h;
                Some([
                    d[0] - (h[1][0][0] + h[0][0][1]) * f.sin_alpha,
                    d[1] - (h[0][1][1] + h[1][0][1]) * f.sin_alpha,
                ])
            })
            .collect()
    }
}

/// Induced metric `g_ij = ḡ(∂_iF, ∂_jF)` per node.
pub fn induced_metric(
    map: &SurfaceMap,
    amb: &ProductKahlerAmbient,
) -> Result<Vec<[[f64; 2]; 2]>, Error> {
    Ok(SurfaceGeometry::compute(map, amb)?.induced_metric())
}

/// Mean curvature vector from `Δ_g F + gⁱʲ Γ̄(∂_iF, ∂_jF)` with the surface
/// Christoffels obtained by differencing the induced metric.
pub fn mean_curvature_direct(
    map: &SurfaceMap,
    amb: &ProductKahlerAmbient,
) -> Result<Vec<V4>, Error> {
    let grid = map.grid();
    let jets = map.jets();
    let ambs = map.ambient_points(amb)?;
    let gm: Vec<[[f64; 2]; 2]> = jets
        .iter()
        .zip(&ambs)
        .map(|(j, a)| {
            let mut g = [[0.0; 2]; 2];
            for i in 0..2 {
                for k in 0..2 {
                    g[i][k] = a.inner(&j.dy[i], &j.dy[k]);
                }
            }
            g
        })
        .collect();
    let comp = |i: usize, j: usize| -> Field { gm.iter().map(|g| g[i][j]).collect() };
    let g00 = comp(0, 0);
    let g01 = comp(0, 1);
    let g11 = comp(1, 1);
    let bc_off = Bc::parity(Parity::Odd);
    // dg[l][m]: derivative along l of the packed component m.
    let dg = [
        [
            grid.d1(&g00, 0, Bc::SCALAR),
            grid.d1(&g01, 0, bc_off),
            grid.d1(&g11, 0, Bc::SCALAR),
        ],
        [
            grid.d1(&g00, 1, Bc::SCALAR),
            grid.d1(&g01, 1, bc_off),
            grid.d1(&g11, 1, Bc::SCALAR),
        ],
    ];
    (0..grid.len())
        .map(|k| {
            let g = gm[k];
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            if !(det > DET_TOL) {
                return Err(Error::DegenerateImmersion { node: k, det });
            }
            let ginv = [
                [g[1][1] / det, -g[0][1] / det],
                [-g[1][0] / det, g[0][0] / det],
            ];
            let d = |l: usize, i: usize, j: usize| dg[l][pack(i, j)][k];
            let mut out = [0.0; 4];
            for i in 0..2 {
                for j in 0..2 {
                    let mut v = jets[k].ddy[pack(i, j)];
                    let c = ambs[k].gamma(&jets[k].dy[i], &jets[k].dy[j]);
                    for a in 0..4 {
                        v[a] += c[a];
                    }
                    for m in 0..2 {
                        let gam: f64 = (0..2)
                            .map(|l| 0.5 * ginv[m][l] * (d(i, j, l) + d(j, i, l) - d(l, i, j)))
                            .sum();
                        axpy(&mut v, -gam, &jets[k].dy[m]);
                    }
                    axpy(&mut out, ginv[i][j], &v);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Graph-gauge velocity `∂_t f = W⁽²⁾ − W⁽¹⁾ᵏ ∂_k f`: the normal velocity
/// `H` plus the tangential motion that keeps the `M₁` component fixed.
pub fn graph_velocity(
    graph: &GraphImmersion,
    amb: &ProductKahlerAmbient,
) -> Result<[Field; 2], Error> {
    let map = graph.to_map();
    let jets = map.jets();
    let n = map.grid().len();
    let mut out = [vec![0.0; n], vec![0.0; n]];
    for (k, jet) in jets.iter().enumerate() {
        let a = amb.point(map.point(k), Some(k))?;
        let dy = &jet.dy;
        let g00 = a.inner(&dy[0], &dy[0]);
        let g01 = a.inner(&dy[0], &dy[1]);
        let g11 = a.inner(&dy[1], &dy[1]);
        let det = g00 * g11 - g01 * g01;
        if !(det > DET_TOL) {
            return Err(Error::DegenerateImmersion { node: k, det });
        }
        let gi = [g11 / det, -g01 / det, g00 / det];
        let mut w = [0.0; 4];
        for m in 0..3 {
            let (i, j) = sym(m);
            let c = a.gamma(&dy[i], &dy[j]);
            let f = if m == 1 { 2.0 * gi[1] } else { gi[m] };
            for q in 0..4 {
                w[q] += f * (jet.ddy[m][q] + c[q]);
            }
        }
        for b in 0..2 {
            out[b][k] = w[2 + b] - w[0] * dy[0][2 + b] - w[1] * dy[1][2 + b];
        }
    }
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::blow_up(f64::NAN, "graph velocity not finite"));
    }
    Ok(out)
}

/// [`graph_velocity`] from an already computed geometry of the graph.
pub fn graph_velocity_from(geo: &SurfaceGeometry) -> [Field; 2] {
    std::array::from_fn(|b| {
        geo.points
            .iter()
            .map(|p| p.w[2 + b] - p.w[0] * p.dy[0][2 + b] - p.w[1] * p.dy[1][2 + b])
            .collect()
    })
}

/// Tangential parameter velocity `Tᵏ` of the graph gauge given `∂_t f`.
pub fn gauge_tangent_velocity(geo: &SurfaceGeometry, f_t: &[Field; 2]) -> Vec<[f64; 2]> {
    geo.points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let v = [0.0, 0.0, f_t[0][k], f_t[1][k]];
            let b = [p.amb.inner(&v, &p.dy[0]), p.amb.inner(&v, &p.dy[1])];
            [
                p.ginv[0][0] * b[0] + p.ginv[0][1] * b[1],
                p.ginv[1][0] * b[0] + p.ginv[1][1] * b[1],
            ]
        })
        .collect()
}
