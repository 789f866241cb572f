//! Structured grids, centered stencils, parity ghosts, interpolation and
//! deterministic quadrature.
//!
//! Two topologies are supported. The flat torus is a full `nx × ny` periodic
//! grid on `[0, 2π)²`. The rotationally symmetric sphere is a 1-D staggered
//! grid in the polar angle, `θ_i = (i + ½)·π/n`, so no sample ever sits on a
//! pole; azimuthal derivatives of rotationally symmetric fields vanish and
//! ghost values across a pole are obtained by reflection with a parity sign.

use std::f64::consts::PI;

use crate::error::Error;

/// A scalar field sampled on a grid, stored with `x` (or `θ`) fastest.
pub type Field = Vec<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Topology {
    Torus,
    SphereRotSym,
}

impl Topology {
    pub fn euler_characteristic(self) -> f64 {
        match self {
            Topology::Torus => 0.0,
            Topology::SphereRotSym => 2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Topology::Torus => "torus",
            Topology::SphereRotSym => "sphere",
        }
    }
}

/// Reflection behaviour of a field across a pole of the sphere grid.
///
/// Crossing a pole maps `(θ, φ)` to `(−θ, φ + π)`, which flips the sign of
/// every `θ`-index of a tensor component. `Polar` is for the lifted polar
/// coordinate itself, which reflects about the pole value (`0` or `π`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parity {
    Even,
    Odd,
    Polar,
}

impl Parity {
    /// Parity of a tensor component carrying `theta_indices` polar indices.
    pub fn from_theta_indices(theta_indices: usize) -> Self {
        if theta_indices % 2 == 0 {
            Parity::Even
        } else {
            Parity::Odd
        }
    }
}

/// Ghost-value rule for a field: pole parity on the sphere, additive winding
/// (the lift jumps by `wind[k]` per period in direction `k`) on the torus.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bc {
    pub parity: Parity,
    pub wind: [f64; 2],
}

impl Bc {
    pub const SCALAR: Bc = Bc {
        parity: Parity::Even,
        wind: [0.0, 0.0],
    };
    pub const ODD: Bc = Bc {
        parity: Parity::Odd,
        wind: [0.0, 0.0],
    };
    pub const POLAR: Bc = Bc {
        parity: Parity::Polar,
        wind: [0.0, 0.0],
    };

    pub fn parity(parity: Parity) -> Self {
        Bc {
            parity,
            wind: [0.0, 0.0],
        }
    }

    pub fn winding(wx: f64, wy: f64) -> Self {
        Bc {
            parity: Parity::Even,
            wind: [wx, wy],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicGrid {
    topology: Topology,
    nx: usize,
    ny: usize,
    hx: f64,
    hy: f64,
}

impl PeriodicGrid {
    pub fn torus(n: usize) -> Result<Self, Error> {
        Self::torus_rect(n, n)
    }

    pub fn torus_rect(nx: usize, ny: usize) -> Result<Self, Error> {
        check_count(nx)?;
        check_count(ny)?;
        Ok(PeriodicGrid {
            topology: Topology::Torus,
            nx,
            ny,
            hx: 2.0 * PI / nx as f64,
            hy: 2.0 * PI / ny as f64,
        })
    }

    /// Staggered polar-angle grid with `n_theta` cells.
    pub fn sphere(n_theta: usize) -> Result<Self, Error> {
        check_count(n_theta)?;
        Ok(PeriodicGrid {
            topology: Topology::SphereRotSym,
            nx: n_theta,
            ny: 1,
            hx: PI / n_theta as f64,
            hy: 2.0 * PI,
        })
    }

    pub fn with_topology(topology: Topology, n: usize) -> Result<Self, Error> {
        match topology {
            Topology::Torus => Self::torus(n),
            Topology::SphereRotSym => Self::sphere(n),
        }
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> [f64; 2] {
        [self.hx, self.hy]
    }

    /// Smallest spacing among the directions that carry stencils.
    pub fn h(&self) -> f64 {
        match self.topology {
            Topology::Torus => self.hx.min(self.hy),
            Topology::SphereRotSym => self.hx,
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_rotsym(&self) -> bool {
        self.topology == Topology::SphereRotSym
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nx, k / self.nx)
    }

    /// Chart coordinates of a node: `(x, y)` on the torus, `(θ, 0)` on the
    /// sphere slice `φ = 0`.
    #[inline]
    pub fn coord(&self, i: usize, j: usize) -> [f64; 2] {
        match self.topology {
            Topology::Torus => [i as f64 * self.hx, j as f64 * self.hy],
            Topology::SphereRotSym => [(i as f64 + 0.5) * self.hx, 0.0],
        }
    }

    pub fn coord_of(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.ij(k);
        self.coord(i, j)
    }

    /// Coordinate measure of one cell: `hx·hy` on the torus; on the sphere
    /// `2π·2 sin(h/2)`, which makes `Σ sinθ_i · w` exact for the unit sphere.
    pub fn cell_measure(&self) -> f64 {
        match self.topology {
            Topology::Torus => self.hx * self.hy,
            Topology::SphereRotSym => 2.0 * PI * 2.0 * (0.5 * self.hx).sin(),
        }
    }

    /// Density of the base metric's area form in chart coordinates.
    #[inline]
    pub fn base_density(&self, k: usize) -> f64 {
        match self.topology {
            Topology::Torus => 1.0,
            Topology::SphereRotSym => self.coord_of(k)[0].sin(),
        }
    }

    pub fn field_from_fn(&self, f: impl Fn([f64; 2]) -> f64) -> Field {
        (0..self.len()).map(|k| f(self.coord_of(k))).collect()
    }

    pub fn check_field(&self, field: &[f64]) -> Result<(), Error> {
        if field.len() != self.len() {
            return Err(Error::FieldSize {
                expected: self.len(),
                got: field.len(),
            });
        }
        Ok(())
    }

    /// Value at possibly out-of-range node `(i, j)` through ghost rules.
    #[inline]
    pub fn sample(&self, field: &[f64], i: isize, j: isize, bc: Bc) -> f64 {
        match self.topology {
            Topology::Torus => {
                let nx = self.nx as isize;
                let ny = self.ny as isize;
                let (qx, rx) = (i.div_euclid(nx), i.rem_euclid(nx));
                let (qy, ry) = (j.div_euclid(ny), j.rem_euclid(ny));
                let v = field[rx as usize + self.nx * ry as usize];
                if qx == 0 && qy == 0 {
                    v
                } else {
                    v + qx as f64 * bc.wind[0] + qy as f64 * bc.wind[1]
                }
            }
            Topology::SphereRotSym => {
                let n = self.nx as isize;
                if (0..n).contains(&i) {
                    field[i as usize]
                } else if i < 0 {
                    let v = field[(-i - 1) as usize];
                    match bc.parity {
                        Parity::Even => v,
                        Parity::Odd | Parity::Polar => -v,
                    }
                } else {
                    let v = field[(2 * n - 1 - i) as usize];
                    match bc.parity {
                        Parity::Even => v,
                        Parity::Odd => -v,
                        Parity::Polar => 2.0 * PI - v,
                    }
                }
            }
        }
    }

    /// Copy of `field` with a one-node ghost layer on every side, row-major
    /// with row length `nx + 2`.
    fn padded(&self, field: &[f64], bc: Bc) -> Vec<f64> {
        let (nx, ny) = (self.nx as isize, self.ny as isize);
        let mut out = Vec::with_capacity(((nx + 2) * (ny + 2)) as usize);
        for j in -1..=ny {
            if (0..ny).contains(&j) {
                out.push(self.sample(field, -1, j, bc));
                let row = (j as usize) * self.nx;
                out.extend_from_slice(&field[row..row + self.nx]);
                out.push(self.sample(field, nx, j, bc));
            } else {
                for i in -1..=nx {
                    out.push(self.sample(field, i, j, bc));
                }
            }
        }
        out
    }

    /// Apply a row stencil on the padded buffer: `f(dn, mid, up, out)` gets
    /// the padded rows below, at and above one grid row.
    fn map_rows(&self, p: &[f64], f: impl Fn(&[f64], &[f64], &[f64], &mut Vec<f64>)) -> Field {
        let w = self.nx + 2;
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            let dn = &p[j * w..(j + 1) * w];
            let mid = &p[(j + 1) * w..(j + 2) * w];
            let up = &p[(j + 2) * w..(j + 3) * w];
            f(dn, mid, up, &mut out);
        }
        out
    }

    fn d1_padded(&self, p: &[f64], dir: usize) -> Field {
        if self.is_rotsym() && dir == 1 {
            return vec![0.0; self.len()];
        }
        let inv = 0.5 / self.spacing()[dir];
        let n = self.nx;
        if dir == 0 {
            self.map_rows(p, |_, m, _, o| o.extend(m.windows(3).map(|x| (x[2] - x[0]) * inv)))
        } else {
            self.map_rows(p, |d, _, u, o| {
                o.extend(u[1..=n].iter().zip(&d[1..=n]).map(|(a, b)| (a - b) * inv))
            })
        }
    }

    fn d2_padded(&self, p: &[f64], a: usize, b: usize) -> Field {
        if self.is_rotsym() && (a == 1 || b == 1) {
            return vec![0.0; self.len()];
        }
        let [hx, hy] = self.spacing();
        let n = self.nx;
        match (a, b) {
            (0, 0) => {
                let inv = 1.0 / (hx * hx);
                self.map_rows(p, |_, m, _, o| {
                    o.extend(m.windows(3).map(|x| (x[2] - 2.0 * x[1] + x[0]) * inv))
                })
            }
            (1, 1) => {
                let inv = 1.0 / (hy * hy);
                self.map_rows(p, |d, m, u, o| {
                    o.extend(
                        (1..=n).map(|i| (u[i] - 2.0 * m[i] + d[i]) * inv),
                    )
                })
            }
            _ => {
                let inv = 0.25 / (hx * hy);
                self.map_rows(p, |d, _, u, o| {
                    o.extend(
                        u.windows(3)
                            .zip(d.windows(3))
                            .map(|(u, d)| (u[2] - d[2] - u[0] + d[0]) * inv),
                    )
                })
            }
        }
    }

    /// Centered first derivative along chart direction `dir` (0 or 1).
    pub fn d1(&self, field: &[f64], dir: usize, bc: Bc) -> Field {
        if self.is_rotsym() && dir == 1 {
            return vec![0.0; self.len()];
        }
        self.d1_padded(&self.padded(field, bc), dir)
    }

    /// Centered second derivative `∂_a ∂_b`.
    pub fn d2(&self, field: &[f64], a: usize, b: usize, bc: Bc) -> Field {
        if self.is_rotsym() && (a == 1 || b == 1) {
            return vec![0.0; self.len()];
        }
        self.d2_padded(&self.padded(field, bc), a, b)
    }

    /// First and second chart derivatives of one field in a single pass:
    /// `[∂₁, ∂₂]` and `[∂₁₁, ∂₁₂, ∂₂₂]`.
    pub fn jet(&self, field: &[f64], bc: Bc) -> ([Field; 2], [Field; 3]) {
        let p = self.padded(field, bc);
        (
            [self.d1_padded(&p, 0), self.d1_padded(&p, 1)],
            [
                self.d2_padded(&p, 0, 0),
                self.d2_padded(&p, 0, 1),
                self.d2_padded(&p, 1, 1),
            ],
        )
    }

    /// Laplacian of the base metric (flat, or the unit round sphere in
    /// conservative flux form so that `Σ sinθ·Δu` telescopes to zero).
    pub fn base_laplacian(&self, field: &[f64]) -> Field {
        match self.topology {
            Topology::Torus => {
                let a = self.d2(field, 0, 0, Bc::SCALAR);
                let b = self.d2(field, 1, 1, Bc::SCALAR);
                a.iter().zip(&b).map(|(x, y)| x + y).collect()
            }
            Topology::SphereRotSym => {
                let h = self.hx;
                // Finite-volume normalization: the cell area is 2π·2sin(h/2)·sinθ.
                let inv = 1.0 / (h * 2.0 * (0.5 * h).sin());
                self.map_nodes(|i, j| {
                    let theta = (i as f64 + 0.5) * h;
                    let up = (theta + 0.5 * h).sin();
                    let dn = (theta - 0.5 * h).sin();
                    let c = self.sample(field, i, j, Bc::SCALAR);
                    let p = self.sample(field, i + 1, j, Bc::SCALAR);
                    let m = self.sample(field, i - 1, j, Bc::SCALAR);
                    (up * (p - c) - dn.max(0.0) * (c - m)) * inv / theta.sin()
                })
            }
        }
    }

    fn map_nodes(&self, f: impl Fn(isize, isize) -> f64) -> Field {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push(f(i as isize, j as isize));
            }
        }
        out
    }

    /// Integral of a density given in chart coordinates (the caller supplies
    /// any metric factor) with pairwise summation.
    pub fn integrate(&self, density: &[f64]) -> f64 {
        pairwise_sum(density) * self.cell_measure()
    }

    /// Local interpolation stencil at an arbitrary chart point.
    pub fn stencil_at(&self, p: [f64; 2]) -> Stencil {
        match self.topology {
            Topology::Torus => {
                let (ix, wx) = lagrange4(p[0] / self.hx);
                let (iy, wy) = lagrange4(p[1] / self.hy);
                Stencil {
                    ix,
                    iy,
                    wx,
                    wy,
                    two_d: true,
                }
            }
            Topology::SphereRotSym => {
                let (ix, wx) = lagrange4(p[0] / self.hx - 0.5);
                Stencil {
                    ix,
                    iy: 0,
                    wx,
                    wy: [0.0, 1.0, 0.0, 0.0],
                    two_d: false,
                }
            }
        }
    }

    /// Visit the stored nodes a stencil touches: `(node, weight, mirrored)`,
    /// where `mirrored` is true when the sample came through a pole
    /// reflection. Windings are not applied.
    #[inline]
    pub fn for_each_stencil_node(&self, st: &Stencil, mut visit: impl FnMut(usize, f64, bool)) {
        if st.two_d {
            let nx = self.nx as isize;
            let ny = self.ny as isize;
            for (b, wy) in st.wy.iter().enumerate() {
                let j = (st.iy + b as isize - 1).rem_euclid(ny) as usize;
                for (a, wx) in st.wx.iter().enumerate() {
                    let i = (st.ix + a as isize - 1).rem_euclid(nx) as usize;
                    visit(i + self.nx * j, wx * wy, false);
                }
            }
        } else {
            let n = self.nx as isize;
            for (a, wx) in st.wx.iter().enumerate() {
                let i = st.ix + a as isize - 1;
                if i < 0 {
                    visit((-i - 1) as usize, *wx, true);
                } else if i >= n {
                    visit((2 * n - 1 - i) as usize, *wx, true);
                } else {
                    visit(i as usize, *wx, false);
                }
            }
        }
    }

    /// Interpolated value of `field` at the stencil's point.
    #[inline]
    pub fn interpolate(&self, field: &[f64], st: &Stencil, bc: Bc) -> f64 {
        if st.two_d {
            let mut acc = 0.0;
            for (b, wy) in st.wy.iter().enumerate() {
                let j = st.iy + b as isize - 1;
                let mut row = 0.0;
                for (a, wx) in st.wx.iter().enumerate() {
                    row += wx * self.sample(field, st.ix + a as isize - 1, j, bc);
                }
                acc += wy * row;
            }
            acc
        } else {
            let mut acc = 0.0;
            for (a, wx) in st.wx.iter().enumerate() {
                acc += wx * self.sample(field, st.ix + a as isize - 1, 0, bc);
            }
            acc
        }
    }
}

fn check_count(n: usize) -> Result<(), Error> {
    if n < 8 || n % 2 != 0 {
        return Err(Error::InvalidGrid(format!(
            "grid counts must be even and at least 8, got {n}"
        )));
    }
    Ok(())
}

/// Cubic Lagrange weights on nodes `i0-1 ..= i0+2` for a fractional node
/// position `s`.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    ix: isize,
    iy: isize,
    wx: [f64; 4],
    wy: [f64; 4],
    two_d: bool,
}

fn lagrange4(s: f64) -> (isize, [f64; 4]) {
    let i0 = s.floor();
    let t = s - i0;
    if t == 0.0 {
        return (i0 as isize, [0.0, 1.0, 0.0, 0.0]);
    }
    let w = [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ];
    (i0 as isize, w)
}

/// Pairwise summation; result is independent of any evaluation schedule.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Wrap an angle difference into `(−π, π]`.
#[inline]
pub fn wrap_pi(d: f64) -> f64 {
    let w = d.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}
