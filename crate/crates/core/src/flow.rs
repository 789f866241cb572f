//! Time evolution of the coupled system: the factors follow the normalized
//! Ricci flow while the graph moves by mean curvature in the current metric.

use crate::ambient::{ProductKahlerAmbient, V4};
use crate::error::Error;
use crate::grid::{max_abs, Field, PeriodicGrid};
use crate::immersion::{graph_velocity, graph_velocity_from, GraphImmersion, SurfaceGeometry, SurfaceMap};

/// Below this `min v` the graph is treated as lost.
pub const GRAPH_TOL: f64 = 1e-3;
/// `max|A|²·h²` above which the grid can no longer resolve the surface.
pub const BLOW_UP_LEVEL: f64 = 1e6;
/// A stable step this far below the initial one also ends the run as a
/// blow-up: curvature growing like `1/(T − t)` would otherwise need
/// `O(1/(T − t))` further steps to reach [`BLOW_UP_LEVEL`].
pub const DT_COLLAPSE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub ambient: ProductKahlerAmbient,
    pub surface: GraphImmersion,
}

impl FlowState {
    pub fn new(t: f64, ambient: ProductKahlerAmbient, surface: GraphImmersion) -> Result<Self, Error> {
        if surface.grid() != ambient.metric(0).grid() {
            return Err(Error::Mismatch(
                "the surface grid must parametrize the first factor".to_string(),
            ));
        }
        if !t.is_finite() {
            return Err(Error::blow_up(t, "time not finite"));
        }
        Ok(FlowState {
            t,
            ambient,
            surface,
        })
    }

    pub fn grid(&self) -> &PeriodicGrid {
        self.surface.grid()
    }

    pub fn geometry(&self) -> Result<SurfaceGeometry, Error> {
        SurfaceGeometry::compute(&self.surface.to_map(), &self.ambient)
    }

    pub fn stable_dt(&self) -> Result<f64, Error> {
        Ok(stable_dt(self, &self.geometry()?))
    }
}

/// Largest explicit step: the Ricci bounds of both factors and
/// `0.2·h²·λ_min(g)/(1 + max|A|²)` for the surface. On the sphere only the
/// polar direction is differenced, so `λ_min` is `g_θθ`.
pub fn stable_dt(s: &FlowState, geo: &SurfaceGeometry) -> f64 {
    let h = s.grid().h();
    let rot = s.grid().is_rotsym();
    let lam = geo
        .points
        .iter()
        .map(|p| if rot { p.g[0][0] } else { p.lambda_min() })
        .fold(f64::INFINITY, f64::min);
    let a2 = geo.points.iter().map(|p| p.a2).fold(0.0, f64::max);
    let surf = 0.2 * h * h * lam / (1.0 + a2);
    let ricci = if s.ambient.is_stationary() {
        f64::INFINITY
    } else {
        s.ambient.stable_dt()
    };
    surf.min(ricci)
}

/// `min v` of a graph, `v = ω₁(e₁, e₂)`.
pub fn min_v(geo: &SurfaceGeometry) -> f64 {
    geo.frames
        .iter()
        .map(|f| f.omega_parts[0])
        .fold(f64::INFINITY, f64::min)
}

fn axpy(x: &[f64], a: f64, k: &[f64]) -> Field {
    x.iter().zip(k).map(|(x, k)| x + a * k).collect()
}

fn rk4_combine(x: &[f64], dt: f64, k: [&Field; 4]) -> Field {
    (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]))
        .collect()
}

fn checked(t: f64, r: Result<[Field; 2], Error>) -> Result<[Field; 2], Error> {
    match r {
        Err(Error::BlowUp { reason, .. }) => Err(Error::BlowUp { t, reason }),
        other => other,
    }
}

/// One RK4 step of the graph in the frozen ambient of `s`.
pub fn mcf_graph_step(s: &FlowState, dt: f64) -> Result<GraphImmersion, Error> {
    let f0 = s.surface.f();
    let vel = |g: &GraphImmersion| checked(s.t, graph_velocity(g, &s.ambient));
    let shifted = |k: &[Field; 2], c: f64| {
        s.surface
            .with_f([axpy(&f0[0], c, &k[0]), axpy(&f0[1], c, &k[1])])
            .map_err(|_| Error::blow_up(s.t, "graph not finite"))
    };
    let k1 = vel(&s.surface)?;
    let k2 = vel(&shifted(&k1, 0.5 * dt)?)?;
    let k3 = vel(&shifted(&k2, 0.5 * dt)?)?;
    let k4 = vel(&shifted(&k3, dt)?)?;
    let f = std::array::from_fn(|a| rk4_combine(&f0[a], dt, [&k1[a], &k2[a], &k3[a], &k4[a]]));
    s.surface
        .with_f(f)
        .map_err(|_| Error::blow_up(s.t + dt, "graph not finite after step"))
}

/// Velocity of the joint state `(u₁, u₂, f)`.
fn joint_velocity(amb: &ProductKahlerAmbient, g: &GraphImmersion, t: f64) -> Result<[Field; 4], Error> {
    let n = g.grid().len();
    let [v1, v2] = if amb.is_stationary() {
        [vec![0.0; n], vec![0.0; n]]
    } else {
        amb.velocity()
            .map_err(|_| Error::blow_up(t, "scalar curvature not finite"))?
    };
    let [w1, w2] = checked(t, graph_velocity(g, amb))?;
    Ok([v1, v2, w1, w2])
}

/// One RK4 step of the coupled system, treating the conformal factors and
/// the graph as a single state.
pub fn coupled_step(s: &FlowState, dt: f64) -> Result<FlowState, Error> {
    coupled_step_impl(s, None, dt)
}

/// As [`coupled_step`], taking the first stage from the geometry of `s`.
pub fn coupled_step_with(s: &FlowState, geo: &SurfaceGeometry, dt: f64) -> Result<FlowState, Error> {
    coupled_step_impl(s, Some(geo), dt)
}

fn coupled_step_impl(s: &FlowState, geo: Option<&SurfaceGeometry>, dt: f64) -> Result<FlowState, Error> {
    let x0: [Field; 4] = [
        s.ambient.metric(0).u().to_vec(),
        s.ambient.metric(1).u().to_vec(),
        s.surface.f()[0].clone(),
        s.surface.f()[1].clone(),
    ];
    let stationary = s.ambient.is_stationary();
    let build = |x: &[Field; 4], t: f64| -> Result<(ProductKahlerAmbient, GraphImmersion), Error> {
        let amb = if stationary {
            s.ambient.clone()
        } else {
            s.ambient
                .with_factors(x[0].clone(), x[1].clone())
                .map_err(|_| Error::blow_up(t, "conformal factor not finite"))?
        };
        let g = s
            .surface
            .with_f([x[2].clone(), x[3].clone()])
            .map_err(|_| Error::blow_up(t, "graph not finite"))?;
        Ok((amb, g))
    };
    let stage = |x: &[Field; 4], t: f64| -> Result<[Field; 4], Error> {
        let (a, g) = build(x, t)?;
        joint_velocity(&a, &g, t)
    };
    let shift = |k: &[Field; 4], c: f64| -> [Field; 4] {
        std::array::from_fn(|i| axpy(&x0[i], c, &k[i]))
    };
    let k1 = match geo {
        Some(geo) => {
            let n = s.grid().len();
            let [v1, v2] = if stationary {
                [vec![0.0; n], vec![0.0; n]]
            } else {
                s.ambient
                    .velocity()
                    .map_err(|_| Error::blow_up(s.t, "scalar curvature not finite"))?
            };
            let [w1, w2] = graph_velocity_from(geo);
            if w1.iter().chain(&w2).any(|v| !v.is_finite()) {
                return Err(Error::blow_up(s.t, "graph velocity not finite"));
            }
            [v1, v2, w1, w2]
        }
        None => joint_velocity(&s.ambient, &s.surface, s.t)?,
    };
    let k2 = stage(&shift(&k1, 0.5 * dt), s.t + 0.5 * dt)?;
    let k3 = stage(&shift(&k2, 0.5 * dt), s.t + 0.5 * dt)?;
    let k4 = stage(&shift(&k3, dt), s.t + dt)?;
    let x1: [Field; 4] =
        std::array::from_fn(|i| rk4_combine(&x0[i], dt, [&k1[i], &k2[i], &k3[i], &k4[i]]));
    let (amb, g) = build(&x1, s.t + dt)?;
    Ok(FlowState {
        t: s.t + dt,
        ambient: amb,
        surface: g,
    })
}

/// Mean curvature vector at every node of a general surface.
pub fn normal_velocity(map: &SurfaceMap, amb: &ProductKahlerAmbient) -> Result<Vec<V4>, Error> {
    Ok(SurfaceGeometry::compute(map, amb)?.mean_curvature())
}

/// One RK4 step of pure normal motion `∂_t Y = H` in a frozen ambient.
pub fn normal_motion_step(
    map: &SurfaceMap,
    amb: &ProductKahlerAmbient,
    dt: f64,
) -> Result<SurfaceMap, Error> {
    let k1 = normal_velocity(map, amb)?;
    let k2 = normal_velocity(&map.advanced(&k1, 0.5 * dt)?, amb)?;
    let k3 = normal_velocity(&map.advanced(&k2, 0.5 * dt)?, amb)?;
    let k4 = normal_velocity(&map.advanced(&k3, dt)?, amb)?;
    let v: Vec<V4> = (0..k1.len())
        .map(|i| std::array::from_fn(|a| (k1[i][a] + 2.0 * k2[i][a] + 2.0 * k3[i][a] + k4[i][a]) / 6.0))
        .collect();
    map.advanced(&v, dt)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DtPolicy {
    /// `safety · stable_dt` recomputed every step.
    Stable { safety: f64 },
    /// A fixed step, still capped by `stable_dt`.
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub initial: FlowState,
    pub t_end: f64,
    pub dt: DtPolicy,
    /// Spacing of the recorded samples.
    pub sample_every: f64,
    /// Number of field snapshots, evenly spaced over `[0, t_end]`.
    pub snapshots: usize,
    /// True iff `min v > √2/2` initially.
    pub admissible: bool,
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        initial: FlowState,
        t_end: f64,
        dt: DtPolicy,
        sample_every: f64,
    ) -> Result<Self, Error> {
        if !(t_end > 0.0) || !(sample_every > 0.0) {
            return Err(Error::Mismatch(
                "end time and sample spacing must be positive".to_string(),
            ));
        }
        let admissible = min_v(&initial.geometry()?) > std::f64::consts::FRAC_1_SQRT_2;
        Ok(Scenario {
            name: name.into(),
            initial,
            t_end,
            dt,
            sample_every,
            snapshots: 0,
            admissible,
        })
    }

    pub fn with_snapshots(mut self, n: usize) -> Self {
        self.snapshots = n;
        self
    }
}

/// One row of the scalar diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesRow {
    pub t: f64,
    pub min_cos_alpha: f64,
    pub min_v: f64,
    pub min_u1: f64,
    pub min_u2: f64,
    pub max_a2: f64,
    pub area: f64,
    pub int_one_minus_cos: f64,
    pub int_h2: f64,
    /// `∫₀ᵗ∫|H| dμ ds`.
    pub l1_h_cum: f64,
    /// `∫(R̃ − r) dμ`.
    pub int_rtilde_minus_r: f64,
    /// `∫(Ric(Je₁, e₂) − (r/2)cos α) dμ`, the rate of change of `∫ω` over `Σ`.
    pub int_ricci_form: f64,
    /// Observer columns.
    pub extra: Vec<f64>,
}

pub const SERIES_COLUMNS: [&str; 10] = [
    "t",
    "min_cos_alpha",
    "min_v",
    "min_u1",
    "min_u2",
    "max_A2",
    "area",
    "int_one_minus_cos",
    "int_H2",
    "L1_H_cum",
];

impl SeriesRow {
    pub fn columns(&self) -> [f64; 10] {
        [
            self.t,
            self.min_cos_alpha,
            self.min_v,
            self.min_u1,
            self.min_u2,
            self.max_a2,
            self.area,
            self.int_one_minus_cos,
            self.int_h2,
            self.l1_h_cum,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub nx: usize,
    pub ny: usize,
    pub names: Vec<String>,
    pub fields: Vec<Field>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    BlowUp { t: f64, reason: String },
    GraphDegenerate { t: f64, min_v: f64 },
    Failed(Error),
}

impl Termination {
    pub fn from_error(e: Error) -> Self {
        match e {
            Error::BlowUp { t, reason } => Termination::BlowUp { t, reason },
            Error::GraphDegenerate { t, min_v } => Termination::GraphDegenerate { t, min_v },
            e => Termination::Failed(e),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Termination::Completed => "completed",
            Termination::BlowUp { .. } => "blow-up",
            Termination::GraphDegenerate { .. } => "graph-degenerate",
            Termination::Failed(_) => "failed",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowTrajectory {
    pub name: String,
    pub rows: Vec<SeriesRow>,
    pub extra_columns: Vec<String>,
    pub snapshots: Vec<Snapshot>,
    pub termination: Termination,
    pub final_state: FlowState,
    pub steps: usize,
}

impl FlowTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.t).collect()
    }

    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed
    }
}

/// Scalar diagnostics of a state; `l1_h_cum` is left at zero.
pub fn series_row(s: &FlowState, geo: &SurfaceGeometry) -> SeriesRow {
    let r = s.ambient.r();
    let cos = geo.cos_alpha();
    let gauges = geo.gauges();
    let minf = |x: &[f64]| x.iter().cloned().fold(f64::INFINITY, f64::min);
    let one_minus: Field = cos.iter().map(|c| 1.0 - c).collect();
    let rt: Field = geo.points.iter().map(|p| p.r_tilde() - r).collect();
    let ric: Field = geo
        .points
        .iter()
        .zip(&geo.frames)
        .map(|(p, f)| p.amb.ricci(&p.amb.j(&f.e[0]), &f.e[1]) - 0.5 * r * f.cos_alpha)
        .collect();
    SeriesRow {
        t: s.t,
        min_cos_alpha: minf(&cos),
        min_v: minf(&gauges[0]),
        min_u1: minf(&gauges[1]),
        min_u2: minf(&gauges[2]),
        max_a2: max_abs(&geo.a2()),
        area: geo.area(),
        int_one_minus_cos: geo.integrate(&one_minus),
        int_h2: geo.integrate(&geo.mean_sq()),
        l1_h_cum: 0.0,
        int_rtilde_minus_r: geo.integrate(&rt),
        int_ricci_form: geo.integrate(&ric),
        extra: Vec::new(),
    }
}

fn int_abs_h(geo: &SurfaceGeometry) -> f64 {
    let h: Field = geo.mean_sq().iter().map(|x| x.sqrt()).collect();
    geo.integrate(&h)
}

/// Fields written to snapshots.
pub fn snapshot(s: &FlowState, geo: &SurfaceGeometry) -> Snapshot {
    let g = s.grid();
    Snapshot {
        t: s.t,
        nx: g.nx(),
        ny: g.ny(),
        names: ["u1", "u2", "f1", "f2", "cos_alpha", "A2"]
            .iter()
            .map(|x| x.to_string())
            .collect(),
        fields: vec![
            s.ambient.metric(0).u().to_vec(),
            s.ambient.metric(1).u().to_vec(),
            s.surface.f()[0].clone(),
            s.surface.f()[1].clone(),
            geo.cos_alpha(),
            geo.a2(),
        ],
    }
}

/// A surface that degenerates or leaves the chart is treated as a blow-up.
fn collapse_as_blow_up(t: f64, e: Error) -> Error {
    match e {
        Error::DegenerateImmersion { .. } | Error::ChartDomain(_) => Error::blow_up(t, e.to_string()),
        e => e,
    }
}

/// Integrate a scenario.
pub fn run(sc: &Scenario) -> FlowTrajectory {
    run_observed(sc, &[], |_, _| Vec::new())
}

/// Integrate a scenario, appending the observer's values to every sample.
pub fn run_observed(
    sc: &Scenario,
    extra_columns: &[String],
    mut observer: impl FnMut(&FlowState, &SurfaceGeometry) -> Vec<f64>,
) -> FlowTrajectory {
    let mut s = sc.initial.clone();
    let t0 = s.t;
    let h = s.grid().h();
    let mut traj = FlowTrajectory {
        name: sc.name.clone(),
        rows: Vec::new(),
        extra_columns: extra_columns.to_vec(),
        snapshots: Vec::new(),
        termination: Termination::Completed,
        final_state: s.clone(),
        steps: 0,
    };
    let n_samples = (sc.t_end / sc.sample_every - 1e-9).ceil().max(1.0) as usize;
    let sample_time = |k: usize| (t0 + k as f64 * sc.sample_every).min(t0 + sc.t_end);
    let snap_time = |k: usize| t0 + sc.t_end * k as f64 / (sc.snapshots.max(2) - 1) as f64;
    let mut next_sample = 0;
    let mut next_snap = 0;
    let mut l1 = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    let end = t0 + sc.t_end;
    let mut initial_cap: Option<f64> = None;
    loop {
        let geo = match s.geometry() {
            Ok(g) => g,
            Err(e) => {
                traj.termination = Termination::from_error(collapse_as_blow_up(s.t, e));
                break;
            }
        };
        let ih = int_abs_h(&geo);
        if let Some((tp, ip)) = prev {
            l1 += 0.5 * (ip + ih) * (s.t - tp);
        }
        prev = Some((s.t, ih));
        let a2max = geo.points.iter().map(|p| p.a2).fold(0.0, f64::max);
        let mv = min_v(&geo);
        let at = |target: f64| (s.t - target).abs() <= 1e-12 * (1.0 + target.abs());
        if next_sample <= n_samples && at(sample_time(next_sample)) {
            let mut row = series_row(&s, &geo);
            row.l1_h_cum = l1;
            row.extra = observer(&s, &geo);
            traj.rows.push(row);
            next_sample += 1;
        }
        if sc.snapshots > 0 && next_snap < sc.snapshots && at(snap_time(next_snap)) {
            traj.snapshots.push(snapshot(&s, &geo));
            next_snap += 1;
        }
        let rmax = (0..2)
            .flat_map(|f| s.ambient.factor(f).scalar_curvature())
            .fold(0.0, f64::max);
        let cap = stable_dt(&s, &geo);
        let dt0 = *initial_cap.get_or_insert(cap);
        let stop = if !(a2max * h * h <= BLOW_UP_LEVEL) {
            Some(Termination::BlowUp {
                t: s.t,
                reason: format!("max|A|² = {a2max:e} exceeds the resolvable level"),
            })
        } else if !(rmax * h * h <= BLOW_UP_LEVEL) {
            Some(Termination::BlowUp {
                t: s.t,
                reason: format!("ambient curvature {rmax:e} exceeds the resolvable level"),
            })
        } else if mv < GRAPH_TOL {
            Some(Termination::GraphDegenerate { t: s.t, min_v: mv })
        } else if cap < DT_COLLAPSE * dt0 {
            Some(Termination::BlowUp {
                t: s.t,
                reason: format!("stable time step fell to {cap:e}"),
            })
        } else {
            None
        };
        if let Some(term) = stop {
            // The final state is always sampled.
            if traj.rows.last().map_or(true, |r| r.t != s.t) && a2max.is_finite() {
                let mut row = series_row(&s, &geo);
                row.l1_h_cum = l1;
                row.extra = observer(&s, &geo);
                traj.rows.push(row);
            }
            traj.termination = term;
            break;
        }
        if s.t >= end - 1e-12 * (1.0 + end.abs()) {
            break;
        }
        let mut target = end;
        if next_sample <= n_samples {
            target = target.min(sample_time(next_sample));
        }
        if sc.snapshots > 0 && next_snap < sc.snapshots {
            target = target.min(snap_time(next_snap));
        }

        let dt = match sc.dt {
            DtPolicy::Stable { safety } => safety * cap,
            DtPolicy::Fixed(dt) => dt.min(cap),
        };
        let remaining = target - s.t;
        let (dt, snap_to) = if dt >= remaining * (1.0 - 1e-9) {
            (remaining, Some(target))
        } else {
            (dt, None)
        };
        match coupled_step_with(&s, &geo, dt) {
            Ok(mut next) => {
                if let Some(t) = snap_to {
                    next.t = t;
                }
                s = next;
                traj.steps += 1;
            }
            Err(e) => {
                if traj.rows.last().map_or(true, |r| r.t != s.t) {
                    let mut row = series_row(&s, &geo);
                    row.l1_h_cum = l1;
                    row.extra = observer(&s, &geo);
                    traj.rows.push(row);
                }
                traj.termination = Termination::from_error(collapse_as_blow_up(s.t, e));
                break;
            }
        }
    }
    traj.final_state = s;
    traj
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_geometry::ConformalSurfaceMetric;
    use std::f64::consts::PI;

    fn flat(n: usize) -> ProductKahlerAmbient {
        let g = PeriodicGrid::torus(n).unwrap();
        ProductKahlerAmbient::new(
            ConformalSurfaceMetric::standard(g.clone(), 0.0),
            ConformalSurfaceMetric::standard(g, 0.0),
        )
        .unwrap()
    }

    fn bumpy(n: usize, a: f64) -> ProductKahlerAmbient {
        let g = PeriodicGrid::torus(n).unwrap();
        let u1 = g.field_from_fn(|[x, y]| a * (x.cos() + 0.5 * (x + y).sin()));
        let u2 = g.field_from_fn(|[x, y]| a * y.sin() * x.cos());
        ProductKahlerAmbient::new(
            ConformalSurfaceMetric::new(g.clone(), u1, 0.0).unwrap(),
            ConformalSurfaceMetric::new(g, u2, 0.0).unwrap(),
        )
        .unwrap()
    }

    fn state(amb: ProductKahlerAmbient, f: impl Fn([f64; 2]) -> [f64; 2], wind: [[i32; 2]; 2]) -> FlowState {
        let grid = amb.metric(0).grid().clone();
        let g = GraphImmersion::from_fn(grid, f, wind).unwrap();
        FlowState::new(0.0, amb, g).unwrap()
    }

    const DIAG: [[i32; 2]; 2] = [[1, 0], [0, 1]];

    fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn geodesic_graphs_do_not_move() {
        let s = state(flat(16), |[x, y]| [x, y], DIAG);
        let g = mcf_graph_step(&s, 0.01).unwrap();
        assert!(sup_diff(&g.f()[0], &s.surface.f()[0]) < 1e-14);
        let grid = PeriodicGrid::sphere(32).unwrap();
        let amb = ProductKahlerAmbient::new(
            ConformalSurfaceMetric::standard(grid.clone(), 2.0),
            ConformalSurfaceMetric::standard(grid, 2.0),
        )
        .unwrap();
        let s = state(amb, |_| [PI / 2.0, 1.0], [[0; 2]; 2]);
        let n = coupled_step(&s, 0.01).unwrap();
        assert_eq!(n.surface, s.surface);
        assert_eq!(n.ambient.metric(0).u(), s.ambient.metric(0).u());
    }

    #[test]
    fn stable_dt_formula_and_scaling() {
        let n = 64;
        let h = 2.0 * PI / n as f64;
        let s = state(flat(n), |[x, y]| [x, y], DIAG);
        assert!((s.stable_dt().unwrap() - 0.4 * h * h).abs() < 1e-15);
        let s2 = state(flat(2 * n), |[x, y]| [x, y], DIAG);
        assert!((s.stable_dt().unwrap() / s2.stable_dt().unwrap() - 4.0).abs() < 1e-9);
        let stiff = state(bumpy(n, 0.5), |[x, y]| [x, y], DIAG);
        assert!(stiff.stable_dt().unwrap() < s.stable_dt().unwrap());
    }

    #[test]
    fn flat_ambient_coupled_step_is_graph_step() {
        let s = state(flat(16), |[x, y]| [x, y + 0.1 * x.sin()], DIAG);
        let a = mcf_graph_step(&s, 0.005).unwrap();
        let b = coupled_step(&s, 0.005).unwrap();
        assert_eq!(&a, &b.surface);
    }

    #[test]
    fn graph_step_converges_in_space() {
        let dt = 0.002;
        let fine = state(flat(128), |[x, y]| [x, y + 0.1 * x.sin()], DIAG);
        let half = mcf_graph_step(&fine, 0.5 * dt).unwrap();
        let mid = FlowState::new(0.5 * dt, fine.ambient.clone(), half).unwrap();
        let oracle = mcf_graph_step(&mid, 0.5 * dt).unwrap();
        let mut errs = Vec::new();
        for n in [32, 64] {
            let s = state(flat(n), |[x, y]| [x, y + 0.1 * x.sin()], DIAG);
            let g = mcf_graph_step(&s, dt).unwrap();
            let stride = 128 / n;
            let mut e: f64 = 0.0;
            for k in 0..g.grid().len() {
                let (i, j) = g.grid().ij(k);
                let ko = oracle.grid().idx(i * stride, j * stride);
                for a in 0..2 {
                    e = e.max((g.f()[a][k] - oracle.f()[a][ko]).abs());
                }
            }
            errs.push(e);
        }
        assert!(errs[0] < 1e-2 * dt && errs[0] / errs[1] > 3.0, "{errs:?}");
    }

    #[test]
    fn coupled_step_is_fourth_order_in_time() {
        let mk = || state(bumpy(16, 0.2), |[x, y]| [x + 0.1 * y.sin(), y + 0.1 * x.cos()], DIAG);
        let s = mk();
        let mut errs = Vec::new();
        for dt in [0.02, 0.01] {
            let one = coupled_step(&s, dt).unwrap();
            let two = coupled_step(&coupled_step(&s, 0.5 * dt).unwrap(), 0.5 * dt).unwrap();
            let mut e = sup_diff(one.ambient.metric(0).u(), two.ambient.metric(0).u());
            for a in 0..2 {
                e = e.max(sup_diff(&one.surface.f()[a], &two.surface.f()[a]));
            }
            errs.push(e);
        }
        assert!((errs[0] / errs[1]).log2() > 4.5, "{errs:?}");
    }

    #[test]
    fn normal_motion_sweeps_the_same_surface() {
        let n = 32;
        let dt = 0.002;
        let steps = 10;
        let s0 = state(flat(n), |[x, y]| [x + 0.2 * y.sin(), y + 0.1 * x.sin()], DIAG);
        let mut s = s0.clone();
        let mut map = s0.surface.to_map();
        for _ in 0..steps {
            s = coupled_step(&s, dt).unwrap();
            map = normal_motion_step(&map, &s0.ambient, dt).unwrap();
        }
        let a = s.geometry().unwrap();
        let b = SurfaceGeometry::compute(&map, &s0.ambient).unwrap();
        let minf = |x: Field| x.into_iter().fold(f64::INFINITY, f64::min);
        assert!((a.area() - b.area()).abs() < 1e-3);
        assert!((minf(a.cos_alpha()) - minf(b.cos_alpha())).abs() < 1e-3);
        assert!((max_abs(&a.a2()) - max_abs(&b.a2())).abs() < 1e-2 * max_abs(&a.a2()));
    }

    #[test]
    fn run_lands_on_samples_and_keeps_diagonal_fixed() {
        let s = state(flat(16), |[x, y]| [x, y], DIAG);
        let sc = Scenario::new("diagonal", s, 0.5, DtPolicy::Stable { safety: 1.0 }, 0.25)
            .unwrap()
            .with_snapshots(2);
        assert!(!sc.admissible);
        let tr = run(&sc);
        assert!(tr.completed());
        assert_eq!(tr.times(), vec![0.0, 0.25, 0.5]);
        assert_eq!(tr.snapshots.len(), 2);
        for r in &tr.rows {
            let (a, b) = (r.columns(), tr.rows[0].columns());
            for c in 1..a.len() {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lagrangian_flat_run_stays_lagrangian() {
        let s = state(flat(16), |[x, y]| [x, -y], [[1, 0], [0, -1]]);
        let sc = Scenario::new("anti", s, 0.2, DtPolicy::Stable { safety: 1.0 }, 0.1).unwrap();
        let tr = run(&sc);
        for r in &tr.rows {
            assert!(r.min_cos_alpha.abs() <= 1e-10);
        }
    }

    #[test]
    fn admissibility_flag_follows_initial_v() {
        let s = state(flat(16), |[x, y]| [0.3 * y.sin(), 0.2 * x.cos()], [[0; 2]; 2]);
        let sc = Scenario::new("g", s, 0.1, DtPolicy::Stable { safety: 1.0 }, 0.1).unwrap();
        assert!(sc.admissible);
    }
}
