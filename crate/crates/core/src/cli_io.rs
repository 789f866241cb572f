//! Scenario files, run orchestration and output artifacts.
//!
//! A scenario is a flat `key = value` file with `#` comments. Six keys are
//! required (`name`, `base`, `r`, `grid`, `t_end`, `graph`); every other key
//! has a default listed on [`RunConfig`]. Perturbations are drawn from a
//! seeded ChaCha stream per field, so a config and a seed fix the run
//! bit for bit.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ambient::ProductKahlerAmbient;
use crate::base_geometry::ConformalSurfaceMetric;
use crate::diagnostics::{
    inequality_suite_on, residual_a2, residual_area_element, residual_cos_alpha, residual_metric_evolution,
    residual_u_gauges, InequalityReport, MonotonicityProbe, ResidualReport, SamplePair, WeightMode,
};
use crate::error::Error;
use crate::flow::{
    coupled_step, min_v, run_observed, DtPolicy, FlowState, FlowTrajectory, Scenario, Snapshot, Termination,
    SERIES_COLUMNS,
};
use crate::grid::{max_abs, Field, PeriodicGrid, Topology};
use crate::immersion::{GraphImmersion, SPHERE_DEGREE_ONE};

pub const GRID_MESSAGE: &str = "grid must be even power of two in [16,512]";

/// Shape of the unperturbed graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    /// `f = id` on the torus; the degree-one dilation graph on the sphere.
    Diagonal,
    /// `f(x, y) = (x, −y)`, torus only.
    AntiDiagonal,
    /// A constant map.
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeKind {
    None,
    MaxCurvature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expectation {
    Completed,
    BlowUp,
}

/// Parsed and validated scenario file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub base: Topology,
    pub r: f64,
    pub grid: usize,
    pub t_end: f64,
    pub graph: GraphKind,
    /// Sup-norm of the graph perturbation. Default 0. For the anti-diagonal
    /// it scales a Hamiltonian deformation, which keeps the graph
    /// Lagrangian when the factors are flat or mirrored.
    pub graph_amplitude: f64,
    /// Highest perturbation wavenumber. Default 2.
    pub graph_modes: usize,
    /// Dilation factor of the sphere diagonal. Default 1.
    pub graph_lambda: f64,
    /// Sup-norms of the conformal factor perturbations. Default 0.
    pub u1_amplitude: f64,
    pub u2_amplitude: f64,
    /// Highest conformal perturbation wavenumber. Default 2.
    pub u_modes: usize,
    /// `u₂(x, y) = u₁(x, −y)`, torus only. Default false.
    pub u2_mirror: bool,
    /// Default 0.
    pub seed: u64,
    /// Multiple of the stable step. Default 1.
    pub dt_safety: f64,
    /// Fixed step, still capped by stability. Default none.
    pub dt: Option<f64>,
    /// Default `t_end / 100`.
    pub sample_every: f64,
    /// Default 0.
    pub snapshots: usize,
    /// Write PPM heatmaps next to the snapshots. Default true.
    pub heatmaps: bool,
    /// Default `out/<name>`.
    pub out: PathBuf,
    /// Default none.
    pub probe: ProbeKind,
    /// Default angle.
    pub probe_weight: WeightMode,
    /// Default `t_end + sample_every`.
    pub probe_t0: f64,
    /// Default 1.
    pub probe_radius: f64,
    /// Bound on `max|cos α|` checked by `verify`. Default none.
    pub expect_max_abs_cos: Option<f64>,
    /// Default completed.
    pub expect: Expectation,
}

const KEYS: [&str; 25] = [
    "name",
    "base",
    "r",
    "grid",
    "t_end",
    "graph",
    "graph_amplitude",
    "graph_modes",
    "graph_lambda",
    "u1_amplitude",
    "u2_amplitude",
    "u_modes",
    "u2_mirror",
    "seed",
    "dt_safety",
    "dt",
    "sample_every",
    "snapshots",
    "heatmaps",
    "out",
    "probe",
    "probe_weight",
    "probe_t0",
    "probe_radius",
    "expect",
];
const EXTRA_KEYS: [&str; 1] = ["expect_max_abs_cos"];
const REQUIRED: [&str; 6] = ["name", "base", "r", "grid", "t_end", "graph"];

struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn take<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Option<T>, what: &str) -> Result<Option<T>, Error> {
        match self.0.remove(key) {
            None => Ok(None),
            Some((line, v)) => f(&v).map(Some).ok_or_else(|| Error::Parse {
                line,
                message: format!("{key}: expected {what}, got `{v}`"),
            }),
        }
    }

    fn real(&mut self, key: &str) -> Result<Option<f64>, Error> {
        self.take(key, |v| v.parse::<f64>().ok().filter(|x| x.is_finite()), "a finite number")
    }

    fn count(&mut self, key: &str) -> Result<Option<usize>, Error> {
        self.take(key, |v| v.parse().ok(), "a non-negative integer")
    }

    fn flag(&mut self, key: &str) -> Result<Option<bool>, Error> {
        self.take(key, |v| v.parse().ok(), "true or false")
    }

    fn line(&self, key: &str) -> usize {
        self.0.get(key).map_or(0, |e| e.0)
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Parse and validate a scenario file.
pub fn parse_config(text: &str) -> Result<RunConfig, Error> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected `key = value`, got `{body}`"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) && !EXTRA_KEYS.contains(&k) {
            return Err(Error::Parse {
                line,
                message: format!("unknown key `{k}`"),
            });
        }
        if v.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("{k}: missing value"),
            });
        }
        if map.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    for k in REQUIRED {
        if !map.contains_key(k) {
            return Err(Error::Parse {
                line: text.lines().count(),
                message: format!("missing required key `{k}`"),
            });
        }
    }
    let mut e = Entries(map);
    let name = e.take("name", |v| Some(v.to_string()), "a name")?.unwrap_or_default();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
        return Err(invalid("name may only contain letters, digits, `-` and `_`"));
    }
    let base = e
        .take(
            "base",
            |v| match v {
                "torus" => Some(Topology::Torus),
                "sphere" => Some(Topology::SphereRotSym),
                _ => None,
            },
            "torus or sphere",
        )?
        .unwrap_or(Topology::Torus);
    let graph_line = e.line("graph");
    let graph = e
        .take(
            "graph",
            |v| match v {
                "diagonal" => Some(GraphKind::Diagonal),
                "anti-diagonal" => Some(GraphKind::AntiDiagonal),
                "horizontal" => Some(GraphKind::Horizontal),
                _ => None,
            },
            "diagonal, anti-diagonal or horizontal",
        )?
        .unwrap_or(GraphKind::Diagonal);
    let r = e.real("r")?.unwrap_or(0.0);
    let grid = e.take("grid", |v| v.parse::<i64>().ok(), "an integer")?.unwrap_or(0);
    let t_end = e.real("t_end")?.unwrap_or(0.0);
    let graph_amplitude = e.real("graph_amplitude")?.unwrap_or(0.0);
    let graph_modes = e.count("graph_modes")?.unwrap_or(2);
    let lambda_line = e.line("graph_lambda");
    let graph_lambda = e.real("graph_lambda")?;
    let u1_amplitude = e.real("u1_amplitude")?.unwrap_or(0.0);
    let u2_amplitude = e.real("u2_amplitude")?.unwrap_or(0.0);
    let u_modes = e.count("u_modes")?.unwrap_or(2);
    let u2_mirror = e.flag("u2_mirror")?.unwrap_or(false);
    let seed = e.take("seed", |v| v.parse().ok(), "a non-negative integer")?.unwrap_or(0);
    let dt_safety = e.real("dt_safety")?.unwrap_or(1.0);
    let dt = e.real("dt")?;
    let sample_every = e.real("sample_every")?.unwrap_or(t_end / 100.0);
    let snapshots = e.count("snapshots")?.unwrap_or(0);
    let heatmaps = e.flag("heatmaps")?.unwrap_or(true);
    let out = e
        .take("out", |v| Some(PathBuf::from(v)), "a path")?
        .unwrap_or_else(|| Path::new("out").join(&name));
    let probe = e
        .take(
            "probe",
            |v| match v {
                "none" => Some(ProbeKind::None),
                "max_curvature" => Some(ProbeKind::MaxCurvature),
                _ => None,
            },
            "none or max_curvature",
        )?
        .unwrap_or(ProbeKind::None);
    let probe_weight = e
        .take(
            "probe_weight",
            |v| match v {
                "angle" => Some(WeightMode::Angle),
                "gauge" => Some(WeightMode::Gauge),
                _ => None,
            },
            "angle or gauge",
        )?
        .unwrap_or(WeightMode::Angle);
    let probe_t0 = e.real("probe_t0")?.unwrap_or(t_end + sample_every);
    let probe_radius = e.real("probe_radius")?.unwrap_or(1.0);
    let expect_max_abs_cos = e.real("expect_max_abs_cos")?;
    let expect = e
        .take(
            "expect",
            |v| match v {
                "completed" => Some(Expectation::Completed),
                "blow-up" => Some(Expectation::BlowUp),
                _ => None,
            },
            "completed or blow-up",
        )?
        .unwrap_or(Expectation::Completed);

    if !(16..=512).contains(&grid) || !(grid as u64).is_power_of_two() {
        return Err(invalid(GRID_MESSAGE));
    }
    if r != 0.0 && r != 2.0 {
        return Err(invalid("r must be 0 or 2"));
    }
    if !(t_end > 0.0) {
        return Err(invalid("t_end must be positive"));
    }
    if !(sample_every > 0.0 && sample_every <= t_end) {
        return Err(invalid("sample_every must lie in (0, t_end]"));
    }
    if !(dt_safety > 0.0 && dt_safety <= 1.5) {
        return Err(invalid("dt_safety must lie in (0, 1.5]"));
    }
    if dt.is_some_and(|d| !(d > 0.0)) {
        return Err(invalid("dt must be positive"));
    }
    if !(0.0..=2.0).contains(&graph_amplitude) {
        return Err(invalid("graph_amplitude must lie in [0, 2]"));
    }
    for a in [u1_amplitude, u2_amplitude] {
        if !(0.0..=1.0).contains(&a) {
            return Err(invalid("conformal amplitudes must lie in [0, 1]"));
        }
    }
    if !(1..=8).contains(&graph_modes) || !(1..=8).contains(&u_modes) {
        return Err(invalid("mode counts must lie in [1, 8]"));
    }
    if base == Topology::SphereRotSym {
        if graph == GraphKind::AntiDiagonal {
            return Err(Error::Parse {
                line: graph_line,
                message: "anti-diagonal graphs need base = torus".to_string(),
            });
        }
        if u2_mirror {
            return Err(invalid("u2_mirror needs base = torus"));
        }
    } else if graph_lambda.is_some() {
        return Err(Error::Parse {
            line: lambda_line,
            message: "graph_lambda needs base = sphere".to_string(),
        });
    }
    let graph_lambda = graph_lambda.unwrap_or(1.0);
    if !(graph_lambda > 0.0) {
        return Err(invalid("graph_lambda must be positive"));
    }
    if probe != ProbeKind::None && !(probe_t0 > t_end && probe_radius > 0.0) {
        return Err(invalid("a probe needs probe_t0 > t_end and probe_radius > 0"));
    }
    if expect_max_abs_cos.is_some_and(|b| !(b >= 0.0)) {
        return Err(invalid("expect_max_abs_cos must be non-negative"));
    }
    Ok(RunConfig {
        name,
        base,
        r,
        grid: grid as usize,
        t_end,
        graph,
        graph_amplitude,
        graph_modes,
        graph_lambda,
        u1_amplitude,
        u2_amplitude,
        u_modes,
        u2_mirror,
        seed,
        dt_safety,
        dt,
        sample_every,
        snapshots,
        heatmaps,
        out,
        probe,
        probe_weight,
        probe_t0,
        probe_radius,
        expect_max_abs_cos,
        expect,
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Random streams, one per perturbed field.
const STREAM_GRAPH: [u64; 2] = [1, 2];
const STREAM_U: [u64; 2] = [3, 4];

/// A random trigonometric polynomial with sup-norm at most one.
struct Bumps {
    terms: Vec<(f64, [f64; 2], f64)>,
    parity: SphereParity,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum SphereParity {
    /// `cos kθ`: smooth even functions across the poles.
    Even,
    /// `sin kθ`: vanishes at both poles.
    Odd,
}

impl Bumps {
    fn new(seed: u64, stream: u64, modes: usize, topology: Topology, parity: SphereParity) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let dirs: &[[f64; 2]] = match topology {
            Topology::Torus => &[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            Topology::SphereRotSym => &[[1.0, 0.0]],
        };
        let mut terms = Vec::new();
        for k in 1..=modes {
            for d in dirs {
                let c: f64 = rng.gen_range(-1.0..1.0);
                let phase: f64 = rng.gen_range(0.0..2.0 * PI);
                let kf = k as f64;
                terms.push((c / (kf * kf), [kf * d[0], kf * d[1]], phase));
            }
        }
        let norm: f64 = terms.iter().map(|t| t.0.abs()).sum();
        for t in terms.iter_mut() {
            t.0 /= norm.max(f64::MIN_POSITIVE);
        }
        Bumps { terms, parity }
    }

    /// Gradient of the torus polynomial.
    fn grad(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        self.terms.iter().fold([0.0; 2], |g, (c, k, ph)| {
            let d = c * (k[0] * x + k[1] * y + ph).cos();
            [g[0] + d * k[0], g[1] + d * k[1]]
        })
    }

    fn eval(&self, topology: Topology, [x, y]: [f64; 2]) -> f64 {
        self.terms
            .iter()
            .map(|(c, k, ph)| match topology {
                Topology::Torus => c * (k[0] * x + k[1] * y + ph).sin(),
                Topology::SphereRotSym => match self.parity {
                    SphereParity::Even => c * (k[0] * x).cos(),
                    SphereParity::Odd => c * (k[0] * x).sin(),
                },
            })
            .sum()
    }
}

fn build_ambient(cfg: &RunConfig, grid: &PeriodicGrid) -> Result<ProductKahlerAmbient, Error> {
    let topo = cfg.base;
    let amp = [cfg.u1_amplitude, cfg.u2_amplitude];
    let bumps: Vec<Bumps> = (0..2)
        .map(|i| Bumps::new(cfg.seed, STREAM_U[i], cfg.u_modes, topo, SphereParity::Even))
        .collect();
    let u: Vec<Field> = (0..2)
        .map(|i| {
            if i == 1 && cfg.u2_mirror {
                grid.field_from_fn(|[x, y]| amp[0] * bumps[0].eval(topo, [x, 2.0 * PI - y]))
            } else {
                grid.field_from_fn(|p| amp[i] * bumps[i].eval(topo, p))
            }
        })
        .collect();
    let mut metrics = Vec::new();
    for ui in u {
        let mut m = ConformalSurfaceMetric::new(grid.clone(), ui, cfg.r)?;
        if topo == Topology::SphereRotSym {
            m = m.rescaled_to_area(4.0 * PI)?;
        }
        metrics.push(m);
    }
    let m2 = metrics.pop().expect("two factors");
    let m1 = metrics.pop().expect("two factors");
    ProductKahlerAmbient::new(m1, m2)
}

/// Substeps of the Hamiltonian flow that bends the anti-diagonal.
const HAMILTONIAN_STEPS: usize = 256;

/// Time-one map of the `ω₁`-Hamiltonian flow of `H`, where
/// `ω₁ = e^{2u₁}dx∧dy`; it preserves `ω₁`, so composing the anti-diagonal
/// with it keeps the graph Lagrangian.
fn hamiltonian_map(h: &Bumps, amp: f64, u1: &Bumps, u_amp: f64, p: [f64; 2]) -> [f64; 2] {
    let field = |q: [f64; 2]| {
        let g = h.grad(q);
        let w = (-2.0 * u_amp * u1.eval(Topology::Torus, q)).exp() * amp;
        [w * g[1], -w * g[0]]
    };
    let dt = 1.0 / HAMILTONIAN_STEPS as f64;
    let mut q = p;
    for _ in 0..HAMILTONIAN_STEPS {
        let at = |q: [f64; 2], k: [f64; 2], s: f64| [q[0] + s * k[0], q[1] + s * k[1]];
        let k1 = field(q);
        let k2 = field(at(q, k1, 0.5 * dt));
        let k3 = field(at(q, k2, 0.5 * dt));
        let k4 = field(at(q, k3, dt));
        q = [
            q[0] + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            q[1] + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
    }
    q
}

fn build_graph(cfg: &RunConfig, grid: &PeriodicGrid) -> Result<GraphImmersion, Error> {
    let topo = cfg.base;
    let a = cfg.graph_amplitude;
    let twisted = topo == Topology::SphereRotSym && cfg.graph == GraphKind::Diagonal;
    let p0 = if twisted { SphereParity::Odd } else { SphereParity::Even };
    let b = [
        Bumps::new(cfg.seed, STREAM_GRAPH[0], cfg.graph_modes, topo, p0),
        Bumps::new(cfg.seed, STREAM_GRAPH[1], cfg.graph_modes, topo, SphereParity::Even),
    ];
    let pert = |p: [f64; 2]| [a * b[0].eval(topo, p), a * b[1].eval(topo, p)];
    let g = match (topo, cfg.graph) {
        (Topology::Torus, GraphKind::Diagonal) => GraphImmersion::from_fn(
            grid.clone(),
            |p| {
                let d = pert(p);
                [p[0] + d[0], p[1] + d[1]]
            },
            [[1, 0], [0, 1]],
        )?,
        (Topology::Torus, GraphKind::AntiDiagonal) => {
            let u1 = Bumps::new(cfg.seed, STREAM_U[0], cfg.u_modes, topo, SphereParity::Even);
            let u_amp = if cfg.u2_mirror { cfg.u1_amplitude } else { 0.0 };
            GraphImmersion::from_fn(
                grid.clone(),
                |p| {
                    let q = if a > 0.0 { hamiltonian_map(&b[0], a, &u1, u_amp, p) } else { p };
                    [q[0], -q[1]]
                },
                [[1, 0], [0, -1]],
            )?
        }
        (Topology::Torus, GraphKind::Horizontal) => GraphImmersion::from_fn(grid.clone(), pert, [[0; 2]; 2])?,
        (Topology::SphereRotSym, GraphKind::Diagonal) => {
            let lam = cfg.graph_lambda;
            GraphImmersion::from_fn(
                grid.clone(),
                |p| {
                    let d = pert(p);
                    [2.0 * (lam * (0.5 * p[0]).tan()).atan() + d[0], d[1]]
                },
                SPHERE_DEGREE_ONE,
            )?
        }
        (Topology::SphereRotSym, _) => GraphImmersion::from_fn(
            grid.clone(),
            |p| {
                let d = pert(p);
                [0.5 * PI + d[0], d[1]]
            },
            [[0; 2]; 2],
        )?,
    };
    if topo == Topology::SphereRotSym && g.f()[0].iter().any(|t| !(*t > 0.0 && *t < PI)) {
        return Err(invalid("graph leaves the polar chart; lower graph_amplitude"));
    }
    Ok(g)
}

/// Initial state of `cfg` on an `n`-point grid.
pub fn initial_state(cfg: &RunConfig, n: usize) -> Result<FlowState, Error> {
    let grid = PeriodicGrid::with_topology(cfg.base, n)?;
    let amb = build_ambient(cfg, &grid)?;
    let g = build_graph(cfg, &grid)?;
    let s = FlowState::new(0.0, amb, g)?;
    s.geometry().map_err(|e| invalid(format!("initial surface is not admissible: {e}")))?;
    Ok(s)
}

pub fn build_scenario(cfg: &RunConfig) -> Result<Scenario, Error> {
    let s = initial_state(cfg, cfg.grid)?;
    let policy = match cfg.dt {
        Some(d) => DtPolicy::Fixed(d),
        None => DtPolicy::Stable { safety: cfg.dt_safety },
    };
    Ok(Scenario::new(cfg.name.clone(), s, cfg.t_end, policy, cfg.sample_every)?.with_snapshots(cfg.snapshots))
}

/// `min v` of the initial surface.
pub fn initial_min_v(sc: &Scenario) -> Result<f64, Error> {
    Ok(min_v(&sc.initial.geometry()?))
}

/// Everything recorded while integrating a config.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub scenario_admissible: bool,
    pub trajectory: FlowTrajectory,
    pub probe: Option<MonotonicityProbe>,
    /// Inequality margins at every sample.
    pub inequalities: Vec<InequalityReport>,
    /// `max|cos α|` at every sample.
    pub max_abs_cos: Vec<f64>,
}

fn phi_column(mode: WeightMode) -> String {
    match mode {
        WeightMode::Angle => "phi_angle".to_string(),
        WeightMode::Gauge => "phi_gauge".to_string(),
    }
}

/// Integrate a config without writing anything.
pub fn execute(cfg: &RunConfig) -> Result<RunRecord, Error> {
    let sc = build_scenario(cfg)?;
    let probe = match cfg.probe {
        ProbeKind::None => None,
        ProbeKind::MaxCurvature => Some(
            MonotonicityProbe::at_max_curvature(&sc.initial, cfg.probe_t0, cfg.probe_radius, cfg.probe_weight)
                .map_err(|e| invalid(e.to_string()))?,
        ),
    };
    let cols: Vec<String> = probe.iter().map(|p| phi_column(p.mode)).collect();
    let mut ineq = Vec::new();
    let mut cosmax = Vec::new();
    let traj = run_observed(&sc, &cols, |s, geo| {
        ineq.push(inequality_suite_on(s.grid(), geo));
        cosmax.push(max_abs(&geo.cos_alpha()));
        probe
            .iter()
            .map(|p| p.phi(s, geo).unwrap_or(f64::NAN))
            .collect()
    });
    Ok(RunRecord {
        scenario_admissible: sc.admissible,
        trajectory: traj,
        probe,
        inequalities: ineq,
        max_abs_cos: cosmax,
    })
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Header and rows of `series.csv`.
pub fn series_csv(traj: &FlowTrajectory) -> String {
    let mut s = String::new();
    let header: Vec<&str> = SERIES_COLUMNS
        .iter()
        .copied()
        .chain(traj.extra_columns.iter().map(|c| c.as_str()))
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for row in &traj.rows {
        let vals: Vec<String> = row.columns().iter().chain(&row.extra).map(|v| num(*v)).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

pub fn snapshot_file_name(t: f64) -> String {
    format!("snap_{t:.6}.dat")
}

/// ASCII snapshot: a header, then each field as `ny` rows of `nx` values.
pub fn format_snapshot(snap: &Snapshot) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# krmcf snapshot");
    let _ = writeln!(s, "t {}", num(snap.t));
    let _ = writeln!(s, "nx {}", snap.nx);
    let _ = writeln!(s, "ny {}", snap.ny);
    let _ = writeln!(s, "fields {}", snap.names.join(" "));
    for (name, f) in snap.names.iter().zip(&snap.fields) {
        let _ = writeln!(s, "# {name}");
        for row in f.chunks(snap.nx) {
            let vals: Vec<String> = row.iter().map(|v| num(*v)).collect();
            s.push_str(&vals.join(" "));
            s.push('\n');
        }
    }
    s
}

pub fn parse_snapshot(text: &str) -> Result<Snapshot, Error> {
    let bad = |line: usize, m: &str| Error::Parse {
        line,
        message: m.to_string(),
    };
    let mut header = BTreeMap::new();
    let mut values = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let first = line.split_whitespace().next().unwrap_or("");
        if ["t", "nx", "ny", "fields"].contains(&first) {
            header.insert(first.to_string(), (i + 1, line[first.len()..].trim().to_string()));
            continue;
        }
        for tok in line.split_whitespace() {
            values.push(tok.parse::<f64>().map_err(|_| bad(i + 1, "expected a number"))?);
        }
    }
    let get = |k: &str| header.get(k).cloned().ok_or_else(|| bad(0, &format!("missing header `{k}`")));
    let (lt, t) = get("t")?;
    let t = t.parse().map_err(|_| bad(lt, "bad time"))?;
    let (lx, nx) = get("nx")?;
    let nx: usize = nx.parse().map_err(|_| bad(lx, "bad nx"))?;
    let (ly, ny) = get("ny")?;
    let ny: usize = ny.parse().map_err(|_| bad(ly, "bad ny"))?;
    let names: Vec<String> = get("fields")?.1.split_whitespace().map(|s| s.to_string()).collect();
    let len = nx * ny;
    if len == 0 || values.len() != len * names.len() {
        return Err(bad(0, "value count does not match the header"));
    }
    let fields = values.chunks(len).map(|c| c.to_vec()).collect();
    Ok(Snapshot {
        t,
        nx,
        ny,
        names,
        fields,
    })
}

/// Fixed 256-entry heat colormap: black, red, yellow, white.
pub fn colormap(i: u8) -> [u8; 3] {
    let i = 3 * i as i32;
    let c = |v: i32| v.clamp(0, 255) as u8;
    [c(i), c(i - 255), c(i - 510)]
}

/// Binary PPM (P6) of a field, scaled linearly between its extremes.
/// Rotationally symmetric fields are drawn as bands of `nx/4` rows.
pub fn heatmap_ppm(field: &[f64], nx: usize, ny: usize) -> Vec<u8> {
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = hi - lo;
    let rows = if ny == 1 { (nx / 4).max(1) } else { ny };
    let mut out = format!("P6\n{nx} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        let j = if ny == 1 { 0 } else { ny - 1 - r };
        for i in 0..nx {
            let v = field[j * nx + i];
            let idx = if span > 0.0 && span.is_finite() {
                (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.extend_from_slice(&colormap(idx));
        }
    }
    out
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Write `series.csv`, the snapshots and their heatmaps into `dir`.
pub fn write_outputs(traj: &FlowTrajectory, dir: &Path, heatmaps: bool) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    write(&dir.join("series.csv"), series_csv(traj).as_bytes())?;
    for snap in &traj.snapshots {
        let name = snapshot_file_name(snap.t);
        write(&dir.join(&name), format_snapshot(snap).as_bytes())?;
        if heatmaps {
            let stem = name.trim_end_matches(".dat");
            for (fname, f) in snap.names.iter().zip(&snap.fields) {
                write(
                    &dir.join(format!("{stem}_{fname}.ppm")),
                    &heatmap_ppm(f, snap.nx, snap.ny),
                )?;
            }
        }
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "name {}", traj.name);
    let _ = writeln!(summary, "termination {}", traj.termination.label());
    match &traj.termination {
        Termination::BlowUp { t, reason } => {
            let _ = writeln!(summary, "t {}\nreason {reason}", num(*t));
        }
        Termination::GraphDegenerate { t, min_v } => {
            let _ = writeln!(summary, "t {}\nmin_v {}", num(*t), num(*min_v));
        }
        Termination::Failed(e) => {
            let _ = writeln!(summary, "reason {e}");
        }
        Termination::Completed => {}
    }
    let _ = writeln!(summary, "steps {}", traj.steps);
    write(&dir.join("summary.txt"), summary.as_bytes())
}

/// Process exit status of a finished run.
pub fn exit_code_of(term: &Termination) -> i32 {
    match term {
        Termination::Completed => 0,
        _ => 3,
    }
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunRecord, Error> {
    let rec = execute(cfg)?;
    write_outputs(&rec.trajectory, &cfg.out, cfg.heatmaps)?;
    Ok(rec)
}

/// One single-step residual study of a state at grid `n`.
fn residual_reports(cfg: &RunConfig, n: usize, dt: f64) -> Result<Vec<ResidualReport>, Error> {
    let s0 = initial_state(cfg, n)?;
    let s1 = coupled_step(&s0, dt)?;
    let pair = SamplePair::new(&s0, &s1)?;
    let mut out = vec![
        residual_cos_alpha(&pair),
        residual_area_element(&pair),
        residual_metric_evolution(&pair)?,
    ];
    out.extend(residual_u_gauges(&pair));
    out.push(residual_a2(&pair));
    Ok(out)
}

/// Residuals of every identity at each grid of `ns`, with `dt ∝ h²`.
pub fn residual_study(cfg: &RunConfig, ns: &[usize]) -> Result<Vec<Vec<ResidualReport>>, Error> {
    let coarse = initial_state(cfg, ns[0])?;
    let h0 = coarse.grid().h();
    let c = 0.25 * coarse.stable_dt()? / (h0 * h0);
    let mut levels: Vec<Vec<ResidualReport>> = Vec::new();
    for &n in ns {
        let h = PeriodicGrid::with_topology(cfg.base, n)?.h();
        let mut reps = residual_reports(cfg, n, c * h * h)?;
        if let Some(prev) = levels.last() {
            reps = reps
                .into_iter()
                .zip(prev)
                .map(|(f, c)| f.refined_from(c))
                .collect();
        }
        levels.push(reps);
    }
    Ok(levels)
}

/// Residuals below this are round-off and carry no order.
pub const NOISE_FLOOR: f64 = 1e-10;

pub fn required_order(name: &str) -> f64 {
    if name == "A2" {
        1.0
    } else {
        1.8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub bound: String,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub record: RunRecord,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passes(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passes() {
            0
        } else {
            4
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {} {} {}",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                num(c.value),
                c.bound
            );
        }
        s
    }
}

/// Run the scenario, then check inequalities, expectations and residual
/// orders.
pub fn cmd_verify(cfg: &RunConfig) -> Result<VerifyReport, Error> {
    let record = cmd_run(cfg)?;
    let mut checks = Vec::new();
    let mut push = |name: &str, value: f64, bound: String, pass: bool| {
        checks.push(Check {
            name: name.to_string(),
            value,
            bound,
            pass,
        })
    };
    let term = &record.trajectory.termination;
    let ok_term = match cfg.expect {
        Expectation::Completed => matches!(term, Termination::Completed),
        Expectation::BlowUp => matches!(term, Termination::BlowUp { .. }),
    };
    push(
        &format!("termination:{}", term.label()),
        record.trajectory.final_state.t,
        format!("expect {:?}", cfg.expect).to_lowercase(),
        ok_term,
    );
    let fold = |f: &dyn Fn(&InequalityReport) -> f64, max: bool| {
        record.inequalities.iter().map(f).fold(
            if max { f64::NEG_INFINITY } else { f64::INFINITY },
            |a, b| if max { a.max(b) } else { a.min(b) },
        )
    };
    let nj = fold(&|r| r.nabla_j_margin, false);
    push("nabla_j_margin", nj, ">= -1e-12".into(), nj >= -1e-12);
    let ag = fold(&|r| r.angle_gradient_violation - r.angle_gradient_slack, true);
    push("angle_gradient_excess", ag, "<= 0 (slack 1e-2 h^2)".into(), ag <= 0.0);
    let fp = fold(&|r| r.form_pair_excess, true);
    push("form_pair_excess", fp, "<= 1e-12".into(), fp <= 1e-12);
    let gl = fold(&|r| r.gauge_lower_margin, false);
    push("gauge_lower_margin", gl, ">= -1e-12".into(), gl >= -1e-12);
    let mc = record.max_abs_cos.iter().cloned().fold(0.0, f64::max);
    if let Some(b) = cfg.expect_max_abs_cos {
        push("max_abs_cos_alpha", mc, format!("<= {b:e}"), mc <= b);
    }
    let ns = if cfg.grid / 2 >= 16 {
        [cfg.grid / 2, cfg.grid]
    } else {
        [cfg.grid, 2 * cfg.grid]
    };
    let levels = residual_study(cfg, &ns)?;
    for r in &levels[1] {
        let order = r.order.unwrap_or(f64::NAN);
        let need = required_order(&r.name);
        if r.linf < NOISE_FLOOR {
            push(&format!("residual:{}", r.name), r.linf, format!("< {NOISE_FLOOR:e}"), true);
        } else {
            push(&format!("order:{}", r.name), order, format!(">= {need}"), order >= need);
        }
    }
    let rep = VerifyReport { record, checks };
    write(&cfg.out.join("verify.txt"), rep.render().as_bytes())?;
    Ok(rep)
}

/// Observed-order table over `levels` grids ending at the config grid.
pub fn cmd_convergence(cfg: &RunConfig, levels: usize) -> Result<Vec<ResidualReport>, Error> {
    if levels < 2 {
        return Err(invalid("convergence needs at least two levels"));
    }
    let coarsest = cfg.grid >> (levels - 1);
    if levels > 6 || coarsest < 16 {
        return Err(invalid(format!(
            "{levels} levels below grid {} reach a grid coarser than 16",
            cfg.grid
        )));
    }
    let ns: Vec<usize> = (0..levels).map(|k| coarsest << k).collect();
    let table: Vec<ResidualReport> = residual_study(cfg, &ns)?.into_iter().flatten().collect();
    let mut s = String::from("residual,n,dt,linf,l2,order\n");
    for r in &table {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.name,
            r.n,
            num(r.dt),
            num(r.linf),
            num(r.l2),
            r.order.map_or(String::new(), num)
        );
    }
    fs::create_dir_all(&cfg.out).map_err(|e| Error::Io(format!("{}: {e}", cfg.out.display())))?;
    write(&cfg.out.join("convergence.csv"), s.as_bytes())?;
    Ok(table)
}

/// `min v` must exceed `√2/2` for the long-time graph result to apply.
pub fn admissible_min_v(v: f64) -> bool {
    v > FRAC_1_SQRT_2
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
# smallest valid file
name = tiny
base = torus
r = 0
grid = 16
t_end = 0.01
graph = diagonal
";

    fn scenario_text(name: &str) -> String {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.cfg"));
        fs::read_to_string(p).unwrap()
    }

    #[test]
    fn minimal_file_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.name, "tiny");
        assert_eq!(c.base, Topology::Torus);
        assert_eq!(c.grid, 16);
        assert_eq!(c.graph_amplitude, 0.0);
        assert_eq!(c.graph_modes, 2);
        assert_eq!(c.dt_safety, 1.0);
        assert_eq!(c.dt, None);
        assert!((c.sample_every - 1e-4).abs() < 1e-18);
        assert_eq!(c.snapshots, 0);
        assert!(c.heatmaps);
        assert_eq!(c.out, Path::new("out").join("tiny"));
        assert_eq!(c.probe, ProbeKind::None);
        assert_eq!(c.expect, Expectation::Completed);
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn bad_grid_is_a_validation_error() {
        for g in ["63", "8", "1024", "48"] {
            let text = MINIMAL.replace("grid = 16", &format!("grid = {g}"));
            match parse_config(&text) {
                Err(Error::Validation(m)) => assert_eq!(m, GRID_MESSAGE),
                other => panic!("grid {g}: {other:?}"),
            }
        }
    }

    #[test]
    fn parse_errors_cite_lines() {
        let e = parse_config(&format!("{MINIMAL}colour = red\n")).unwrap_err();
        assert_eq!(
            e,
            Error::Parse {
                line: 8,
                message: "unknown key `colour`".into()
            }
        );
        let e = parse_config(&MINIMAL.replace("t_end = 0.01", "t_end = soon")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 6, .. }), "{e:?}");
        let e = parse_config(&format!("{MINIMAL}no equals sign\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 8, .. }));
        let e = parse_config(&format!("{MINIMAL}grid = 32\n")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 8, .. }));
        let e = parse_config(&MINIMAL.replace("graph = diagonal\n", "")).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
    }

    #[test]
    fn range_checks() {
        for (from, to) in [
            ("r = 0", "r = 1"),
            ("t_end = 0.01", "t_end = 0"),
            ("t_end = 0.01", "t_end = -1"),
            ("base = torus", "base = sphere\ngraph_amplitude = 0\nu2_mirror = true"),
        ] {
            let e = parse_config(&MINIMAL.replace(from, to)).unwrap_err();
            assert!(matches!(e, Error::Validation(_)), "{to}: {e:?}");
        }
        assert!(parse_config(&format!("{MINIMAL}graph_lambda = 2\n")).is_err());
    }

    #[test]
    fn perturbations_are_seeded() {
        let text = format!("{MINIMAL}graph_amplitude = 0.2\nu1_amplitude = 0.1\n");
        let a = initial_state(&parse_config(&text).unwrap(), 16).unwrap();
        let b = initial_state(&parse_config(&text).unwrap(), 16).unwrap();
        assert_eq!(a.surface.f(), b.surface.f());
        let c = initial_state(&parse_config(&format!("{text}seed = 7\n")).unwrap(), 16).unwrap();
        assert_ne!(a.surface.f(), c.surface.f());
        // amplitudes bound the perturbations
        let g = a.grid();
        let dev = (0..g.len())
            .map(|k| (a.surface.f()[0][k] - g.coord_of(k)[0]).abs())
            .fold(0.0, f64::max);
        assert!(dev > 0.0 && dev <= 0.2 + 1e-12);
        assert!(max_abs(a.ambient.metric(0).u()) <= 0.1 + 1e-12);
    }

    #[test]
    fn mirrored_factors_make_the_anti_diagonal_lagrangian() {
        let text = MINIMAL.replace("graph = diagonal", "graph = anti-diagonal")
            + "u1_amplitude = 0.3\nu2_mirror = true\n";
        let s = initial_state(&parse_config(&text).unwrap(), 32).unwrap();
        assert!(max_abs(&s.geometry().unwrap().cos_alpha()) < 1e-12);
        // a Hamiltonian bend keeps cos α at discretization level, O(h²)
        let bent = |n: usize| {
            let c = parse_config(&format!("{text}graph_amplitude = 0.3\n")).unwrap();
            let s = initial_state(&c, n).unwrap();
            let geo = s.geometry().unwrap();
            (max_abs(&geo.cos_alpha()), max_abs(&geo.a2()))
        };
        let (c32, a32) = bent(32);
        let (c64, _) = bent(64);
        assert!(a32 > 1e-2, "{a32}");
        assert!(c32 < 1e-2 && (c32 / c64).log2() > 1.8, "{c32} {c64}");
    }

    #[test]
    fn sphere_graphs_keep_their_parity() {
        let text = "name = s\nbase = sphere\nr = 2\ngrid = 32\nt_end = 1\ngraph = diagonal\n\
                    graph_amplitude = 0.1\ngraph_lambda = 1.5\nu1_amplitude = 0.1\n";
        let s = initial_state(&parse_config(text).unwrap(), 32).unwrap();
        assert!(s.surface.is_twisted());
        assert!((s.ambient.metric(0).total_area() - 4.0 * PI).abs() < 1e-10);
        assert!(parse_config(&text.replace("diagonal", "anti-diagonal")).is_err());
    }

    #[test]
    fn shipped_graph_torus_is_admissible() {
        let cfg = parse_config(&scenario_text("perturbed-graph-torus")).unwrap();
        let sc = build_scenario(&cfg).unwrap();
        let v = initial_min_v(&sc).unwrap();
        assert!(v >= 0.8, "min v₀ = {v}");
        assert!(sc.admissible && admissible_min_v(v));
    }

    #[test]
    fn every_shipped_scenario_parses() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
        let mut n = 0;
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            let cfg = load_config(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            initial_state(&cfg, 16).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            n += 1;
        }
        assert!(n >= 9);
    }

    #[test]
    fn stationary_run_writes_one_line_per_sample() {
        let dir = tempfile::tempdir().unwrap();
        let text = MINIMAL.replace("t_end = 0.01", "t_end = 0.002") + "sample_every = 0.001\n";
        let mut cfg = parse_config(&text).unwrap();
        cfg.out = dir.path().to_path_buf();
        let rec = cmd_run(&cfg).unwrap();
        assert!(rec.trajectory.completed());
        let csv = fs::read_to_string(dir.path().join("series.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], SERIES_COLUMNS.join(","));
        assert_eq!(lines[1].split(',').nth(6), lines[3].split(',').nth(6));
    }

    #[test]
    fn outputs_are_deterministic_and_snapshots_round_trip() {
        let text = format!("{MINIMAL}graph_amplitude = 0.3\nsnapshots = 2\nsample_every = 0.005\n");
        let mut outs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().unwrap();
            let mut cfg = parse_config(&text).unwrap();
            cfg.out = dir.path().to_path_buf();
            let rec = cmd_run(&cfg).unwrap();
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir.path())
                .unwrap()
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
                })
                .collect();
            files.sort();
            for snap in &rec.trajectory.snapshots {
                let back = parse_snapshot(
                    &fs::read_to_string(dir.path().join(snapshot_file_name(snap.t))).unwrap(),
                )
                .unwrap();
                assert_eq!(&back, snap);
            }
            outs.push(files);
        }
        assert_eq!(outs[0], outs[1]);
        assert!(outs[0].iter().any(|(n, _)| n.ends_with("_cos_alpha.ppm")));
    }

    #[test]
    fn heatmap_layout() {
        let ppm = heatmap_ppm(&[0.0, 1.0, 2.0, 3.0], 2, 2);
        let header = b"P6\n2 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 12);
        // top-left pixel is the last row, first column: value 2
        assert_eq!(&ppm[header.len()..header.len() + 3], &colormap(170));
        assert_eq!(colormap(0), [0, 0, 0]);
        assert_eq!(colormap(255), [255, 255, 255]);
        assert_eq!(colormap(85), [255, 0, 0]);
    }

    #[test]
    fn convergence_rejects_too_many_levels() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert!(matches!(cmd_convergence(&cfg, 2), Err(Error::Validation(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

        #[test]
        fn initial_data_is_a_function_of_the_config(
            seed in 0u64..1_000_000,
            amp in 0.0f64..0.4,
            ua in 0.0f64..0.3,
            sphere in proptest::bool::ANY,
        ) {
            let base = if sphere { "base = sphere\nr = 2" } else { "base = torus\nr = 0" };
            let text = format!(
                "name = p\n{base}\ngrid = 16\nt_end = 1\ngraph = horizontal\n\
                 graph_amplitude = {amp}\nu1_amplitude = {ua}\nu2_amplitude = {ua}\nseed = {seed}\n"
            );
            let cfg = parse_config(&text).unwrap();
            let a = initial_state(&cfg, 16).unwrap();
            let b = initial_state(&cfg, 16).unwrap();
            proptest::prop_assert_eq!(a.surface.f(), b.surface.f());
            proptest::prop_assert_eq!(a.ambient.metric(0).u(), b.ambient.metric(0).u());
            let off = if sphere { 0.5 * PI } else { 0.0 };
            let dev = a.surface.f()[0].iter().map(|f| (f - off).abs()).fold(0.0, f64::max);
            proptest::prop_assert!(dev <= amp + 1e-12);
            let admissible = build_scenario(&cfg).unwrap().admissible;
            proptest::prop_assert_eq!(admissible, admissible_min_v(min_v(&a.geometry().unwrap())));
        }
    }
}
