//! Scenario assembly and trajectory generation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::lattice::{build_lattice, build_tube, Spring, SpringSystem};
use super::primitive::Primitive;
use super::solver::{free_residual, gradient, point_energy, solve_quasistatic, SolverConfig};
use crate::error::{Error, Result, ResultExt};
use crate::rng::{mix, stream, Rng, Stream};
use crate::scene::{LoadMode, LoadObject, Quantity, Role, SceneSample, SolidObject, Target, GEOMETRY};
use crate::tensor::Tensor;

pub const STRESS: &str = "stress";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Two bonded lattices squeezed between two spherical dies.
    BilateralPress,
    /// A hollow tube, fixed at its base, squeezed by two box jaws.
    CavityGrip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    /// Number of load steps `T`.
    pub steps: usize,
    /// Press: points per lattice along x, y, z. Grip: radial layers, points
    /// per ring, rings.
    pub dims: [usize; 3],
    /// Lattice spacing, or ring spacing of the tube.
    pub spacing: f64,
    /// Base spring stiffness of each deformable solid (the grip uses the first).
    pub stiffness: [f64; 2],
    /// Per-point stiffness multipliers are drawn from `1 ± jitter`.
    pub stiffness_jitter: f64,
    /// Penalty stiffness; defaults to 1000 times the smallest base stiffness.
    pub contact_stiffness: Option<f64>,
    /// Range of the total rigid travel into the solids.
    pub travel: [f64; 2],
    /// Lateral placement jitter of the rigids.
    pub placement_jitter: f64,
    /// Die radius (press) or jaw half width along x (grip).
    pub rigid_size: f64,
    /// Tube inner and outer radius (grip only).
    pub radii: [f64; 2],
    /// Surface points sampled on spherical rigids.
    pub rigid_points: usize,
    /// Translation applied to the whole scenario.
    pub origin: [f64; 3],
    pub solver_tol: f64,
    pub max_iters: usize,
}

impl ScenarioConfig {
    pub fn bilateral_press() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::BilateralPress,
            steps: 8,
            dims: [5, 3, 3],
            spacing: 0.25,
            stiffness: [1.0, 2.0],
            stiffness_jitter: 0.3,
            contact_stiffness: None,
            travel: [0.08, 0.2],
            placement_jitter: 0.2,
            rigid_size: 0.5,
            radii: [0.0, 0.0],
            rigid_points: 24,
            origin: [0.0; 3],
            solver_tol: 1e-10,
            max_iters: 500,
        }
    }

    pub fn cavity_grip() -> Self {
        ScenarioConfig {
            kind: ScenarioKind::CavityGrip,
            steps: 20,
            dims: [2, 8, 4],
            spacing: 0.2,
            stiffness: [1.0, 1.0],
            stiffness_jitter: 0.3,
            contact_stiffness: None,
            travel: [0.06, 0.12],
            placement_jitter: 0.05,
            rigid_size: 0.15,
            radii: [0.3, 0.45],
            rigid_points: 24,
            origin: [0.0; 3],
            solver_tol: 1e-10,
            max_iters: 500,
        }
    }

    pub fn default_for(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::BilateralPress => Self::bilateral_press(),
            ScenarioKind::CavityGrip => Self::cavity_grip(),
        }
    }

    pub fn contact_stiffness(&self) -> f64 {
        self.contact_stiffness
            .unwrap_or_else(|| 1000.0 * self.stiffness[0].min(self.stiffness[1]))
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver_tol,
            max_iters: self.max_iters,
            contact_stiffness: self.contact_stiffness(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("scenario key `{key}`: {why}")));
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if !(self.spacing > 0.0) {
            return bad("spacing", "must be positive");
        }
        if self.stiffness.iter().any(|&k| !(k > 0.0)) {
            return bad("stiffness", "must be positive");
        }
        if !(0.0..1.0).contains(&self.stiffness_jitter) {
            return bad("stiffness_jitter", "must lie in [0, 1)");
        }
        if self.contact_stiffness.is_some_and(|k| !(k > 0.0)) {
            return bad("contact_stiffness", "must be positive");
        }
        if !(self.travel[0] >= 0.0 && self.travel[1] >= self.travel[0]) {
            return bad("travel", "must be a nondecreasing nonnegative range");
        }
        if !(self.placement_jitter >= 0.0) {
            return bad("placement_jitter", "must be nonnegative");
        }
        if !(self.rigid_size > 0.0) {
            return bad("rigid_size", "must be positive");
        }
        if self.rigid_points < 4 {
            return bad("rigid_points", "must be at least 4");
        }
        if !(self.solver_tol > 0.0) || self.max_iters == 0 {
            return bad("solver_tol", "tolerance and iteration budget must be positive");
        }
        match self.kind {
            ScenarioKind::BilateralPress if self.dims.iter().any(|&d| d < 2) => bad("dims", "lattice dims must be at least 2"),
            ScenarioKind::CavityGrip if self.dims[0] < 2 || self.dims[1] < 4 || self.dims[2] < 2 => {
                bad("dims", "tube needs ≥2 layers, ≥4 points per ring and ≥2 rings")
            }
            ScenarioKind::CavityGrip if !(self.radii[0] > 0.0 && self.radii[1] > self.radii[0]) => bad("radii", "need 0 < inner < outer"),
            _ => Ok(()),
        }
    }
}

/// A rigid body translated along a per-step path.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidBody {
    pub name: String,
    pub shape: Primitive,
    pub surface: Vec<[f64; 3]>,
    /// Translation at steps `0..=T`.
    pub path: Vec<[f64; 3]>,
}

impl RigidBody {
    pub fn shape_at(&self, t: usize) -> Primitive {
        self.shape.translated(self.path[t])
    }

    pub fn surface_at(&self, t: usize) -> Vec<[f64; 3]> {
        let d = self.path[t];
        self.surface.iter().map(|p| [p[0] + d[0], p[1] + d[1], p[2] + d[2]]).collect()
    }
}

/// Everything the oracle needs for one scenario instance.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub system: SpringSystem,
    /// Base stiffness per point, times the point's multiplier.
    pub stiffness: Vec<f64>,
    pub pinned: Vec<bool>,
    /// Deformable solids as `(name, first point, count)` in the system.
    pub solids: Vec<(String, usize, usize)>,
    pub rigids: Vec<RigidBody>,
    /// Pairs of indices into `solids ++ rigids`.
    pub contact_pairs: Vec<(usize, usize)>,
    pub contact_stiffness: f64,
}

/// Data to re-check that a target state is an equilibrium.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCertificate {
    /// Deformable solids whose target geometry, concatenated in this order,
    /// forms the certified state.
    pub solids: Vec<String>,
    pub springs: Vec<Spring>,
    pub pinned: Vec<usize>,
    /// Rigid primitives at the target pose.
    pub primitives: Vec<Primitive>,
    pub contact_stiffness: f64,
    /// `‖∇E‖∞` over free points reported by the solver.
    pub residual: f64,
}

fn draw(rng: &mut Rng, range: [f64; 2]) -> f64 {
    if range[1] > range[0] {
        rng.random_range(range[0]..range[1])
    } else {
        range[0]
    }
}

fn jitter(rng: &mut Rng, amp: f64) -> f64 {
    draw(rng, [-amp, amp])
}

fn linear_path(steps: usize, total: [f64; 3]) -> Vec<[f64; 3]> {
    (0..=steps)
        .map(|t| {
            let s = t as f64 / steps as f64;
            [total[0] * s, total[1] * s, total[2] * s]
        })
        .collect()
}

/// Builds the scenario instance for `seed`.
pub fn build_world(cfg: &ScenarioConfig, seed: u64) -> Result<World> {
    cfg.validate()?;
    let mut rng = stream(seed, Stream::Scenario);
    match cfg.kind {
        ScenarioKind::BilateralPress => press_world(cfg, seed, &mut rng),
        ScenarioKind::CavityGrip => grip_world(cfg, seed, &mut rng),
    }
}

const GAP: f64 = 0.02;

fn press_world(cfg: &ScenarioConfig, seed: u64, rng: &mut Rng) -> Result<World> {
    let [nx, ny, nz] = cfg.dims;
    let s = cfg.spacing;
    let o = cfg.origin;
    let upper = build_lattice(cfg.dims, s, [o[0], o[1], o[2] + nz as f64 * s], cfg.stiffness[0], cfg.stiffness_jitter, mix(seed, 1))?;
    let lower = build_lattice(cfg.dims, s, o, cfg.stiffness[1], cfg.stiffness_jitter, mix(seed, 2))?;
    let mut system = upper.clone();
    let off = system.append(&lower);
    let n = upper.len();
    let bond = 0.5 * (cfg.stiffness[0] + cfg.stiffness[1]);
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    for j in 0..ny {
        for i in 0..nx {
            for dj in -1isize..=1 {
                for di in -1isize..=1 {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if (0..nx as isize).contains(&ii) && (0..ny as isize).contains(&jj) {
                        system.connect(off + idx(i, j, nz - 1), idx(ii as usize, jj as usize, 0), bond);
                    }
                }
            }
        }
    }
    let stiffness = (0..2 * n)
        .map(|p| system.material[p] * if p < n { cfg.stiffness[0] } else { cfg.stiffness[1] })
        .collect();
    let pinned = (0..2 * n)
        .map(|p| {
            let i = p % n % nx;
            i == 0 || i == nx - 1
        })
        .collect();

    let r = cfg.rigid_size;
    let cx = o[0] + (nx - 1) as f64 * s / 2.0;
    let cy = o[1] + (ny - 1) as f64 * s / 2.0;
    let top = o[2] + (2 * nz - 1) as f64 * s;
    let mut rigids = Vec::new();
    for (name, sign, z_face) in [("top_die", 1.0, top), ("bottom_die", -1.0, o[2])] {
        let center = [cx + jitter(rng, cfg.placement_jitter), cy + jitter(rng, cfg.placement_jitter * 0.25), z_face + sign * (r + GAP)];
        let travel = GAP + draw(rng, cfg.travel);
        let shape = Primitive::Sphere { center, radius: r };
        rigids.push(RigidBody {
            name: name.into(),
            surface: shape.surface_points(cfg.rigid_points),
            shape,
            path: linear_path(cfg.steps, [0.0, 0.0, -sign * travel]),
        });
    }
    Ok(World {
        system,
        stiffness,
        pinned,
        solids: vec![("upper".into(), 0, n), ("lower".into(), off, n)],
        rigids,
        // Solids: upper 0, lower 1, top_die 2, bottom_die 3.
        contact_pairs: vec![(2, 0), (3, 1), (0, 1), (2, 1), (3, 0)],
        contact_stiffness: cfg.contact_stiffness(),
    })
}

fn grip_world(cfg: &ScenarioConfig, seed: u64, rng: &mut Rng) -> Result<World> {
    let [layers, around, rings] = cfg.dims;
    let s = cfg.spacing;
    let o = cfg.origin;
    let [r0, r1] = cfg.radii;
    let system = build_tube(layers, around, rings, r0, r1, s, o, cfg.stiffness[0], cfg.stiffness_jitter, mix(seed, 1))?;
    let n = system.len();
    let stiffness = system.material.iter().map(|m| m * cfg.stiffness[0]).collect();
    let pinned = (0..n).map(|p| p < layers * around).collect();

    let height = (rings - 1) as f64 * s;
    let half = [cfg.rigid_size, 0.8 * r1, 0.75 * s];
    let z = o[2] + draw(rng, [0.45 * height, 0.8 * height]);
    let mut rigids = Vec::new();
    for (name, sign) in [("left_jaw", -1.0), ("right_jaw", 1.0)] {
        let center = [o[0] + sign * (r1 + half[0] + GAP), o[1] + jitter(rng, cfg.placement_jitter), z];
        let travel = GAP + draw(rng, cfg.travel);
        let shape = Primitive::Box { center, half };
        rigids.push(RigidBody {
            name: name.into(),
            surface: shape.surface_points(0),
            shape,
            path: linear_path(cfg.steps, [-sign * travel, 0.0, 0.0]),
        });
    }
    Ok(World {
        system,
        stiffness,
        pinned,
        solids: vec![("tube".into(), 0, n)],
        rigids,
        contact_pairs: vec![(1, 0), (2, 0)],
        contact_stiffness: cfg.contact_stiffness(),
    })
}

/// Equilibrium states at steps `0..=T`, each solved from the previous one.
pub fn simulate(world: &World, cfg: &ScenarioConfig) -> Result<Vec<(Vec<[f64; 3]>, f64)>> {
    let solver = SolverConfig {
        contact_stiffness: world.contact_stiffness,
        ..cfg.solver()
    };
    let mut states = Vec::with_capacity(cfg.steps + 1);
    let mut x = world.system.rest_positions.clone();
    for t in 0..=cfg.steps {
        let prims: Vec<Primitive> = world.rigids.iter().map(|r| r.shape_at(t)).collect();
        let (next, report) = solve_quasistatic(&world.system, &world.pinned, &prims, &x, &solver).context_with(|| format!("oracle step {t}"))?;
        x = next;
        states.push((x.clone(), report.residual));
    }
    Ok(states)
}

fn rows(points: &[[f64; 3]]) -> Tensor {
    Tensor::from_rows(points).expect("rows of 3")
}

/// One sample per step `t < T`: state `t` and the load `t → t+1` as input,
/// state `t+1` and its per-point spring energy as target.
pub fn generate_trajectory(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<SceneSample>> {
    let world = build_world(cfg, seed)?;
    let states = simulate(&world, cfg)?;
    let n_def = world.solids.len();
    let mut samples = Vec::with_capacity(cfg.steps);
    for t in 0..cfg.steps {
        let (ref x, _) = states[t];
        let (ref x_next, residual) = states[t + 1];
        let energy = point_energy(&world.system.springs, x_next);
        let mut deformables = Vec::with_capacity(n_def);
        let mut targets = Vec::with_capacity(n_def);
        for (name, start, len) in &world.solids {
            let range = *start..*start + *len;
            let props = Tensor::new([*len, 1], world.stiffness[range.clone()].to_vec())?;
            deformables.push(SolidObject::new(name.clone(), Role::Deformable, rows(&x[range.clone()]), props)?);
            let geometry = rows(&x_next[range.clone()]);
            let stress = Tensor::new([*len, 1], energy[range].to_vec())?;
            targets.push(Target {
                values: Tensor::concat(&[&geometry, &stress], 1)?,
                quantities: vec![Quantity::new(GEOMETRY, 0, 3), Quantity::new(STRESS, 3, 1)],
            });
        }
        let mut rigids = Vec::with_capacity(world.rigids.len());
        let mut loads = Vec::with_capacity(world.rigids.len());
        for (r, body) in world.rigids.iter().enumerate() {
            let now = rows(&body.surface_at(t));
            let next = rows(&body.surface_at(t + 1));
            rigids.push(SolidObject::bare(body.name.clone(), Role::Rigid, now.clone())?);
            loads.push(LoadObject::from_positions(format!("{}_motion", body.name), n_def + r, &now, &next, LoadMode::Delta)?);
        }
        let certificate = OracleCertificate {
            solids: world.solids.iter().map(|s| s.0.clone()).collect(),
            springs: world.system.springs.clone(),
            pinned: world.pinned.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i).collect(),
            primitives: world.rigids.iter().map(|r| r.shape_at(t + 1)).collect(),
            contact_stiffness: world.contact_stiffness,
            residual,
        };
        let sample = SceneSample {
            deformables,
            rigids,
            loads,
            contact_pairs: world.contact_pairs.clone(),
            targets,
            step_index: t,
            sample_id: 0,
            seed,
            certificate: Some(certificate),
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Long-time view of a trajectory: the first input state with the total
/// rigid motion as load, and the final state as target.
pub fn longtime_sample(trajectory: &[SceneSample]) -> Result<SceneSample> {
    let (first, last) = match (trajectory.first(), trajectory.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::InvalidScene("empty trajectory".into())),
    };
    let mut out = first.clone();
    for (load, final_load) in out.loads.iter_mut().zip(&last.loads) {
        let end = match final_load.mode {
            LoadMode::Delta => final_load.origin.add(&final_load.motion)?,
            LoadMode::Absolute => final_load.motion.clone(),
        };
        *load = LoadObject::from_positions(load.name.clone(), load.source, &load.origin, &end, LoadMode::Delta)?;
    }
    out.targets = last.targets.clone();
    out.certificate = last.certificate.clone();
    out.step_index = 0;
    Ok(out)
}

/// Largest free-point gradient entry of a certificate at the sample's
/// target geometry, computed with the solver's own energy code.
pub fn certificate_residual(sample: &SceneSample) -> Result<f64> {
    let cert = sample
        .certificate
        .as_ref()
        .ok_or_else(|| Error::InvalidScene("sample has no oracle certificate".into()))?;
    let mut x = Vec::new();
    for name in &cert.solids {
        let i = sample
            .deformables
            .iter()
            .position(|d| &d.name == name)
            .ok_or_else(|| Error::InvalidScene(format!("certificate names unknown solid `{name}`")))?;
        let t = &sample.targets[i];
        let q = t.quantity(GEOMETRY).ok_or_else(|| Error::InvalidScene("target has no geometry".into()))?;
        x.extend((0..t.values.rows()).map(|r| {
            let row = &t.values.row(r)[q.start..q.start + 3];
            [row[0], row[1], row[2]]
        }));
    }
    let mut pinned = vec![false; x.len()];
    for &p in &cert.pinned {
        *pinned
            .get_mut(p)
            .ok_or_else(|| Error::InvalidScene(format!("pinned point {p} out of range")))? = true;
    }
    let g = gradient(&cert.springs, &cert.primitives, cert.contact_stiffness, &x);
    Ok(free_residual(&g, &pinned))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_press() -> ScenarioConfig {
        ScenarioConfig {
            steps: 3,
            dims: [4, 2, 2],
            ..ScenarioConfig::bilateral_press()
        }
    }

    #[test]
    fn press_topology() {
        let traj = generate_trajectory(&small_press(), 3).unwrap();
        assert_eq!(traj.len(), 3);
        let s = &traj[0];
        assert_eq!((s.deformables.len(), s.rigids.len(), s.contact_pairs.len()), (2, 2, 5));
        assert_eq!(s.loads.len(), 2);
        for sample in &traj {
            assert!(certificate_residual(sample).unwrap() < 1e-8);
        }
        // Consecutive samples chain: the target of t is the input of t + 1.
        let geo = traj[0].targets[0].values.narrow(1, 0, 3).unwrap();
        assert_eq!(geo, traj[1].deformables[0].points);
    }

    #[test]
    fn zero_motion_keeps_every_step_at_rest() {
        let cfg = ScenarioConfig {
            travel: [0.0, 0.0],
            ..small_press()
        };
        // Dies start a gap away and travel only that gap, so nothing touches.
        let traj = generate_trajectory(&cfg, 1).unwrap();
        for s in &traj {
            assert_eq!(s.deformables[0].points, traj[0].deformables[0].points);
            assert_eq!(s.targets[0].values.narrow(1, 0, 3).unwrap(), traj[0].deformables[0].points);
        }
    }

    #[test]
    fn symmetric_press_is_mirror_symmetric() {
        let cfg = ScenarioConfig {
            stiffness: [1.5, 1.5],
            stiffness_jitter: 0.0,
            travel: [0.15, 0.15],
            placement_jitter: 0.0,
            ..small_press()
        };
        let traj = generate_trajectory(&cfg, 0).unwrap();
        let last = traj.last().unwrap();
        let [nx, ny, nz] = cfg.dims;
        let mid = (2 * nz - 1) as f64 * cfg.spacing / 2.0;
        let (up, lo) = (&last.targets[0].values, &last.targets[1].values);
        let mut moved = 0.0f64;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let a = up.row(i + nx * (j + ny * k));
                    let b = lo.row(i + nx * (j + ny * (nz - 1 - k)));
                    assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
                    assert!((a[2] - mid - (mid - b[2])).abs() < 1e-6);
                    moved = moved.max((a[2] - traj[0].deformables[0].points.row(i + nx * (j + ny * k))[2]).abs());
                }
            }
        }
        assert!(moved > 1e-3);
    }

    #[test]
    fn translation_equivariance() {
        let base = small_press();
        let shift = [0.7, -0.3, 1.1];
        let moved = ScenarioConfig { origin: shift, ..base.clone() };
        let a = generate_trajectory(&base, 5).unwrap();
        let b = generate_trajectory(&moved, 5).unwrap();
        let (ta, tb) = (&a.last().unwrap().targets[1].values, &b.last().unwrap().targets[1].values);
        for r in 0..ta.rows() {
            for d in 0..3 {
                assert!((ta.at(r, d) + shift[d] - tb.at(r, d)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn grip_trajectory_is_certified_and_deterministic() {
        let cfg = ScenarioConfig {
            steps: 4,
            ..ScenarioConfig::cavity_grip()
        };
        let a = generate_trajectory(&cfg, 11).unwrap();
        assert_eq!(a, generate_trajectory(&cfg, 11).unwrap());
        assert_eq!((a[0].deformables.len(), a[0].rigids.len(), a[0].contact_pairs.len()), (1, 2, 2));
        for s in &a {
            assert!(certificate_residual(s).unwrap() < 1e-8);
        }
    }

    #[test]
    fn longtime_view_spans_the_trajectory() {
        let traj = generate_trajectory(&small_press(), 2).unwrap();
        let lt = longtime_sample(&traj).unwrap();
        assert_eq!(lt.deformables, traj[0].deformables);
        assert_eq!(lt.targets, traj.last().unwrap().targets);
        let end = lt.loads[0].origin.add(&lt.loads[0].motion).unwrap();
        let last = &traj.last().unwrap().loads[0];
        assert!(end.max_abs_diff(&last.origin.add(&last.motion).unwrap()) < 1e-12);
    }

    #[test]
    fn config_errors_name_the_key() {
        let cfg = ScenarioConfig {
            spacing: -1.0,
            ..small_press()
        };
        let err = build_world(&cfg, 0).unwrap_err();
        assert!(format!("{err}").contains("spacing"));
    }
}
