//! Glider trajectories under a horizontal flow field and constant-velocity
//! planning.
//!
//! Depth `z` grows downward. A direction is parameterized by azimuth `θ`
//! (counterclockwise from +x) and descent angle `φ` below the horizontal:
//! `(cos φ cos θ, cos φ sin θ, sin φ)`.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowgrid::{GriddedField, Point3, Velocity};
use crate::kernel::LatentField;
use crate::sensing::interpolate_field;

/// A horizontal flow that can be sampled along a trajectory.
pub trait FlowField {
    /// `None` when `x` lies outside the region the field is defined on.
    fn flow_at(&self, x: &Point3) -> Option<Velocity>;

    /// Deepest depth covered, if the field is depth-bounded.
    fn depth_limit(&self) -> Option<f64>;
}

impl FlowField for GriddedField {
    fn flow_at(&self, x: &Point3) -> Option<Velocity> {
        interpolate_field(self, x).ok()
    }

    fn depth_limit(&self) -> Option<f64> {
        let g = self.grid();
        (g.nz > 1).then(|| g.z_max())
    }
}

/// Bounded to the grid box the latent vector lives on.
impl FlowField for LatentField {
    fn flow_at(&self, x: &Point3) -> Option<Velocity> {
        self.grid().contains(x).then(|| self.velocity_at(x))
    }

    fn depth_limit(&self) -> Option<f64> {
        let g = self.grid();
        (g.nz > 1).then(|| g.z_max())
    }
}

/// Spatially constant flow, defined everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformFlow {
    pub velocity: Velocity,
    pub depth_limit: Option<f64>,
}

impl UniformFlow {
    pub fn still() -> Self {
        UniformFlow { velocity: [0.0, 0.0], depth_limit: None }
    }
}

impl FlowField for UniformFlow {
    fn flow_at(&self, x: &Point3) -> Option<Velocity> {
        self.depth_limit
            .is_none_or(|d| x[2] <= d)
            .then_some(self.velocity)
    }

    fn depth_limit(&self) -> Option<f64> {
        self.depth_limit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GliderMission {
    pub start: Point3,
    pub target: Point3,
    /// Speed through the water, m/s.
    pub speed: f64,
    /// Relative travel per Euler step, m.
    pub step_length: f64,
    pub max_path_length: f64,
}

impl GliderMission {
    pub fn new(start: Point3, target: Point3, speed: f64, step_length: f64, max_path_length: f64) -> Result<Self> {
        let m = GliderMission { start, target, speed, step_length, max_path_length };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.start.iter().chain(&self.target).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mission endpoints must be finite".into()));
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(Error::InvalidArgument(format!("glider speed {} must be > 0", self.speed)));
        }
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step length {} must be > 0",
                self.step_length
            )));
        }
        if !(self.max_path_length > 0.0 && self.max_path_length.is_finite()) {
            return Err(Error::InvalidArgument("max path length must be > 0".into()));
        }
        if self.start == self.target {
            return Err(Error::InvalidArgument("target coincides with start".into()));
        }
        Ok(())
    }

    /// Straight-line distance from start to target.
    pub fn distance(&self) -> f64 {
        distance(&self.start, &self.target)
    }

    pub fn dt(&self) -> f64 {
        self.step_length / self.speed
    }

    fn n_steps(&self) -> usize {
        (self.max_path_length / self.step_length).ceil() as usize
    }
}

fn distance(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    PathLength,
    DepthLimit,
    OutOfBounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<Point3>,
    pub closest_approach: f64,
    pub closest_index: usize,
    pub termination: Termination,
}

impl Trajectory {
    pub fn out_of_bounds(&self) -> bool {
        self.termination == Termination::OutOfBounds
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "step,x,y,z")?;
        for (k, [x, y, z]) in self.points.iter().enumerate() {
            writeln!(out, "{k},{x},{y},{z}")?;
        }
        Ok(())
    }

    /// Legacy ASCII VTK polydata with one polyline. Depth is written as a
    /// negative elevation so the path descends in 3D viewers.
    pub fn write_vtk<W: Write>(&self, mut out: W, title: &str) -> Result<()> {
        let n = self.points.len();
        writeln!(out, "# vtk DataFile Version 3.0")?;
        writeln!(out, "{}", title.replace('\n', " "))?;
        writeln!(out, "ASCII")?;
        writeln!(out, "DATASET POLYDATA")?;
        writeln!(out, "POINTS {n} double")?;
        for [x, y, z] in &self.points {
            writeln!(out, "{x} {y} {}", 0.0 - z)?;
        }
        writeln!(out, "LINES 1 {}", n + 1)?;
        write!(out, "{n}")?;
        for k in 0..n {
            write!(out, " {k}")?;
        }
        writeln!(out)?;
        Ok(())
    }
}

/// Unit direction for azimuth and descent angle in degrees.
pub fn direction(theta_deg: f64, phi_deg: f64) -> [f64; 3] {
    let (st, ct) = theta_deg.to_radians().sin_cos();
    let (sp, cp) = phi_deg.to_radians().sin_cos();
    [cp * ct, cp * st, sp]
}

fn check_velocity(velocity_rel: &[f64; 3], mission: &GliderMission) -> Result<()> {
    let norm = velocity_rel.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - mission.speed).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "relative velocity magnitude {norm} differs from mission speed {}",
            mission.speed
        )));
    }
    Ok(())
}

/// Closest approach, stepping exactly as [`simulate_glider`] does.
///
/// Descent is monotone, so once the glider is below the target by at least
/// the current best distance no later point can come closer.
struct Stepper<'a, F: ?Sized> {
    flow: &'a F,
    velocity: [f64; 3],
    mission: &'a GliderMission,
    depth_limit: Option<f64>,
}

impl<F: FlowField + ?Sized> Stepper<'_, F> {
    /// Returns the next point, or the reason for stopping.
    #[inline]
    fn step(&self, x: &Point3) -> std::result::Result<Point3, Termination> {
        let f = self.flow.flow_at(x).ok_or(Termination::OutOfBounds)?;
        let dt = self.mission.dt();
        let next = [
            x[0] + dt * (self.velocity[0] + f[0]),
            x[1] + dt * (self.velocity[1] + f[1]),
            x[2] + dt * self.velocity[2],
        ];
        if self.depth_limit.is_some_and(|d| next[2] > d) {
            return Err(Termination::DepthLimit);
        }
        Ok(next)
    }

    fn closest_approach(&self) -> f64 {
        let target = &self.mission.target;
        let mut x = self.mission.start;
        let mut best = distance(&x, target);
        for _ in 0..self.mission.n_steps() {
            if x[2] > target[2] && x[2] - target[2] >= best && self.velocity[2] >= 0.0 {
                break;
            }
            match self.step(&x) {
                Ok(next) => x = next,
                Err(_) => break,
            }
            best = best.min(distance(&x, target));
        }
        best
    }
}

/// Forward Euler with `dt = step_length / speed`; the flow moves the glider
/// horizontally only.
pub fn simulate_glider<F: FlowField + ?Sized>(
    flow: &F,
    velocity_rel: [f64; 3],
    mission: &GliderMission,
) -> Result<Trajectory> {
    mission.validate()?;
    check_velocity(&velocity_rel, mission)?;
    let stepper = Stepper { flow, velocity: velocity_rel, mission, depth_limit: flow.depth_limit() };
    let target = &mission.target;
    let mut points = vec![mission.start];
    let mut closest_approach = distance(&mission.start, target);
    let mut closest_index = 0;
    let mut termination = Termination::PathLength;
    for _ in 0..mission.n_steps() {
        let x = *points.last().expect("start point");
        match stepper.step(&x) {
            Ok(next) => {
                let d = distance(&next, target);
                if d < closest_approach {
                    closest_approach = d;
                    closest_index = points.len();
                }
                points.push(next);
            }
            Err(reason) => {
                termination = reason;
                break;
            }
        }
    }
    Ok(Trajectory { points, closest_approach, closest_index, termination })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub velocity: [f64; 3],
    /// Closest approach predicted on the planning field.
    pub predicted_closest_approach: f64,
    pub evaluations: usize,
}

#[derive(Clone, Copy)]
struct Candidate {
    theta: f64,
    phi: f64,
    score: f64,
}

fn better(a: &Candidate, b: &Candidate) -> bool {
    match a.score.total_cmp(&b.score) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.theta, a.phi) < (b.theta, b.phi),
    }
}

const COARSE_THETA: f64 = 2.0;
const COARSE_PHI: f64 = 1.0;
const REFINE_ROUNDS: u32 = 3;

/// Constant relative velocity minimizing the simulated closest approach on
/// `flow`.
///
/// A coarse `2° × 1°` direction grid (`φ ∈ [1°, 90°]`) is followed by three
/// rounds of step halving over the 3×3 neighbourhood of the best direction.
/// The best direction over every evaluation is returned.
pub fn plan_velocity<F: FlowField + ?Sized>(flow: &F, mission: &GliderMission) -> Result<Plan> {
    mission.validate()?;
    let depth_limit = flow.depth_limit();
    let depth_gap = mission.target[2] - mission.start[2];
    let mut evaluations = 0;
    let mut eval = |theta: f64, phi: f64, best: Option<&Candidate>| -> Option<Candidate> {
        // Depth is exactly start + L sin φ after relative travel L, so a
        // direction that cannot reach the target depth is bounded below.
        let reach = mission.n_steps() as f64 * mission.step_length * phi.to_radians().sin();
        if let Some(b) = best {
            if depth_gap - reach > b.score {
                return None;
            }
        }
        let d = direction(theta, phi);
        let velocity = d.map(|c| c * mission.speed);
        let stepper = Stepper { flow, velocity, mission, depth_limit };
        evaluations += 1;
        Some(Candidate { theta, phi, score: stepper.closest_approach() })
    };

    let mut best: Option<Candidate> = None;
    let n_theta = (360.0 / COARSE_THETA) as usize;
    let n_phi = (90.0 / COARSE_PHI) as usize;
    for it in 0..n_theta {
        let theta = it as f64 * COARSE_THETA;
        // steep directions first, their scores prune the shallow ones
        for ip in (1..=n_phi).rev() {
            let phi = ip as f64 * COARSE_PHI;
            if let Some(c) = eval(theta, phi, best.as_ref()) {
                if best.as_ref().is_none_or(|b| better(&c, b)) {
                    best = Some(c);
                }
            }
        }
    }
    let mut dtheta = COARSE_THETA;
    let mut dphi = COARSE_PHI;
    for _ in 0..REFINE_ROUNDS {
        dtheta *= 0.5;
        dphi *= 0.5;
        let centre = best.expect("coarse grid evaluated");
        for a in [-1.0, 0.0, 1.0] {
            for b in [-1.0, 0.0, 1.0] {
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                let theta = (centre.theta + a * dtheta).rem_euclid(360.0);
                let phi = centre.phi + b * dphi;
                if phi <= 0.0 || phi > 90.0 {
                    continue;
                }
                if let Some(c) = eval(theta, phi, best.as_ref()) {
                    if better(&c, best.as_ref().expect("set")) {
                        best = Some(c);
                    }
                }
            }
        }
    }
    let b = best.expect("coarse grid evaluated");
    let velocity = direction(b.theta, b.phi).map(|c| c * mission.speed);
    Ok(Plan {
        theta_deg: b.theta,
        phi_deg: b.phi,
        velocity,
        predicted_closest_approach: b.score,
        evaluations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub plan: Plan,
    pub trajectory: Trajectory,
}

impl SuiteRow {
    pub fn closest_approach(&self) -> f64 {
        self.trajectory.closest_approach
    }
}

/// Plans on each estimate and flies the plan through `truth`.
pub fn evaluate_planning_suite<T: FlowField + ?Sized>(
    truth: &T,
    estimates: &[(&str, &dyn FlowField)],
    mission: &GliderMission,
) -> Result<Vec<SuiteRow>> {
    estimates
        .iter()
        .map(|(name, field)| {
            let plan = plan_velocity(*field, mission)?;
            let trajectory = simulate_glider(truth, plan.velocity, mission)?;
            Ok(SuiteRow { name: name.to_string(), plan, trajectory })
        })
        .collect()
}
