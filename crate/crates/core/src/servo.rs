//! Closed-loop PI tactile servoing over simulated objects.
//!
//! Every step renders a tactile image at the current sensor pose, with the
//! motion since the previous step acting as shear, estimates the local
//! contact pose, and applies `ds = Kp e + Ki sum(e)` in the sensor frame
//! before sliding one step along the surface.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geom::{self, Vec3};
use crate::pose::{ObjectType, Pose, RigidTransform};
use crate::posenet::{PoseNet, PoseNetError};
use crate::sim::{ContactObject, Heightfield, RoundedRect, SimError, Simulator, TactileImage};

#[derive(Debug, thiserror::Error)]
pub enum ServoError {
    #[error("sensor is not in contact with the object")]
    NoContact,
    #[error("configuration: {0}")]
    Config(String),
    #[error("unknown demo object `{0}`")]
    UnknownObject(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Estimator(#[from] PoseNetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Servo reference depth (mm).
pub const REFERENCE_DEPTH: f64 = -3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoConfig {
    pub object_type: ObjectType,
    /// Diagonal proportional gains, one per pose component.
    pub kp: Vec<f64>,
    /// Diagonal integral gains, one per pose component.
    pub ki: Vec<f64>,
    /// Reference local pose.
    pub reference: Vec<f64>,
    /// Tangential advance per step (mm).
    pub step_mm: f64,
    pub max_steps: usize,
    /// Initial travel direction in world coordinates.
    pub heading: Vec3,
}

impl ServoConfig {
    /// Gains 0.5 proportional on every component, 0.3 integral on
    /// translations and 0.1 on rotations.
    pub fn new(object_type: ObjectType, max_steps: usize) -> Self {
        let comps = object_type.components();
        let ki = comps
            .iter()
            .map(|c| if c.is_angle() { 0.1 } else { 0.3 })
            .collect();
        let reference = comps
            .iter()
            .map(|c| if *c == crate::pose::Component::Depth { REFERENCE_DEPTH } else { 0.0 })
            .collect();
        Self {
            object_type,
            kp: vec![0.5; comps.len()],
            ki,
            reference,
            step_mm: 1.0,
            max_steps,
            heading: [1.0, 0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<(), ServoError> {
        let n = self.object_type.n_out();
        if self.kp.len() != n || self.ki.len() != n || self.reference.len() != n {
            return Err(ServoError::Config(format!("gains and reference need {n} entries")));
        }
        if self.kp.iter().chain(&self.ki).any(|g| !(*g >= 0.0)) {
            return Err(ServoError::Config("gains must be non-negative".into()));
        }
        if !(self.step_mm > 0.0) {
            return Err(ServoError::Config("step must be positive".into()));
        }
        if geom::normalize(self.heading).is_none() {
            return Err(ServoError::Config("heading must be nonzero".into()));
        }
        Ok(())
    }
}

/// Integral accumulator of the PI law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiState {
    pub integral: Vec<f64>,
}

impl PiState {
    pub fn new(n: usize) -> Self {
        Self {
            integral: vec![0.0; n],
        }
    }
}

/// `ds = Kp e + Ki (sum of all errors including e)`.
pub fn pi_step(error: &[f64], kp: &[f64], ki: &[f64], state: &mut PiState) -> Vec<f64> {
    for (s, e) in state.integral.iter_mut().zip(error) {
        *s += e;
    }
    error
        .iter()
        .zip(kp)
        .zip(ki.iter().zip(&state.integral))
        .map(|((e, p), (i, s))| p * e + i * s)
        .collect()
}

/// Local frame the oracle measures against. Surfaces carry no yaw, so the
/// frame turns with the sensor; edge frames come from the object.
fn oracle_frame(object: &ContactObject, sensor: &RigidTransform) -> crate::sim::LocalFrame {
    let apex = sensor.translation;
    if object.has_edge() {
        return object.local_frame(apex);
    }
    let sp = object.nearest_surface_point(apex);
    let z = sp.normal;
    // Choosing x perpendicular to the sensor's y axis leaves the relative
    // rotation with zero yaw, which is how surface labels are defined.
    let sx = sensor.apply_vector([1.0, 0.0, 0.0]);
    let sy = sensor.apply_vector([0.0, 1.0, 0.0]);
    let x = geom::normalize(geom::cross(sy, z))
        .map(|x| if geom::dot(x, sx) < 0.0 { geom::scale(x, -1.0) } else { x })
        .or_else(|| geom::normalize(geom::sub(sx, geom::scale(z, geom::dot(sx, z)))))
        .expect("sensor axes span the tangent plane");
    crate::sim::LocalFrame {
        origin: sp.point,
        x_axis: x,
        y_axis: geom::cross(z, x),
        z_axis: z,
    }
}

/// Sensor pose relative to the local frame, as a full six-component vector.
fn local_components(object: &ContactObject, sensor: &RigidTransform) -> [f64; 6] {
    let f = oracle_frame(object, sensor);
    let m = [
        [f.x_axis[0], f.y_axis[0], f.z_axis[0]],
        [f.x_axis[1], f.y_axis[1], f.z_axis[1]],
        [f.x_axis[2], f.y_axis[2], f.z_axis[2]],
    ];
    let frame = RigidTransform::from_matrix(f.origin, &m);
    frame.inverse().compose(sensor).to_components()
}

/// Largest apex-to-surface gap (mm) at which the oracle still reports a pose;
/// the sensor tip radius.
pub const ORACLE_RANGE: f64 = 20.0;

/// Exact local pose of a sensor at world pose `sensor` on `object`.
pub fn oracle_pose(object: &ContactObject, object_type: ObjectType, sensor: &RigidTransform) -> Result<Pose, ServoError> {
    let apex = sensor.translation;
    let gap = geom::norm(geom::sub(apex, object.nearest_surface_point(apex).point));
    if object.signed_distance(apex) > 0.0 && gap > ORACLE_RANGE {
        return Err(ServoError::NoContact);
    }
    let c = local_components(object, sensor);
    let v: Vec<f64> = object_type
        .components()
        .iter()
        .map(|comp| c[comp.index()])
        .collect();
    Ok(Pose::from_slice(object_type, &v).expect("component count matches"))
}

/// Angle (deg) between the sensor axis and the local surface normal.
pub fn alignment_error(object: &ContactObject, sensor: &RigidTransform) -> f64 {
    let axis = sensor.apply_vector([0.0, 0.0, 1.0]);
    let n = object.nearest_surface_point(sensor.translation).normal;
    geom::dot(axis, n).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Source of local pose estimates.
pub trait Estimator {
    fn estimate(&mut self, image: &TactileImage, world: &RigidTransform) -> Result<Vec<f64>, ServoError>;
}

/// Ground-truth estimator that ignores the image.
pub struct OracleEstimator<'a> {
    pub object: &'a ContactObject,
    pub object_type: ObjectType,
}

impl Estimator for OracleEstimator<'_> {
    fn estimate(&mut self, _image: &TactileImage, world: &RigidTransform) -> Result<Vec<f64>, ServoError> {
        Ok(oracle_pose(self.object, self.object_type, world)?.to_vec())
    }
}

impl Estimator for PoseNet {
    fn estimate(&mut self, image: &TactileImage, _world: &RigidTransform) -> Result<Vec<f64>, ServoError> {
        Ok(self.predict_images(&[image])?.remove(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServoStep {
    pub t: usize,
    /// World pose as (x, y, z, roll, pitch, yaw).
    pub world: [f64; 6],
    pub estimate: Vec<f64>,
    /// Oracle local pose, when the apex is in contact.
    pub truth: Option<Vec<f64>>,
    pub error: Vec<f64>,
    pub delta: Vec<f64>,
    pub contacts: usize,
    pub alignment_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ServoStatus {
    Completed,
    ContactLost { step: usize },
    Failed { step: usize, reason: String },
}

impl ServoStatus {
    pub fn name(&self) -> &'static str {
        match self {
            ServoStatus::Completed => "completed",
            ServoStatus::ContactLost { .. } => "contact_lost",
            ServoStatus::Failed { .. } => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub object_type: ObjectType,
    pub steps: Vec<ServoStep>,
    pub status: ServoStatus,
}

fn project_onto_plane(v: Vec3, n: Vec3) -> Option<Vec3> {
    geom::normalize(geom::sub(v, geom::scale(n, geom::dot(v, n))))
}

/// Run the servo loop from `start` until `config.max_steps` or contact loss.
pub fn explore(
    estimator: &mut dyn Estimator,
    object: &ContactObject,
    start: &RigidTransform,
    config: &ServoConfig,
    sim: &Simulator,
) -> Result<Trajectory, ServoError> {
    config.validate()?;
    object.validate().map_err(SimError::Object)?;
    let n = config.object_type.n_out();
    let comps = config.object_type.components();
    let mut pi = PiState::new(n);
    let mut world = start.clone();
    let mut previous = start.clone();
    let mut heading = geom::normalize(config.heading).expect("validated");
    let mut steps = Vec::with_capacity(config.max_steps);
    let mut status = ServoStatus::Completed;

    for t in 0..config.max_steps {
        let pins = match sim.contact_between(object, &previous, &world) {
            Ok(p) => p,
            Err(e) => {
                status = ServoStatus::Failed {
                    step: t,
                    reason: e.to_string(),
                };
                break;
            }
        };
        if pins.contact_count() == 0 {
            status = ServoStatus::ContactLost { step: t };
            break;
        }
        let image = sim.render(&pins);
        let estimate = match estimator.estimate(&image, &world) {
            Ok(e) => e,
            Err(e) => {
                status = ServoStatus::Failed {
                    step: t,
                    reason: e.to_string(),
                };
                break;
            }
        };
        let error: Vec<f64> = config.reference.iter().zip(&estimate).map(|(r, p)| r - p).collect();
        let delta = pi_step(&error, &config.kp, &config.ki, &mut pi);
        steps.push(ServoStep {
            t,
            world: world.to_components(),
            estimate: estimate.clone(),
            truth: oracle_pose(object, config.object_type, &world).ok().map(|p| p.to_vec()),
            error,
            delta: delta.clone(),
            contacts: pins.contact_count(),
            alignment_deg: alignment_error(object, &world),
        });

        // Correction in the sensor frame.
        let mut d = [0.0; 6];
        for (c, v) in comps.iter().zip(&delta) {
            d[c.index()] = *v;
        }
        previous = world.clone();
        world = world.compose(&RigidTransform::from_components(d));

        // Slide along the tangent plane of the sensor.
        let axis = world.apply_vector([0.0, 0.0, 1.0]);
        let direction = if config.object_type == ObjectType::Edge {
            // The edge runs along the local y axis; express it in the world
            // using the estimated orientation.
            let est = RigidTransform::from_components(
                Pose::from_slice(config.object_type, &estimate)
                    .map(|p| p.full())
                    .unwrap_or([0.0; 6]),
            );
            let along_sensor = est.inverse().apply_vector([0.0, 1.0, 0.0]);
            let along = world.apply_vector(along_sensor);
            project_onto_plane(along, axis).map(|v| if geom::dot(v, heading) < 0.0 { geom::scale(v, -1.0) } else { v })
        } else {
            project_onto_plane(heading, axis)
        };
        if let Some(h) = direction {
            heading = h;
        }
        world = RigidTransform::from_matrix(
            geom::add(world.translation, geom::scale(heading, config.step_mm)),
            &world.rotation(),
        );
    }
    Ok(Trajectory {
        object_type: config.object_type,
        steps,
        status,
    })
}

/// Named demonstration objects with matching start poses and headings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoObject {
    Plane,
    Sphere,
    Bump,
    Edge,
    Contour,
}

impl std::str::FromStr for DemoObject {
    type Err = ServoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plane" => Ok(DemoObject::Plane),
            "sphere" => Ok(DemoObject::Sphere),
            "bump" => Ok(DemoObject::Bump),
            "edge" => Ok(DemoObject::Edge),
            "contour" => Ok(DemoObject::Contour),
            other => Err(ServoError::UnknownObject(other.into())),
        }
    }
}

pub const SPHERE_RADIUS: f64 = 60.0;
pub const BUMP_START_X: f64 = -100.0;

impl DemoObject {
    pub fn name(self) -> &'static str {
        match self {
            DemoObject::Plane => "plane",
            DemoObject::Sphere => "sphere",
            DemoObject::Bump => "bump",
            DemoObject::Edge => "edge",
            DemoObject::Contour => "contour",
        }
    }

    pub fn object_type(self) -> ObjectType {
        match self {
            DemoObject::Edge | DemoObject::Contour => ObjectType::Edge,
            _ => ObjectType::Surface,
        }
    }

    pub fn object(self) -> ContactObject {
        match self {
            DemoObject::Plane => ContactObject::Plane,
            DemoObject::Sphere => ContactObject::Sphere { radius: SPHERE_RADIUS },
            // Peak slope about 14 deg, inside the trained roll/pitch range.
            DemoObject::Bump => ContactObject::Heightfield(Heightfield::radial_bump(10.0, 25.0, 130.0, 1.0)),
            DemoObject::Edge => ContactObject::HalfPlaneEdge,
            DemoObject::Contour => ContactObject::Contour(RoundedRect {
                half_width: 60.0,
                half_height: 40.0,
                corner_radius: 20.0,
            }),
        }
    }

    /// Start pose at the reference depth and the initial heading.
    pub fn start(self) -> (RigidTransform, Vec3) {
        let d = REFERENCE_DEPTH;
        match self {
            DemoObject::Plane | DemoObject::Sphere | DemoObject::Edge => {
                let heading = if self == DemoObject::Edge { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
                (RigidTransform::from_components([0.0, 0.0, d, 0.0, 0.0, 0.0]), heading)
            }
            DemoObject::Bump => (
                RigidTransform::from_components([BUMP_START_X, 0.0, d, 0.0, 0.0, 0.0]),
                [1.0, 0.0, 0.0],
            ),
            DemoObject::Contour => (
                RigidTransform::from_components([60.0, 0.0, d, 0.0, 0.0, 0.0]),
                [0.0, 1.0, 0.0],
            ),
        }
    }

    pub fn config(self, max_steps: usize) -> ServoConfig {
        let mut c = ServoConfig::new(self.object_type(), max_steps);
        c.heading = self.start().1;
        c
    }
}

impl Trajectory {
    /// Column names of [`Trajectory::write_csv`].
    pub fn csv_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "x", "y", "z", "roll", "pitch", "yaw"].iter().map(|s| s.to_string()).collect();
        for prefix in ["est", "true", "err", "ds"] {
            for c in self.object_type.components() {
                h.push(format!("{prefix}_{}", c.name()));
            }
        }
        h.push("contacts".into());
        h.push("alignment_deg".into());
        h
    }

    /// One row per step: world pose, estimate, oracle pose, error, control
    /// output, contacting pin count and alignment error.
    pub fn write_csv(&self, path: &Path) -> Result<(), ServoError> {
        let io = |e: std::io::Error| ServoError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let csv_io = |e: csv::Error| io(std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(self.csv_header()).map_err(csv_io)?;
        let n = self.object_type.n_out();
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.world.iter().map(|v| v.to_string()));
            row.extend(s.estimate.iter().map(|v| v.to_string()));
            match &s.truth {
                Some(tr) => row.extend(tr.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), n)),
            }
            row.extend(s.error.iter().map(|v| v.to_string()));
            row.extend(s.delta.iter().map(|v| v.to_string()));
            row.push(s.contacts.to_string());
            row.push(s.alignment_deg.to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush().map_err(io)
    }

    /// Two orthogonal projections (x-y and x-z) of the sensor path, with a
    /// short glyph along the sensor axis every tenth step.
    pub fn to_svg(&self) -> String {
        let pts: Vec<(Vec3, Vec3)> = self
            .steps
            .iter()
            .map(|s| {
                let tr = RigidTransform::from_components(s.world);
                (tr.translation, tr.apply_vector([0.0, 0.0, 1.0]))
            })
            .collect();
        let (panel, margin) = (360.0, 30.0);
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#,
            w = 2.0 * panel + 3.0 * margin,
            h = panel + 2.0 * margin
        );
        let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
        for (k, (a, b, label)) in [(0usize, 1usize, "x-y"), (0, 2, "x-z")].into_iter().enumerate() {
            let ox = margin + k as f64 * (panel + margin);
            let oy = margin;
            let _ = writeln!(
                svg,
                r##"<rect x="{ox}" y="{oy}" width="{panel}" height="{panel}" fill="none" stroke="#888"/>"##
            );
            let _ = writeln!(svg, r#"<text x="{}" y="{}">{label} projection (mm)</text>"#, ox, oy - 8.0);
            if pts.is_empty() {
                continue;
            }
            let lo_a = pts.iter().map(|p| p.0[a]).fold(f64::INFINITY, f64::min);
            let hi_a = pts.iter().map(|p| p.0[a]).fold(f64::NEG_INFINITY, f64::max);
            let lo_b = pts.iter().map(|p| p.0[b]).fold(f64::INFINITY, f64::min);
            let hi_b = pts.iter().map(|p| p.0[b]).fold(f64::NEG_INFINITY, f64::max);
            let span = (hi_a - lo_a).max(hi_b - lo_b).max(1.0) * 1.2;
            let (ca, cb) = (0.5 * (lo_a + hi_a), 0.5 * (lo_b + hi_b));
            let s = panel / span;
            let map = |p: Vec3| (ox + panel / 2.0 + (p[a] - ca) * s, oy + panel / 2.0 - (p[b] - cb) * s);
            let path: Vec<String> = pts
                .iter()
                .map(|(p, _)| {
                    let (x, y) = map(*p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                svg,
                r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##,
                path.join(" ")
            );
            let glyph = 0.04 * span;
            for (p, n) in pts.iter().step_by(10) {
                let (x0, y0) = map(*p);
                let (x1, y1) = map(geom::add(*p, geom::scale(*n, glyph)));
                let _ = writeln!(
                    svg,
                    r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#c0392b" stroke-width="1"/>"##
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: &Path) -> Result<(), ServoError> {
        std::fs::write(path, self.to_svg()).map_err(|source| ServoError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Mean absolute deviation of the oracle depth from `reference`.
    pub fn mean_depth_error(&self, reference: f64, depth_index: usize) -> Option<f64> {
        let errs: Vec<f64> = self
            .steps
            .iter()
            .filter_map(|s| s.truth.as_ref().map(|tr| (tr[depth_index] - reference).abs()))
            .collect();
        (!errs.is_empty()).then(|| errs.iter().sum::<f64>() / errs.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_translation() {
        let mut st = PiState::new(1);
        assert_eq!(pi_step(&[1.0], &[0.5], &[0.3], &mut st), vec![0.8]);
    }

    #[test]
    fn zero_error_zero_output() {
        let mut st = PiState::new(3);
        assert_eq!(pi_step(&[0.0; 3], &[0.5; 3], &[0.3, 0.1, 0.1], &mut st), vec![0.0; 3]);
    }

    #[test]
    fn default_gains() {
        let c = ServoConfig::new(ObjectType::Edge, 10);
        assert_eq!(c.kp, vec![0.5; 5]);
        assert_eq!(c.ki, vec![0.3, 0.3, 0.1, 0.1, 0.1]);
        assert_eq!(c.reference, vec![0.0, REFERENCE_DEPTH, 0.0, 0.0, 0.0]);
    }
}
